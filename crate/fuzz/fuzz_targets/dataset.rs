#![no_main]

use libfuzzer_sys::fuzz_target;
use lowprec::data::{decode_dataset, encode_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = decode_dataset(data) {
        assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);
    }
});
