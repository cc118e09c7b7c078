#![no_main]

use libfuzzer_sys::fuzz_target;
use lowprec::modelio::{decode_export, encode_export};

fuzz_target!(|data: &[u8]| {
    if let Ok(x) = decode_export(data) {
        assert_eq!(encode_export(&x), data);
    }
});
