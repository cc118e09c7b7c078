#![no_main]

use libfuzzer_sys::fuzz_target;
use lowprec::modelio::{decode_model, encode_model};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_model(data) {
        let bytes = encode_model(&model);
        assert_eq!(decode_model(&bytes).unwrap(), model);
    }
});
