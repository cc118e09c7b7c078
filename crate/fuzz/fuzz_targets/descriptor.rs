#![no_main]

use libfuzzer_sys::fuzz_target;
use lowprec::netdesc::{emit_descriptor, parse_descriptor};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(net) = parse_descriptor(text) {
        let emitted = emit_descriptor(&net);
        assert_eq!(parse_descriptor(&emitted).unwrap(), net);
    }
});
