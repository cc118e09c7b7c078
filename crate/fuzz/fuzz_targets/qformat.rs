#![no_main]

use libfuzzer_sys::fuzz_target;
use lowprec::{FixedPointFormat, RoundingScheme};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(f) = s.parse::<FixedPointFormat>() {
        let printed = f.to_string();
        assert_eq!(printed.parse::<FixedPointFormat>().unwrap(), f);
        assert!(f.total_bits() <= 32);
    }
    if let Ok(r) = s.parse::<RoundingScheme>() {
        assert_eq!(r.as_str().parse::<RoundingScheme>().unwrap(), r);
    }
});
