#![no_main]

//! The first byte picks the report type, the rest is the document.

use libfuzzer_sys::fuzz_target;
use lowprec::profiler::{BitAllocation, DegradationReport, RangeStats, SparsityReport};
use lowprec::training::History;

macro_rules! round_trip {
    ($ty:ty, $text:expr) => {
        if let Ok(v) = <$ty>::from_json($text) {
            assert_eq!(<$ty>::from_json(&v.to_json().unwrap()).unwrap(), v);
        }
    };
}

fuzz_target!(|data: &[u8]| {
    let Some((&kind, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    match kind % 5 {
        0 => round_trip!(RangeStats, text),
        1 => round_trip!(BitAllocation, text),
        2 => round_trip!(SparsityReport, text),
        3 => round_trip!(DegradationReport, text),
        _ => {
            let _ = History::read_jsonl(text.as_bytes());
        }
    }
});
