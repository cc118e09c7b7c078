//! Replays the fuzz corpus seeds through the same properties the fuzz
//! targets check, then mutates each binary seed (re-sealing the trailing
//! checksum so the mutation reaches the record parser) and requires the
//! decoders to fail cleanly or round-trip.

use std::fs;
use std::path::PathBuf;

use lowprec::data::{decode_dataset, encode_dataset};
use lowprec::modelio::{decode_export, decode_model, encode_export, encode_model};
use lowprec::netdesc::{emit_descriptor, parse_descriptor};
use lowprec::profiler::{BitAllocation, DegradationReport, RangeStats, SparsityReport};
use lowprec::training::History;
use lowprec::{FixedPointFormat, RoundingScheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn reseal(mut v: Vec<u8>) -> Vec<u8> {
    if v.len() >= 8 {
        let n = v.len() - 4;
        let crc = crc32fast::hash(&v[..n]);
        v[n..].copy_from_slice(&crc.to_le_bytes());
    }
    v
}

/// Byte flips, truncations and insertions, each re-sealed.
fn mutations(seed: &[u8], count: usize, rng_seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..count)
        .map(|_| {
            let mut v = seed.to_vec();
            match rng.random_range(0..3) {
                0 => {
                    for _ in 0..rng.random_range(1..4) {
                        let i = rng.random_range(0..v.len());
                        v[i] = rng.random();
                    }
                }
                1 => v.truncate(rng.random_range(0..v.len())),
                _ => {
                    let i = rng.random_range(0..v.len());
                    v.insert(i, rng.random());
                }
            }
            reseal(v)
        })
        .collect()
}

fn check_qformat(data: &[u8]) {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(f) = s.parse::<FixedPointFormat>() {
        assert_eq!(f.to_string().parse::<FixedPointFormat>().unwrap(), f);
    }
    if let Ok(r) = s.parse::<RoundingScheme>() {
        assert_eq!(r.as_str().parse::<RoundingScheme>().unwrap(), r);
    }
}

fn check_descriptor(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    match parse_descriptor(text) {
        Ok(net) => {
            assert_eq!(parse_descriptor(&emit_descriptor(&net)).unwrap(), net);
            true
        }
        Err(_) => false,
    }
}

fn check_container(data: &[u8]) -> bool {
    match decode_model(data) {
        Ok(m) => {
            assert_eq!(decode_model(&encode_model(&m)).unwrap(), m);
            true
        }
        Err(_) => false,
    }
}

fn check_export(data: &[u8]) -> bool {
    match decode_export(data) {
        Ok(x) => {
            assert_eq!(encode_export(&x), data);
            true
        }
        Err(_) => false,
    }
}

fn check_dataset(data: &[u8]) -> bool {
    match decode_dataset(data) {
        Ok(ds) => {
            assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);
            true
        }
        Err(_) => false,
    }
}

macro_rules! round_trip {
    ($ty:ty, $text:expr) => {
        match <$ty>::from_json($text) {
            Ok(v) => {
                assert_eq!(<$ty>::from_json(&v.to_json().unwrap()).unwrap(), v);
                true
            }
            Err(_) => false,
        }
    };
}

fn check_report(data: &[u8]) -> bool {
    let Some((&kind, rest)) = data.split_first() else { return false };
    let Ok(text) = std::str::from_utf8(rest) else { return false };
    match kind % 5 {
        0 => round_trip!(RangeStats, text),
        1 => round_trip!(BitAllocation, text),
        2 => round_trip!(SparsityReport, text),
        3 => round_trip!(DegradationReport, text),
        _ => History::read_jsonl(text.as_bytes()).is_ok(),
    }
}

#[test]
fn qformat_seeds() {
    for (_, s) in seeds("qformat") {
        check_qformat(&s);
        for m in mutations(&s, 200, 1) {
            check_qformat(&m);
        }
    }
}

#[test]
fn descriptor_seeds() {
    for (name, s) in seeds("descriptor") {
        assert!(check_descriptor(&s), "{name}");
        for m in mutations(&s, 300, 2) {
            check_descriptor(&m);
        }
    }
}

#[test]
fn container_seeds() {
    for (name, s) in seeds("container") {
        assert!(check_container(&s), "{name}");
        for m in mutations(&s, 300, 3) {
            check_container(&m);
        }
    }
}

#[test]
fn export_seeds() {
    for (name, s) in seeds("accel_export") {
        assert!(check_export(&s), "{name}");
        for m in mutations(&s, 1000, 4) {
            check_export(&m);
        }
    }
}

#[test]
fn dataset_seeds() {
    for (name, s) in seeds("dataset") {
        assert!(check_dataset(&s), "{name}");
        for m in mutations(&s, 1000, 5) {
            check_dataset(&m);
        }
    }
}

#[test]
fn report_seeds() {
    for (name, s) in seeds("reports") {
        assert!(check_report(&s), "{name}");
        for m in mutations(&s, 300, 6) {
            check_report(&m);
        }
    }
}
