//! Golden-file checks for every binary format. Regenerate with
//! `LOWPREC_BLESS=1 cargo test -p lowprec --test io_golden`.

use std::path::PathBuf;

use lowprec::data::{decode_dataset, encode_dataset, oriented_patterns, pattern_net, with_global_formats};
use lowprec::inference::{LayerState, Model};
use lowprec::modelio::{
    build_export, container_layout, decode_export, decode_model, encode_export, encode_model, export_layout, load_model,
    save_model, verify_export, ModelIoError,
};
use lowprec::netdesc::{emit_descriptor, parse_descriptor, FcSpec, LayerDescriptor, LayerOp, NetDescriptor, QuantSpec};
use lowprec::{build_giga1net, RoundingScheme, StreamKey, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn golden(name: &str, actual: &[u8]) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("LOWPREC_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn golden_model() -> Model<f32> {
    let net = with_global_formats(&pattern_net(), "Q2.14".parse().unwrap(), "Q8.8".parse().unwrap(), RoundingScheme::Stochastic);
    let mut m = Model::init(net, 7).unwrap();
    m.refresh(StreamKey::new(11)).unwrap();
    m
}

#[test]
fn container_matches_golden() {
    let m = golden_model();
    let bytes = encode_model(&m);
    let stored = golden("pattern_q16.lpmc", &bytes);
    assert_eq!(bytes, stored);
    let back = decode_model(&stored).unwrap();
    assert_eq!(back, m);
    assert_eq!(encode_model(&back), stored);
}

#[test]
fn export_matches_golden() {
    let m = golden_model();
    let x = build_export(&m).unwrap();
    let bytes = encode_export(&x);
    let stored = golden("pattern_q16.lpax", &bytes);
    assert_eq!(bytes, stored);
    let back = decode_export(&stored).unwrap();
    assert_eq!(back, x);
    verify_export(&back, &m).unwrap();
}

#[test]
fn dataset_matches_golden() {
    let ds = oriented_patterns::<f32>(6, 4);
    let bytes = encode_dataset(&ds);
    let stored = golden("patterns6.lpds", &bytes);
    assert_eq!(bytes, stored);
    assert_eq!(decode_dataset(&stored).unwrap(), ds);
}

#[test]
fn descriptor_matches_golden() {
    let text = emit_descriptor(&build_giga1net());
    let stored = golden("giga1net.net", text.as_bytes());
    assert_eq!(text.as_bytes(), &stored[..]);
    assert_eq!(parse_descriptor(std::str::from_utf8(&stored).unwrap()).unwrap(), build_giga1net());
}

/// Every one of 10^4 random bit patterns survives a save/load cycle.
#[test]
fn container_preserves_bit_patterns() {
    let net = NetDescriptor::new(
        vec![
            LayerDescriptor::new("in", LayerOp::Input { shape: vec![100] }),
            LayerDescriptor::new("fc", LayerOp::InnerProduct(FcSpec { in_features: 100, out_features: 100, relu: false })),
        ],
        1.0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = || loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    };
    let mut w: Vec<f32> = (0..10_000).map(|_| draw()).collect();
    w[0] = -0.0;
    w[1] = f32::from_bits(1);
    let b: Vec<f32> = (0..100).map(|_| draw()).collect();
    let state = LayerState::new(Tensor::new(vec![100, 100], w.clone()).unwrap(), Tensor::new(vec![100], b).unwrap(), QuantSpec::disabled());
    let m = Model::from_layers(net, vec![None, Some(state)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lpmc");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    let got = back.layer(1).unwrap().weights.shadow().data();
    assert!(got.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn truncated_container_is_a_checksum_error() {
    let bytes = encode_model(&golden_model());
    for cut in [1, 7, bytes.len() / 2] {
        assert!(matches!(decode_model(&bytes[..bytes.len() - cut]), Err(ModelIoError::Checksum(_))));
    }
}

#[test]
fn export_is_about_half_the_float_blobs() {
    let m = golden_model();
    let float = Model::from_layers(
        pattern_net(),
        m.layers()
            .iter()
            .map(|s| s.as_ref().map(|s| LayerState::new(s.weights.shadow().clone(), s.bias.shadow().clone(), QuantSpec::disabled())))
            .collect(),
    )
    .unwrap();
    let ratio = export_layout(&build_export(&m).unwrap()).blobs as f64 / container_layout(&float).blobs as f64;
    assert!(ratio <= 0.55, "{ratio}");
}

/// Walks the export with explicit byte offsets and compares every code with
/// the model's quantized weights scaled by 2^AD.
#[test]
fn export_bytes_decode_by_hand() {
    let m = golden_model();
    let b = encode_export(&build_export(&m).unwrap());
    let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    assert_eq!(&b[..4], b"LPAX");
    assert_eq!((u16_at(4), b[6], b[7]), (1, 16, 3));
    assert_eq!(f64::from_le_bytes(b[8..16].try_into().unwrap()), 1.0 / 255.0);
    assert_eq!((u32_at(16), u32_at(20), u32_at(24)), (1, 16, 16));
    assert_eq!(u32_at(28), m.net().len() as u32);
    let mut o = 32;
    for (i, layer) in m.net().layers().iter().enumerate() {
        let kind = b[o];
        let (wbd, wad) = (b[o + 22], b[o + 23]);
        let (abd, aad) = (b[o + 26], b[o + 27]);
        o += 30;
        let nw = u32_at(o) as usize;
        let wcodes: Vec<i16> = (0..nw).map(|k| u16_at(o + 4 + 2 * k) as i16).collect();
        o += 4 + 2 * nw;
        let nb = u32_at(o) as usize;
        o += 4 + 2 * nb;
        match m.layer(i) {
            Some(s) => {
                assert!(kind == 1 || kind == 2);
                assert_eq!((wbd, wad), (2, 14), "{}", layer.name);
                assert_eq!((abd, aad), (8, 8));
                let q = s.weights.quantized().unwrap().data();
                assert_eq!(nw, q.len());
                for (c, v) in wcodes.iter().zip(q) {
                    assert_eq!(*c as f64, *v as f64 * 16384.0);
                }
                assert_eq!(nb, s.bias.shadow().len());
            }
            None => assert_eq!((nw, nb), (0, 0)),
        }
    }
    assert_eq!(o + 4, b.len());
    assert_eq!(u32_at(o), crc32fast::hash(&b[..o]));
}

/// Reserved bytes, unknown flag bits and stray signedness bytes are
/// rejected even under a valid checksum, so every accepted file re-encodes
/// to itself.
#[test]
fn export_rejects_non_canonical_records() {
    let b = encode_export(&build_export(&golden_model()).unwrap());
    let reseal = |mut v: Vec<u8>| {
        let n = v.len() - 4;
        let crc = crc32fast::hash(&v[..n]);
        v[n..].copy_from_slice(&crc.to_le_bytes());
        v
    };
    assert_eq!(decode_export(&reseal(b.clone())).unwrap(), build_export(&golden_model()).unwrap());
    // first record (the input layer) starts at byte 32
    for (offset, value) in [(33, 4u8), (34, 1), (28 + 32, 2), (29 + 32, 1), (28 + 32, 1)] {
        let mut v = b.clone();
        v[offset] = value;
        assert!(decode_export(&reseal(v)).is_err(), "byte {offset} = {value}");
    }
    let mut v = b.clone();
    v[8..16].copy_from_slice(&(-1.0f64).to_le_bytes());
    assert!(decode_export(&reseal(v)).is_err());
}
