//! Labeled image sets, the seeded oriented-pattern task used for desk-scale
//! experiments, and the `LPDS` binary dataset format.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::fixedpoint::{FixedPointFormat, RoundingScheme};
use crate::netdesc::{ConvSpec, FcSpec, LayerDescriptor, LayerOp, NetDescriptor, PoolSpec, QuantSpec};
use crate::tensor::{Real, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"LPDS";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("dataset: {0}")]
    Invalid(String),
    #[error("dataset file truncated")]
    Truncated,
    #[error("dataset checksum mismatch")]
    Checksum,
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u16),
}

/// Images `N x C x H x W` with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real = f32> {
    images: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if images.shape().len() != 4 {
            return Err(DataError::Invalid(format!("images must be NCHW, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        (
            self.images.gather(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Self {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

pub const PATTERN_SIZE: usize = 16;
pub const PATTERN_CLASSES: usize = 4;

/// Four orientation classes (0, 45, 90, 135 degrees) of noisy sinusoidal
/// gratings on a 16x16 canvas. Pixels are in `[0, 255]`.
pub fn oriented_patterns<T: Real>(n: usize, seed: u64) -> Dataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = PATTERN_SIZE;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % PATTERN_CLASSES;
        let theta = (class as f64 * 45.0 + rng.random_range(-10.0..10.0)).to_radians();
        let freq = rng.random_range(0.12..0.28);
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.12..0.32);
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..side {
            for x in 0..side {
                let u = x as f64 * c + y as f64 * s;
                let noise: f64 = rng.sample(StandardNormal);
                let v = 0.5 + contrast * (2.0 * PI * freq * u + phase).sin() + 0.25 * noise;
                data.push(T::from_f64((v.clamp(0.0, 1.0) * 255.0).round()));
            }
        }
        labels.push(class);
    }
    let images = Tensor::from_parts(vec![n, 1, side, side], data);
    Dataset::new(images, labels, PATTERN_CLASSES).expect("generator output is consistent")
}

/// The desk-scale network for [`oriented_patterns`]: two 3x3 conv layers with
/// ReLU and 2x2 pooling, one FC classifier, softmax. Quantization is off;
/// the input scale maps pixels to `[0, 1]`.
pub fn pattern_net() -> NetDescriptor {
    let conv = |cin, cout| {
        LayerOp::Conv(ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            pad: 1,
            relu: true,
            pool: Some(PoolSpec::new(2, 2)),
        })
    };
    NetDescriptor::new(
        vec![
            LayerDescriptor::new("data", LayerOp::Input { shape: vec![1, PATTERN_SIZE, PATTERN_SIZE] }),
            LayerDescriptor::new("conv1", conv(1, 8)),
            LayerDescriptor::new("conv2", conv(8, 16)),
            LayerDescriptor::new(
                "fc3",
                LayerOp::InnerProduct(FcSpec {
                    in_features: 16 * 4 * 4,
                    out_features: PATTERN_CLASSES,
                    relu: false,
                }),
            ),
            LayerDescriptor::new("prob", LayerOp::Softmax),
        ],
        1.0 / 255.0,
    )
    .expect("pattern net is consistent")
}

/// Same network with every weighted layer quantized to the given global
/// formats.
pub fn with_global_formats(
    net: &NetDescriptor,
    weight_fmt: FixedPointFormat,
    act_fmt: FixedPointFormat,
    scheme: RoundingScheme,
) -> NetDescriptor {
    net.map_layers(|_, l| {
        if l.has_weights() || matches!(l.op, LayerOp::Act) {
            l.quant = QuantSpec::new(weight_fmt, act_fmt, scheme);
        }
    })
    .expect("formats do not change shapes")
}

fn checksum(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Serializes as `LPDS` v1 (see `docs/formats.md`).
pub fn encode_dataset(ds: &Dataset<f32>) -> Vec<u8> {
    let s = ds.images.shape();
    let mut out = Vec::with_capacity(32 + ds.len() * 4 + ds.images.len() * 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in [s[0], s[1], s[2], s[3], ds.num_classes] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &v in ds.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset<f32>, DataError> {
    const HEADER: usize = 8 + 5 * 4;
    if bytes.len() < HEADER + 4 {
        return Err(DataError::Truncated);
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(DataError::BadMagic);
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if checksum(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(DataError::Checksum);
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != DATASET_VERSION {
        return Err(DataError::Version(version));
    }
    let word = |i: usize| u32::from_le_bytes(body[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, c, h, w, classes) = (word(0), word(1), word(2), word(3), word(4));
    let elems = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| DataError::Invalid("dimensions overflow".into()))?;
    let expected = elems
        .checked_add(n)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER))
        .ok_or_else(|| DataError::Invalid("dimensions overflow".into()))?;
    if body.len() != expected {
        return Err(DataError::Invalid(format!(
            "payload is {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let labels: Vec<usize> = body[HEADER..HEADER + 4 * n]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect();
    let data: Vec<f32> = body[HEADER + 4 * n..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let images = Tensor::new(vec![n, c, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(images, labels, classes)
}
