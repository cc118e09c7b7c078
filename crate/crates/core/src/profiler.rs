//! Dynamic-range profiling, per-layer integer/fraction bit allocation, and
//! sparsity and one-shot degradation reports.
//!
//! Every report type serializes to JSON (schemas in `docs/formats.md`).

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::fixedpoint::{to_code, FixedPointError, FixedPointFormat, RoundingScheme, StreamKey};
use crate::inference::{forward, ActRounding, ForwardMode, InferenceError, Model};
use crate::netdesc::{LayerOp, NetDescriptor, NetError, QuantSpec};
use crate::tensor::{Real, Tensor};
use crate::training::{evaluate, LayerSparsity, TrainError};

/// Inputs drawn for profiling when the caller does not choose.
pub const DEFAULT_PROFILE_SAMPLES: usize = 64;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("no samples to profile")]
    EmptySamples,
    #[error("total bits must be in 2..=32, got {0}")]
    Bits(u32),
    #[error("loss threshold must be in [0, 1), got {0}")]
    Threshold(f64),
    #[error(
        "layer {layer} ({kind}): no integer width up to {total_bits} bits keeps overflow within the threshold (max |v| = {max_abs})"
    )]
    NoFormat {
        layer: String,
        kind: &'static str,
        total_bits: u32,
        max_abs: f64,
    },
    #[error("allocation does not match the network: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("report: {0}")]
    Json(#[from] serde_json::Error),
}

/// Running statistics of a set of values. Merging is associative and
/// commutative, so batch splits and order do not matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueStats {
    pub min: f64,
    pub max: f64,
    pub max_abs: f64,
    pub count: u64,
    pub zero_count: u64,
    /// Count of nonzero values per `floor(log2 |v|)`.
    pub log2_histogram: BTreeMap<i32, u64>,
}

impl Default for ValueStats {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            max_abs: 0.0,
            count: 0,
            zero_count: 0,
            log2_histogram: BTreeMap::new(),
        }
    }
}

/// Exact `floor(log2 |v|)` for finite nonzero `v`, subnormals included.
pub fn log2_floor(v: f64) -> i32 {
    let bits = v.abs().to_bits();
    let exp = (bits >> 52) as i32;
    if exp == 0 {
        // subnormal: value = mantissa * 2^-1074
        let mantissa = bits & ((1 << 52) - 1);
        63 - mantissa.leading_zeros() as i32 - 1074
    } else {
        exp - 1023
    }
}

impl ValueStats {
    pub fn from_values<T: Real>(values: &[T]) -> Self {
        let mut s = Self::default();
        s.extend(values);
        s
    }

    pub fn extend<T: Real>(&mut self, values: &[T]) {
        for &v in values {
            self.push(v.as_f64());
        }
    }

    pub fn push(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.max_abs = self.max_abs.max(v.abs());
        self.count += 1;
        if v == 0.0 {
            self.zero_count += 1;
        } else {
            *self.log2_histogram.entry(log2_floor(v)).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.max_abs = self.max_abs.max(other.max_abs);
        self.count += other.count;
        self.zero_count += other.zero_count;
        for (&k, &n) in &other.log2_histogram {
            *self.log2_histogram.entry(k).or_default() += n;
        }
    }

    /// Number of values with `|v| >= 2^(int_bits - 1)`.
    pub fn overflow_count(&self, int_bits: u32) -> u64 {
        let edge = int_bits as i32 - 1;
        self.log2_histogram.range(edge..).map(|(_, &n)| n).sum()
    }

    pub fn overflow_fraction(&self, int_bits: u32) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.overflow_count(int_bits) as f64 / self.count as f64
    }
}

/// Statistics of one layer. `weights` covers weights and bias together
/// (they share a format) and is absent for parameterless layers.
/// `activations` are the values entering the activation quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRange {
    pub index: usize,
    pub name: String,
    pub weights: Option<ValueStats>,
    pub activations: ValueStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub samples: usize,
    pub layers: Vec<LayerRange>,
}

impl RangeStats {
    pub fn layer(&self, index: usize) -> Option<&LayerRange> {
        self.layers.iter().find(|l| l.index == index)
    }

    pub fn to_json(&self) -> Result<String, ProfileError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ProfileError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Layers with an activation quantization stage.
fn profiled_layers(net: &NetDescriptor) -> impl Iterator<Item = usize> + '_ {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.op, LayerOp::Conv(_) | LayerOp::InnerProduct(_) | LayerOp::Act))
        .map(|(i, _)| i)
}

/// Float-mode forward over `samples` (batch first), accumulating
/// pre-quantizer activation statistics and the static weight statistics.
pub fn measure_ranges<T: Real>(model: &Model<T>, samples: &Tensor<T>) -> Result<RangeStats, ProfileError> {
    let n = samples.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(ProfileError::EmptySamples);
    }
    let net = model.net();
    let indices: Vec<usize> = profiled_layers(net).collect();
    let mut acts = vec![ValueStats::default(); indices.len()];
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(32) {
        let trace = forward(model, &samples.gather(chunk), ForwardMode::Float)?;
        for (slot, &i) in indices.iter().enumerate() {
            let pre = trace.pre_act[i].as_ref().expect("profiled layers record pre-activations");
            acts[slot].extend(pre.data());
        }
    }
    let layers = indices
        .into_iter()
        .zip(acts)
        .map(|(i, activations)| {
            let weights = model.layer(i).map(|s| {
                let mut w = ValueStats::from_values(s.weights.shadow().data());
                w.extend(s.bias.shadow().data());
                w
            });
            LayerRange {
                index: i,
                name: net.layer(i).name.clone(),
                weights,
                activations,
            }
        })
        .collect();
    Ok(RangeStats { samples: n, layers })
}

/// Seeded choice of `count` sample indices (all of them if fewer).
pub fn profile_indices(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, total, count.min(total)).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub index: usize,
    pub name: String,
    pub weight_fmt: Option<FixedPointFormat>,
    pub act_fmt: FixedPointFormat,
    pub weight_overflow: Option<f64>,
    pub act_overflow: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub total_bits: u32,
    pub loss_threshold: f64,
    pub layers: Vec<LayerAllocation>,
}

impl BitAllocation {
    pub fn layer(&self, index: usize) -> Option<&LayerAllocation> {
        self.layers.iter().find(|l| l.index == index)
    }

    pub fn to_json(&self) -> Result<String, ProfileError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ProfileError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Smallest integer width (sign included) whose overflow fraction is within
/// `threshold`, scanning `1..=total_bits`.
pub fn minimal_int_bits(stats: &ValueStats, total_bits: u32, threshold: f64) -> Option<u32> {
    (1..=total_bits).find(|&m| stats.overflow_fraction(m) <= threshold)
}

fn check_budget(total_bits: u32, threshold: f64) -> Result<(), ProfileError> {
    if !(2..=crate::fixedpoint::MAX_TOTAL_BITS).contains(&total_bits) {
        return Err(ProfileError::Bits(total_bits));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(ProfileError::Threshold(threshold));
    }
    Ok(())
}

/// Per layer, and separately for weights and activations, picks the fewest
/// integer bits whose overflow fraction stays within `threshold`. The
/// remaining bits go to the fraction.
pub fn allocate_bits(stats: &RangeStats, total_bits: u32, threshold: f64) -> Result<BitAllocation, ProfileError> {
    check_budget(total_bits, threshold)?;
    let pick = |s: &ValueStats, layer: &str, kind: &'static str| -> Result<(FixedPointFormat, f64), ProfileError> {
        let m = minimal_int_bits(s, total_bits, threshold).ok_or_else(|| ProfileError::NoFormat {
            layer: layer.to_string(),
            kind,
            total_bits,
            max_abs: s.max_abs,
        })?;
        Ok((FixedPointFormat::signed(m, total_bits - m)?, s.overflow_fraction(m)))
    };
    let mut layers = Vec::with_capacity(stats.layers.len());
    for l in &stats.layers {
        let (weight_fmt, weight_overflow) = match &l.weights {
            Some(w) => {
                let (f, o) = pick(w, &l.name, "weights")?;
                (Some(f), Some(o))
            }
            None => (None, None),
        };
        let (act_fmt, act_overflow) = pick(&l.activations, &l.name, "activations")?;
        layers.push(LayerAllocation {
            index: l.index,
            name: l.name.clone(),
            weight_fmt,
            act_fmt,
            weight_overflow,
            act_overflow,
        });
    }
    Ok(BitAllocation {
        total_bits,
        loss_threshold: threshold,
        layers,
    })
}

/// Writes the allocated formats into the descriptor and enables
/// quantization on every allocated layer.
pub fn apply_allocation(
    net: &NetDescriptor,
    alloc: &BitAllocation,
    scheme: RoundingScheme,
) -> Result<NetDescriptor, ProfileError> {
    for a in &alloc.layers {
        let ok = a.index < net.len()
            && net.layer(a.index).name == a.name
            && net.layer(a.index).has_weights() == a.weight_fmt.is_some();
        if !ok {
            return Err(ProfileError::Mismatch(format!("entry {} ({}) has no matching layer", a.index, a.name)));
        }
    }
    Ok(net.map_layers(|i, l| {
        if let Some(a) = alloc.layer(i) {
            // parameterless layers never read the weight format
            l.quant = QuantSpec::new(a.weight_fmt.unwrap_or(a.act_fmt), a.act_fmt, scheme);
        }
    })?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsityMode {
    Float,
    OneShotQuantized,
    FineTuned,
}

impl SparsityMode {
    /// Float mode runs without quantizers; the others round activations to
    /// nearest.
    pub fn forward_mode(self) -> ForwardMode {
        match self {
            SparsityMode::Float => ForwardMode::Float,
            _ => ForwardMode::Quantized(ActRounding::Deterministic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub mode: SparsityMode,
    pub samples: usize,
    pub layers: Vec<LayerSparsity>,
    /// Unweighted mean over layers.
    pub mean: f64,
}

impl SparsityReport {
    pub fn to_json(&self) -> Result<String, ProfileError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ProfileError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Post-activation sparsity of every ReLU layer over `data`.
pub fn sparsity_report<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    mode: SparsityMode,
) -> Result<SparsityReport, ProfileError> {
    if data.is_empty() {
        return Err(ProfileError::EmptySamples);
    }
    let ev = evaluate(model, data, mode.forward_mode(), 64)?;
    Ok(SparsityReport {
        mode,
        samples: data.len(),
        mean: ev.mean_sparsity(),
        layers: ev.layer_sparsity,
    })
}

/// Fraction of `values` inside the range of `fmt`.
pub fn representable_fraction(values: &[f64], fmt: FixedPointFormat) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    values.iter().filter(|&&v| fmt.contains(v)).count() as f64 / values.len() as f64
}

/// Fraction of codes that fit in a `bits`-wide two's-complement integer.
pub fn code_width_fraction(codes: &[i64], bits: u32) -> f64 {
    if codes.is_empty() {
        return 1.0;
    }
    let half = 1i64 << (bits - 1);
    codes.iter().filter(|&&c| (-half..half).contains(&c)).count() as f64 / codes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeightCoverage {
    pub index: usize,
    pub name: String,
    pub weight_fmt: FixedPointFormat,
    /// Weights inside the format's range.
    pub representable: f64,
    /// Weight codes that fit in 4 and 8 bits respectively.
    pub fits_4_bits: f64,
    pub fits_8_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub samples: usize,
    pub float_accuracy: f64,
    pub weights_only_accuracy: f64,
    pub full_accuracy: f64,
    pub layers: Vec<LayerWeightCoverage>,
    /// Pooled over all weights of all layers.
    pub fits_4_bits: f64,
    pub fits_8_bits: f64,
}

impl DegradationReport {
    pub fn weights_only_drop(&self) -> f64 {
        self.float_accuracy - self.weights_only_accuracy
    }

    pub fn full_drop(&self) -> f64 {
        self.float_accuracy - self.full_accuracy
    }

    pub fn to_json(&self) -> Result<String, ProfileError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ProfileError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Rounds a float model once to the formats of `quantized_net` and reports
/// accuracy at float, weights-only and weights+activations precision.
pub fn one_shot_study<T: Real>(
    model: &Model<T>,
    quantized_net: &NetDescriptor,
    data: &Dataset<T>,
    seed: u64,
) -> Result<DegradationReport, ProfileError> {
    if data.is_empty() {
        return Err(ProfileError::EmptySamples);
    }
    let mut q = model.with_net(quantized_net.clone())?;
    q.refresh(StreamKey::new(seed))?;
    let float_accuracy = evaluate(model, data, ForwardMode::Float, 64)?.accuracy;
    let weights_only_accuracy = evaluate(&q, data, ForwardMode::WeightsOnly, 64)?.accuracy;
    let full_accuracy = evaluate(&q, data, ForwardMode::Quantized(ActRounding::Deterministic), 64)?.accuracy;

    let mut layers = Vec::new();
    let mut all_codes = Vec::new();
    for (i, desc) in quantized_net.weighted_layers() {
        if !desc.quant.enabled {
            continue;
        }
        let state = q.layer(i).expect("weighted layer");
        let fmt = desc.quant.weight_fmt;
        let shadow: Vec<f64> = state.weights.shadow().data().iter().map(|v| v.as_f64()).collect();
        let cached = state.weights.quantized().expect("refreshed above");
        let codes = cached
            .data()
            .iter()
            .map(|v| to_code(v.as_f64(), fmt))
            .collect::<Result<Vec<_>, _>>()?;
        layers.push(LayerWeightCoverage {
            index: i,
            name: desc.name.clone(),
            weight_fmt: fmt,
            representable: representable_fraction(&shadow, fmt),
            fits_4_bits: code_width_fraction(&codes, 4),
            fits_8_bits: code_width_fraction(&codes, 8),
        });
        all_codes.extend(codes);
    }
    Ok(DegradationReport {
        samples: data.len(),
        float_accuracy,
        weights_only_accuracy,
        full_accuracy,
        layers,
        fits_4_bits: code_width_fraction(&all_codes, 4),
        fits_8_bits: code_width_fraction(&all_codes, 8),
    })
}
