//! Qm.f fixed-point formats and the rounding operations every quantizer
//! goes through.
//!
//! A format `Q<bd>.<ad>` has `bd` bits before the binary point (the sign bit
//! included for signed formats) and `ad` bits after it. Values live on the
//! grid `k * 2^-ad` for two's-complement codes `k`. Out-of-range inputs
//! saturate to the nearest bound in both rounding modes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::tensor::{Real, Tensor};

pub const MAX_TOTAL_BITS: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixedPointError {
    #[error("invalid format: {0}")]
    InvalidFormat(String),
    #[error("cannot parse fixed-point format {input:?}: {reason}")]
    Parse { input: String, reason: &'static str },
    #[error("unknown rounding scheme {0:?}")]
    UnknownScheme(String),
    #[error("non-finite value {value} (corrupt tensor data)")]
    NonFinite { value: f64 },
    #[error("non-finite value {value} at element {index} (corrupt tensor data)")]
    NonFiniteElement { index: usize, value: f64 },
    #[error("value {value} is not on the {fmt} grid")]
    OffGrid { value: f64, fmt: FixedPointFormat },
    #[error("code {code} out of range for {fmt}")]
    CodeOutOfRange { code: i64, fmt: FixedPointFormat },
    #[error("value {value} outside the range of {fmt}")]
    ValueOutOfRange { value: f64, fmt: FixedPointFormat },
    #[error("{fmt} needs {bits} significand bits; element type carries {available}")]
    Unrepresentable {
        fmt: FixedPointFormat,
        bits: u32,
        available: u32,
    },
}

/// A validated Qm.f descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPointFormat {
    bd: u32,
    ad: u32,
    signed: bool,
}

impl FixedPointFormat {
    pub fn new(bd: u32, ad: u32, signed: bool) -> Result<Self, FixedPointError> {
        let total = bd + ad;
        if total == 0 || total > MAX_TOTAL_BITS {
            return Err(FixedPointError::InvalidFormat(format!(
                "total bits {total} not in 1..={MAX_TOTAL_BITS}"
            )));
        }
        if signed && bd == 0 {
            return Err(FixedPointError::InvalidFormat(
                "signed formats need at least one bit before the point for the sign".into(),
            ));
        }
        Ok(Self { bd, ad, signed })
    }

    /// Signed two's-complement `Q<bd>.<ad>`.
    pub fn signed(bd: u32, ad: u32) -> Result<Self, FixedPointError> {
        Self::new(bd, ad, true)
    }

    pub fn unsigned(bd: u32, ad: u32) -> Result<Self, FixedPointError> {
        Self::new(bd, ad, false)
    }

    pub fn bd(&self) -> u32 {
        self.bd
    }

    pub fn ad(&self) -> u32 {
        self.ad
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn total_bits(&self) -> u32 {
        self.bd + self.ad
    }

    pub fn step(&self) -> f64 {
        (-(self.ad as f64)).exp2()
    }

    /// `2^ad`, the factor from values to codes.
    fn inv_step(&self) -> f64 {
        (self.ad as f64).exp2()
    }

    pub fn min_code(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.total_bits() - 1))
        } else {
            0
        }
    }

    pub fn max_code(&self) -> i64 {
        if self.signed {
            (1i64 << (self.total_bits() - 1)) - 1
        } else {
            (1i64 << self.total_bits()) - 1
        }
    }

    pub fn min_value(&self) -> f64 {
        self.min_code() as f64 * self.step()
    }

    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.step()
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.min_value(), self.max_value())
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min_value() && x <= self.max_value()
    }

    /// True when `x` is exactly a representable value of this format.
    pub fn on_grid(&self, x: f64) -> bool {
        let scaled = x * self.inv_step();
        scaled.is_finite()
            && scaled.fract() == 0.0
            && scaled >= self.min_code() as f64
            && scaled <= self.max_code() as f64
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.bd, self.ad)?;
        if !self.signed {
            f.write_str("u")?;
        }
        Ok(())
    }
}

fn parse_count(digits: &str, input: &str) -> Result<u32, FixedPointError> {
    let err = |reason| FixedPointError::Parse {
        input: input.to_string(),
        reason,
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err("expected decimal digits"));
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return Err(err("leading zeros are not canonical"));
    }
    digits.parse().map_err(|_| err("bit count too large"))
}

impl FromStr for FixedPointFormat {
    type Err = FixedPointError;

    /// Parses `Q<bd>.<ad>` with an optional trailing `u` for unsigned.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let body = s.strip_prefix('Q').ok_or_else(|| FixedPointError::Parse {
            input: s.to_string(),
            reason: "missing leading 'Q'",
        })?;
        let (body, signed) = match body.strip_suffix('u') {
            Some(rest) => (rest, false),
            None => (body, true),
        };
        let (bd, ad) = body.split_once('.').ok_or_else(|| FixedPointError::Parse {
            input: s.to_string(),
            reason: "missing '.' between bit counts",
        })?;
        Self::new(parse_count(bd, s)?, parse_count(ad, s)?, signed)
    }
}

impl Serialize for FixedPointFormat {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FixedPointFormat {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RoundingScheme {
    #[default]
    Deterministic,
    Stochastic,
}

impl RoundingScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoundingScheme::Deterministic => "DETERMINISTIC",
            RoundingScheme::Stochastic => "STOCHASTIC",
        }
    }

    /// Binds the scheme to a random stream. The key is ignored for
    /// deterministic rounding.
    pub fn with_key(self, key: StreamKey) -> Rounder {
        match self {
            RoundingScheme::Deterministic => Rounder::Deterministic,
            RoundingScheme::Stochastic => Rounder::Stochastic(key),
        }
    }
}

impl fmt::Display for RoundingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoundingScheme {
    type Err = FixedPointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DETERMINISTIC" => Ok(RoundingScheme::Deterministic),
            // the misspelling shows up in existing network configs
            "STOCHASTIC" | "STOACHASTIC" => Ok(RoundingScheme::Stochastic),
            other => Err(FixedPointError::UnknownScheme(other.to_string())),
        }
    }
}

impl Serialize for RoundingScheme {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RoundingScheme {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Counter-based random stream: the uniform draw for element `i` depends
/// only on `(seed, stream, i)`, never on evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Derives an independent child stream.
    pub fn substream(self, id: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(id.wrapping_add(0x5851_F42D))),
        }
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn uniform(&self, index: u64) -> f64 {
        let h = splitmix64(splitmix64(splitmix64(self.seed) ^ self.stream) ^ index);
        (h >> 11) as f64 * (-53f64).exp2()
    }
}

/// A rounding scheme with whatever state it needs to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounder {
    Deterministic,
    Stochastic(StreamKey),
}

impl Rounder {
    pub fn scheme(&self) -> RoundingScheme {
        match self {
            Rounder::Deterministic => RoundingScheme::Deterministic,
            Rounder::Stochastic(_) => RoundingScheme::Stochastic,
        }
    }
}

/// Nearest grid value, ties away from zero, saturating at the bounds.
pub fn quantize_det(x: f64, fmt: FixedPointFormat) -> Result<f64, FixedPointError> {
    if !x.is_finite() {
        return Err(FixedPointError::NonFinite { value: x });
    }
    let code = (x * fmt.inv_step())
        .round()
        .clamp(fmt.min_code() as f64, fmt.max_code() as f64);
    Ok(code * fmt.step())
}

/// Stochastic rounding driven by a uniform draw `u` in `[0, 1)`: rounds up
/// with probability `(x - L) / step` where `L` is the grid value below `x`.
pub fn quantize_stoch_with(x: f64, fmt: FixedPointFormat, u: f64) -> Result<f64, FixedPointError> {
    if !x.is_finite() {
        return Err(FixedPointError::NonFinite { value: x });
    }
    if x >= fmt.max_value() {
        return Ok(fmt.max_value());
    }
    if x <= fmt.min_value() {
        return Ok(fmt.min_value());
    }
    let scaled = x * fmt.inv_step();
    let lower = scaled.floor();
    let code = if u < scaled - lower { lower + 1.0 } else { lower };
    Ok(code * fmt.step())
}

pub fn quantize_stoch<R: Rng + ?Sized>(
    x: f64,
    fmt: FixedPointFormat,
    rng: &mut R,
) -> Result<f64, FixedPointError> {
    quantize_stoch_with(x, fmt, rng.random::<f64>())
}

pub fn quantize_scalar(
    x: f64,
    fmt: FixedPointFormat,
    rounder: Rounder,
    index: u64,
) -> Result<f64, FixedPointError> {
    match rounder {
        Rounder::Deterministic => quantize_det(x, fmt),
        Rounder::Stochastic(key) => quantize_stoch_with(x, fmt, key.uniform(index)),
    }
}

/// Fails when `T` cannot hold every value of `fmt` exactly.
pub fn check_representable<T: Real>(fmt: FixedPointFormat) -> Result<(), FixedPointError> {
    if fmt.total_bits() > T::MANTISSA_DIGITS {
        return Err(FixedPointError::Unrepresentable {
            fmt,
            bits: fmt.total_bits(),
            available: T::MANTISSA_DIGITS,
        });
    }
    Ok(())
}

/// Elementwise quantization. Stochastic draws are keyed by flat element
/// index.
pub fn quantize_tensor<T: Real>(
    t: &Tensor<T>,
    fmt: FixedPointFormat,
    rounder: Rounder,
) -> Result<Tensor<T>, FixedPointError> {
    check_representable::<T>(fmt)?;
    let mut data = Vec::with_capacity(t.len());
    for (index, &v) in t.data().iter().enumerate() {
        let q = quantize_scalar(v.as_f64(), fmt, rounder, index as u64).map_err(|e| match e {
            FixedPointError::NonFinite { value } => {
                FixedPointError::NonFiniteElement { index, value }
            }
            other => other,
        })?;
        data.push(T::from_f64(q));
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), data))
}

/// Integer code of an on-grid value.
pub fn to_code(x: f64, fmt: FixedPointFormat) -> Result<i64, FixedPointError> {
    let scaled = x * fmt.inv_step();
    if !scaled.is_finite() || scaled.fract() != 0.0 {
        return Err(FixedPointError::OffGrid { value: x, fmt });
    }
    if scaled < fmt.min_code() as f64 || scaled > fmt.max_code() as f64 {
        return Err(FixedPointError::ValueOutOfRange { value: x, fmt });
    }
    Ok(scaled as i64)
}

pub fn from_code(code: i64, fmt: FixedPointFormat) -> Result<f64, FixedPointError> {
    if code < fmt.min_code() || code > fmt.max_code() {
        return Err(FixedPointError::CodeOutOfRange { code, fmt });
    }
    Ok(code as f64 * fmt.step())
}
