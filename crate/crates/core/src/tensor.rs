//! Dense NCHW tensors and the kernels shared by the layers.
//!
//! Storage is row-major with the last dimension fastest. Every operation
//! allocates its output; inputs are never mutated.

use std::fmt;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;
use thiserror::Error;

/// Element type for tensors. Implemented for `f32` (the working precision)
/// and `f64` (used by gradient checks).
pub trait Real:
    Float + AddAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Significand precision in bits, including the implicit bit.
    const MANTISSA_DIGITS: u32;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const MANTISSA_DIGITS: u32 = f32::MANTISSA_DIGITS;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const MANTISSA_DIGITS: u32 = f64::MANTISSA_DIGITS;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("tensor is empty")]
    Empty,
    #[error("invalid geometry: {0}")]
    Geometry(String),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting length mismatches and non-finite data.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                index,
                value: data[index].as_f64(),
            });
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Converts to another element type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite {
                index,
                value: self.data[index].as_f64(),
            }),
            None => Ok(()),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Slice of the `i`-th entry along the leading axis.
    pub fn outer(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0].max(1);
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Stacks the selected leading-axis entries into a new tensor.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(shape.iter().product());
        for &i in indices {
            data.extend_from_slice(self.outer(i));
        }
        Self { shape, data }
    }

    fn same_shape(&self, other: &Self) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Zero count of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SparsityStat {
    pub zero_count: usize,
    pub total_count: usize,
    pub sparsity: f64,
}

/// Fraction of elements with `|v| <= tolerance`.
pub fn sparsity<T: Real>(t: &Tensor<T>, tolerance: f64) -> Result<SparsityStat, TensorError> {
    if t.is_empty() {
        return Err(TensorError::Empty);
    }
    let zero_count = t
        .data
        .iter()
        .filter(|v| v.as_f64().abs() <= tolerance)
        .count();
    Ok(SparsityStat {
        zero_count,
        total_count: t.len(),
        sparsity: zero_count as f64 / t.len() as f64,
    })
}

/// `(m x k) * (k x n)`. Each output is accumulated in index order over `k`
/// starting from `+0.0`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Spatial geometry of a 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.kernel == 0 || self.stride == 0 || self.channels == 0 {
            return Err(TensorError::Geometry(format!(
                "kernel, stride and channels must be >= 1 ({self:?})"
            )));
        }
        if self.height + 2 * self.pad < self.kernel || self.width + 2 * self.pad < self.kernel {
            return Err(TensorError::Geometry(format!(
                "kernel {} larger than padded input {}x{}",
                self.kernel,
                self.height + 2 * self.pad,
                self.width + 2 * self.pad
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the patch matrix: `channels * kernel^2`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Input coordinate hit by output `(oy, ox)` at kernel tap `(ky, kx)`,
    /// or `None` when it falls in the padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Patch extraction for one `C x H x W` image into a
/// `(C*k*k) x (outH*outW)` matrix; padded taps are zero.
pub fn im2col<T: Real>(image: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let positions = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * positions];
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            dst[oy * ow + ox] = plane[y * g.width + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back to the image.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let positions = oh * ow;
    let mut image = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            image[(c * g.height + y) * g.width + x] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sparsity_examples() {
        let zeros = Tensor::<f32>::zeros(vec![2, 2]);
        assert_eq!(sparsity(&zeros, 0.0).unwrap().sparsity, 1.0);
        let half = t(vec![4], vec![1.0, 0.0, 0.0, 2.0]);
        let s = sparsity(&half, 0.0).unwrap();
        assert_eq!((s.zero_count, s.total_count, s.sparsity), (2, 4, 0.5));
        assert_eq!(
            sparsity(&Tensor::<f32>::zeros(vec![0]), 0.0),
            Err(TensorError::Empty)
        );
    }

    #[test]
    fn relu_of_normal_is_half_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(vec![100_000], |_| rng.sample(StandardNormal));
        let s = sparsity(&x.relu(), 0.0).unwrap().sparsity;
        assert!((s - 0.5).abs() <= 0.02, "sparsity {s}");
    }

    #[test]
    fn tolerance_counts_near_zero() {
        let x = t(vec![3], vec![1e-9, -1e-9, 0.5]);
        assert_eq!(sparsity(&x, 1e-6).unwrap().zero_count, 2);
        assert_eq!(sparsity(&x, 0.0).unwrap().zero_count, 0);
    }

    #[test]
    fn basic_reductions() {
        let x = t(vec![2], vec![-3.0, 2.0]);
        assert_eq!(x.max_abs(), 3.0);
        assert_eq!(x.scale(1.0), x);
        assert_eq!(x.relu().data(), &[0.0, 2.0]);
        assert_eq!(x.add(&x).unwrap().data(), &[-6.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![3, 2]);
        let err = a.add(&b).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch: [2, 3] vs [3, 2]");
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn constructor_rejects_bad_data() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2], vec![1.0]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        let mut oracle = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    oracle[i * 2 + j] += a.data()[i * 3 + p] * b.data()[p * 2 + j];
                }
            }
        }
        assert_eq!(c.data(), &oracle);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        g.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.positions())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn geometry_rejects_oversized_kernel() {
        let g = ConvGeometry {
            channels: 1,
            height: 2,
            width: 2,
            kernel: 5,
            stride: 1,
            pad: 0,
        };
        assert!(g.validate().is_err());
    }

    proptest! {
        #[test]
        fn relu_is_idempotent_and_nonnegative(v in prop::collection::vec(-10.0f64..10.0, 1..50)) {
            let x = Tensor::new(vec![v.len()], v).unwrap();
            let r = x.relu();
            prop_assert!(r.data().iter().all(|&e| e >= 0.0));
            prop_assert_eq!(r.relu(), r);
        }

        #[test]
        fn scale_composes(v in prop::collection::vec(-10.0f64..10.0, 1..50),
                          a in prop::sample::select(vec![0.5, 2.0, 4.0, -1.0]),
                          b in prop::sample::select(vec![0.25, 8.0, -2.0])) {
            // powers of two keep the products exact
            let x = Tensor::new(vec![v.len()], v).unwrap();
            prop_assert_eq!(x.scale(a * b), x.scale(a).scale(b));
        }
    }
}
