//! Low-precision forward pass.
//!
//! Convolution and fully-connected layers run with quantized weights and
//! biases and accumulate at storage precision. Their outputs go through the
//! activation quantizer and then ReLU, in that order, so small negative and
//! small positive values alike collapse to exact zeros. The zero-skipping
//! convolution consumes a coordinate list of nonzero activations and yields
//! results bit-identical to the dense path.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fixedpoint::{quantize_tensor, FixedPointError, FixedPointFormat, Rounder, StreamKey};
use crate::netdesc::{ConvSpec, FcSpec, LayerDescriptor, LayerOp, NetDescriptor, NetError, PoolSpec, QuantSpec};
use crate::tensor::{im2col, matmul_into, ConvGeometry, Real, Tensor, TensorError};
use crate::training::{init_weights, DualCopyParam};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("layer {layer}: quantized parameter cache is stale; refresh before the forward pass")]
    StaleCache { layer: String },
    #[error("input scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("{0}")]
    Shape(String),
    #[error("layer {layer}: non-finite value {value} at element {index}")]
    NonFinite { layer: String, index: usize, value: f64 },
}

/// Overflow inside a layer would otherwise be masked by the ReLU (which maps
/// NaN to zero), so every pre-activation is checked.
fn ensure_finite<T: Real>(t: &Tensor<T>, layer: &str) -> Result<(), InferenceError> {
    match t.check_finite() {
        Err(TensorError::NonFinite { index, value }) => Err(InferenceError::NonFinite {
            layer: layer.to_string(),
            index,
            value,
        }),
        _ => Ok(()),
    }
}

/// Parameters of one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T: Real = f32> {
    pub weights: DualCopyParam<T>,
    pub bias: DualCopyParam<T>,
    pub quant: QuantSpec,
}

impl<T: Real> LayerState<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, quant: QuantSpec) -> Self {
        Self {
            weights: DualCopyParam::new(weights),
            bias: DualCopyParam::new(bias),
            quant,
        }
    }

    /// Re-derives the quantized copies from the shadow tensors. `key` feeds
    /// stochastic rounding; weights and bias draw from separate substreams.
    pub fn refresh(&mut self, key: StreamKey) -> Result<(), FixedPointError> {
        if !self.quant.enabled {
            return Ok(());
        }
        let scheme = self.quant.scheme;
        self.weights.refresh(self.quant.weight_fmt, scheme.with_key(key.substream(0)))?;
        self.bias.refresh(self.quant.bias_format(), scheme.with_key(key.substream(1)))
    }

    pub fn is_fresh(&self) -> bool {
        !self.quant.enabled || (self.weights.is_fresh() && self.bias.is_fresh())
    }

    /// Weights and bias as seen by a forward pass.
    pub fn effective(&self, quantized: bool, name: &str) -> Result<(&Tensor<T>, &Tensor<T>), InferenceError> {
        if !quantized {
            return Ok((self.weights.shadow(), self.bias.shadow()));
        }
        match (self.weights.quantized(), self.bias.quantized()) {
            (Some(w), Some(b)) => Ok((w, b)),
            _ => Err(InferenceError::StaleCache { layer: name.to_string() }),
        }
    }

    pub fn cast<U: Real>(&self) -> LayerState<U> {
        LayerState {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            quant: self.quant,
        }
    }
}

/// A descriptor plus the parameters of every weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    net: NetDescriptor,
    layers: Vec<Option<LayerState<T>>>,
    pub provenance: BTreeMap<String, String>,
}

impl<T: Real> Model<T> {
    /// Glorot-initialized weights, zero biases, caches refreshed with `seed`.
    pub fn init(net: NetDescriptor, seed: u64) -> Result<Self, InferenceError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let shape = l.weight_shape()?;
                let w = init_weights::<T, _>(l, &mut rng).expect("weighted layer");
                let b = Tensor::zeros(vec![l.bias_len().expect("weighted layer")]);
                debug_assert_eq!(w.shape(), &shape[..]);
                Some(LayerState::new(w, b, l.quant))
            })
            .collect();
        let mut model = Self {
            net,
            layers,
            provenance: BTreeMap::new(),
        };
        model.provenance.insert("init".into(), "random".into());
        model.provenance.insert("seed".into(), seed.to_string());
        model.refresh(StreamKey::new(seed))?;
        Ok(model)
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_layers(net: NetDescriptor, layers: Vec<Option<LayerState<T>>>) -> Result<Self, InferenceError> {
        if layers.len() != net.len() {
            return Err(InferenceError::Shape(format!(
                "descriptor has {} layers, parameters given for {}",
                net.len(),
                layers.len()
            )));
        }
        for (i, (desc, state)) in net.layers().iter().zip(&layers).enumerate() {
            match (desc.weight_shape(), state) {
                (None, None) => {}
                (Some(ws), Some(s)) => {
                    let bias_len = desc.bias_len().expect("weighted layer");
                    if s.weights.shadow().shape() != &ws[..] || s.bias.shadow().shape() != [bias_len] {
                        return Err(InferenceError::Shape(format!(
                            "layer {i} ({}): weights {:?} / bias {:?}, descriptor wants {ws:?} / [{bias_len}]",
                            desc.name,
                            s.weights.shadow().shape(),
                            s.bias.shadow().shape()
                        )));
                    }
                    if s.quant != desc.quant {
                        return Err(InferenceError::Shape(format!(
                            "layer {i} ({}): parameter quantization settings differ from the descriptor",
                            desc.name
                        )));
                    }
                }
                (Some(_), None) => {
                    return Err(InferenceError::Shape(format!("layer {i} ({}) is missing parameters", desc.name)))
                }
                (None, Some(_)) => {
                    return Err(InferenceError::Shape(format!("layer {i} ({}) takes no parameters", desc.name)))
                }
            }
        }
        Ok(Self {
            net,
            layers,
            provenance: BTreeMap::new(),
        })
    }

    pub fn net(&self) -> &NetDescriptor {
        &self.net
    }

    pub fn layers(&self) -> &[Option<LayerState<T>>] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&LayerState<T>> {
        self.layers[index].as_ref()
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut LayerState<T>> {
        self.layers[index].as_mut()
    }

    /// Refreshes every quantized cache. Layer `i` uses `key.substream(i)`.
    pub fn refresh(&mut self, key: StreamKey) -> Result<(), FixedPointError> {
        for (i, state) in self.layers.iter_mut().enumerate() {
            if let Some(s) = state {
                s.refresh(key.substream(i as u64))?;
            }
        }
        Ok(())
    }

    pub fn is_fresh(&self) -> bool {
        self.layers.iter().flatten().all(|s| s.is_fresh())
    }

    /// Swaps in a descriptor with the same structure (typically new
    /// quantization settings). Shadow parameters are kept; caches are
    /// dropped and must be refreshed.
    pub fn with_net(&self, net: NetDescriptor) -> Result<Self, InferenceError> {
        if !self.net.same_structure(&net) {
            return Err(InferenceError::Shape(
                "replacement descriptor has a different layer structure".into(),
            ));
        }
        let layers = self
            .layers
            .iter()
            .zip(net.layers())
            .map(|(s, d)| {
                s.as_ref().map(|s| LayerState {
                    weights: DualCopyParam::new(s.weights.shadow().clone()),
                    bias: DualCopyParam::new(s.bias.shadow().clone()),
                    quant: d.quant,
                })
            })
            .collect();
        Ok(Self {
            net,
            layers,
            provenance: self.provenance.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            layers: self.layers.iter().map(|s| s.as_ref().map(|s| s.cast())).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// How activations are rounded in a quantized forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActRounding {
    /// Round to nearest regardless of the layer's configured scheme.
    Deterministic,
    /// Use each layer's scheme; stochastic draws come from
    /// `key.substream(layer)` indexed by flat element position.
    Configured(StreamKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Shadow weights, no quantizers anywhere.
    Float,
    /// Quantized weights, float activations.
    WeightsOnly,
    Quantized(ActRounding),
}

impl ForwardMode {
    fn weights_quantized(&self) -> bool {
        !matches!(self, ForwardMode::Float)
    }

    fn act_rounder(&self, layer: &LayerDescriptor, index: usize) -> Option<Rounder> {
        if !layer.quantizes_activations() {
            return None;
        }
        match self {
            ForwardMode::Float | ForwardMode::WeightsOnly => None,
            ForwardMode::Quantized(ActRounding::Deterministic) => Some(Rounder::Deterministic),
            ForwardMode::Quantized(ActRounding::Configured(key)) => {
                Some(layer.quant.scheme.with_key(key.substream(index as u64)))
            }
        }
    }
}

/// Every intermediate of one forward pass, batch dimension first.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Real = f32> {
    /// Output of each layer; entry 0 is the scaled input.
    pub outputs: Vec<Tensor<T>>,
    /// Conv/FC results before activation quantization (and LPAct inputs).
    pub pre_act: Vec<Option<Tensor<T>>>,
    /// After activation quantization and ReLU, before pooling.
    pub post_act: Vec<Option<Tensor<T>>>,
    pub warnings: Vec<String>,
    softmax_tail: bool,
}

impl<T: Real> ForwardTrace<T> {
    /// Network output before any Softmax layer.
    pub fn logits(&self) -> &Tensor<T> {
        let n = self.outputs.len();
        if self.softmax_tail {
            &self.outputs[n - 2]
        } else {
            &self.outputs[n - 1]
        }
    }

    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("trace has the input at least")
    }
}

/// Multiplies every element by `s`.
pub fn scale_input<T: Real>(t: &Tensor<T>, s: f64) -> Result<Tensor<T>, InferenceError> {
    if !(s.is_finite() && s > 0.0) {
        return Err(InferenceError::InvalidScale(s));
    }
    Ok(t.scale(T::from_f64(s)))
}

/// Warning text when a scaled input exceeds the first activation format.
pub fn check_input_range<T: Real>(t: &Tensor<T>, fmt: FixedPointFormat) -> Option<String> {
    let max = t.max_abs().as_f64();
    (max > fmt.max_value()).then(|| {
        format!(
            "scaled input reaches {max} but {fmt} saturates at {}; lower the input scale",
            fmt.max_value()
        )
    })
}

/// Largest scale that keeps inputs of magnitude `max_input` inside `fmt`.
pub fn suggest_input_scale(max_input: f64, fmt: FixedPointFormat) -> f64 {
    fmt.max_value() / max_input
}

fn conv_geometry(shape: &[usize], spec: &ConvSpec) -> Result<ConvGeometry, InferenceError> {
    if shape.len() != 4 || shape[1] != spec.in_channels {
        return Err(InferenceError::Shape(format!(
            "convolution with {} input channels cannot take input {shape:?}",
            spec.in_channels
        )));
    }
    let g = ConvGeometry {
        channels: shape[1],
        height: shape[2],
        width: shape[3],
        kernel: spec.kernel,
        stride: spec.stride,
        pad: spec.pad,
    };
    g.validate()?;
    Ok(g)
}

fn check_params<T: Real>(w: &Tensor<T>, b: &Tensor<T>, wshape: &[usize], out: usize) -> Result<(), InferenceError> {
    if w.shape() != wshape || b.shape() != [out] {
        return Err(InferenceError::Shape(format!(
            "parameters {:?}/{:?} do not match layer {wshape:?}",
            w.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Plain batched convolution (`N x C x H x W` input) via patch matrices.
pub fn conv_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, InferenceError> {
    let g = conv_geometry(input.shape(), spec)?;
    let o = spec.out_channels;
    check_params(weights, bias, &[o, spec.in_channels, spec.kernel, spec.kernel], o)?;
    let (n, p, k) = (input.shape()[0], g.positions(), g.patch_len());
    let mut out = vec![T::zero(); n * o * p];
    for (i, dst) in out.chunks_mut(o * p).enumerate() {
        let cols = im2col(input.outer(i), &g);
        matmul_into(weights.data(), &cols, dst, o, k, p);
        for (row, &b) in dst.chunks_mut(p).zip(bias.data()) {
            for v in row {
                *v += b;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, g.out_height(), g.out_width()], out))
}

/// Convolution with the layer's quantized weights and bias (or the shadow
/// copies when quantization is off). The output is not quantized.
pub fn lp_conv_forward<T: Real>(
    input: &Tensor<T>,
    layer: &LayerState<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, InferenceError> {
    let (w, b) = layer.effective(layer.quant.enabled, "conv")?;
    conv_forward(input, w, b, spec)
}

/// `N x F` (or any `N x ...` flattened) times the transposed weight matrix.
pub fn fc_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &FcSpec,
) -> Result<Tensor<T>, InferenceError> {
    let n = input.shape().first().copied().unwrap_or(0);
    if n == 0 || input.len() != n * spec.in_features {
        return Err(InferenceError::Shape(format!(
            "fully-connected layer with {} inputs cannot take {:?}",
            spec.in_features,
            input.shape()
        )));
    }
    let (fi, fo) = (spec.in_features, spec.out_features);
    check_params(weights, bias, &[fo, fi], fo)?;
    let mut out = Vec::with_capacity(n * fo);
    for s in 0..n {
        let x = input.outer(s);
        for (row, &b) in weights.data().chunks(fi).zip(bias.data()) {
            let mut acc = T::zero();
            for (&w, &v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc + b);
        }
    }
    Ok(Tensor::from_parts(vec![n, fo], out))
}

pub fn lp_fc_forward<T: Real>(
    input: &Tensor<T>,
    layer: &LayerState<T>,
    spec: &FcSpec,
) -> Result<Tensor<T>, InferenceError> {
    let (w, b) = layer.effective(layer.quant.enabled, "fc")?;
    fc_forward(input, w, b, spec)
}

/// `relu(quantize(input))`.
pub fn lp_act_forward<T: Real>(
    input: &Tensor<T>,
    fmt: FixedPointFormat,
    rounder: Rounder,
) -> Result<Tensor<T>, InferenceError> {
    Ok(quantize_tensor(input, fmt, rounder)?.relu())
}

pub fn maxpool_forward<T: Real>(input: &Tensor<T>, pool: &PoolSpec) -> Result<Tensor<T>, InferenceError> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(InferenceError::Shape(format!("max pooling needs NCHW input, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (Some(oh), Some(ow)) = (pool.out_size(h), pool.out_size(w)) else {
        return Err(InferenceError::Shape(format!("pool window {} exceeds {h}x{w}", pool.window)));
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                for dy in 0..pool.window {
                    for dx in 0..pool.window {
                        let v = plane[(oy * pool.stride + dy) * w + ox * pool.stride + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Row-wise softmax of an `N x K` tensor.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[1..].iter().product::<usize>().max(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

/// Runs the whole network on a batch `[N, ...input shape]`.
pub fn forward<T: Real>(
    model: &Model<T>,
    input: &Tensor<T>,
    mode: ForwardMode,
) -> Result<ForwardTrace<T>, InferenceError> {
    let net = model.net();
    let expected = net.input_shape();
    if input.shape().len() != expected.len() + 1 || &input.shape()[1..] != expected || input.shape()[0] == 0 {
        return Err(InferenceError::Shape(format!(
            "input {:?} does not match descriptor input [N, {}]",
            input.shape(),
            expected.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    let n = net.len();
    let mut trace = ForwardTrace {
        outputs: Vec::with_capacity(n),
        pre_act: vec![None; n],
        post_act: vec![None; n],
        warnings: Vec::new(),
        softmax_tail: false,
    };
    let scaled = scale_input(input, net.input_scale())?;
    ensure_finite(&scaled, &net.layers()[0].name)?;
    if matches!(mode, ForwardMode::Quantized(_)) {
        if let Some(first) = net.layers().iter().find(|l| l.quantizes_activations()) {
            trace.warnings.extend(check_input_range(&scaled, first.quant.act_fmt));
        }
    }
    trace.outputs.push(scaled);

    for (i, layer) in net.layers().iter().enumerate().skip(1) {
        let x = &trace.outputs[i - 1];
        let batch = x.shape()[0];
        let out = match &layer.op {
            LayerOp::Input { .. } => unreachable!("validated descriptors have a single leading Input"),
            LayerOp::Conv(spec) => {
                let state = model.layer(i).expect("weighted layer has parameters");
                let (w, b) = state.effective(mode.weights_quantized() && state.quant.enabled, &layer.name)?;
                let pre = conv_forward(x, w, b, spec)?;
                ensure_finite(&pre, &layer.name)?;
                let post = activation(&pre, layer, mode.act_rounder(layer, i))?;
                let out = match &spec.pool {
                    Some(p) => maxpool_forward(&post, p)?,
                    None => post.clone(),
                };
                trace.pre_act[i] = Some(pre);
                trace.post_act[i] = Some(post);
                out
            }
            LayerOp::InnerProduct(spec) => {
                let state = model.layer(i).expect("weighted layer has parameters");
                let (w, b) = state.effective(mode.weights_quantized() && state.quant.enabled, &layer.name)?;
                let flat = x.reshape(vec![batch, spec.in_features])?;
                let pre = fc_forward(&flat, w, b, spec)?;
                ensure_finite(&pre, &layer.name)?;
                let post = activation(&pre, layer, mode.act_rounder(layer, i))?;
                trace.pre_act[i] = Some(pre);
                trace.post_act[i] = Some(post.clone());
                post
            }
            LayerOp::Act => {
                let post = activation(x, layer, mode.act_rounder(layer, i))?;
                trace.pre_act[i] = Some(x.clone());
                trace.post_act[i] = Some(post.clone());
                post
            }
            LayerOp::MaxPool(p) => maxpool_forward(x, p)?,
            LayerOp::Softmax => {
                trace.softmax_tail = true;
                softmax(x)
            }
        };
        trace.outputs.push(out);
    }
    Ok(trace)
}

fn activation<T: Real>(
    pre: &Tensor<T>,
    layer: &LayerDescriptor,
    rounder: Option<Rounder>,
) -> Result<Tensor<T>, InferenceError> {
    let q = match rounder {
        Some(r) => quantize_tensor(pre, layer.quant.act_fmt, r)?,
        None => pre.clone(),
    };
    Ok(if layer.has_relu() { q.relu() } else { q })
}

/// Nonzero activation of a sparse feature map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEntry<T: Real = f32> {
    pub channel: usize,
    pub row: usize,
    pub col: usize,
    pub value: T,
}

/// Coordinate list of the nonzero entries of one `C x H x W` map, sorted by
/// `(channel, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureMap<T: Real = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<SparseEntry<T>>,
}

impl<T: Real> SparseFeatureMap<T> {
    pub fn to_dense(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(vec![1, self.channels, self.height, self.width]);
        let data = t.data_mut();
        for e in &self.entries {
            data[(e.channel * self.height + e.row) * self.width + e.col] = e.value;
        }
        t
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

/// Encodes a `C x H x W` or `1 x C x H x W` tensor.
pub fn to_sparse<T: Real>(t: &Tensor<T>) -> Result<SparseFeatureMap<T>, InferenceError> {
    let s = t.shape();
    let (c, h, w) = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => {
            return Err(InferenceError::Shape(format!(
                "sparse encoding takes a single C x H x W map, got {s:?}"
            )))
        }
    };
    let entries = t
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != T::zero())
        .map(|(i, &value)| SparseEntry {
            channel: i / (h * w),
            row: (i / w) % h,
            col: i % w,
            value,
        })
        .collect();
    Ok(SparseFeatureMap {
        channels: c,
        height: h,
        width: w,
        entries,
    })
}

/// Multiply-accumulate accounting of a zero-skipping convolution. Only taps
/// that land inside the input count; padding is never a MAC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacStats {
    pub total: u64,
    pub executed: u64,
    pub skipped: u64,
}

impl MacStats {
    pub fn skipped_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.skipped as f64 / self.total as f64
        }
    }
}

/// Valid multiply-accumulates of a dense convolution over one image.
pub fn dense_mac_count(g: &ConvGeometry, out_channels: usize) -> u64 {
    let mut taps = 0u64;
    for oy in 0..g.out_height() {
        for ox in 0..g.out_width() {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    taps += g.source(oy, ox, ky, kx).is_some() as u64;
                }
            }
        }
    }
    taps * (g.channels * out_channels) as u64
}

/// Convolution that only visits nonzero activations. Produces exactly the
/// output of [`lp_conv_forward`] on the dense map.
pub fn sparse_conv_forward<T: Real>(
    input: &SparseFeatureMap<T>,
    layer: &LayerState<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, MacStats), InferenceError> {
    let g = conv_geometry(&[1, input.channels, input.height, input.width], spec)?;
    let (w, b) = layer.effective(layer.quant.enabled, "conv")?;
    let (o, k) = (spec.out_channels, spec.kernel);
    check_params(w, b, &[o, spec.in_channels, k, k], o)?;
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let wd = w.data();
    let mut out = vec![T::zero(); o * p];
    let mut executed = 0u64;
    for e in &input.entries {
        for ky in 0..k {
            let Some(ny) = (e.row + g.pad).checked_sub(ky) else { continue };
            if ny % g.stride != 0 || ny / g.stride >= oh {
                continue;
            }
            let oy = ny / g.stride;
            for kx in 0..k {
                let Some(nx) = (e.col + g.pad).checked_sub(kx) else { continue };
                if nx % g.stride != 0 || nx / g.stride >= ow {
                    continue;
                }
                let pos = oy * ow + nx / g.stride;
                let tap = (e.channel * k + ky) * k + kx;
                let patch = g.patch_len();
                for oc in 0..o {
                    out[oc * p + pos] += wd[oc * patch + tap] * e.value;
                }
                executed += o as u64;
            }
        }
    }
    for (row, &bv) in out.chunks_mut(p).zip(b.data()) {
        for v in row {
            *v += bv;
        }
    }
    let total = dense_mac_count(&g, o);
    Ok((
        Tensor::from_parts(vec![1, o, oh, ow], out),
        MacStats {
            total,
            executed,
            skipped: total - executed,
        },
    ))
}
