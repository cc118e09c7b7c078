//! Backpropagation and dual-copy fine-tuning.
//!
//! Every parameter keeps a full-precision shadow that gradients update and a
//! quantized copy that the forward pass reads. Gradients are computed at full
//! precision with the quantizers treated as identity (straight-through), and
//! the quantized copies are re-derived from the shadows after every step.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::fixedpoint::{quantize_tensor, FixedPointError, FixedPointFormat, Rounder, RoundingScheme, StreamKey};
use crate::inference::{forward, ActRounding, ForwardMode, ForwardTrace, InferenceError, Model};
use crate::netdesc::{ConvSpec, LayerDescriptor, LayerOp, NetDescriptor, NetError, PoolSpec};
use crate::tensor::{col2im, im2col, matmul_into, sparsity, ConvGeometry, Real, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    FixedPoint(#[from] FixedPointError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: String },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("forward trace is missing cached activations for layer {0}")]
    MissingCache(String),
    #[error("{0}")]
    Config(String),
    #[error("history i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("history record: {0}")]
    Json(#[from] serde_json::Error),
}

/// Shadow (full precision, trained) and quantized (forward) copies of one
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCopyParam<T: Real = f32> {
    shadow: Tensor<T>,
    quantized: Option<Tensor<T>>,
}

impl<T: Real> DualCopyParam<T> {
    pub fn new(shadow: Tensor<T>) -> Self {
        Self {
            shadow,
            quantized: None,
        }
    }

    pub(crate) fn from_parts(shadow: Tensor<T>, quantized: Option<Tensor<T>>) -> Self {
        Self { shadow, quantized }
    }

    pub fn shadow(&self) -> &Tensor<T> {
        &self.shadow
    }

    /// `None` until the first refresh and after every shadow update.
    pub fn quantized(&self) -> Option<&Tensor<T>> {
        self.quantized.as_ref()
    }

    pub fn is_fresh(&self) -> bool {
        self.quantized.is_some()
    }

    pub fn refresh(&mut self, fmt: FixedPointFormat, rounder: Rounder) -> Result<(), FixedPointError> {
        self.quantized = Some(quantize_tensor(&self.shadow, fmt, rounder)?);
        Ok(())
    }

    /// Edits the shadow in place and drops the now stale quantized copy.
    pub fn update_shadow(&mut self, f: impl FnOnce(&mut [T])) {
        f(self.shadow.data_mut());
        self.quantized = None;
    }

    pub fn cast<U: Real>(&self) -> DualCopyParam<U> {
        DualCopyParam {
            shadow: self.shadow.cast(),
            quantized: self.quantized.as_ref().map(|q| q.cast()),
        }
    }
}

/// Glorot uniform in `+-sqrt(6 / (fan_in + fan_out))`. `None` for layers
/// without weights.
pub fn init_weights<T: Real, R: Rng + ?Sized>(layer: &LayerDescriptor, rng: &mut R) -> Option<Tensor<T>> {
    let (fan_in, fan_out) = layer.fans()?;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let shape = layer.weight_shape()?;
    Some(Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound))))
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>), TrainError> {
    let n = labels.len();
    if n == 0 || logits.shape().first() != Some(&n) {
        return Err(TrainError::Config(format!(
            "{} labels for logits {:?}",
            n,
            logits.shape()
        )));
    }
    let k = logits.len() / n;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    let inv_n = T::from_f64(1.0 / n as f64);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        if label >= k {
            return Err(TrainError::Config(format!("label {label} out of {k} classes")));
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        loss += (z.ln() - (row[label] - m)).as_f64();
        for (j, ev) in e.into_iter().enumerate() {
            let p = ev / z;
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((loss / n as f64, Tensor::from_parts(logits.shape().to_vec(), grad)))
}

/// Gradients of one convolution: `(d input, d weights, d bias)`.
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
    need_input_grad: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let g = ConvGeometry {
        channels: s[1],
        height: s[2],
        width: s[3],
        kernel: spec.kernel,
        stride: spec.stride,
        pad: spec.pad,
    };
    let (o, k, p) = (spec.out_channels, g.patch_len(), g.positions());
    let mut dw = vec![T::zero(); o * k];
    let mut db = vec![T::zero(); o];
    let mut dx = vec![T::zero(); if need_input_grad { input.len() } else { 0 }];
    // weights transposed once: (k x o)
    let mut wt = vec![T::zero(); k * o];
    for oc in 0..o {
        for j in 0..k {
            wt[j * o + oc] = weights.data()[oc * k + j];
        }
    }
    let image = g.channels * g.height * g.width;
    for n in 0..s[0] {
        let dy = grad_out.outer(n);
        let cols = im2col(input.outer(n), &g);
        // dW += dY (o x p) * cols^T (p x k)
        for oc in 0..o {
            let dyrow = &dy[oc * p..(oc + 1) * p];
            db[oc] += dyrow.iter().copied().sum();
            for j in 0..k {
                let crow = &cols[j * p..(j + 1) * p];
                let mut acc = T::zero();
                for (&a, &b) in dyrow.iter().zip(crow) {
                    acc += a * b;
                }
                dw[oc * k + j] += acc;
            }
        }
        if need_input_grad {
            let mut dcols = vec![T::zero(); k * p];
            matmul_into(&wt, dy, &mut dcols, k, o, p);
            let img = col2im(&dcols, &g);
            dx[n * image..(n + 1) * image].copy_from_slice(&img);
        }
    }
    (
        Tensor::from_parts(if need_input_grad { s.to_vec() } else { vec![0] }, dx),
        Tensor::from_parts(weights.shape().to_vec(), dw),
        Tensor::from_parts(vec![o], db),
    )
}

/// Gradients of `y = x W^T + b` for `x: N x F`.
pub fn fc_backward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (o, f) = (weights.shape()[0], weights.shape()[1]);
    let n = grad_out.shape()[0];
    let mut dx = vec![T::zero(); n * f];
    let mut dw = vec![T::zero(); o * f];
    let mut db = vec![T::zero(); o];
    for s in 0..n {
        let x = &input.data()[s * f..(s + 1) * f];
        let dy = &grad_out.data()[s * o..(s + 1) * o];
        let dxs = &mut dx[s * f..(s + 1) * f];
        for (oc, &g) in dy.iter().enumerate() {
            db[oc] += g;
            let wrow = &weights.data()[oc * f..(oc + 1) * f];
            let dwrow = &mut dw[oc * f..(oc + 1) * f];
            for i in 0..f {
                dwrow[i] += g * x[i];
                dxs[i] += g * wrow[i];
            }
        }
    }
    (
        Tensor::from_parts(vec![n, f], dx),
        Tensor::from_parts(weights.shape().to_vec(), dw),
        Tensor::from_parts(vec![o], db),
    )
}

/// Routes each window's gradient to its first maximal input.
pub fn maxpool_backward<T: Real>(input: &Tensor<T>, pool: &PoolSpec, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let mut dx = vec![T::zero(); input.len()];
    for (plane, (src, dst)) in input
        .data()
        .chunks(h * w)
        .zip(dx.chunks_mut(h * w))
        .enumerate()
    {
        let dy = &grad_out.data()[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut arg = 0;
                for dy_ in 0..pool.window {
                    for dx_ in 0..pool.window {
                        let idx = (oy * pool.stride + dy_) * w + ox * pool.stride + dx_;
                        if src[idx] > best {
                            best = src[idx];
                            arg = idx;
                        }
                    }
                }
                dst[arg] += dy[oy * ow + ox];
            }
        }
    }
    Tensor::from_parts(s.to_vec(), dx)
}

/// Straight-through activation gradient: the quantizer passes gradients
/// unchanged and ReLU masks where its output is zero.
pub fn act_backward<T: Real>(post: &Tensor<T>, grad_out: &Tensor<T>, relu: bool) -> Tensor<T> {
    if !relu {
        return grad_out.clone();
    }
    let data = post
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(grad_out.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T: Real = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-layer parameter gradients, aligned with the descriptor's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real = f32> {
    pub layers: Vec<Option<ParamGrad<T>>>,
}

/// Loss and shadow-parameter gradients for a batch whose forward trace is
/// given. The weights used for the input gradients are the ones the forward
/// pass read.
pub fn backward<T: Real>(
    model: &Model<T>,
    trace: &ForwardTrace<T>,
    labels: &[usize],
    mode: ForwardMode,
) -> Result<(f64, Gradients<T>), TrainError> {
    let net = model.net();
    if trace.outputs.len() != net.len() {
        return Err(TrainError::MissingCache(format!(
            "trace has {} layers, network {}",
            trace.outputs.len(),
            net.len()
        )));
    }
    let (loss, mut grad) = softmax_cross_entropy(trace.logits(), labels)?;
    let mut grads: Vec<Option<ParamGrad<T>>> = vec![None; net.len()];
    let quantized_weights = !matches!(mode, ForwardMode::Float);
    for i in (1..net.len()).rev() {
        let layer = net.layer(i);
        let input = &trace.outputs[i - 1];
        let need_input_grad = i > 1;
        let post = || {
            trace.post_act[i]
                .as_ref()
                .ok_or_else(|| TrainError::MissingCache(layer.name.clone()))
        };
        match &layer.op {
            LayerOp::Input { .. } => unreachable!("Input is layer 0"),
            LayerOp::Softmax => {}
            LayerOp::Conv(spec) => {
                let post = post()?;
                if let Some(p) = &spec.pool {
                    grad = maxpool_backward(post, p, &grad);
                }
                grad = act_backward(post, &grad, spec.relu);
                let state = model.layer(i).expect("weighted layer");
                let (w, _) = state.effective(quantized_weights && state.quant.enabled, &layer.name)?;
                let (dx, dw, db) = conv_backward(input, w, &grad, spec, need_input_grad);
                grads[i] = Some(ParamGrad { weights: dw, bias: db });
                grad = dx;
            }
            LayerOp::InnerProduct(spec) => {
                grad = act_backward(post()?, &grad, spec.relu);
                let state = model.layer(i).expect("weighted layer");
                let (w, _) = state.effective(quantized_weights && state.quant.enabled, &layer.name)?;
                let flat = input.reshape(vec![input.shape()[0], spec.in_features]).map_err(InferenceError::from)?;
                let (dx, dw, db) = fc_backward(&flat, w, &grad);
                grads[i] = Some(ParamGrad { weights: dw, bias: db });
                grad = dx.reshape(input.shape().to_vec()).map_err(InferenceError::from)?;
            }
            LayerOp::Act => grad = act_backward(post()?, &grad, true),
            LayerOp::MaxPool(p) => grad = maxpool_backward(input, p, &grad),
        }
    }
    Ok((loss, Gradients { layers: grads }))
}

fn check_grads<T: Real>(model: &Model<T>, grads: &Gradients<T>) -> Result<(), TrainError> {
    for (i, g) in grads.layers.iter().enumerate() {
        if let Some(g) = g {
            if g.weights.check_finite().is_err() || g.bias.check_finite().is_err() {
                return Err(TrainError::NonFiniteGradient {
                    layer: model.net().layer(i).name.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Plain SGD on the shadow copies: `shadow -= lr * grad`. Quantized copies
/// become stale and must be refreshed before the next forward pass.
pub fn sgd_step<T: Real>(model: &mut Model<T>, grads: &Gradients<T>, lr: f64) -> Result<(), TrainError> {
    Sgd::new(0.0).step(model, grads, lr)
}

/// SGD with optional momentum: `v = mu v + g; shadow -= lr v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T: Real = f32> {
    momentum: f64,
    velocity: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>, lr: f64) -> Result<(), TrainError> {
        check_grads(model, grads)?;
        if self.velocity.len() != grads.layers.len() {
            self.velocity = vec![None; grads.layers.len()];
        }
        let (mu, lr) = (T::from_f64(self.momentum), T::from_f64(lr));
        for (i, g) in grads.layers.iter().enumerate() {
            let Some(g) = g else { continue };
            let state = model
                .layer_mut(i)
                .ok_or_else(|| TrainError::Config(format!("gradient for parameterless layer {i}")))?;
            let vel = self.velocity[i].get_or_insert_with(|| (vec![T::zero(); g.weights.len()], vec![T::zero(); g.bias.len()]));
            for (param, grad, v) in [
                (&mut state.weights, &g.weights, &mut vel.0),
                (&mut state.bias, &g.bias, &mut vel.1),
            ] {
                if param.shadow().shape() != grad.shape() {
                    return Err(TrainError::Config(format!(
                        "layer {i}: gradient {:?} for parameter {:?}",
                        grad.shape(),
                        param.shadow().shape()
                    )));
                }
                param.update_shadow(|w| {
                    for ((w, &g), v) in w.iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                        *v = mu * *v + g;
                        *w = *w - lr * *v;
                    }
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Divides the learning rate whenever any layer is quantized.
    pub lr_divisor: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Overrides every layer's rounding scheme when set.
    pub scheme: Option<RoundingScheme>,
    /// Overrides the descriptor's input scale when set.
    pub input_scale: Option<f64>,
    /// Stop after this many epochs without `min_improvement` accuracy gain.
    pub patience: usize,
    pub min_improvement: f64,
    /// Stop once evaluation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            lr_divisor: 10.0,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            scheme: None,
            input_scale: None,
            patience: 3,
            min_improvement: 0.001,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.lr_divisor.is_finite() && self.lr_divisor >= 1.0) {
            return Err(TrainError::Config(format!("learning-rate divisor {} must be >= 1", self.lr_divisor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_lr(&self, net: &NetDescriptor) -> f64 {
        if net.any_quantized() {
            self.learning_rate / self.lr_divisor
        } else {
            self.learning_rate
        }
    }

    /// Applies the scheme and input-scale overrides.
    pub fn apply(&self, net: &NetDescriptor) -> Result<NetDescriptor, TrainError> {
        let mut net = match self.scheme {
            Some(s) => net.map_layers(|_, l| l.quant.scheme = s)?,
            None => net.clone(),
        };
        if let Some(scale) = self.input_scale {
            net = net.with_input_scale(scale)?;
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub index: usize,
    pub name: String,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_sparsity: f64,
    pub layer_sparsity: Vec<LayerSparsity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochBudget,
    Plateau,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl History {
    /// One JSON object per line, one line per epoch.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<EpochRecord>, TrainError> {
        let mut out = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.accuracy)
    }
}

/// Accuracy, loss and per-layer post-activation sparsity over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub layer_sparsity: Vec<LayerSparsity>,
    pub warnings: Vec<String>,
}

impl Evaluation {
    pub fn mean_sparsity(&self) -> f64 {
        if self.layer_sparsity.is_empty() {
            return 0.0;
        }
        self.layer_sparsity.iter().map(|l| l.sparsity).sum::<f64>() / self.layer_sparsity.len() as f64
    }
}

/// Layers whose outputs pass through ReLU; sparsity is measured there.
pub fn relu_layers(net: &NetDescriptor) -> Vec<usize> {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.has_relu())
        .map(|(i, _)| i)
        .collect()
}

pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    mode: ForwardMode,
    batch_size: usize,
) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("evaluation set is empty".into()));
    }
    let relu = relu_layers(model.net());
    let mut zeros = vec![0usize; relu.len()];
    let mut totals = vec![0usize; relu.len()];
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    let mut warnings = Vec::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let trace = forward(model, &x, mode)?;
        for w in &trace.warnings {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        let logits = trace.logits();
        let (loss, _) = softmax_cross_entropy(logits, &labels)?;
        loss_sum += loss * labels.len() as f64;
        let k = logits.len() / labels.len();
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (best == label) as usize;
        }
        for (slot, &li) in relu.iter().enumerate() {
            let post = trace.post_act[li].as_ref().expect("relu layers record activations");
            let s = sparsity(post, 0.0).map_err(InferenceError::from)?;
            zeros[slot] += s.zero_count;
            totals[slot] += s.total_count;
        }
    }
    let layer_sparsity = relu
        .iter()
        .enumerate()
        .map(|(slot, &li)| LayerSparsity {
            index: li,
            name: model.net().layer(li).name.clone(),
            sparsity: zeros[slot] as f64 / totals[slot] as f64,
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        layer_sparsity,
        warnings,
    })
}

/// Forward mode used for evaluating a model: quantized layers round
/// activations to nearest.
pub fn eval_mode(net: &NetDescriptor) -> ForwardMode {
    if net.any_quantized() {
        ForwardMode::Quantized(ActRounding::Deterministic)
    } else {
        ForwardMode::Float
    }
}

/// One optimizer step on a batch: quantized forward, straight-through
/// backward, shadow update, refresh. Returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    key: StreamKey,
) -> Result<f64, TrainError> {
    let mode = if model.net().any_quantized() {
        ForwardMode::Quantized(ActRounding::Configured(key.substream(0)))
    } else {
        ForwardMode::Float
    };
    let trace = forward(model, x, mode)?;
    let (loss, grads) = backward(model, &trace, labels, mode)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    opt.step(model, &grads, lr)?;
    model.refresh(key.substream(1))?;
    Ok(loss)
}

pub enum Init<T: Real = f32> {
    /// Start from existing (typically float-trained) weights.
    Pretrained(Model<T>),
    /// Glorot initialization seeded from the training seed.
    Random,
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains `net` from `init` on `train`, evaluating on `eval` after every
/// epoch. Stops at the epoch budget, on an accuracy plateau, or when the
/// target accuracy is reached.
pub fn finetune<T: Real>(
    net: &NetDescriptor,
    init: Init<T>,
    train: &Dataset<T>,
    eval: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, History), TrainError> {
    cfg.validate()?;
    let net = cfg.apply(net)?;
    if train.sample_shape() != net.input_shape() {
        return Err(TrainError::Config(format!(
            "training samples {:?} do not match network input {:?}",
            train.sample_shape(),
            net.input_shape()
        )));
    }
    let root = StreamKey::new(cfg.seed);
    let mut model = match init {
        Init::Random => Model::init(net.clone(), cfg.seed)?,
        Init::Pretrained(m) if m.net() == &net => m,
        Init::Pretrained(m) => {
            let mut m = m.with_net(net.clone())?;
            m.refresh(root)?;
            m
        }
    };
    if !model.is_fresh() {
        model.refresh(root)?;
    }
    let mut history = History {
        records: Vec::new(),
        stop: StopReason::EpochBudget,
    };
    if cfg.epochs == 0 {
        return Ok((model, history));
    }

    let lr = cfg.effective_lr(&net);
    let mut opt = Sgd::new(cfg.momentum);
    let mut step = 0usize;
    let mut best = f64::NEG_INFINITY;
    let mut stale_epochs = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch(batch);
            let loss = train_step(&mut model, &mut opt, &x, &labels, lr, root.substream(step as u64 + 1))?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss });
            }
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let ev = evaluate(&model, eval, eval_mode(&net), 256)?;
        history.records.push(EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            accuracy: ev.accuracy,
            mean_sparsity: ev.mean_sparsity(),
            layer_sparsity: ev.layer_sparsity,
            warnings: ev.warnings,
        });
        if cfg.target_accuracy.is_some_and(|t| ev.accuracy >= t) {
            history.stop = StopReason::TargetReached;
            break;
        }
        if ev.accuracy >= best + cfg.min_improvement {
            best = ev.accuracy;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if cfg.patience > 0 && stale_epochs >= cfg.patience {
                history.stop = StopReason::Plateau;
                break;
            }
        }
    }
    Ok((model, history))
}

/// Descends `(q - target)^2` for a single stored low-precision parameter
/// whose value is re-rounded after every step, so updates smaller than half
/// a grid step are lost under deterministic rounding. Returns the loss after
/// each step.
pub fn single_parameter_descent(
    start: f64,
    target: f64,
    lr: f64,
    steps: usize,
    fmt: FixedPointFormat,
    rounder: Rounder,
) -> Result<Vec<f64>, FixedPointError> {
    let mut q = crate::fixedpoint::quantize_det(start, fmt)?;
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let updated = q - lr * 2.0 * (q - target);
        q = crate::fixedpoint::quantize_scalar(updated, fmt, rounder, s as u64)?;
        losses.push((q - target).powi(2));
    }
    Ok(losses)
}
