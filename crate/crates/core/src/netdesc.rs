//! Network descriptors: layer list, per-layer quantization settings, shape
//! inference, operation counting and the text format.
//!
//! Descriptor text is line oriented. Header keys come first, then one
//! `[layer]` stanza per layer with `key = value` lines. `#` starts a
//! comment. See `docs/descriptor.md` for the full grammar.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::fixedpoint::{FixedPointFormat, RoundingScheme};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("layer {index} ({name}): {msg}")]
    Invalid {
        index: usize,
        name: String,
        msg: String,
    },
    #[error("network: {0}")]
    Network(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    LPConvolution,
    LPInnerProduct,
    LPAct,
    MaxPool,
    Softmax,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::LPConvolution => "LPConvolution",
            LayerKind::LPInnerProduct => "LPInnerProduct",
            LayerKind::LPAct => "LPAct",
            LayerKind::MaxPool => "MaxPool",
            LayerKind::Softmax => "Softmax",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Input" => LayerKind::Input,
            "LPConvolution" => LayerKind::LPConvolution,
            "LPInnerProduct" => LayerKind::LPInnerProduct,
            "LPAct" => LayerKind::LPAct,
            "MaxPool" => LayerKind::MaxPool,
            "Softmax" => LayerKind::Softmax,
            _ => return None,
        })
    }
}

/// Quantization settings of one layer. The bias uses the weight format
/// unless `bias_fmt` overrides it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    pub weight_fmt: FixedPointFormat,
    pub act_fmt: FixedPointFormat,
    pub bias_fmt: Option<FixedPointFormat>,
    pub scheme: RoundingScheme,
    pub enabled: bool,
}

impl QuantSpec {
    pub fn new(weight_fmt: FixedPointFormat, act_fmt: FixedPointFormat, scheme: RoundingScheme) -> Self {
        Self {
            weight_fmt,
            act_fmt,
            bias_fmt: None,
            scheme,
            enabled: true,
        }
    }

    /// Quantization off; the formats are the usual 16-bit defaults so that
    /// switching it on later has something sensible to use.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn bias_format(&self) -> FixedPointFormat {
        self.bias_fmt.unwrap_or(self.weight_fmt)
    }
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self::new(
            FixedPointFormat::signed(2, 14).expect("Q2.14"),
            FixedPointFormat::signed(8, 8).expect("Q8.8"),
            RoundingScheme::Deterministic,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn new(window: usize, stride: usize) -> Self {
        Self { window, stride }
    }

    pub fn out_size(&self, n: usize) -> Option<usize> {
        (n >= self.window).then(|| (n - self.window) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
    pub pool: Option<PoolSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerOp {
    /// Per-sample shape, `[C, H, W]` or `[F]`.
    Input { shape: Vec<usize> },
    /// Convolution followed by activation quantization, optional ReLU and
    /// optional max pooling.
    Conv(ConvSpec),
    /// Fully connected layer; flattens its input.
    InnerProduct(FcSpec),
    /// Standalone activation quantization followed by ReLU.
    Act,
    MaxPool(PoolSpec),
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDescriptor {
    pub name: String,
    pub op: LayerOp,
    pub quant: QuantSpec,
}

impl LayerDescriptor {
    pub fn new(name: impl Into<String>, op: LayerOp) -> Self {
        Self {
            name: name.into(),
            op,
            quant: QuantSpec::disabled(),
        }
    }

    pub fn with_quant(mut self, quant: QuantSpec) -> Self {
        self.quant = quant;
        self
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            LayerOp::Input { .. } => LayerKind::Input,
            LayerOp::Conv(_) => LayerKind::LPConvolution,
            LayerOp::InnerProduct(_) => LayerKind::LPInnerProduct,
            LayerOp::Act => LayerKind::LPAct,
            LayerOp::MaxPool(_) => LayerKind::MaxPool,
            LayerOp::Softmax => LayerKind::Softmax,
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self.op, LayerOp::Conv(_) | LayerOp::InnerProduct(_))
    }

    /// Whether the layer emits quantized activations (LPAct stage).
    pub fn quantizes_activations(&self) -> bool {
        self.quant.enabled && matches!(self.op, LayerOp::Conv(_) | LayerOp::InnerProduct(_) | LayerOp::Act)
    }

    /// Whether the layer ends in a ReLU.
    pub fn has_relu(&self) -> bool {
        match self.op {
            LayerOp::Conv(c) => c.relu,
            LayerOp::InnerProduct(f) => f.relu,
            LayerOp::Act => true,
            _ => false,
        }
    }

    /// Weight tensor shape, `(out, in, k, k)` or `(out, in)`.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.op {
            LayerOp::Conv(c) => Some(vec![c.out_channels, c.in_channels, c.kernel, c.kernel]),
            LayerOp::InnerProduct(f) => Some(vec![f.out_features, f.in_features]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match self.op {
            LayerOp::Conv(c) => Some(c.out_channels),
            LayerOp::InnerProduct(f) => Some(f.out_features),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` for weight initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match self.op {
            LayerOp::Conv(c) => {
                let area = c.kernel * c.kernel;
                Some((c.in_channels * area, c.out_channels * area))
            }
            LayerOp::InnerProduct(f) => Some((f.in_features, f.out_features)),
            _ => None,
        }
    }
}

/// A validated network: one `Input` first, shapes composing layer to layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetDescriptor {
    layers: Vec<LayerDescriptor>,
    input_scale: f64,
    mixed_bits: bool,
    shapes: Vec<LayerShapes>,
}

/// Per-sample shapes around one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShapes {
    pub input: Vec<usize>,
    /// Output of the conv/FC arithmetic, before pooling.
    pub pre_pool: Vec<usize>,
    pub output: Vec<usize>,
}

impl NetDescriptor {
    pub fn new(layers: Vec<LayerDescriptor>, input_scale: f64) -> Result<Self, NetError> {
        Self::with_options(layers, input_scale, false)
    }

    /// `mixed_bits` allows different total bit counts per layer.
    pub fn with_options(
        layers: Vec<LayerDescriptor>,
        input_scale: f64,
        mixed_bits: bool,
    ) -> Result<Self, NetError> {
        if !(input_scale.is_finite() && input_scale > 0.0) {
            return Err(NetError::Network(format!(
                "input scale must be positive and finite, got {input_scale}"
            )));
        }
        let shapes = infer_shapes(&layers)?;
        if !mixed_bits {
            check_uniform_bits(&layers)?;
        }
        Ok(Self {
            layers,
            input_scale,
            mixed_bits,
            shapes,
        })
    }

    pub fn layers(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &LayerDescriptor {
        &self.layers[index]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn mixed_bits(&self) -> bool {
        self.mixed_bits
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0].output
    }

    pub fn shapes(&self, index: usize) -> &LayerShapes {
        &self.shapes[index]
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.shapes.last().expect("validated net is non-empty").output
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Indices and descriptors of layers with weights.
    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &LayerDescriptor)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.has_weights())
    }

    /// Rebuilds the descriptor after editing layers in place.
    pub fn map_layers(
        &self,
        mut f: impl FnMut(usize, &mut LayerDescriptor),
    ) -> Result<Self, NetError> {
        let mut layers = self.layers.clone();
        for (i, l) in layers.iter_mut().enumerate() {
            f(i, l);
        }
        Self::with_options(layers, self.input_scale, self.mixed_bits)
    }

    pub fn with_input_scale(&self, input_scale: f64) -> Result<Self, NetError> {
        Self::with_options(self.layers.clone(), input_scale, self.mixed_bits)
    }

    /// Same layer structure, ignoring names and quantization settings.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.op == b.op)
    }

    pub fn any_quantized(&self) -> bool {
        self.layers.iter().any(|l| l.quant.enabled)
    }
}

fn invalid(index: usize, layer: &LayerDescriptor, msg: impl Into<String>) -> NetError {
    NetError::Invalid {
        index,
        name: layer.name.clone(),
        msg: msg.into(),
    }
}

fn infer_shapes(layers: &[LayerDescriptor]) -> Result<Vec<LayerShapes>, NetError> {
    let mut shapes: Vec<LayerShapes> = Vec::with_capacity(layers.len());
    let Some(first) = layers.first() else {
        return Err(NetError::Network("no layers".into()));
    };
    if first.kind() != LayerKind::Input {
        return Err(invalid(0, first, "first layer must be Input"));
    }
    for (i, layer) in layers.iter().enumerate() {
        let name_ok = !layer.name.is_empty()
            && layer.name.trim() == layer.name
            && !layer.name.contains(['#', '\n', '\r', '[']);
        if !name_ok {
            return Err(invalid(i, layer, "names must be non-empty, trimmed and free of '#', '[' and line breaks"));
        }
        let input = shapes.last().map(|s| s.output.clone()).unwrap_or_default();
        let (pre_pool, output) = match &layer.op {
            LayerOp::Input { shape } => {
                if i != 0 {
                    return Err(invalid(i, layer, "Input may only appear first"));
                }
                if !(shape.len() == 1 || shape.len() == 3) || shape.contains(&0) {
                    return Err(invalid(i, layer, format!("input shape {shape:?} must be CxHxW or F with nonzero dims")));
                }
                (shape.clone(), shape.clone())
            }
            LayerOp::Conv(c) => {
                if c.kernel == 0 || c.stride == 0 || c.in_channels == 0 || c.out_channels == 0 {
                    return Err(invalid(i, layer, "kernel, stride and channel counts must be >= 1"));
                }
                if input.len() != 3 {
                    return Err(invalid(i, layer, format!("convolution needs a CxHxW input, got {input:?}")));
                }
                if input[0] != c.in_channels {
                    return Err(invalid(
                        i,
                        layer,
                        format!("expects {} input channels, previous layer produces {}", c.in_channels, input[0]),
                    ));
                }
                let (h, w) = (input[1] + 2 * c.pad, input[2] + 2 * c.pad);
                if h < c.kernel || w < c.kernel {
                    return Err(invalid(i, layer, format!("kernel {} exceeds padded input {h}x{w}", c.kernel)));
                }
                let pre = vec![c.out_channels, (h - c.kernel) / c.stride + 1, (w - c.kernel) / c.stride + 1];
                let out = match c.pool {
                    Some(p) => pool_shape(i, layer, &pre, p)?,
                    None => pre.clone(),
                };
                (pre, out)
            }
            LayerOp::InnerProduct(f) => {
                if f.in_features == 0 || f.out_features == 0 {
                    return Err(invalid(i, layer, "feature counts must be >= 1"));
                }
                let flat: usize = input.iter().product();
                if flat != f.in_features {
                    return Err(invalid(
                        i,
                        layer,
                        format!("expects {} inputs, previous layer produces {input:?} = {flat}", f.in_features),
                    ));
                }
                (vec![f.out_features], vec![f.out_features])
            }
            LayerOp::Act => (input.clone(), input.clone()),
            LayerOp::MaxPool(p) => {
                if input.len() != 3 {
                    return Err(invalid(i, layer, format!("pooling needs a CxHxW input, got {input:?}")));
                }
                (input.clone(), pool_shape(i, layer, &input, *p)?)
            }
            LayerOp::Softmax => {
                if i + 1 != layers.len() {
                    return Err(invalid(i, layer, "Softmax must be the last layer"));
                }
                if input.len() != 1 {
                    return Err(invalid(i, layer, format!("Softmax needs a flat input, got {input:?}")));
                }
                (input.clone(), input.clone())
            }
        };
        shapes.push(LayerShapes {
            input,
            pre_pool,
            output,
        });
    }
    Ok(shapes)
}

fn pool_shape(i: usize, layer: &LayerDescriptor, input: &[usize], p: PoolSpec) -> Result<Vec<usize>, NetError> {
    if p.window == 0 || p.stride == 0 {
        return Err(invalid(i, layer, "pool window and stride must be >= 1"));
    }
    match (p.out_size(input[1]), p.out_size(input[2])) {
        (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
        _ => Err(invalid(
            i,
            layer,
            format!("pool window {} exceeds {}x{}", p.window, input[1], input[2]),
        )),
    }
}

fn check_uniform_bits(layers: &[LayerDescriptor]) -> Result<(), NetError> {
    let mut budget: Option<(u32, usize)> = None;
    for (i, l) in layers.iter().enumerate() {
        if !l.quant.enabled {
            continue;
        }
        let mut fmts = vec![l.quant.act_fmt];
        if l.has_weights() {
            fmts.push(l.quant.weight_fmt);
        }
        for f in fmts {
            match budget {
                None => budget = Some((f.total_bits(), i)),
                Some((bits, first)) if bits != f.total_bits() => {
                    return Err(invalid(
                        i,
                        l,
                        format!(
                            "{f} has {} bits but layer {first} uses {bits}; set mixed_bits = true for per-layer budgets",
                            f.total_bits()
                        ),
                    ))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Arithmetic operations per frame, one multiply-accumulate counted as two.
pub fn count_ops(net: &NetDescriptor) -> u64 {
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l.op {
            LayerOp::Conv(c) => {
                let pre = &net.shapes[i].pre_pool;
                2 * (c.out_channels * c.in_channels * c.kernel * c.kernel * pre[1] * pre[2]) as u64
            }
            LayerOp::InnerProduct(f) => 2 * (f.in_features * f.out_features) as u64,
            _ => 0,
        })
        .sum()
}

/// Weight plus bias element count.
pub fn count_params(net: &NetDescriptor) -> u64 {
    net.layers
        .iter()
        .filter_map(|l| Some(l.weight_shape()?.iter().product::<usize>() + l.bias_len()?))
        .map(|n| n as u64)
        .sum()
}

/// The 13-layer benchmark network with its stated ~1 GOp/frame budget.
///
/// Paddings are chosen so every tabulated input size composes: 112 -> 7x7
/// pad 1 -> 108 -> pool 54, 54 -> 7x7 pad 0 -> 48 -> pool 24, then 5x5 and
/// 3x3 layers with pad 1. Layer 11's pooling is a global 18x18 max so the
/// first FC layer sees 128 features.
pub fn build_giga1net() -> NetDescriptor {
    let quant = QuantSpec::default();
    let half = Some(PoolSpec::new(2, 2));
    // (in, out, k, pad, pool)
    let convs: [(usize, usize, usize, usize, Option<PoolSpec>); 11] = [
        (3, 16, 1, 0, half),
        (16, 16, 7, 1, half),
        (16, 32, 7, 0, half),
        (32, 64, 5, 1, None),
        (64, 64, 5, 1, None),
        (64, 64, 5, 1, None),
        (64, 128, 3, 1, None),
        (128, 128, 3, 1, None),
        (128, 128, 3, 1, None),
        (128, 128, 3, 1, None),
        (128, 128, 3, 1, Some(PoolSpec::new(18, 18))),
    ];
    let mut layers = vec![LayerDescriptor::new("data", LayerOp::Input { shape: vec![3, 224, 224] })];
    for (i, (cin, cout, k, pad, pool)) in convs.into_iter().enumerate() {
        layers.push(
            LayerDescriptor::new(
                format!("conv{}", i + 1),
                LayerOp::Conv(ConvSpec {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: k,
                    stride: 1,
                    pad,
                    relu: true,
                    pool,
                }),
            )
            .with_quant(quant),
        );
    }
    layers.push(
        LayerDescriptor::new(
            "fc12",
            LayerOp::InnerProduct(FcSpec {
                in_features: 128,
                out_features: 4096,
                relu: true,
            }),
        )
        .with_quant(quant),
    );
    layers.push(
        LayerDescriptor::new(
            "fc13",
            LayerOp::InnerProduct(FcSpec {
                in_features: 4096,
                out_features: 1000,
                relu: false,
            }),
        )
        .with_quant(quant),
    );
    layers.push(LayerDescriptor::new("prob", LayerOp::Softmax));
    NetDescriptor::new(layers, 1.0).expect("benchmark network is consistent")
}

fn fmt_pool(p: Option<PoolSpec>) -> String {
    match p {
        Some(p) => format!("{}/{}", p.window, p.stride),
        None => "none".into(),
    }
}

/// Canonical text form; `parse_descriptor(&emit_descriptor(n)) == n`.
pub fn emit_descriptor(net: &NetDescriptor) -> String {
    let mut out = String::new();
    out.push_str("# lowprec network descriptor v1\n");
    let _ = writeln!(out, "input_scale = {}", net.input_scale);
    let _ = writeln!(out, "mixed_bits = {}", net.mixed_bits);
    for l in &net.layers {
        out.push_str("\n[layer]\n");
        let _ = writeln!(out, "name = {}", l.name);
        let _ = writeln!(out, "kind = {}", l.kind().as_str());
        match &l.op {
            LayerOp::Input { shape } => {
                let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
                let _ = writeln!(out, "shape = {}", dims.join("x"));
            }
            LayerOp::Conv(c) => {
                let _ = writeln!(out, "in = {}", c.in_channels);
                let _ = writeln!(out, "out = {}", c.out_channels);
                let _ = writeln!(out, "k = {}", c.kernel);
                let _ = writeln!(out, "stride = {}", c.stride);
                let _ = writeln!(out, "pad = {}", c.pad);
                let _ = writeln!(out, "pool = {}", fmt_pool(c.pool));
                let _ = writeln!(out, "relu = {}", c.relu);
            }
            LayerOp::InnerProduct(f) => {
                let _ = writeln!(out, "in = {}", f.in_features);
                let _ = writeln!(out, "out = {}", f.out_features);
                let _ = writeln!(out, "relu = {}", f.relu);
            }
            LayerOp::MaxPool(p) => {
                let _ = writeln!(out, "pool = {}", fmt_pool(Some(*p)));
            }
            LayerOp::Act | LayerOp::Softmax => {}
        }
        if matches!(l.op, LayerOp::Conv(_) | LayerOp::InnerProduct(_) | LayerOp::Act) {
            let q = &l.quant;
            let _ = writeln!(out, "quant = {}", if q.enabled { "on" } else { "off" });
            if l.has_weights() {
                let _ = writeln!(out, "wfmt = {}", q.weight_fmt);
                if let Some(b) = q.bias_fmt {
                    let _ = writeln!(out, "bfmt = {b}");
                }
            }
            let _ = writeln!(out, "afmt = {}", q.act_fmt);
            let _ = writeln!(out, "scheme = {}", q.scheme);
        }
    }
    out
}

struct Stanza {
    line: usize,
    entries: BTreeMap<String, (usize, String)>,
}

impl Stanza {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<(usize, String), NetError> {
        self.take(key).ok_or_else(|| NetError::Parse {
            line: self.line,
            msg: format!("missing key '{key}'"),
        })
    }

    fn count(&mut self, key: &str) -> Result<usize, NetError> {
        let (line, v) = self.required(key)?;
        parse_usize(line, key, &v)
    }

    fn count_or(&mut self, key: &str, default: usize) -> Result<usize, NetError> {
        match self.take(key) {
            Some((line, v)) => parse_usize(line, key, &v),
            None => Ok(default),
        }
    }

    fn flag(&mut self, key: &str, default: bool) -> Result<bool, NetError> {
        match self.take(key) {
            Some((line, v)) => parse_bool(line, key, &v),
            None => Ok(default),
        }
    }
}

fn parse_usize(line: usize, key: &str, v: &str) -> Result<usize, NetError> {
    v.parse().map_err(|_| NetError::Parse {
        line,
        msg: format!("'{key}' expects a non-negative integer, got {v:?}"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, NetError> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(NetError::Parse {
            line,
            msg: format!("'{key}' expects true/false, got {v:?}"),
        }),
    }
}

fn parse_fmt(line: usize, key: &str, v: &str) -> Result<FixedPointFormat, NetError> {
    v.parse().map_err(|e| NetError::Parse {
        line,
        msg: format!("'{key}': {e}"),
    })
}

fn parse_pool(line: usize, v: &str) -> Result<Option<PoolSpec>, NetError> {
    if v == "none" {
        return Ok(None);
    }
    let bad = || NetError::Parse {
        line,
        msg: format!("'pool' expects <window>/<stride> or none, got {v:?}"),
    };
    let (w, s) = v.split_once('/').ok_or_else(bad)?;
    let window = w.parse().map_err(|_| bad())?;
    let stride = s.parse().map_err(|_| bad())?;
    Ok(Some(PoolSpec::new(window, stride)))
}

fn parse_quant(st: &mut Stanza, weighted: bool) -> Result<QuantSpec, NetError> {
    let mut q = QuantSpec::disabled();
    q.enabled = st.flag("quant", false)?;
    if weighted {
        if let Some((line, v)) = st.take("wfmt") {
            q.weight_fmt = parse_fmt(line, "wfmt", &v)?;
        }
        if let Some((line, v)) = st.take("bfmt") {
            q.bias_fmt = Some(parse_fmt(line, "bfmt", &v)?);
        }
    }
    if let Some((line, v)) = st.take("afmt") {
        q.act_fmt = parse_fmt(line, "afmt", &v)?;
    }
    if let Some((line, v)) = st.take("scheme") {
        q.scheme = v.parse().map_err(|e| NetError::Parse {
            line,
            msg: format!("'scheme': {e}"),
        })?;
    }
    Ok(q)
}

fn build_layer(index: usize, mut st: Stanza) -> Result<LayerDescriptor, NetError> {
    let (kind_line, kind_str) = st.required("kind")?;
    let kind = LayerKind::parse(&kind_str).ok_or_else(|| NetError::Parse {
        line: kind_line,
        msg: format!("unknown layer kind {kind_str:?}"),
    })?;
    let name = st
        .take("name")
        .map(|(_, v)| v)
        .unwrap_or_else(|| format!("layer{index}"));
    let (op, quant) = match kind {
        LayerKind::Input => {
            let (line, v) = st.required("shape")?;
            let shape = v
                .split('x')
                .map(|d| parse_usize(line, "shape", d))
                .collect::<Result<Vec<_>, _>>()?;
            (LayerOp::Input { shape }, QuantSpec::disabled())
        }
        LayerKind::LPConvolution => {
            let (line, pool) = st.take("pool").unwrap_or((st.line, "none".into()));
            let spec = ConvSpec {
                in_channels: st.count("in")?,
                out_channels: st.count("out")?,
                kernel: st.count("k")?,
                stride: st.count_or("stride", 1)?,
                pad: st.count_or("pad", 0)?,
                relu: st.flag("relu", false)?,
                pool: parse_pool(line, &pool)?,
            };
            (LayerOp::Conv(spec), parse_quant(&mut st, true)?)
        }
        LayerKind::LPInnerProduct => {
            let spec = FcSpec {
                in_features: st.count("in")?,
                out_features: st.count("out")?,
                relu: st.flag("relu", false)?,
            };
            (LayerOp::InnerProduct(spec), parse_quant(&mut st, true)?)
        }
        LayerKind::LPAct => (LayerOp::Act, parse_quant(&mut st, false)?),
        LayerKind::MaxPool => {
            let (line, v) = st.required("pool")?;
            let pool = parse_pool(line, &v)?.ok_or_else(|| NetError::Parse {
                line,
                msg: "MaxPool needs a window".into(),
            })?;
            (LayerOp::MaxPool(pool), QuantSpec::disabled())
        }
        LayerKind::Softmax => (LayerOp::Softmax, QuantSpec::disabled()),
    };
    if let Some((key, (line, _))) = st.entries.into_iter().next() {
        return Err(NetError::Parse {
            line,
            msg: format!("key '{key}' is not valid for {}", kind.as_str()),
        });
    }
    Ok(LayerDescriptor { name, op, quant })
}

pub fn parse_descriptor(text: &str) -> Result<NetDescriptor, NetError> {
    let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut stanzas: Vec<Stanza> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content == "[layer]" {
            stanzas.push(Stanza {
                line,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| NetError::Parse {
            line,
            msg: format!("expected 'key = value' or '[layer]', got {content:?}"),
        })?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if key.is_empty() || value.is_empty() {
            return Err(NetError::Parse {
                line,
                msg: "empty key or value".into(),
            });
        }
        let target = match stanzas.last_mut() {
            Some(st) => &mut st.entries,
            None => &mut header,
        };
        if target.insert(key.clone(), (line, value)).is_some() {
            return Err(NetError::Parse {
                line,
                msg: format!("duplicate key '{key}'"),
            });
        }
    }

    let input_scale = match header.remove("input_scale") {
        Some((line, v)) => v.parse::<f64>().map_err(|_| NetError::Parse {
            line,
            msg: format!("'input_scale' expects a number, got {v:?}"),
        })?,
        None => 1.0,
    };
    let mixed_bits = match header.remove("mixed_bits") {
        Some((line, v)) => parse_bool(line, "mixed_bits", &v)?,
        None => false,
    };
    if let Some((key, (line, _))) = header.into_iter().next() {
        return Err(NetError::Parse {
            line,
            msg: format!("unknown header key '{key}'"),
        });
    }

    let layers = stanzas
        .into_iter()
        .enumerate()
        .map(|(i, st)| build_layer(i, st))
        .collect::<Result<Vec<_>, _>>()?;
    NetDescriptor::with_options(layers, input_scale, mixed_bits)
}
