//! Model container (`LPMC`) and accelerator export (`LPAX`).
//!
//! Both formats are little-endian, versioned and checksummed with CRC-32.
//! Byte layouts are in `docs/formats.md`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{from_code, to_code, FixedPointError, FixedPointFormat};
use crate::inference::{InferenceError, LayerState, Model};
use crate::netdesc::{emit_descriptor, parse_descriptor, LayerKind, LayerOp, NetError};
use crate::profiler::BitAllocation;
use crate::tensor::Tensor;
use crate::training::DualCopyParam;

pub const CONTAINER_MAGIC: &[u8; 4] = b"LPMC";
pub const CONTAINER_VERSION: u16 = 1;
pub const EXPORT_MAGIC: &[u8; 4] = b"LPAX";
pub const EXPORT_VERSION: u16 = 1;
pub const EXPORT_CODE_BITS: u8 = 16;

const FLAG_QUANTIZED_CACHES: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("file truncated")]
    Truncated,
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {found} (this build reads {supported})")]
    Version { found: u16, supported: u16 },
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("blob {name}: {msg}")]
    Blob { name: String, msg: String },
    #[error("layer {layer}: {msg}")]
    Export { layer: String, msg: String },
    #[error("layer {layer}: {source}")]
    Code {
        layer: String,
        #[source]
        source: FixedPointError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ModelIoError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Splits off and verifies the trailing whole-file CRC.
fn verify_trailer<'a>(bytes: &'a [u8], magic: &[u8; 4], name: &'static str) -> Result<&'a [u8], ModelIoError> {
    if bytes.len() < 8 {
        return Err(ModelIoError::Truncated);
    }
    if &bytes[..4] != magic {
        return Err(ModelIoError::BadMagic { expected: name });
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(ModelIoError::Checksum("file".into()));
    }
    Ok(body)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u16,
    descriptor: String,
    provenance: BTreeMap<String, String>,
}

fn push_blob(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let start = out.len();
    out.extend_from_slice(&((t.len() * 4) as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Section sizes of an encoded file, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// Everything before the first blob or layer record.
    pub header: usize,
    /// All blob or layer records.
    pub blobs: usize,
    pub trailer: usize,
}

fn blob_list(model: &Model<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut blobs = Vec::new();
    for (i, state) in model.layers().iter().enumerate() {
        let Some(s) = state else { continue };
        blobs.push((format!("{i}.weight"), s.weights.shadow()));
        blobs.push((format!("{i}.bias"), s.bias.shadow()));
        if let Some(q) = s.weights.quantized() {
            blobs.push((format!("{i}.weight.q"), q));
        }
        if let Some(q) = s.bias.quantized() {
            blobs.push((format!("{i}.bias.q"), q));
        }
    }
    blobs
}

/// Serializes a model as `LPMC` v1: shadow parameters, cached quantized
/// copies when present, descriptor and provenance.
pub fn encode_model(model: &Model<f32>) -> Vec<u8> {
    encode_model_layout(model).0
}

fn encode_model_layout(model: &Model<f32>) -> (Vec<u8>, Layout) {
    let manifest = Manifest {
        format: "LPMC".into(),
        version: CONTAINER_VERSION,
        descriptor: emit_descriptor(model.net()),
        provenance: model.provenance.clone(),
    };
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
    let blobs = blob_list(model);
    let cached = blobs.iter().any(|(n, _)| n.ends_with(".q"));
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(if cached { FLAG_QUANTIZED_CACHES } else { 0 }).to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    let header = out.len();
    for (name, t) in &blobs {
        push_blob(&mut out, name, t);
    }
    let blob_bytes = out.len() - header;
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    (
        out,
        Layout {
            header,
            blobs: blob_bytes,
            trailer: 4,
        },
    )
}

pub fn container_layout(model: &Model<f32>) -> Layout {
    encode_model_layout(model).1
}

fn read_blob(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>), ModelIoError> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| ModelIoError::Manifest("blob name is not UTF-8".into()))?
        .to_string();
    let blob_err = |msg: String| ModelIoError::Blob { name: name.clone(), msg };
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let start = r.pos;
    let byte_len = r.u32()? as usize;
    let elems = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    if elems.and_then(|e| e.checked_mul(4)) != Some(byte_len) {
        return Err(blob_err(format!("shape {shape:?} does not match {byte_len} bytes")));
    }
    let raw = r.take(byte_len)?;
    let stored = r.u32()?;
    if crc32fast::hash(&r.bytes[start..start + 4 + byte_len]) != stored {
        return Err(ModelIoError::Checksum(format!("blob {name}")));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| blob_err(e.to_string()))?;
    Ok((name, t))
}

pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>, ModelIoError> {
    let body = verify_trailer(bytes, CONTAINER_MAGIC, "LPMC")?;
    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u16()?;
    if version != CONTAINER_VERSION {
        return Err(ModelIoError::Version {
            found: version,
            supported: CONTAINER_VERSION,
        });
    }
    let _flags = r.u16()?;
    let manifest_len = r.u32()? as usize;
    let manifest: Manifest =
        serde_json::from_slice(r.take(manifest_len)?).map_err(|e| ModelIoError::Manifest(e.to_string()))?;
    if manifest.format != "LPMC" || manifest.version != version {
        return Err(ModelIoError::Manifest(format!(
            "manifest declares {} v{}",
            manifest.format, manifest.version
        )));
    }
    let net = parse_descriptor(&manifest.descriptor)?;
    let count = r.u32()? as usize;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_blob(&mut r)?;
        if blobs.insert(name.clone(), t).is_some() {
            return Err(ModelIoError::Blob { name, msg: "duplicate".into() });
        }
    }
    if !r.done() {
        return Err(ModelIoError::Manifest("trailing bytes after the last blob".into()));
    }
    let mut layers = Vec::with_capacity(net.len());
    for (i, desc) in net.layers().iter().enumerate() {
        if !desc.has_weights() {
            layers.push(None);
            continue;
        }
        let mut take = |suffix: &str| blobs.remove(&format!("{i}.{suffix}"));
        let missing = |what: &str| ModelIoError::Blob {
            name: format!("{i}.{what}"),
            msg: format!("missing for layer {}", desc.name),
        };
        let w = take("weight").ok_or_else(|| missing("weight"))?;
        let b = take("bias").ok_or_else(|| missing("bias"))?;
        let (wq, bq) = (take("weight.q"), take("bias.q"));
        for (q, shadow, name) in [(&wq, &w, "weight.q"), (&bq, &b, "bias.q")] {
            if q.as_ref().is_some_and(|q| q.shape() != shadow.shape()) {
                return Err(ModelIoError::Blob {
                    name: format!("{i}.{name}"),
                    msg: "shape differs from its shadow".into(),
                });
            }
        }
        layers.push(Some(LayerState {
            weights: DualCopyParam::from_parts(w, wq),
            bias: DualCopyParam::from_parts(b, bq),
            quant: desc.quant,
        }));
    }
    if let Some(name) = blobs.keys().next() {
        return Err(ModelIoError::Blob {
            name: name.clone(),
            msg: "does not belong to any layer".into(),
        });
    }
    let mut model = Model::from_layers(net, layers)?;
    model.provenance = manifest.provenance;
    Ok(model)
}

pub fn save_model(model: &Model<f32>, path: impl AsRef<Path>) -> Result<(), ModelIoError> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>, ModelIoError> {
    decode_model(&std::fs::read(path)?)
}

/// One layer of an accelerator export.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportLayer {
    pub kind: LayerKind,
    pub relu: bool,
    pub quantized: bool,
    /// Channels (conv) or features (FC); zero for other kinds.
    pub in_size: u32,
    pub out_size: u32,
    pub kernel: u16,
    pub stride: u16,
    pub pad: u16,
    pub pool_window: u16,
    pub pool_stride: u16,
    pub weight_fmt: Option<FixedPointFormat>,
    pub bias_fmt: Option<FixedPointFormat>,
    pub act_fmt: Option<FixedPointFormat>,
    pub weight_codes: Vec<i16>,
    pub bias_codes: Vec<i16>,
}

impl ExportLayer {
    pub fn weights(&self) -> Vec<f64> {
        decode_codes(&self.weight_codes, self.weight_fmt)
    }

    pub fn bias(&self) -> Vec<f64> {
        decode_codes(&self.bias_codes, self.bias_fmt)
    }
}

fn decode_codes(codes: &[i16], fmt: Option<FixedPointFormat>) -> Vec<f64> {
    match fmt {
        Some(f) => codes
            .iter()
            .map(|&c| from_code(c as i64, f).expect("16-bit codes fit 16-bit formats"))
            .collect(),
        None => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceleratorExport {
    pub code_bits: u8,
    pub input_scale: f64,
    pub input_shape: Vec<u32>,
    pub layers: Vec<ExportLayer>,
}

fn kind_code(k: LayerKind) -> u8 {
    match k {
        LayerKind::Input => 0,
        LayerKind::LPConvolution => 1,
        LayerKind::LPInnerProduct => 2,
        LayerKind::LPAct => 3,
        LayerKind::MaxPool => 4,
        LayerKind::Softmax => 5,
    }
}

fn kind_from_code(c: u8) -> Option<LayerKind> {
    Some(match c {
        0 => LayerKind::Input,
        1 => LayerKind::LPConvolution,
        2 => LayerKind::LPInnerProduct,
        3 => LayerKind::LPAct,
        4 => LayerKind::MaxPool,
        5 => LayerKind::Softmax,
        _ => return None,
    })
}

fn check_export_fmt(layer: &str, what: &str, f: FixedPointFormat) -> Result<(), ModelIoError> {
    if f.total_bits() != EXPORT_CODE_BITS as u32 || !f.is_signed() {
        return Err(ModelIoError::Export {
            layer: layer.into(),
            msg: format!("{what} format {f} is not a signed {EXPORT_CODE_BITS}-bit format"),
        });
    }
    Ok(())
}

fn codes(layer: &str, t: &Tensor<f32>, fmt: FixedPointFormat) -> Result<Vec<i16>, ModelIoError> {
    t.data()
        .iter()
        .map(|&v| {
            to_code(v as f64, fmt)
                .map(|c| c as i16)
                .map_err(|source| ModelIoError::Code { layer: layer.into(), source })
        })
        .collect()
}

/// Builds the integer export of a quantized model. Weights and biases are
/// taken from the quantized copies (the shadows for layers with quantization
/// off) and must lie on their format's grid; nothing is re-rounded.
pub fn build_export(model: &Model<f32>) -> Result<AcceleratorExport, ModelIoError> {
    let net = model.net();
    let mut layers = Vec::with_capacity(net.len());
    for (i, desc) in net.layers().iter().enumerate() {
        let mut l = ExportLayer {
            kind: desc.kind(),
            relu: desc.has_relu(),
            quantized: desc.quant.enabled,
            in_size: 0,
            out_size: 0,
            kernel: 0,
            stride: 0,
            pad: 0,
            pool_window: 0,
            pool_stride: 0,
            weight_fmt: None,
            bias_fmt: None,
            act_fmt: None,
            weight_codes: Vec::new(),
            bias_codes: Vec::new(),
        };
        let narrow = |v: usize| {
            u16::try_from(v).map_err(|_| ModelIoError::Export {
                layer: desc.name.clone(),
                msg: format!("{v} does not fit the 16-bit geometry field"),
            })
        };
        match &desc.op {
            LayerOp::Input { shape } => l.in_size = shape[0] as u32,
            LayerOp::Conv(c) => {
                l.in_size = c.in_channels as u32;
                l.out_size = c.out_channels as u32;
                l.kernel = narrow(c.kernel)?;
                l.stride = narrow(c.stride)?;
                l.pad = narrow(c.pad)?;
                if let Some(p) = c.pool {
                    l.pool_window = narrow(p.window)?;
                    l.pool_stride = narrow(p.stride)?;
                }
            }
            LayerOp::InnerProduct(f) => {
                l.in_size = f.in_features as u32;
                l.out_size = f.out_features as u32;
            }
            LayerOp::MaxPool(p) => {
                l.pool_window = narrow(p.window)?;
                l.pool_stride = narrow(p.stride)?;
            }
            LayerOp::Act | LayerOp::Softmax => {}
        }
        if matches!(desc.op, LayerOp::Conv(_) | LayerOp::InnerProduct(_) | LayerOp::Act) {
            l.act_fmt = Some(desc.quant.act_fmt);
        }
        if let Some(state) = model.layer(i) {
            let (wf, bf) = (desc.quant.weight_fmt, desc.quant.bias_format());
            check_export_fmt(&desc.name, "weight", wf)?;
            check_export_fmt(&desc.name, "bias", bf)?;
            let (w, b) = state.effective(desc.quant.enabled, &desc.name)?;
            l.weight_codes = codes(&desc.name, w, wf)?;
            l.bias_codes = codes(&desc.name, b, bf)?;
            l.weight_fmt = Some(wf);
            l.bias_fmt = Some(bf);
        }
        layers.push(l);
    }
    Ok(AcceleratorExport {
        code_bits: EXPORT_CODE_BITS,
        input_scale: net.input_scale(),
        input_shape: net.input_shape().iter().map(|&d| d as u32).collect(),
        layers,
    })
}

/// Like [`build_export`], after checking that every layer's formats are the
/// ones `alloc` assigned.
pub fn build_export_checked(model: &Model<f32>, alloc: &BitAllocation) -> Result<AcceleratorExport, ModelIoError> {
    for a in &alloc.layers {
        let ok = a.index < model.net().len() && {
            let q = model.net().layer(a.index).quant;
            q.enabled && q.act_fmt == a.act_fmt && a.weight_fmt.is_none_or(|w| q.weight_fmt == w)
        };
        if !ok {
            return Err(ModelIoError::Export {
                layer: a.name.clone(),
                msg: "model is not quantized under the given allocation".into(),
            });
        }
    }
    build_export(model)
}

fn fmt_bytes(f: Option<FixedPointFormat>) -> [u8; 2] {
    f.map_or([0, 0], |f| [f.bd() as u8, f.ad() as u8])
}

pub fn encode_export(x: &AcceleratorExport) -> Vec<u8> {
    encode_export_layout(x).0
}

fn encode_export_layout(x: &AcceleratorExport) -> (Vec<u8>, Layout) {
    let mut out = Vec::new();
    out.extend_from_slice(EXPORT_MAGIC);
    out.extend_from_slice(&EXPORT_VERSION.to_le_bytes());
    out.push(x.code_bits);
    out.push(x.input_shape.len() as u8);
    out.extend_from_slice(&x.input_scale.to_le_bytes());
    for &d in &x.input_shape {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(x.layers.len() as u32).to_le_bytes());
    let header = out.len();
    for l in &x.layers {
        out.push(kind_code(l.kind));
        out.push(l.relu as u8 | (l.quantized as u8) << 1);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&l.in_size.to_le_bytes());
        out.extend_from_slice(&l.out_size.to_le_bytes());
        for v in [l.kernel, l.stride, l.pad, l.pool_window, l.pool_stride] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&fmt_bytes(l.weight_fmt));
        out.extend_from_slice(&fmt_bytes(l.bias_fmt));
        out.extend_from_slice(&fmt_bytes(l.act_fmt));
        out.push(l.act_fmt.is_some_and(|f| f.is_signed()) as u8);
        out.push(0);
        for codes in [&l.weight_codes, &l.bias_codes] {
            out.extend_from_slice(&(codes.len() as u32).to_le_bytes());
            for c in codes.iter() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    let blobs = out.len() - header;
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    (out, Layout { header, blobs, trailer: 4 })
}

pub fn export_layout(x: &AcceleratorExport) -> Layout {
    encode_export_layout(x).1
}

fn read_fmt(r: &mut Reader<'_>, signed: bool, what: &str) -> Result<Option<FixedPointFormat>, ModelIoError> {
    let (bd, ad) = (r.u8()?, r.u8()?);
    if bd == 0 && ad == 0 {
        return Ok(None);
    }
    FixedPointFormat::new(bd as u32, ad as u32, signed)
        .map(Some)
        .map_err(|e| ModelIoError::Manifest(format!("{what} format: {e}")))
}

pub fn decode_export(bytes: &[u8]) -> Result<AcceleratorExport, ModelIoError> {
    let body = verify_trailer(bytes, EXPORT_MAGIC, "LPAX")?;
    let mut r = Reader::new(body);
    r.take(4)?;
    let version = r.u16()?;
    if version != EXPORT_VERSION {
        return Err(ModelIoError::Version {
            found: version,
            supported: EXPORT_VERSION,
        });
    }
    let code_bits = r.u8()?;
    if code_bits != EXPORT_CODE_BITS {
        return Err(ModelIoError::Manifest(format!("{code_bits}-bit codes are not supported")));
    }
    let ndim = r.u8()? as usize;
    let input_scale = r.f64()?;
    if !(input_scale.is_finite() && input_scale > 0.0) {
        return Err(ModelIoError::Manifest(format!("input scale {input_scale} must be positive")));
    }
    let input_shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let count = r.u32()? as usize;
    let mut layers = Vec::new();
    for idx in 0..count {
        let kind = kind_from_code(r.u8()?).ok_or_else(|| ModelIoError::Manifest(format!("record {idx}: unknown layer kind")))?;
        let flags = r.u8()?;
        let reserved = r.u16()?;
        if flags & !3 != 0 || reserved != 0 {
            return Err(ModelIoError::Manifest(format!("record {idx}: unknown flags or nonzero reserved bits")));
        }
        let in_size = r.u32()?;
        let out_size = r.u32()?;
        let mut geo = [0u16; 5];
        for g in &mut geo {
            *g = r.u16()?;
        }
        let weight_fmt = read_fmt(&mut r, true, "weight")?;
        let bias_fmt = read_fmt(&mut r, true, "bias")?;
        let (abd, aad) = (r.u8()?, r.u8()?);
        let a_signed = r.u8()?;
        let reserved = r.u8()?;
        if a_signed > 1 || reserved != 0 || (abd == 0 && aad == 0 && a_signed != 0) {
            return Err(ModelIoError::Manifest(format!("record {idx}: malformed activation format bytes")));
        }
        let a_signed = a_signed == 1;
        let act_fmt = if abd == 0 && aad == 0 {
            None
        } else {
            Some(
                FixedPointFormat::new(abd as u32, aad as u32, a_signed)
                    .map_err(|e| ModelIoError::Manifest(format!("activation format: {e}")))?,
            )
        };
        let mut read_codes = |fmt: Option<FixedPointFormat>, what: &str| -> Result<Vec<i16>, ModelIoError> {
            let n = r.u32()? as usize;
            if n > 0 && fmt.is_none_or(|f| f.total_bits() != code_bits as u32) {
                return Err(ModelIoError::Manifest(format!("record {idx}: {what} codes without a 16-bit format")));
            }
            let raw = r.take(n.checked_mul(2).ok_or(ModelIoError::Truncated)?)?;
            Ok(raw.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect())
        };
        let weight_codes = read_codes(weight_fmt, "weight")?;
        let bias_codes = read_codes(bias_fmt, "bias")?;
        layers.push(ExportLayer {
            kind,
            relu: flags & 1 != 0,
            quantized: flags & 2 != 0,
            in_size,
            out_size,
            kernel: geo[0],
            stride: geo[1],
            pad: geo[2],
            pool_window: geo[3],
            pool_stride: geo[4],
            weight_fmt,
            bias_fmt,
            act_fmt,
            weight_codes,
            bias_codes,
        });
    }
    if !r.done() {
        return Err(ModelIoError::Manifest("trailing bytes after the last record".into()));
    }
    Ok(AcceleratorExport {
        code_bits,
        input_scale,
        input_shape,
        layers,
    })
}

/// Checks that the decoded weights equal the tensors the model's forward
/// pass uses, element for element.
pub fn verify_export(x: &AcceleratorExport, model: &Model<f32>) -> Result<(), ModelIoError> {
    let net = model.net();
    if x.layers.len() != net.len() {
        return Err(ModelIoError::Manifest(format!(
            "export has {} layers, model {}",
            x.layers.len(),
            net.len()
        )));
    }
    for (i, (l, desc)) in x.layers.iter().zip(net.layers()).enumerate() {
        let mismatch = |msg: &str| ModelIoError::Export {
            layer: desc.name.clone(),
            msg: msg.into(),
        };
        if l.kind != desc.kind() {
            return Err(mismatch("layer kind differs"));
        }
        let Some(state) = model.layer(i) else { continue };
        let (w, b) = state.effective(desc.quant.enabled, &desc.name)?;
        let same = |decoded: Vec<f64>, t: &Tensor<f32>| {
            decoded.len() == t.len() && decoded.iter().zip(t.data()).all(|(&d, &v)| d == v as f64)
        };
        if !same(l.weights(), w) || !same(l.bias(), b) {
            return Err(mismatch("decoded parameters differ from the model"));
        }
    }
    Ok(())
}

pub fn export_accelerator(model: &Model<f32>, alloc: &BitAllocation, path: impl AsRef<Path>) -> Result<(), ModelIoError> {
    let x = build_export_checked(model, alloc)?;
    let bytes = encode_export(&x);
    verify_export(&decode_export(&bytes)?, model)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
