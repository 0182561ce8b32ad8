//! Plain convolutional feature extractor.
//!
//! Networks are loaded from the CNNW container: a flat chain of 2-D
//! convolutions, ReLUs and 2x2 max-pools with a per-channel input
//! normalization. Weights are stored as `f32`; all arithmetic is `f64`.
//!
//! ```text
//! b"CNNW"  u8 version (=1)  u8 input_channels  u16 layer_count
//! 3 x f32 channel means   3 x f32 channel scales   (unused slots zero)
//! per layer:
//!   u8 kind (0 = conv2d, 1 = relu, 2 = maxpool2)  u8 name_len  name (UTF-8)
//!   conv2d only: u16 out_ch  u16 in_ch  u8 kh  u8 kw  u8 stride  u8 padding
//!                f32 weights (out, in, kh, kw)  f32 biases (out)
//! ```
//!
//! Input normalization is `(x - mean[c]) * scale[c]`. Everything is
//! little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PlanarImage;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CNNW";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Relu,
    Maxpool2,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool2 => "maxpool2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out_ch, in_ch, kh, kw)`
    pub weights: Tensor,
    /// `(out_ch,)`
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [out_ch, in_ch, kh, kw] = weights.dims()[..] else {
            return Err(Error::InvalidDims(format!("conv weights must be 4-D, got {:?}", weights.dims())));
        };
        if bias.dims() != [out_ch] {
            return Err(Error::InvalidDims(format!(
                "conv bias {:?} does not match {out_ch} output channels",
                bias.dims()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be at least 1".into()));
        }
        Ok(Self { out_ch, in_ch, kh, kw, stride, padding, weights, bias })
    }

    fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kh || pw < self.kw {
            return Err(Error::InvalidDims(format!(
                "{h}x{w} input (padding {}) is smaller than the {}x{} kernel",
                self.padding, self.kh, self.kw
            )));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    /// Cross-correlation with zero padding over a `(in_ch, h, w)` buffer.
    fn apply(&self, input: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, usize, usize)> {
        let (oh, ow) = self.output_size(h, w)?;
        let (kh, kw, stride, pad) = (self.kh, self.kw, self.stride, self.padding as isize);
        let weights = self.weights.data();
        let bias = self.bias.data();
        let mut out = vec![0.0; self.out_ch * oh * ow];
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, plane)| {
            plane.fill(bias[oc]);
            for ic in 0..self.in_ch {
                let src = &input[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wt = weights[((oc * self.in_ch + ic) * kh + ky) * kw + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        // valid output columns: 0 <= ox*stride + kx - pad < w
                        let off_x = kx as isize - pad;
                        let x_lo = if off_x >= 0 { 0 } else { ((-off_x) as usize).div_ceil(stride) };
                        let x_hi = if (w as isize) - off_x <= 0 {
                            0
                        } else {
                            ((((w as isize) - off_x - 1) as usize) / stride + 1).min(ow)
                        };
                        if x_lo >= x_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let start = (x_lo as isize + off_x) as usize;
                                let n = x_hi - x_lo;
                                for (d, s) in dst[x_lo..x_hi].iter_mut().zip(&row[start..start + n]) {
                                    *d += wt * s;
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    let ix = (ox * stride) as isize + off_x;
                                    dst[ox] += wt * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
        Ok((out, oh, ow))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv2d(Conv2d),
    Relu,
    MaxPool2,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Conv2d(_) => LayerKind::Conv2d,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::MaxPool2 => LayerKind::Maxpool2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, conv: Conv2d) -> Self {
        Self { name: name.into(), op: LayerOp::Conv2d(conv) }
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self { name: name.into(), op: LayerOp::Relu }
    }

    pub fn maxpool(name: impl Into<String>) -> Self {
        Self { name: name.into(), op: LayerOp::MaxPool2 }
    }
}

/// A validated layer chain plus input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    input_channels: usize,
    mean: [f64; 3],
    scale: [f64; 3],
    layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub out_channels: usize,
}

impl WeightBundle {
    pub fn new(input_channels: usize, mean: [f64; 3], scale: [f64; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        if !(1..=3).contains(&input_channels) {
            return Err(Error::Chain(format!("input_channels must be 1..=3, got {input_channels}")));
        }
        let mut names = HashSet::new();
        let mut channels = input_channels;
        for layer in &layers {
            if layer.name.is_empty() || layer.name.len() > 255 {
                return Err(Error::Chain(format!("layer name `{}` must be 1..=255 bytes", layer.name)));
            }
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Chain(format!("duplicate layer name `{}`", layer.name)));
            }
            if let LayerOp::Conv2d(conv) = &layer.op {
                if conv.in_ch != channels {
                    return Err(Error::Chain(format!(
                        "layer `{}` expects {} input channels but the chain carries {channels}",
                        layer.name, conv.in_ch
                    )));
                }
                channels = conv.out_ch;
            }
        }
        Ok(Self { input_channels, mean, scale, layers })
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn mean(&self) -> &[f64; 3] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64; 3] {
        &self.scale
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers.iter().position(|l| l.name == name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Layer names, kinds and output channel counts in execution order.
    pub fn list_layers(&self) -> Vec<LayerInfo> {
        let mut channels = self.input_channels;
        self.layers
            .iter()
            .map(|l| {
                if let LayerOp::Conv2d(c) = &l.op {
                    channels = c.out_ch;
                }
                LayerInfo { name: l.name.clone(), kind: l.op.kind(), out_channels: channels }
            })
            .collect()
    }
}

pub fn list_layers(bundle: &WeightBundle) -> Vec<LayerInfo> {
    bundle.list_layers()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("CNNW: truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::Format("CNNW: tensor too large".into()))?;
        let raw = self.take(bytes)?;
        raw.chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if v.is_finite() {
                    Ok(f64::from(v))
                } else {
                    Err(Error::Format("CNNW: non-finite weight".into()))
                }
            })
            .collect()
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightBundle> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("CNNW: bad magic".into()));
    }
    let version = cur.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("CNNW: unsupported version {version}")));
    }
    let input_channels = cur.u8()? as usize;
    let count = cur.u16()? as usize;
    let stats = cur.f32s(6)?;
    let mean = [stats[0], stats[1], stats[2]];
    let scale = [stats[3], stats[4], stats[5]];
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = cur.u8()?;
        let len = cur.u8()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("CNNW: layer name is not UTF-8".into()))?
            .to_string();
        let op = match kind {
            0 => {
                let out_ch = cur.u16()? as usize;
                let in_ch = cur.u16()? as usize;
                let kh = cur.u8()? as usize;
                let kw = cur.u8()? as usize;
                let stride = cur.u8()? as usize;
                let padding = cur.u8()? as usize;
                if out_ch == 0 || in_ch == 0 || kh == 0 || kw == 0 {
                    return Err(Error::Format(format!("CNNW: layer `{name}` has an empty shape")));
                }
                let weights = Tensor::new(vec![out_ch, in_ch, kh, kw], cur.f32s(out_ch * in_ch * kh * kw)?)?;
                let bias = Tensor::new(vec![out_ch], cur.f32s(out_ch)?)?;
                LayerOp::Conv2d(
                    Conv2d::new(weights, bias, stride, padding).map_err(|e| Error::Format(format!("CNNW: {e}")))?,
                )
            }
            1 => LayerOp::Relu,
            2 => LayerOp::MaxPool2,
            k => return Err(Error::Format(format!("CNNW: unknown layer kind {k}"))),
        };
        layers.push(LayerSpec { name, op });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("CNNW: {} trailing bytes after last layer", bytes.len() - cur.pos)));
    }
    WeightBundle::new(input_channels, mean, scale, layers)
}

pub fn encode_weights(bundle: &WeightBundle) -> Result<Vec<u8>> {
    let narrow = |v: usize, what: &str, max: usize| {
        if v > max {
            Err(Error::InvalidArgument(format!("{what} = {v} does not fit the CNNW field")))
        } else {
            Ok(v)
        }
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(bundle.input_channels as u8);
    out.extend_from_slice(&(narrow(bundle.layers.len(), "layer count", u16::MAX as usize)? as u16).to_le_bytes());
    for v in bundle.mean.iter().chain(&bundle.scale) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for layer in &bundle.layers {
        let kind = match layer.op {
            LayerOp::Conv2d(_) => 0u8,
            LayerOp::Relu => 1,
            LayerOp::MaxPool2 => 2,
        };
        out.push(kind);
        out.push(layer.name.len() as u8);
        out.extend_from_slice(layer.name.as_bytes());
        if let LayerOp::Conv2d(c) = &layer.op {
            out.extend_from_slice(&(narrow(c.out_ch, "out_ch", u16::MAX as usize)? as u16).to_le_bytes());
            out.extend_from_slice(&(narrow(c.in_ch, "in_ch", u16::MAX as usize)? as u16).to_le_bytes());
            for v in [c.kh, c.kw, c.stride, c.padding] {
                out.push(narrow(v, "kernel field", u8::MAX as usize)? as u8);
            }
            for v in c.weights.data().iter().chain(c.bias.data()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightBundle> {
    let path = path.as_ref();
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_weights(bundle: &WeightBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(bundle)?).map_err(|e| Error::io(path, e))
}

/// `M` feature maps of size `H x W` tapped at a named layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    tensor: Tensor,
    layer_name: String,
}

impl FeatureStack {
    pub fn new(tensor: Tensor, layer_name: impl Into<String>) -> Result<Self> {
        tensor.shape3()?;
        Ok(Self { tensor, layer_name: layer_name.into() })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    /// `(M, H, W)`
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.tensor.dims();
        (d[0], d[1], d[2])
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.data()
    }
}

/// Converts an image to the channel count a bundle expects: luma is
/// replicated to RGB, RGB is reduced to luma.
pub fn adapt_channels(img: &PlanarImage, bundle: &WeightBundle) -> Result<PlanarImage> {
    match (img.channels(), bundle.input_channels) {
        (a, b) if a == b => Ok(img.clone()),
        (1, 3) => Ok(img.to_rgb()),
        (3, 1) => Ok(img.to_luma()),
        (a, b) => Err(Error::ChannelMismatch { expected: b, actual: a }),
    }
}

/// Normalizes `img` with the bundle statistics and runs the chain through
/// `layer_name` inclusive.
pub fn forward(bundle: &WeightBundle, img: &PlanarImage, layer_name: &str) -> Result<FeatureStack> {
    if img.channels() != bundle.input_channels {
        return Err(Error::ChannelMismatch { expected: bundle.input_channels, actual: img.channels() });
    }
    let plane = img.height() * img.width();
    let mut data = img.tensor().data().to_vec();
    for (c, chunk) in data.chunks_exact_mut(plane).enumerate() {
        let (m, s) = (bundle.mean[c], bundle.scale[c]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
    }
    let input = Tensor::new(img.tensor().dims().to_vec(), data)?;
    run(bundle, &input, layer_name)
}

/// Runs the chain on an already-normalized `(C, H, W)` tensor.
pub fn run(bundle: &WeightBundle, input: &Tensor, layer_name: &str) -> Result<FeatureStack> {
    let last = bundle.layer_index(layer_name)?;
    let (mut c, mut h, mut w) = input.shape3()?;
    if c != bundle.input_channels {
        return Err(Error::ChannelMismatch { expected: bundle.input_channels, actual: c });
    }
    let mut buf = input.data().to_vec();
    for layer in &bundle.layers[..=last] {
        match &layer.op {
            LayerOp::Conv2d(conv) => {
                let (out, oh, ow) = conv.apply(&buf, h, w)?;
                buf = out;
                (c, h, w) = (conv.out_ch, oh, ow);
            }
            LayerOp::Relu => buf.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerOp::MaxPool2 => {
                let (oh, ow) = (h / 2, w / 2);
                if oh == 0 || ow == 0 {
                    return Err(Error::InvalidDims(format!("layer `{}` cannot pool a {h}x{w} map", layer.name)));
                }
                let mut out = Vec::with_capacity(c * oh * ow);
                for plane in buf.chunks_exact(h * w) {
                    for oy in 0..oh {
                        let r0 = &plane[2 * oy * w..];
                        let r1 = &plane[(2 * oy + 1) * w..];
                        for ox in 0..ow {
                            let x = 2 * ox;
                            out.push(r0[x].max(r0[x + 1]).max(r1[x]).max(r1[x + 1]));
                        }
                    }
                }
                buf = out;
                (h, w) = (oh, ow);
            }
        }
    }
    FeatureStack::new(Tensor::new(vec![c, h, w], buf)?, layer_name)
}

/// Layer entry of an exporter manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub shape: Vec<usize>,
}

/// A reference activation recorded by the exporter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestReference {
    pub image: String,
    pub tap: String,
    pub tnsr: String,
}

/// `manifest.json` written next to an exported CNNW bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub network: String,
    pub taps: Vec<String>,
    pub layer_count: usize,
    pub layers: Vec<ManifestLayer>,
    pub cnnw_sha256: String,
    pub references: Vec<ManifestReference>,
}

impl ExportManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Checks that a loaded bundle has the layer list the manifest records.
    pub fn check_bundle(&self, bundle: &WeightBundle) -> Result<()> {
        let layers = bundle.list_layers();
        if layers.len() != self.layer_count || self.layers.len() != self.layer_count {
            return Err(Error::Format(format!(
                "manifest records {} layers, bundle has {}",
                self.layer_count,
                layers.len()
            )));
        }
        for (info, rec) in layers.iter().zip(&self.layers) {
            if info.name != rec.name || info.kind != rec.kind {
                return Err(Error::Format(format!(
                    "manifest layer `{}` ({}) does not match bundle layer `{}` ({})",
                    rec.name, rec.kind, info.name, info.kind
                )));
            }
        }
        Ok(())
    }
}
