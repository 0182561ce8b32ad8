//! Perceptual and contextual losses, their attention-weighted variants and
//! the `alpha`-weighted combinations with the pixel l2 loss.
//!
//! Feature stacks are `(M, H, W)`. `x` is always the restored/distorted
//! image's stack and `y` the ground truth's. The attention map is computed
//! from the ground truth only and broadcast over all `M` channels.

use rayon::prelude::*;

use crate::csf::{generate_map_with, resize_map, AttentionMap, MapParams};
use crate::error::{Error, Result};
use crate::features::{adapt_channels, forward, FeatureStack, WeightBundle};
use crate::image::PlanarImage;
use crate::tensor::Tensor;

/// Largest spatial side fed to the contextual loss; larger stacks are
/// center-cropped (the loss is quadratic in `H * W`).
pub const CX_MAX_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    /// `1 - cos` of feature vectors centered on the mean of `y`.
    #[default]
    Cosine,
    /// Squared Euclidean distance of raw feature vectors.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub cx_bandwidth_h: f64,
    pub cx_epsilon: f64,
    pub distance_kind: DistanceKind,
}

impl LossConfig {
    pub const DEFAULT_ALPHA: f64 = 0.5;
    pub const DEFAULT_H: f64 = 0.5;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(alpha: f64, cx_bandwidth_h: f64, cx_epsilon: f64, distance_kind: DistanceKind) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if !(cx_bandwidth_h > 0.0 && cx_bandwidth_h.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth h must be positive, got {cx_bandwidth_h}")));
        }
        if !(cx_epsilon > 0.0 && cx_epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {cx_epsilon}")));
        }
        Ok(Self { alpha, cx_bandwidth_h, cx_epsilon, distance_kind })
    }

    pub fn with_alpha(self, alpha: f64) -> Result<Self> {
        Self::new(alpha, self.cx_bandwidth_h, self.cx_epsilon, self.distance_kind)
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
            cx_bandwidth_h: Self::DEFAULT_H,
            cx_epsilon: Self::DEFAULT_EPSILON,
            distance_kind: DistanceKind::Cosine,
        }
    }
}

/// Which feature loss enters the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    P,
    PAtt,
    Cx,
    CxAtt,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::P, LossKind::PAtt, LossKind::Cx, LossKind::CxAtt];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::P => "p",
            LossKind::PAtt => "p_att",
            LossKind::Cx => "cx",
            LossKind::CxAtt => "cx_att",
        }
    }

    pub fn is_attentive(&self) -> bool {
        matches!(self, LossKind::PAtt | LossKind::CxAtt)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss kind `{s}` (p, p_att, cx, cx_att)")))
    }
}

fn check_same_shape(x: &FeatureStack, y: &FeatureStack) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::DimMismatch(format!("feature stacks {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

fn check_map(x: &FeatureStack, map: &AttentionMap) -> Result<()> {
    let (_, h, w) = x.shape();
    if (map.height(), map.width()) != (h, w) {
        return Err(Error::DimMismatch(format!(
            "attention map {}x{} vs feature maps {h}x{w}",
            map.height(),
            map.width()
        )));
    }
    Ok(())
}

/// Mean squared error over every pixel and channel.
pub fn l2_loss(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::DimMismatch(format!("images {:?} vs {:?}", a.tensor().dims(), b.tensor().dims())));
    }
    let sum: f64 = a.tensor().data().iter().zip(b.tensor().data()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(sum / a.tensor().len() as f64)
}

/// Mean squared feature difference, normalized by `M * H * W`.
pub fn perceptual_loss(x: &FeatureStack, y: &FeatureStack) -> Result<f64> {
    check_same_shape(x, y)?;
    let sum: f64 = x.values().iter().zip(y.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.values().len() as f64)
}

/// Perceptual loss with the difference weighted elementwise by `map`.
pub fn attentive_perceptual_loss(x: &FeatureStack, y: &FeatureStack, map: &AttentionMap) -> Result<f64> {
    check_same_shape(x, y)?;
    check_map(x, map)?;
    let mu = map.values();
    let plane = mu.len();
    let sum: f64 = x
        .values()
        .iter()
        .zip(y.values())
        .enumerate()
        .map(|(i, (a, b))| {
            let d = mu[i % plane] * (a - b);
            d * d
        })
        .sum();
    Ok(sum / x.values().len() as f64)
}

/// `map ⊙ stack`, broadcasting the map over channels.
pub fn weight_stack(stack: &FeatureStack, map: &AttentionMap) -> Result<FeatureStack> {
    check_map(stack, map)?;
    let mu = map.values();
    let data =
        stack.values().chunks_exact(mu.len()).flat_map(|plane| plane.iter().zip(mu).map(|(v, m)| v * m)).collect();
    FeatureStack::new(Tensor::new(stack.tensor().dims().to_vec(), data)?, stack.layer_name())
}

/// Position-major copy: `N` rows of `M` channel values.
fn positions(stack: &FeatureStack) -> (Vec<f64>, usize, usize) {
    let (m, h, w) = stack.shape();
    let n = h * w;
    let src = stack.values();
    let mut out = vec![0.0; n * m];
    for c in 0..m {
        for p in 0..n {
            out[p * m + c] = src[c * n + p];
        }
    }
    (out, n, m)
}

/// Pairwise distance rows `d[i][j]` between x positions and y positions.
fn distance_row(kind: DistanceKind, xi: &[f64], ys: &[f64], m: usize, out: &mut [f64]) {
    match kind {
        DistanceKind::Cosine => {
            for (d, yj) in out.iter_mut().zip(ys.chunks_exact(m)) {
                let dot: f64 = xi.iter().zip(yj).map(|(a, b)| a * b).sum();
                *d = (1.0 - dot).max(0.0);
            }
        }
        DistanceKind::L2 => {
            for (d, yj) in out.iter_mut().zip(ys.chunks_exact(m)) {
                *d = xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
    }
}

/// Centers both sets on the mean of `y` and scales each vector to unit
/// length; zero vectors stay zero.
fn cosine_prepare(xs: &mut [f64], ys: &mut [f64], m: usize) {
    let ny = ys.len() / m;
    let mut scratch = Vec::with_capacity(ny);
    let mean: Vec<f64> = (0..m)
        .map(|c| {
            scratch.clear();
            scratch.extend(ys.chunks_exact(m).map(|yj| yj[c]));
            sorted_sum(&mut scratch) / ny as f64
        })
        .collect();
    for v in xs.chunks_exact_mut(m).chain(ys.chunks_exact_mut(m)) {
        v.iter_mut().zip(&mean).for_each(|(a, b)| *a -= b);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|a| *a /= norm);
        }
    }
}

/// Sum in ascending order, so the result does not depend on the order of
/// the positions.
fn sorted_sum(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

/// Contextual loss `-ln( mean_j max_i A_ij )`, where for each `x_i` the
/// affinities `A_ij` are a softmax over `y_j` of `(1 - d_ij / (min_k d_ik + eps)) / h`.
pub fn contextual_loss(x: &FeatureStack, y: &FeatureStack, cfg: &LossConfig) -> Result<f64> {
    let (mx, _, _) = x.shape();
    let (my, _, _) = y.shape();
    if mx != my {
        return Err(Error::DimMismatch(format!("channel counts {mx} vs {my}")));
    }
    let (mut xs, nx, m) = positions(x);
    let (mut ys, ny, _) = positions(y);
    if nx == 0 || ny == 0 || m == 0 {
        return Err(Error::EmptyStack);
    }
    if cfg.distance_kind == DistanceKind::Cosine {
        cosine_prepare(&mut xs, &mut ys, m);
    }
    let (h, eps, kind) = (cfg.cx_bandwidth_h, cfg.cx_epsilon, cfg.distance_kind);
    let best = xs
        .par_chunks(m)
        .fold(
            || (vec![0.0f64; ny], vec![0.0f64; ny], vec![0.0f64; ny]),
            |(mut best, mut row, mut scratch), xi| {
                distance_row(kind, xi, &ys, m, &mut row);
                let dmin = row.iter().copied().fold(f64::INFINITY, f64::min);
                let denom = dmin + eps;
                // logits (1 - d/denom)/h; the row maximum is at dmin
                let top = (1.0 - dmin / denom) / h;
                for d in row.iter_mut() {
                    *d = ((1.0 - *d / denom) / h - top).exp();
                }
                scratch.copy_from_slice(&row);
                let total = sorted_sum(&mut scratch);
                for (b, e) in best.iter_mut().zip(&row) {
                    *b = b.max(e / total);
                }
                (best, row, scratch)
            },
        )
        .map(|(best, _, _)| best)
        .reduce(
            || vec![0.0; ny],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(p, q)| *p = p.max(*q));
                a
            },
        );
    let mut best = best;
    let mean = sorted_sum(&mut best) / ny as f64;
    Ok(-mean.ln() + 0.0)
}

/// Contextual loss of `map ⊙ x` against `map ⊙ y`.
pub fn attentive_contextual_loss(
    x: &FeatureStack,
    y: &FeatureStack,
    map: &AttentionMap,
    cfg: &LossConfig,
) -> Result<f64> {
    check_same_shape(x, y)?;
    contextual_loss(&weight_stack(x, map)?, &weight_stack(y, map)?, cfg)
}

/// Central `side x side` window (or the whole map if smaller) of a stack.
pub fn center_crop_stack(stack: &FeatureStack, side: usize) -> Result<FeatureStack> {
    let (m, h, w) = stack.shape();
    let (ch, cw) = (h.min(side), w.min(side));
    if (ch, cw) == (h, w) {
        return Ok(stack.clone());
    }
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    let mut data = Vec::with_capacity(m * ch * cw);
    for plane in stack.values().chunks_exact(h * w) {
        for y in top..top + ch {
            data.extend_from_slice(&plane[y * w + left..y * w + left + cw]);
        }
    }
    FeatureStack::new(Tensor::new(vec![m, ch, cw], data)?, stack.layer_name())
}

/// Crop of an attention map matching [`center_crop_stack`], renormalized.
pub fn center_crop_map(map: &AttentionMap, side: usize) -> Result<AttentionMap> {
    let (h, w) = (map.height(), map.width());
    let (ch, cw) = (h.min(side), w.min(side));
    if (ch, cw) == (h, w) {
        return Ok(map.clone());
    }
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    let t = Tensor::from_fn_2d(ch, cw, |y, x| map.values()[(top + y) * w + left + x])?;
    AttentionMap::normalize(&t)
}

/// Where the attention map of a loss evaluation comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapSource {
    /// Computed from the ground truth with these parameters, falling back
    /// to a uniform map when the reconstruction is degenerate.
    Csf(MapParams),
    /// `mu = 1` everywhere.
    Uniform,
}

impl Default for MapSource {
    fn default() -> Self {
        MapSource::Csf(MapParams::default())
    }
}

/// Attention map at the ground truth's full resolution, and whether the
/// uniform fallback was taken.
pub fn attention_for(gt: &PlanarImage, source: &MapSource) -> Result<(AttentionMap, bool)> {
    match source {
        MapSource::Uniform => Ok((AttentionMap::uniform(gt.height(), gt.width())?, false)),
        MapSource::Csf(params) => match generate_map_with(gt, params) {
            Ok(map) => Ok((map, false)),
            Err(Error::DegenerateInput(_)) => Ok((AttentionMap::uniform(gt.height(), gt.width())?, true)),
            Err(e) => Err(e),
        },
    }
}

/// Feature stacks of an (output, ground truth) pair at one layer together
/// with the attention map resized to that layer.
#[derive(Debug, Clone)]
pub struct FeaturePair {
    pub x: FeatureStack,
    pub y: FeatureStack,
    pub map: AttentionMap,
    pub fallback: bool,
}

impl FeaturePair {
    pub fn extract(
        gt: &PlanarImage,
        out: &PlanarImage,
        bundle: &WeightBundle,
        layer: &str,
        source: &MapSource,
    ) -> Result<Self> {
        if gt.tensor().dims() != out.tensor().dims() {
            return Err(Error::DimMismatch(format!("images {:?} vs {:?}", gt.tensor().dims(), out.tensor().dims())));
        }
        let (full, fallback) = attention_for(gt, source)?;
        Self::with_map(gt, out, bundle, layer, &full, fallback)
    }

    /// Uses a precomputed full-resolution map of `gt`.
    pub fn with_map(
        gt: &PlanarImage,
        out: &PlanarImage,
        bundle: &WeightBundle,
        layer: &str,
        full_map: &AttentionMap,
        fallback: bool,
    ) -> Result<Self> {
        let y = forward(bundle, &adapt_channels(gt, bundle)?, layer)?;
        let x = forward(bundle, &adapt_channels(out, bundle)?, layer)?;
        let (_, h, w) = y.shape();
        let (map, fallback) = match resize_map(full_map, h, w) {
            Ok(m) => (m, fallback),
            Err(Error::DegenerateInput(_)) => (AttentionMap::uniform(h, w)?, true),
            Err(e) => return Err(e),
        };
        Ok(Self { x, y, map, fallback })
    }

    pub fn perceptual(&self) -> Result<f64> {
        perceptual_loss(&self.x, &self.y)
    }

    pub fn attentive_perceptual(&self) -> Result<f64> {
        attentive_perceptual_loss(&self.x, &self.y, &self.map)
    }

    /// Contextual loss on the central [`CX_MAX_SIDE`] window.
    pub fn contextual(&self, cfg: &LossConfig) -> Result<f64> {
        contextual_loss(&center_crop_stack(&self.x, CX_MAX_SIDE)?, &center_crop_stack(&self.y, CX_MAX_SIDE)?, cfg)
    }

    pub fn attentive_contextual(&self, cfg: &LossConfig) -> Result<f64> {
        let map = center_crop_map(&self.map, CX_MAX_SIDE).or_else(|_| {
            AttentionMap::uniform(self.map.height().min(CX_MAX_SIDE), self.map.width().min(CX_MAX_SIDE))
        })?;
        attentive_contextual_loss(
            &center_crop_stack(&self.x, CX_MAX_SIDE)?,
            &center_crop_stack(&self.y, CX_MAX_SIDE)?,
            &map,
            cfg,
        )
    }

    pub fn loss(&self, kind: LossKind, cfg: &LossConfig) -> Result<f64> {
        match kind {
            LossKind::P => self.perceptual(),
            LossKind::PAtt => self.attentive_perceptual(),
            LossKind::Cx => self.contextual(cfg),
            LossKind::CxAtt => self.attentive_contextual(cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub layer_name: String,
    pub alpha: f64,
    pub kind: LossKind,
    pub l2: f64,
    pub l_p: f64,
    pub l_p_att: f64,
    pub l_cx: f64,
    pub l_cx_att: f64,
    pub combined: f64,
    /// The attention map fell back to `mu = 1`.
    pub fallback: bool,
}

impl LossReport {
    pub const CSV_HEADER: [&'static str; 11] =
        ["image_id", "layer", "alpha", "kind", "l2", "l_p", "l_p_att", "l_cx", "l_cx_att", "combined", "fallback_flag"];

    pub fn csv_record(&self, image_id: &str) -> Vec<String> {
        vec![
            image_id.to_string(),
            self.layer_name.clone(),
            self.alpha.to_string(),
            self.kind.to_string(),
            self.l2.to_string(),
            self.l_p.to_string(),
            self.l_p_att.to_string(),
            self.l_cx.to_string(),
            self.l_cx_att.to_string(),
            self.combined.to_string(),
            u8::from(self.fallback).to_string(),
        ]
    }

    pub fn selected(&self) -> f64 {
        match self.kind {
            LossKind::P => self.l_p,
            LossKind::PAtt => self.l_p_att,
            LossKind::Cx => self.l_cx,
            LossKind::CxAtt => self.l_cx_att,
        }
    }
}

/// Fills a [`LossReport`] for `out` against `gt` with the map computed from
/// `gt` using default map parameters.
pub fn combined_loss(
    gt: &PlanarImage,
    out: &PlanarImage,
    bundle: &WeightBundle,
    layer: &str,
    cfg: &LossConfig,
    kind: LossKind,
) -> Result<LossReport> {
    combined_loss_with(gt, out, bundle, layer, cfg, kind, &MapSource::default())
}

pub fn combined_loss_with(
    gt: &PlanarImage,
    out: &PlanarImage,
    bundle: &WeightBundle,
    layer: &str,
    cfg: &LossConfig,
    kind: LossKind,
    source: &MapSource,
) -> Result<LossReport> {
    let l2 = l2_loss(gt, out)?;
    let pair = FeaturePair::extract(gt, out, bundle, layer, source)?;
    report_from_pair(&pair, l2, layer, cfg, kind)
}

pub fn report_from_pair(
    pair: &FeaturePair,
    l2: f64,
    layer: &str,
    cfg: &LossConfig,
    kind: LossKind,
) -> Result<LossReport> {
    let mut report = LossReport {
        layer_name: layer.to_string(),
        alpha: cfg.alpha,
        kind,
        l2,
        l_p: pair.perceptual()?,
        l_p_att: pair.attentive_perceptual()?,
        l_cx: pair.contextual(cfg)?,
        l_cx_att: pair.attentive_contextual(cfg)?,
        combined: 0.0,
        fallback: pair.fallback,
    };
    report.combined = combine(cfg.alpha, l2, report.selected());
    Ok(report)
}

/// `alpha * l2 + (1 - alpha) * feature_loss`, with the endpoints exact.
pub fn combine(alpha: f64, l2: f64, feature_loss: f64) -> f64 {
    if alpha == 1.0 {
        l2
    } else if alpha == 0.0 {
        feature_loss
    } else {
        alpha * l2 + (1.0 - alpha) * feature_loss
    }
}
