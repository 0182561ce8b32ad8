//! Full-reference fidelity metrics, both computed on luma in `[0, 1]`.

use crate::error::{Error, Result};
use crate::image::PlanarImage;
use crate::tensor::Tensor;

/// `10 log10(1 / MSE)` between the luma planes.
pub fn psnr(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    let (la, lb) = (a.luma_plane(), b.luma_plane());
    if la.dims() != lb.dims() {
        return Err(Error::DimMismatch(format!("images {:?} vs {:?}", la.dims(), lb.dims())));
    }
    let mse = la.data().iter().zip(lb.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / la.len() as f64;
    if mse == 0.0 {
        return Err(Error::IdenticalImages);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> =
            (0..self.window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// Mean SSIM over all windows lying fully inside the image.
pub fn ssim(a: &PlanarImage, b: &PlanarImage) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

pub fn ssim_with(a: &PlanarImage, b: &PlanarImage, cfg: &SsimConfig) -> Result<f64> {
    ssim_luma(&a.luma_plane(), &b.luma_plane(), cfg)
}

/// SSIM of two 2-D planes.
pub fn ssim_luma(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::DimMismatch(format!("planes {:?} vs {:?}", x.dims(), y.dims())));
    }
    let (h, w) = x.shape2()?;
    let k = cfg.window;
    if k == 0 || h < k || w < k {
        return Err(Error::TooSmall(format!("{h}x{w} image, {k}x{k} window")));
    }
    let taps = cfg.taps();
    let (xd, yd) = (x.data(), y.data());
    let xx: Vec<f64> = xd.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = yd.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xd.iter().zip(yd).map(|(p, q)| p * q).collect();
    let filt = |src: &[f64]| valid_filter(src, h, w, &taps);
    let (mx, my) = (filt(xd), filt(yd));
    let (sxx, syy, sxy) = (filt(&xx), filt(&yy), filt(&xy));
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Separable correlation keeping only fully-covered outputs.
fn valid_filter(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&line[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (t, tap) in taps.iter().enumerate() {
            let src_row = &rows[(r + t) * ow..(r + t + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src_row) {
                *o += tap * v;
            }
        }
    }
    out
}
