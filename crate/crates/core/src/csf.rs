//! Contrast-sensitivity attention maps.
//!
//! The map is built by band-limiting the luma of a reference image to the
//! spatial-frequency band where human contrast sensitivity is highest,
//! transforming back, and max-normalizing the magnitude of the result:
//!
//! ```text
//! luma -> DFT (1/MN) -> keep bins with s_low <= s(u,v) <= s_high
//!      -> inverse DFT (unscaled) -> |.| -> divide by max
//! ```
//!
//! Frequencies are converted from DFT bins to cycles per degree of visual
//! angle using the display dot pitch and the viewing distance.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::image::PlanarImage;
use crate::tensor::{resize_bilinear, Tensor};

/// Reconstructions whose peak magnitude falls below this fraction of the
/// input's peak luma are treated as empty (FFT round-off, not signal).
pub const DEGENERATE_RELATIVE_PEAK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewingGeometry {
    dot_pitch_mm: f64,
    distance_mm: f64,
}

impl ViewingGeometry {
    pub const DEFAULT_DOT_PITCH_MM: f64 = 0.25;
    pub const DEFAULT_DISTANCE_MM: f64 = 550.0;

    pub fn new(dot_pitch_mm: f64, distance_mm: f64) -> Result<Self> {
        if !(dot_pitch_mm > 0.0 && dot_pitch_mm.is_finite()) || !(distance_mm > 0.0 && distance_mm.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "viewing geometry needs positive dot pitch and distance, got {dot_pitch_mm} mm / {distance_mm} mm"
            )));
        }
        Ok(Self { dot_pitch_mm, distance_mm })
    }

    pub fn dot_pitch_mm(&self) -> f64 {
        self.dot_pitch_mm
    }

    pub fn distance_mm(&self) -> f64 {
        self.distance_mm
    }

    /// Cycles per degree for one cycle per millimetre on the display.
    pub fn cpd_per_cycle_per_mm(&self) -> f64 {
        let d = self.distance_mm;
        PI / (180.0 * (1.0 / (1.0 + d * d).sqrt()).asin())
    }
}

impl Default for ViewingGeometry {
    fn default() -> Self {
        Self { dot_pitch_mm: Self::DEFAULT_DOT_PITCH_MM, distance_mm: Self::DEFAULT_DISTANCE_MM }
    }
}

/// Closed pass band `[s_low, s_high]` in cycles per degree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsfBand {
    s_low_cpd: f64,
    s_high_cpd: f64,
}

impl CsfBand {
    pub const DEFAULT_LOW_CPD: f64 = 2.0;
    pub const DEFAULT_HIGH_CPD: f64 = 23.0;

    pub fn new(s_low_cpd: f64, s_high_cpd: f64) -> Result<Self> {
        if !(s_low_cpd >= 0.0 && s_low_cpd.is_finite() && s_low_cpd < s_high_cpd) {
            return Err(Error::InvalidArgument(format!("band needs 0 <= low < high, got [{s_low_cpd}, {s_high_cpd}]")));
        }
        Ok(Self { s_low_cpd, s_high_cpd })
    }

    pub fn all_pass() -> Self {
        Self { s_low_cpd: 0.0, s_high_cpd: f64::INFINITY }
    }

    pub fn low(&self) -> f64 {
        self.s_low_cpd
    }

    pub fn high(&self) -> f64 {
        self.s_high_cpd
    }

    pub fn contains(&self, s: f64) -> bool {
        self.s_low_cpd <= s && s <= self.s_high_cpd
    }
}

impl Default for CsfBand {
    fn default() -> Self {
        Self { s_low_cpd: Self::DEFAULT_LOW_CPD, s_high_cpd: Self::DEFAULT_HIGH_CPD }
    }
}

/// How DFT bin indices map to physical frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrequencyFold {
    /// Bin `k` and bin `M - k` share frequency `min(k, M - k)`. Keeps the
    /// pass mask Hermitian so the reconstruction is real.
    #[default]
    Folded,
    /// Bin `k` has frequency `k`, growing past Nyquist.
    Literal,
}

/// Everything needed to turn a reference image into an attention map.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MapParams {
    pub band: CsfBand,
    pub geometry: ViewingGeometry,
    pub fold: FrequencyFold,
}

/// Complex 2-D spectrum stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub real: Tensor,
    pub imag: Tensor,
}

impl Spectrum {
    pub fn new(real: Tensor, imag: Tensor) -> Result<Self> {
        real.shape2()?;
        if real.dims() != imag.dims() {
            return Err(Error::DimMismatch(format!("spectrum planes {:?} vs {:?}", real.dims(), imag.dims())));
        }
        Ok(Self { real, imag })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(Tensor::zeros(vec![rows, cols])?, Tensor::zeros(vec![rows, cols])?)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.real.dims()[0], self.real.dims()[1])
    }

    pub fn bin(&self, u: usize, v: usize) -> Complex64 {
        let (_, n) = self.shape();
        Complex64::new(self.real.data()[u * n + v], self.imag.data()[u * n + v])
    }

    /// Largest `|F[u,v] - conj(F[-u,-v])|` over all bins.
    pub fn hermitian_error(&self) -> f64 {
        let (m, n) = self.shape();
        let mut worst = 0.0f64;
        for u in 0..m {
            for v in 0..n {
                let a = self.bin(u, v);
                let b = self.bin((m - u) % m, (n - v) % n).conj();
                worst = worst.max((a - b).norm());
            }
        }
        worst
    }

    fn from_complex(m: usize, n: usize, buf: &[Complex64]) -> Self {
        Self {
            real: Tensor::from_parts_unchecked(vec![m, n], buf.iter().map(|c| c.re).collect()),
            imag: Tensor::from_parts_unchecked(vec![m, n], buf.iter().map(|c| c.im).collect()),
        }
    }

    fn to_complex(&self) -> Vec<Complex64> {
        self.real.data().iter().zip(self.imag.data()).map(|(&re, &im)| Complex64::new(re, im)).collect()
    }
}

/// Row-then-column FFT over an `m x n` row-major buffer, unscaled.
fn fft2_in_place(buf: &mut [Complex64], m: usize, n: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let plan = |len: usize, planner: &mut FftPlanner<f64>| -> Arc<dyn Fft<f64>> {
        if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        }
    };
    let rows = plan(n, &mut planner);
    for row in buf.chunks_exact_mut(n) {
        rows.process(row);
    }
    if m > 1 {
        let cols = plan(m, &mut planner);
        let mut column = vec![Complex64::default(); m];
        for v in 0..n {
            for u in 0..m {
                column[u] = buf[u * n + v];
            }
            cols.process(&mut column);
            for u in 0..m {
                buf[u * n + v] = column[u];
            }
        }
    }
}

/// Forward 2-D DFT with `1/(MN)` normalization on the forward side.
pub fn dft2(img: &Tensor) -> Result<Spectrum> {
    let (m, n) = img.shape2()?;
    let mut buf: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, m, n, false);
    let scale = 1.0 / (m * n) as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    Ok(Spectrum::from_complex(m, n, &buf))
}

/// Unscaled inverse 2-D DFT returning both real and imaginary parts.
pub fn idft2_complex(spec: &Spectrum) -> Result<Spectrum> {
    let (m, n) = spec.shape();
    let mut buf = spec.to_complex();
    fft2_in_place(&mut buf, m, n, true);
    Ok(Spectrum::from_complex(m, n, &buf))
}

/// Unscaled inverse 2-D DFT; keeps the real part.
pub fn idft2(spec: &Spectrum) -> Result<Tensor> {
    Ok(idft2_complex(spec)?.real)
}

fn folded_index(k: usize, len: usize, fold: FrequencyFold) -> usize {
    match fold {
        FrequencyFold::Folded => k.min(len - k),
        FrequencyFold::Literal => k,
    }
}

/// Cycles per degree of the 0-based bin `(ku, kv)` in an `m x n` spectrum.
pub fn bin_cpd(ku: usize, kv: usize, m: usize, n: usize, geom: &ViewingGeometry, fold: FrequencyFold) -> f64 {
    let fu = folded_index(ku, m, fold) as f64 / (geom.dot_pitch_mm * m as f64);
    let fv = folded_index(kv, n, fold) as f64 / (geom.dot_pitch_mm * n as f64);
    geom.cpd_per_cycle_per_mm() * fu.hypot(fv)
}

/// Cycles per degree of the 1-based bin `(u, v)` with folded indices.
pub fn cycles_per_degree(u: usize, v: usize, m: usize, n: usize, geom: &ViewingGeometry) -> Result<f64> {
    cycles_per_degree_with(u, v, m, n, geom, FrequencyFold::Folded)
}

pub fn cycles_per_degree_with(
    u: usize,
    v: usize,
    m: usize,
    n: usize,
    geom: &ViewingGeometry,
    fold: FrequencyFold,
) -> Result<f64> {
    if u == 0 || v == 0 || u > m || v > n {
        return Err(Error::IndexOutOfRange(format!("bin ({u}, {v}) outside 1..={m} x 1..={n}")));
    }
    Ok(bin_cpd(u - 1, v - 1, m, n, geom, fold))
}

/// Ideal band-pass: bins inside the band are copied, all others zeroed.
pub fn bandpass(spec: &Spectrum, band: &CsfBand, geom: &ViewingGeometry) -> Spectrum {
    bandpass_with(spec, band, geom, FrequencyFold::Folded)
}

pub fn bandpass_with(spec: &Spectrum, band: &CsfBand, geom: &ViewingGeometry, fold: FrequencyFold) -> Spectrum {
    let (m, n) = spec.shape();
    let mut re = spec.real.data().to_vec();
    let mut im = spec.imag.data().to_vec();
    for u in 0..m {
        for v in 0..n {
            if !band.contains(bin_cpd(u, v, m, n, geom, fold)) {
                re[u * n + v] = 0.0;
                im[u * n + v] = 0.0;
            }
        }
    }
    Spectrum { real: Tensor::from_parts_unchecked(vec![m, n], re), imag: Tensor::from_parts_unchecked(vec![m, n], im) }
}

/// Signed band-limited reconstruction of a luma plane.
pub fn reconstruct(luma: &Tensor, params: &MapParams) -> Result<Tensor> {
    let spec = dft2(luma)?;
    idft2(&bandpass_with(&spec, &params.band, &params.geometry, params.fold))
}

/// `(H, W)` map with values in `[0, 1]` and a maximum of exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    map: Tensor,
}

impl AttentionMap {
    pub fn new(map: Tensor) -> Result<Self> {
        map.shape2()?;
        if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("attention values must lie in [0, 1]".into()));
        }
        if map.max() != 1.0 {
            return Err(Error::InvalidArgument(format!("attention map maximum must be 1, got {}", map.max())));
        }
        Ok(Self { map })
    }

    /// `mu = 1` everywhere; reduces attentive losses to their plain forms.
    pub fn uniform(height: usize, width: usize) -> Result<Self> {
        Ok(Self { map: Tensor::filled(vec![height, width], 1.0)? })
    }

    /// Divides a nonnegative tensor by its maximum.
    pub fn normalize(t: &Tensor) -> Result<Self> {
        t.shape2()?;
        let peak = t.max();
        if peak.is_nan() || peak <= 0.0 || t.min() < 0.0 {
            return Err(Error::DegenerateInput("map has no positive peak".into()));
        }
        Ok(Self { map: Tensor::from_parts_unchecked(t.dims().to_vec(), t.data().iter().map(|v| v / peak).collect()) })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.map
    }

    pub fn values(&self) -> &[f64] {
        self.map.data()
    }

    pub fn height(&self) -> usize {
        self.map.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.map.dims()[1]
    }
}

/// Attention map of a reference image with default fold.
pub fn generate_map(gt: &PlanarImage, band: &CsfBand, geom: &ViewingGeometry) -> Result<AttentionMap> {
    generate_map_with(gt, &MapParams { band: *band, geometry: *geom, fold: FrequencyFold::Folded })
}

pub fn generate_map_with(gt: &PlanarImage, params: &MapParams) -> Result<AttentionMap> {
    generate_map_from_luma(&gt.luma_plane(), params)
}

/// Attention map from a raw luma plane. Values need not lie in `[0, 1]`;
/// the map is invariant to positive gain.
pub fn generate_map_from_luma(luma: &Tensor, params: &MapParams) -> Result<AttentionMap> {
    let signal = reconstruct(luma, params)?;
    let magnitude = signal.map(f64::abs)?;
    let peak = magnitude.max();
    let scale = luma.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak <= DEGENERATE_RELATIVE_PEAK * scale || peak == 0.0 {
        return Err(Error::DegenerateInput("band-limited reconstruction is empty (no energy inside the band)".into()));
    }
    AttentionMap::normalize(&magnitude)
}

/// Bilinear resize followed by renormalization to a unit maximum.
pub fn resize_map(map: &AttentionMap, height: usize, width: usize) -> Result<AttentionMap> {
    if (height, width) == (map.height(), map.width()) {
        return Ok(map.clone());
    }
    AttentionMap::normalize(&resize_bilinear(&map.map, height, width)?)
}
