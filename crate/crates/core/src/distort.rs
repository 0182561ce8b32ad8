//! Synthetic distortions and seeded corpus generation.
//!
//! Severity means the blur `sigma` in pixels for [`DistortionKind::GaussBlur`],
//! the noise standard deviation for [`DistortionKind::Awgn`], the blur
//! `sigma` for [`DistortionKind::BlurPlusNoise`] (whose noise std is
//! `severity / 100`) and the integer scale factor for [`DistortionKind::DownUp`].

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, PlanarImage};
use crate::rng::SplitMix64;
use crate::tensor::{resize_bilinear, Tensor};

/// Noise std per unit of blur `sigma` in [`DistortionKind::BlurPlusNoise`].
pub const BLUR_NOISE_RATIO: f64 = 0.01;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DistortionKind {
    GaussBlur,
    Awgn,
    BlurPlusNoise,
    DownUp,
}

impl DistortionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistortionKind::GaussBlur => "GAUSS_BLUR",
            DistortionKind::Awgn => "AWGN",
            DistortionKind::BlurPlusNoise => "BLUR_PLUS_NOISE",
            DistortionKind::DownUp => "DOWN_UP",
        }
    }
}

impl std::fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "GAUSS_BLUR" => Ok(DistortionKind::GaussBlur),
            "AWGN" => Ok(DistortionKind::Awgn),
            "BLUR_PLUS_NOISE" => Ok(DistortionKind::BlurPlusNoise),
            "DOWN_UP" => Ok(DistortionKind::DownUp),
            _ => Err(Error::InvalidSpec(format!("unknown distortion kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub severity: f64,
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, severity: f64, seed: u64) -> Result<Self> {
        let spec = Self { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.severity > 0.0 && self.severity.is_finite()) {
            return Err(Error::InvalidSpec(format!("severity must be positive, got {}", self.severity)));
        }
        if self.kind == DistortionKind::DownUp && ![2.0, 3.0, 4.0].contains(&self.severity) {
            return Err(Error::InvalidSpec(format!("DOWN_UP scale must be 2, 3 or 4, got {}", self.severity)));
        }
        Ok(())
    }
}

/// Normalized Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSpec(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Half-sample symmetric reflection of `i` into `0..n`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_plane(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] =
                taps.iter().enumerate().map(|(k, t)| t * row[reflect_index(x as i64 + k as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let sy = reflect_index(y as i64 + k as i64 - r, h);
            for x in 0..w {
                out[y * w + x] += t * tmp[sy * w + x];
            }
        }
    }
    out
}

fn map_planes(img: &PlanarImage, f: impl Fn(&[f64], usize, usize) -> Vec<f64>) -> Result<PlanarImage> {
    let (h, w) = (img.height(), img.width());
    let data: Vec<f64> =
        img.tensor().data().chunks_exact(h * w).flat_map(|p| f(p, h, w)).map(|v| v.clamp(0.0, 1.0)).collect();
    PlanarImage::new(Tensor::new(img.tensor().dims().to_vec(), data)?, img.colorspace())
}

pub fn gaussian_blur(img: &PlanarImage, sigma: f64) -> Result<PlanarImage> {
    let taps = gaussian_kernel(sigma)?;
    map_planes(img, |p, h, w| blur_plane(p, h, w, &taps))
}

/// Adds `N(0, std^2)` to every sample in planar order and clamps.
pub fn add_noise(img: &PlanarImage, std: f64, seed: u64) -> Result<PlanarImage> {
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f64> = img.tensor().data().iter().map(|v| (v + std * rng.next_gaussian()).clamp(0.0, 1.0)).collect();
    PlanarImage::new(Tensor::new(img.tensor().dims().to_vec(), data)?, img.colorspace())
}

/// Averages `s x s` blocks (partial blocks at the far edges average what
/// they cover), then upsamples bilinearly back to `h x w`.
pub fn down_up(img: &PlanarImage, s: usize) -> Result<PlanarImage> {
    if !(2..=4).contains(&s) {
        return Err(Error::InvalidSpec(format!("DOWN_UP scale must be 2, 3 or 4, got {s}")));
    }
    map_planes(img, |p, h, w| {
        let (dh, dw) = (h.div_ceil(s), w.div_ceil(s));
        let mut down = vec![0.0; dh * dw];
        for by in 0..dh {
            for bx in 0..dw {
                let (y0, y1) = (by * s, ((by + 1) * s).min(h));
                let (x0, x1) = (bx * s, ((bx + 1) * s).min(w));
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += p[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                down[by * dw + bx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
        let down = Tensor::new(vec![dh, dw], down).expect("block means are finite");
        resize_bilinear(&down, h, w).expect("nonzero target").into_data()
    })
}

pub fn apply(img: &PlanarImage, spec: &DistortionSpec) -> Result<PlanarImage> {
    spec.validate()?;
    match spec.kind {
        DistortionKind::GaussBlur => gaussian_blur(img, spec.severity),
        DistortionKind::Awgn => add_noise(img, spec.severity, spec.seed),
        DistortionKind::BlurPlusNoise => {
            add_noise(&gaussian_blur(img, spec.severity)?, BLUR_NOISE_RATIO * spec.severity, spec.seed)
        }
        DistortionKind::DownUp => down_up(img, spec.severity as usize),
    }
}

/// One row of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub image_id: String,
    pub ref_path: PathBuf,
    pub dist_path: PathBuf,
    pub kind: DistortionKind,
    pub severity: f64,
    pub seed: u64,
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Distorts every PNG of `src_dir` with every spec, writing
/// `<stem>__<KIND>_<severity>.png` files and `manifest.csv` into `out_dir`.
///
/// Rows are ordered by source name, then spec order. The `k`-th source
/// image (0-based, sorted) uses noise seed `spec.seed + k`. Reference paths
/// are absolute; distorted paths are relative to the manifest.
pub fn make_corpus(src_dir: &Path, specs: &[DistortionSpec], out_dir: &Path) -> Result<Vec<CorpusEntry>> {
    for s in specs {
        s.validate()?;
    }
    let sources = list_pngs(src_dir)?;
    if sources.is_empty() {
        return Err(Error::EmptyCorpus(src_dir.to_path_buf()));
    }
    if specs.is_empty() {
        return Err(Error::InvalidSpec("no distortion specs given".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let per_image: Vec<Vec<CorpusEntry>> = sources
        .par_iter()
        .enumerate()
        .map(|(k, src)| {
            let img = load_image(src)?;
            let ref_path = fs::canonicalize(src).map_err(|e| Error::io(src, e))?;
            let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            specs
                .iter()
                .map(|spec| {
                    let spec = DistortionSpec { seed: spec.seed.wrapping_add(k as u64), ..*spec };
                    let image_id = format!("{stem}__{}_{}", spec.kind, spec.severity);
                    let dist_path = PathBuf::from(format!("{image_id}.png"));
                    save_image(&apply(&img, &spec)?, out_dir.join(&dist_path))?;
                    Ok(CorpusEntry {
                        image_id,
                        ref_path: ref_path.clone(),
                        dist_path,
                        kind: spec.kind,
                        severity: spec.severity,
                        seed: spec.seed,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let entries: Vec<CorpusEntry> = per_image.into_iter().flatten().collect();
    write_manifest(&out_dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<CorpusEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let mut e: CorpusEntry = row?;
        if e.ref_path.is_relative() {
            e.ref_path = base.join(&e.ref_path);
        }
        if e.dist_path.is_relative() {
            e.dist_path = base.join(&e.dist_path);
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csf::dft2;
    use crate::image::ColorSpace;

    fn random_luma(h: usize, w: usize, seed: u64) -> PlanarImage {
        let mut rng = SplitMix64::new(seed);
        PlanarImage::from_luma(Tensor::from_fn_2d(h, w, |_, _| rng.next_open01().min(1.0)).unwrap()).unwrap()
    }

    /// Dense 2-D correlation with the outer-product kernel and explicit
    /// mirror padding.
    fn dense_blur_oracle(img: &Tensor, sigma: f64) -> Vec<f64> {
        let (h, w) = img.shape2().unwrap();
        let r = (3.0 * sigma).ceil() as i64;
        let g: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let mut k2 = vec![vec![0.0; g.len()]; g.len()];
        let mut total = 0.0;
        for (a, ga) in g.iter().enumerate() {
            for (b, gb) in g.iter().enumerate() {
                k2[a][b] = ga * gb;
                total += ga * gb;
            }
        }
        let mirror = |i: i64, n: i64| -> usize {
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - 1 - i;
                } else {
                    return i as usize;
                }
            }
        };
        let mut out = vec![0.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let v = img.data()[mirror(y + dy, h as i64) * w + mirror(x + dx, w as i64)];
                        acc += k2[(dy + r) as usize][(dx + r) as usize] * v;
                    }
                }
                out[y as usize * w + x as usize] = acc / total;
            }
        }
        out
    }

    #[test]
    fn kernel_properties() {
        for sigma in [0.3, 0.5, 1.0, 2.0, 4.7] {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gaussian_kernel(0.0).is_err());
    }

    #[test]
    fn reflect_matches_mirror() {
        let got: Vec<usize> = (-5..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0, 0]);
        assert_eq!(reflect_index(-1, 1), 0);
    }

    #[test]
    fn blur_matches_dense_oracle() {
        let img = random_luma(32, 32, 11);
        let got = gaussian_blur(&img, 2.0).unwrap();
        let want = dense_blur_oracle(&img.luma_plane(), 2.0);
        let err = got.tensor().data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        // kernel wider than the image exercises repeated reflection
        let tiny = random_luma(5, 3, 12);
        let got = gaussian_blur(&tiny, 2.0).unwrap();
        let want = dense_blur_oracle(&tiny.luma_plane(), 2.0);
        let err = got.tensor().data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn blur_of_constant_is_identity() {
        let img = PlanarImage::new(Tensor::filled(vec![3, 9, 7], 0.25).unwrap(), ColorSpace::Rgb).unwrap();
        let out = gaussian_blur(&img, 1.7).unwrap();
        assert!(out.tensor().max_abs_diff(img.tensor()).unwrap() < 1e-15);
    }

    #[test]
    fn noise_is_seeded() {
        let img = random_luma(16, 16, 1);
        let spec = DistortionSpec::new(DistortionKind::Awgn, 0.1, 42).unwrap();
        let a = apply(&img, &spec).unwrap();
        let b = apply(&img, &spec).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
        let c = apply(&img, &DistortionSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.tensor().data(), c.tensor().data());
        assert!(a.tensor().min() >= 0.0 && a.tensor().max() <= 1.0);
    }

    #[test]
    fn blur_plus_noise_order() {
        let img = random_luma(16, 16, 2);
        let spec = DistortionSpec::new(DistortionKind::BlurPlusNoise, 1.5, 9).unwrap();
        let want = add_noise(&gaussian_blur(&img, 1.5).unwrap(), 0.015, 9).unwrap();
        assert_eq!(apply(&img, &spec).unwrap(), want);
    }

    #[test]
    fn spec_validation() {
        assert!(DistortionSpec::new(DistortionKind::GaussBlur, 0.0, 0).is_err());
        assert!(DistortionSpec::new(DistortionKind::Awgn, f64::NAN, 0).is_err());
        assert!(DistortionSpec::new(DistortionKind::DownUp, 2.5, 0).is_err());
        assert!(DistortionSpec::new(DistortionKind::DownUp, 3.0, 0).is_ok());
        assert_eq!("down_up".parse::<DistortionKind>().unwrap(), DistortionKind::DownUp);
    }

    #[test]
    fn down_up_block_means() {
        let t = Tensor::new(vec![2, 4], vec![0.0, 0.2, 0.4, 0.6, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let img = PlanarImage::from_luma(t).unwrap();
        let out = down_up(&img, 2).unwrap();
        assert_eq!(out.tensor().dims(), &[1, 2, 4]);
        // block means 0.2 and 0.6, half-pixel centers at -0.25, 0.25, 0.75, 1.25
        let want = [0.2, 0.3, 0.5, 0.6];
        for (row, chunk) in out.tensor().data().chunks(4).enumerate() {
            for (a, b) in chunk.iter().zip(want) {
                assert!((a - b).abs() < 1e-12, "row {row}");
            }
        }
    }

    fn high_band_energy(img: &PlanarImage, s: usize) -> f64 {
        let spec = dft2(&img.luma_plane()).unwrap();
        let (m, n) = spec.shape();
        let mut e = 0.0;
        for u in 0..m {
            for v in 0..n {
                let fu = u.min(m - u) as f64 / m as f64;
                let fv = v.min(n - v) as f64 / n as f64;
                if fu.max(fv) > 0.5 / s as f64 {
                    let c = spec.bin(u, v);
                    e += c.norm_sqr();
                }
            }
        }
        e
    }

    #[test]
    fn down_up_removes_high_frequencies() {
        for s in [2, 3, 4] {
            let img = random_luma(36, 40, s as u64);
            let out = down_up(&img, s).unwrap();
            assert_eq!(out.tensor().dims(), img.tensor().dims());
            assert!(high_band_energy(&out, s) < high_band_energy(&img, s));
        }
    }

    #[test]
    fn corpus_roundtrip_and_determinism() {
        let src = tempfile::tempdir().unwrap();
        save_image(&random_luma(16, 16, 5), src.path().join("b.png")).unwrap();
        save_image(&random_luma(16, 16, 6), src.path().join("a.png")).unwrap();
        let specs: Vec<_> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&s| DistortionSpec::new(DistortionKind::BlurPlusNoise, s, 100).unwrap())
            .collect();
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        let e1 = make_corpus(src.path(), &specs, out1.path()).unwrap();
        let e2 = make_corpus(src.path(), &specs, out2.path()).unwrap();
        assert_eq!(e1.len(), 6);
        assert_eq!(e1, e2);
        assert_eq!(e1[0].image_id, "a__BLUR_PLUS_NOISE_0.5");
        assert_eq!(e1[3].seed, 101);
        for e in &e1 {
            let p1 = fs::read(out1.path().join(&e.dist_path)).unwrap();
            let p2 = fs::read(out2.path().join(&e.dist_path)).unwrap();
            assert_eq!(p1, p2);
        }
        assert_eq!(
            fs::read(out1.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(out2.path().join(MANIFEST_FILE)).unwrap()
        );
        let back = read_manifest(&out1.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back[0].dist_path, out1.path().join("a__BLUR_PLUS_NOISE_0.5.png"));
        assert!(back.windows(2).all(|w| w[0].ref_path != w[1].ref_path || w[0].severity < w[1].severity));
    }

    #[test]
    fn empty_corpus() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let spec = DistortionSpec::new(DistortionKind::GaussBlur, 1.0, 0).unwrap();
        assert!(matches!(make_corpus(src.path(), &[spec], out.path()), Err(Error::EmptyCorpus(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn outputs_stay_in_range(seed in 0u64..1000, kind in 0usize..4, sev in 1usize..4, h in 1usize..12, w in 1usize..12) {
            let kinds = [DistortionKind::GaussBlur, DistortionKind::Awgn, DistortionKind::BlurPlusNoise, DistortionKind::DownUp];
            let severity = match kinds[kind] {
                DistortionKind::DownUp => (sev + 1) as f64,
                DistortionKind::Awgn => 0.2 * sev as f64,
                _ => 0.7 * sev as f64,
            };
            let img = random_luma(h, w, seed);
            let out = apply(&img, &DistortionSpec::new(kinds[kind], severity, seed).unwrap()).unwrap();
            proptest::prop_assert_eq!(out.tensor().dims(), img.tensor().dims());
            proptest::prop_assert!(out.tensor().min() >= 0.0 && out.tensor().max() <= 1.0);
        }
    }
}
