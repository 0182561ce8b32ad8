//! Objective quality assessment: logistic curve fitting of objective scores
//! onto subjective ones, followed by RMSE, LCC and SROCC.
//!
//! The mapping is `b1 * (1/2 - 1/(1 + exp(b2 (x - b3)))) + b4 x + b5`,
//! fitted by Nelder-Mead on the squared error. Starting point:
//! `b1 = range(subjective)`, `b2 = 1/std(objective)`, `b3 = mean(objective)`,
//! `b4 = 0`, `b5 = mean(subjective)`.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distort::{read_manifest, CorpusEntry};
use crate::error::{Error, Result};
use crate::features::WeightBundle;
use crate::image::load_image;
use crate::losses::{FeaturePair, LossConfig, LossKind, MapSource};
use crate::rng::SplitMix64;

pub const MIN_FIT_RECORDS: usize = 6;
pub const MAX_ITERATIONS: usize = 10_000;
pub const DIAMETER_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OqaRecord {
    pub image_id: String,
    pub objective: f64,
    /// Higher means worse.
    pub subjective: f64,
}

impl OqaRecord {
    pub fn new(image_id: impl Into<String>, objective: f64, subjective: f64) -> Result<Self> {
        if !objective.is_finite() || !subjective.is_finite() {
            return Err(Error::InvalidArgument("OQA scores must be finite".into()));
        }
        Ok(Self { image_id: image_id.into(), objective, subjective })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitModel {
    pub params: [f64; 5],
}

impl FitModel {
    pub fn predict(&self, x: f64) -> f64 {
        logistic(&self.params, x)
    }
}

fn logistic(b: &[f64; 5], x: f64) -> f64 {
    b[0] * (0.5 - 1.0 / (1.0 + (b[1] * (x - b[2])).exp())) + b[3] * x + b[4]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Minimizes `f` from `x0` with the standard reflection/expansion/
/// contraction/shrink coefficients (1, 2, 1/2, 1/2).
///
/// Stops when every vertex lies within `tol` of the best one or after
/// `max_iter` iterations; returns the best vertex and iterations used.
pub fn nelder_mead<const N: usize>(
    f: impl Fn(&[f64; N]) -> f64,
    x0: [f64; N],
    steps: [f64; N],
    tol: f64,
    max_iter: usize,
) -> ([f64; N], usize) {
    let eval = |x: &[f64; N]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, eval(&x0)));
    for i in 0..N {
        let mut x = x0;
        x[i] += steps[i];
        simplex.push((x, eval(&x)));
    }
    let lerp = |a: &[f64; N], b: &[f64; N], t: f64| -> [f64; N] {
        let mut out = [0.0; N];
        for k in 0..N {
            out[k] = a[k] + t * (b[k] - a[k]);
        }
        out
    };
    let mut iter = 0;
    while iter < max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].0;
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&best).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        if diameter < tol {
            break;
        }
        iter += 1;
        let mut centroid = [0.0; N];
        for (x, _) in &simplex[..N] {
            for k in 0..N {
                centroid[k] += x[k] / N as f64;
            }
        }
        let (worst, f_worst) = simplex[N];
        let reflected = lerp(&centroid, &worst, -1.0);
        let f_r = eval(&reflected);
        if f_r < simplex[0].1 {
            let expanded = lerp(&centroid, &worst, -2.0);
            let f_e = eval(&expanded);
            simplex[N] = if f_e < f_r { (expanded, f_e) } else { (reflected, f_r) };
            continue;
        }
        if f_r < simplex[N - 1].1 {
            simplex[N] = (reflected, f_r);
            continue;
        }
        let (contracted, f_c) = if f_r < f_worst {
            let c = lerp(&centroid, &reflected, 0.5);
            (c, eval(&c))
        } else {
            let c = lerp(&centroid, &worst, 0.5);
            (c, eval(&c))
        };
        if f_c < f_worst.min(f_r) {
            simplex[N] = (contracted, f_c);
            continue;
        }
        for v in simplex.iter_mut().skip(1) {
            let x = lerp(&best, &v.0, 0.5);
            *v = (x, eval(&x));
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    (simplex[0].0, iter)
}

/// Least-squares `(b1, b4, b5)` for fixed `(b2, b3)`; `None` if singular.
fn solve_linear_part(b: &[f64; 5], xs: &[f64], ys: &[f64]) -> Option<[f64; 5]> {
    let cols = |x: f64| [0.5 - 1.0 / (1.0 + (b[1] * (x - b[2])).exp()), x, 1.0];
    let mut a = [[0.0f64; 4]; 3];
    for (x, y) in xs.iter().zip(ys) {
        let c = cols(*x);
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += c[i] * c[j];
            }
            a[i][3] += c[i] * y;
        }
    }
    let scale = a.iter().map(|r| r[0].abs().max(r[1].abs()).max(r[2].abs())).fold(0.0, f64::max);
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let k = a[r][col] / a[col][col];
                for c in col..4 {
                    a[r][c] -= k * a[col][c];
                }
            }
        }
    }
    let sol: Vec<f64> = (0..3).map(|i| a[i][3] / a[i][i]).collect();
    let out = [sol[0], b[1], b[2], sol[1], sol[2]];
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Fits the logistic mapping. Optimization runs on standardized
/// coordinates, from the start point above expressed in those coordinates,
/// with restarts from the incumbent until a restart stops improving; the
/// total iteration budget is [`MAX_ITERATIONS`]. The amplitude and linear
/// terms are then refined by exact least squares when that lowers the error.
pub fn fit_curve(records: &[OqaRecord]) -> Result<FitModel> {
    if records.len() < MIN_FIT_RECORDS {
        return Err(Error::TooFew { needed: MIN_FIT_RECORDS, got: records.len() });
    }
    let xs: Vec<f64> = records.iter().map(|r| r.objective).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.subjective).collect();
    let (mx, sx) = (mean(&xs), std_dev(&xs));
    if sx == 0.0 || !sx.is_finite() {
        return Err(Error::DegenerateData("objective scores are all equal".into()));
    }
    let my = mean(&ys);
    let sy = match std_dev(&ys) {
        s if s > 0.0 => s,
        _ => 1.0,
    };
    let zx: Vec<f64> = xs.iter().map(|x| (x - mx) / sx).collect();
    let zy: Vec<f64> = ys.iter().map(|y| (y - my) / sy).collect();
    let sse = |b: &[f64; 5]| zx.iter().zip(&zy).map(|(x, y)| (logistic(b, *x) - y).powi(2)).sum::<f64>();

    let range = zy.iter().copied().fold(f64::NEG_INFINITY, f64::max) - zy.iter().copied().fold(f64::INFINITY, f64::min);
    let mut best = [range, 1.0, 0.0, 0.0, 0.0];
    let mut best_f = sse(&best);
    let mut budget = MAX_ITERATIONS;
    while budget > 0 {
        let steps = best.map(|v| (0.1 * v.abs()).max(0.25));
        let (x, used) = nelder_mead(sse, best, steps, DIAMETER_TOLERANCE, budget);
        budget -= used;
        let f = sse(&x);
        let improved = f < best_f * (1.0 - 1e-12) && best_f - f > 1e-300;
        if f <= best_f {
            best = x;
            best_f = f;
        }
        if !improved || used == 0 {
            break;
        }
    }
    if let Some(polished) = solve_linear_part(&best, &zx, &zy) {
        if sse(&polished) < best_f {
            best = polished;
        }
    }

    // back to raw units: y = my + sy * g((x - mx) / sx)
    let b1 = sy * best[0];
    let b2 = best[1] / sx;
    let b3 = mx + sx * best[2];
    let b4 = sy * best[3] / sx;
    let b5 = my + sy * best[4] - b4 * mx;
    let params = [b1, b2, b3, b4, b5];
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData("curve fit diverged".into()));
    }
    Ok(FitModel { params })
}

fn check_pairs(records: &[OqaRecord]) -> Result<()> {
    if records.len() < 2 {
        return Err(Error::TooFew { needed: 2, got: records.len() });
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateData("correlation of a constant column".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn predictions(model: &FitModel, records: &[OqaRecord]) -> Vec<f64> {
    records.iter().map(|r| model.predict(r.objective)).collect()
}

pub fn rmse(model: &FitModel, records: &[OqaRecord]) -> Result<f64> {
    check_pairs(records)?;
    let sum: f64 = records.iter().map(|r| (model.predict(r.objective) - r.subjective).powi(2)).sum();
    Ok((sum / records.len() as f64).sqrt())
}

/// Pearson correlation of fitted predictions with subjective scores.
pub fn lcc(model: &FitModel, records: &[OqaRecord]) -> Result<f64> {
    check_pairs(records)?;
    let subj: Vec<f64> = records.iter().map(|r| r.subjective).collect();
    pearson(&predictions(model, records), &subj)
}

/// Spearman correlation of raw objective against subjective scores.
pub fn srocc(records: &[OqaRecord]) -> Result<f64> {
    check_pairs(records)?;
    let obj: Vec<f64> = records.iter().map(|r| r.objective).collect();
    let subj: Vec<f64> = records.iter().map(|r| r.subjective).collect();
    pearson(&average_ranks(&obj), &average_ranks(&subj))
}

/// Returns records whose subjective scores are permuted with `seed`.
pub fn shuffle_subjective(records: &[OqaRecord], seed: u64) -> Vec<OqaRecord> {
    let mut subj: Vec<f64> = records.iter().map(|r| r.subjective).collect();
    SplitMix64::new(seed).shuffle(&mut subj);
    records.iter().zip(subj).map(|(r, s)| OqaRecord { subjective: s, ..r.clone() }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OqaScore {
    pub record: OqaRecord,
    pub predicted: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OqaSummary {
    pub metric: LossKind,
    pub layer: String,
    pub count: usize,
    pub rmse: f64,
    pub lcc: f64,
    pub srocc: f64,
    pub model: FitModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OqaOutcome {
    pub scores: Vec<OqaScore>,
    pub summary: OqaSummary,
}

pub const SCORES_FILE: &str = "oqa_scores.csv";
pub const SUMMARY_FILE: &str = "oqa_summary.csv";

impl OqaOutcome {
    pub fn write_scores(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_id", "objective", "subjective", "predicted", "fallback_flag"])?;
        for s in &self.scores {
            w.write_record([
                s.record.image_id.clone(),
                s.record.objective.to_string(),
                s.record.subjective.to_string(),
                s.predicted.to_string(),
                u8::from(s.fallback).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let s = &self.summary;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "layer", "n", "rmse", "lcc", "srocc", "beta1", "beta2", "beta3", "beta4", "beta5"])?;
        let mut row = vec![
            s.metric.to_string(),
            s.layer.clone(),
            s.count.to_string(),
            s.rmse.to_string(),
            s.lcc.to_string(),
            s.srocc.to_string(),
        ];
        row.extend(s.model.params.iter().map(|b| b.to_string()));
        w.write_record(row)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads `image_id,dmos` rows.
pub fn read_subjective(path: &Path) -> Result<HashMap<String, f64>> {
    #[derive(Deserialize)]
    struct Row {
        image_id: String,
        dmos: f64,
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for row in csv::Reader::from_reader(file).deserialize() {
        let row: Row = row?;
        out.insert(row.image_id, row.dmos);
    }
    Ok(out)
}

/// Evaluates `metric` for every manifest row, then fits and summarizes.
#[derive(Debug, Clone)]
pub struct OqaRequest<'a> {
    pub bundle: &'a WeightBundle,
    pub layer: &'a str,
    pub metric: LossKind,
    pub cfg: LossConfig,
    pub map_source: MapSource,
    /// `image_id -> dmos`; the severity column is used when absent.
    pub subjective: Option<HashMap<String, f64>>,
}

pub fn run_oqa(manifest: &Path, req: &OqaRequest<'_>) -> Result<OqaOutcome> {
    let entries = read_manifest(manifest)?;
    run_oqa_entries(&entries, req)
}

pub fn run_oqa_entries(entries: &[CorpusEntry], req: &OqaRequest<'_>) -> Result<OqaOutcome> {
    let subjective_of = |e: &CorpusEntry| -> Result<f64> {
        match &req.subjective {
            None => Ok(e.severity),
            Some(map) => map
                .get(&e.image_id)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no subjective score for `{}`", e.image_id))),
        }
    };
    let evaluated: Vec<(OqaRecord, bool)> = entries
        .par_iter()
        .map(|e| {
            let gt = load_image(&e.ref_path)?;
            let out = load_image(&e.dist_path)?;
            let pair = FeaturePair::extract(&gt, &out, req.bundle, req.layer, &req.map_source)?;
            let objective = pair.loss(req.metric, &req.cfg)?;
            Ok((OqaRecord::new(e.image_id.clone(), objective, subjective_of(e)?)?, pair.fallback))
        })
        .collect::<Result<_>>()?;
    let records: Vec<OqaRecord> = evaluated.iter().map(|(r, _)| r.clone()).collect();
    let model = fit_curve(&records)?;
    let summary = OqaSummary {
        metric: req.metric,
        layer: req.layer.to_string(),
        count: records.len(),
        rmse: rmse(&model, &records)?,
        lcc: lcc(&model, &records)?,
        srocc: srocc(&records)?,
        model,
    };
    let scores = evaluated
        .into_iter()
        .map(|(record, fallback)| OqaScore { predicted: model.predict(record.objective), record, fallback })
        .collect();
    Ok(OqaOutcome { scores, summary })
}
