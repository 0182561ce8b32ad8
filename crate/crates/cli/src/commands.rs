use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use csfp_core::csf::{generate_map_with, AttentionMap};
use csfp_core::distort::{make_corpus, read_manifest, CorpusEntry, DistortionSpec};
use csfp_core::features::load_weights;
use csfp_core::losses::{combine, combined_loss_with, l2_loss, FeaturePair, LossKind, LossReport};
use csfp_core::metrics::{psnr, ssim};
use csfp_core::oqa::{read_subjective, run_oqa, OqaRequest, SCORES_FILE, SUMMARY_FILE};
use csfp_core::{load_image, save_image, tnsr, Error, PlanarImage};
use log::{info, warn};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::args::{CorpusCmd, LayersCmd, LossCmd, MapCmd, OqaCmd, TradeoffCmd};
use crate::svg;

pub const RUN_LOG: &str = "run.log";

fn file_stem(path: &Path) -> &str {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image")
}

pub fn map(cmd: &MapCmd) -> Result<()> {
    let params = cmd.map.params()?;
    let img = load_image(&cmd.input)?;
    let map = match generate_map_with(&img, &params) {
        Ok(m) => m,
        Err(Error::DegenerateInput(msg)) if cmd.fallback_uniform => {
            warn!("{}: {msg}; writing a uniform map", cmd.input.display());
            AttentionMap::uniform(img.height(), img.width())?
        }
        Err(e) => return Err(e).with_context(|| format!("attention map of {}", cmd.input.display())),
    };

    fs::create_dir_all(&cmd.out_dir).with_context(|| format!("creating {}", cmd.out_dir.display()))?;
    let stem = file_stem(&cmd.input);
    let png_path = cmd.out_dir.join(format!("{stem}_map.png"));
    let tnsr_path = cmd.out_dir.join(format!("{stem}_map.tnsr"));
    save_image(&PlanarImage::from_luma(map.tensor().clone())?, &png_path)?;
    let bytes = tnsr::encode(map.tensor())?;
    fs::write(&tnsr_path, &bytes).with_context(|| format!("writing {}", tnsr_path.display()))?;
    let digest = hex::encode(Sha256::digest(&bytes));

    let (min, max, mean) = (map.tensor().min(), map.tensor().max(), map.tensor().mean());
    println!("min={min} max={max} mean={mean}");
    let line = format!(
        "map input={} fold={:?} band=[{},{}] dot_pitch={} distance={} min={min} max={max} mean={mean} tnsr={} sha256={digest}\n",
        cmd.input.display(),
        params.fold,
        params.band.low(),
        params.band.high(),
        params.geometry.dot_pitch_mm(),
        params.geometry.distance_mm(),
        tnsr_path.display(),
    );
    let log_path = cmd.out_dir.join(RUN_LOG);
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .with_context(|| format!("appending to {}", log_path.display()))?;
    Ok(())
}

pub fn loss(cmd: &LossCmd) -> Result<()> {
    let cfg = cmd.loss.config(cmd.alpha)?;
    let source = cmd.loss.map_source()?;
    let bundle = load_weights(&cmd.loss.weights)?;
    let gt = load_image(&cmd.reference)?;
    let out = load_image(&cmd.distorted)?;
    let report = combined_loss_with(&gt, &out, &bundle, &cmd.loss.layer, &cfg, cmd.kind.into(), &source)?;
    if report.fallback {
        warn!("{}: no in-band content, used a uniform map", cmd.reference.display());
    }
    let id = cmd.image_id.clone().unwrap_or_else(|| file_stem(&cmd.distorted).to_string());
    let mut w = csv::Writer::from_writer(std::io::stdout());
    if cmd.header {
        w.write_record(LossReport::CSV_HEADER)?;
    }
    w.write_record(report.csv_record(&id))?;
    w.flush()?;
    Ok(())
}

pub fn corpus(cmd: &CorpusCmd) -> Result<()> {
    let specs = cmd
        .kind
        .iter()
        .flat_map(|&k| cmd.severities.iter().map(move |&s| DistortionSpec::new(k.into(), s, cmd.seed)))
        .collect::<csfp_core::Result<Vec<_>>>()?;
    let entries = make_corpus(&cmd.src, &specs, &cmd.out)?;
    info!("wrote {} distorted images to {}", entries.len(), cmd.out.display());
    println!("{}", entries.len());
    Ok(())
}

pub fn oqa(cmd: &OqaCmd) -> Result<()> {
    let bundle = load_weights(&cmd.loss.weights)?;
    let subjective = cmd.subjective.as_deref().map(read_subjective).transpose()?;
    let req = OqaRequest {
        bundle: &bundle,
        layer: &cmd.loss.layer,
        metric: cmd.metric.into(),
        cfg: cmd.loss.config(0.0)?,
        map_source: cmd.loss.map_source()?,
        subjective,
    };
    let outcome = run_oqa(&cmd.manifest, &req)?;
    fs::create_dir_all(&cmd.out).with_context(|| format!("creating {}", cmd.out.display()))?;
    outcome.write_scores(&cmd.out.join(SCORES_FILE))?;
    outcome.write_summary(&cmd.out.join(SUMMARY_FILE))?;
    let s = &outcome.summary;
    let fallbacks = outcome.scores.iter().filter(|x| x.fallback).count();
    if fallbacks > 0 {
        warn!("{fallbacks} references used a uniform map");
    }
    println!("metric={} n={} rmse={} lcc={} srocc={}", s.metric, s.count, s.rmse, s.lcc, s.srocc);
    Ok(())
}

/// Fidelity and loss values of one candidate.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    ssim: f64,
    psnr: f64,
    l2: f64,
    l_p: f64,
    l_p_att: f64,
    l_cx: f64,
    l_cx_att: f64,
}

impl Candidate {
    fn loss(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::P => self.l_p,
            LossKind::PAtt => self.l_p_att,
            LossKind::Cx => self.l_cx,
            LossKind::CxAtt => self.l_cx_att,
        }
    }
}

pub const TRADEOFF_HEADER: [&str; 7] = ["alpha", "ssim", "psnr", "l_p", "l_p_att", "l_cx", "l_cx_att"];

/// For every alpha, picks per reference the candidate minimizing
/// `alpha * l2 + (1 - alpha) * loss` and averages the picks' columns.
pub fn tradeoff(cmd: &TradeoffCmd) -> Result<()> {
    let kind: LossKind = cmd.kind.into();
    for &a in &cmd.alphas {
        cmd.loss.config(a)?;
    }
    let cfg = cmd.loss.config(0.0)?;
    let source = cmd.loss.map_source()?;
    let bundle = load_weights(&cmd.loss.weights)?;
    let entries = read_manifest(&cmd.manifest)?;

    let candidates: Vec<Candidate> = entries
        .par_iter()
        .map(|e: &CorpusEntry| -> Result<Candidate> {
            let gt = load_image(&e.ref_path)?;
            let out = load_image(&e.dist_path)?;
            let pair = FeaturePair::extract(&gt, &out, &bundle, &cmd.loss.layer, &source)?;
            Ok(Candidate {
                ssim: ssim(&gt, &out)?,
                psnr: match psnr(&gt, &out) {
                    Err(Error::IdenticalImages) => f64::INFINITY,
                    other => other?,
                },
                l2: l2_loss(&gt, &out)?,
                l_p: pair.perceptual()?,
                l_p_att: pair.attentive_perceptual()?,
                l_cx: pair.contextual(&cfg)?,
                l_cx_att: pair.attentive_contextual(&cfg)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut groups: Vec<(&Path, Vec<usize>)> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match groups.iter_mut().find(|(r, _)| *r == e.ref_path.as_path()) {
            Some((_, v)) => v.push(i),
            None => groups.push((&e.ref_path, vec![i])),
        }
    }

    let mut rows = Vec::with_capacity(cmd.alphas.len());
    for &alpha in &cmd.alphas {
        let mut acc = [0.0f64; 6];
        for (_, members) in &groups {
            let best = members
                .iter()
                .map(|&i| &candidates[i])
                .min_by(|a, b| combine(alpha, a.l2, a.loss(kind)).total_cmp(&combine(alpha, b.l2, b.loss(kind))))
                .expect("groups are non-empty");
            for (slot, v) in
                acc.iter_mut().zip([best.ssim, best.psnr, best.l_p, best.l_p_att, best.l_cx, best.l_cx_att])
            {
                *slot += v;
            }
        }
        let n = groups.len() as f64;
        let mut row = vec![alpha];
        row.extend(acc.iter().map(|v| v / n));
        rows.push(row);
    }

    let mut w = csv::Writer::from_path(&cmd.out).with_context(|| format!("writing {}", cmd.out.display()))?;
    w.write_record(TRADEOFF_HEADER)?;
    for row in &rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;

    if let Some(path) = &cmd.svg {
        let col = TRADEOFF_HEADER.iter().position(|c| *c == kind_column(kind)).expect("known column");
        let series = vec![
            ("ssim".to_string(), rows.iter().map(|r| (r[0], r[1])).collect()),
            (kind_column(kind).to_string(), rows.iter().map(|r| (r[0], r[col])).collect()),
        ];
        let chart = svg::line_chart("alpha sweep", "alpha", &series);
        fs::write(path, chart).with_context(|| format!("writing {}", path.display()))?;
    }
    info!("{} alpha rows over {} references", rows.len(), groups.len());
    Ok(())
}

fn kind_column(kind: LossKind) -> &'static str {
    match kind {
        LossKind::P => "l_p",
        LossKind::PAtt => "l_p_att",
        LossKind::Cx => "l_cx",
        LossKind::CxAtt => "l_cx_att",
    }
}

pub fn layers(cmd: &LayersCmd) -> Result<()> {
    let bundle = load_weights(&cmd.weights)?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record(["name", "kind", "out_channels"])?;
    for l in bundle.list_layers() {
        w.write_record([l.name, l.kind.to_string(), l.out_channels.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
