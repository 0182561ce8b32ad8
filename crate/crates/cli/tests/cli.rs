use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csfp_core::{load_image, save_image, tnsr, PlanarImage, Tensor};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

fn csfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csfp")).args(args).env_remove("CSFP_JOBS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = csfp(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 64x64 crop of a bundled natural image written to `dir`.
fn crop_to(dir: &Path, name: &str) -> PathBuf {
    let img = load_image(data(&format!("{name}.png"))).unwrap().crop(96, 96, 64, 64).unwrap();
    let path = dir.join(format!("{name}.png"));
    save_image(&img, &path).unwrap();
    path
}

fn loss_row(line: &str) -> Vec<String> {
    line.trim().split(',').map(str::to_string).collect()
}

#[test]
fn help_shows_viewing_defaults() {
    for cmd in ["map", "loss", "oqa", "tradeoff"] {
        let help = ok(&[cmd, "--help"]);
        for needle in [
            "--dot-pitch",
            "[default: 0.25]",
            "--distance",
            "[default: 550]",
            "--s-low",
            "[default: 2]",
            "--s-high",
            "[default: 23]",
            "--no-fold",
        ] {
            assert!(help.contains(needle), "{cmd} help lacks {needle}");
        }
    }
}

#[test]
fn map_outputs_and_run_log() {
    let dir = tempfile::tempdir().unwrap();
    let input = crop_to(dir.path(), "chelsea");
    let a = dir.path().join("a");
    let stdout = ok(&["map", s(&input), "-o", s(&a)]);
    assert!(stdout.starts_with("min=") && stdout.contains("max=1 "));
    let png = load_image(a.join("chelsea_map.png")).unwrap();
    assert_eq!(png.tensor().max(), 1.0);
    let t = tnsr::read(a.join("chelsea_map.tnsr")).unwrap();
    assert_eq!(t.dims(), &[64, 64]);

    ok(&["map", s(&input), "-o", s(&a), "--no-fold"]);
    let log = fs::read_to_string(a.join("run.log")).unwrap();
    let sums: Vec<&str> = log.lines().map(|l| l.rsplit("sha256=").next().unwrap()).collect();
    assert_eq!(sums.len(), 2);
    assert_ne!(sums[0], sums[1]);
    assert!(log.lines().nth(1).unwrap().contains("fold=Literal"));
}

#[test]
fn all_pass_map_is_normalized_luma() {
    let dir = tempfile::tempdir().unwrap();
    let input = crop_to(dir.path(), "camera");
    ok(&["map", s(&input), "-o", s(dir.path()), "--s-low", "0", "--s-high", "1e9"]);
    let t = tnsr::read(dir.path().join("camera_map.tnsr")).unwrap();
    let luma = load_image(&input).unwrap().luma_plane();
    let peak = luma.max();
    let want = luma.map(|v| v / peak).unwrap();
    assert!(t.max_abs_diff(&want).unwrap() < 1e-6);
}

#[test]
fn flat_image_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let flat = dir.path().join("flat.png");
    save_image(&PlanarImage::from_luma(Tensor::filled(vec![32, 32], 0.5).unwrap()).unwrap(), &flat).unwrap();
    assert_eq!(csfp(&["map", s(&flat), "-o", s(dir.path())]).status.code(), Some(3));
    ok(&["map", s(&flat), "-o", s(dir.path()), "--fallback-uniform"]);
    let t = tnsr::read(dir.path().join("flat_map.tnsr")).unwrap();
    assert!(t.data().iter().all(|&v| v == 1.0));
    assert_eq!(csfp(&["map", s(&dir.path().join("missing.png"))]).status.code(), Some(2));
}

#[test]
fn loss_rows() {
    let dir = tempfile::tempdir().unwrap();
    let gt = crop_to(dir.path(), "coffee");
    let w = data("vgg_mini.cnnw");
    let common = ["--weights", s(&w), "--layer", "relu2_2"];

    let same = ok(&[&["loss", s(&gt), s(&gt), "--kind", "p"][..], &common].concat());
    let row = loss_row(&same);
    assert_eq!(row.len(), 11);
    assert_eq!(row[9].parse::<f64>().unwrap(), 0.0);

    let img = load_image(&gt).unwrap();
    let mut last = 0.0;
    for sigma in [1.0, 2.0, 4.0] {
        let blurred = dir.path().join(format!("b{sigma}.png"));
        save_image(&csfp_core::distort::gaussian_blur(&img, sigma).unwrap(), &blurred).unwrap();
        let p = loss_row(&ok(&[&["loss", s(&gt), s(&blurred), "--kind", "p"][..], &common].concat()));
        let l_p: f64 = p[5].parse().unwrap();
        assert!(l_p > last, "sigma {sigma}: {l_p} <= {last}");
        last = l_p;
        let u =
            loss_row(&ok(&[&["loss", s(&gt), s(&blurred), "--kind", "p_att", "--uniform-map"][..], &common].concat()));
        assert_eq!(u[6], p[5]);
        assert_eq!(u[9], p[9]);
    }

    let header = ok(&[&["loss", s(&gt), s(&gt), "--header"][..], &common].concat());
    assert!(header.starts_with("image_id,layer,alpha,kind,l2,l_p,l_p_att,l_cx,l_cx_att,combined,fallback_flag\n"));

    let small = dir.path().join("small.png");
    save_image(&img.crop(0, 0, 32, 32).unwrap(), &small).unwrap();
    let out = csfp(&[&["loss", s(&gt), s(&small)][..], &common].concat());
    assert_eq!(out.status.code(), Some(2));
    let out = csfp(&["loss", s(&gt), s(&gt), "--weights", s(&w), "--layer", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corpus_oqa_and_tradeoff() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir(&src).unwrap();
    crop_to(&src, "camera");
    let corpus = dir.path().join("corpus");
    let sev = "0.4,0.6,0.8,1,1.25,1.5,2,2.5,3,3.5,4,5";
    assert_eq!(ok(&["corpus", "--src", s(&src), "--out", s(&corpus), "--severities", sev, "--seed", "7"]).trim(), "12");
    let manifest = corpus.join("manifest.csv");
    let w = data("vgg_mini.cnnw");

    let out = dir.path().join("oqa");
    ok(&[
        "oqa",
        "--manifest",
        s(&manifest),
        "--weights",
        s(&w),
        "--layer",
        "relu2_2",
        "--metric",
        "p",
        "--out",
        s(&out),
    ]);
    let summary = fs::read_to_string(out.join("oqa_summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next().unwrap(), "metric,layer,n,rmse,lcc,srocc,beta1,beta2,beta3,beta4,beta5");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..3], &["p", "relu2_2", "12"]);
    assert_eq!(row[5].parse::<f64>().unwrap(), 1.0);
    assert_eq!(fs::read_to_string(out.join("oqa_scores.csv")).unwrap().lines().count(), 13);

    // user-supplied scores replace the severity proxy
    let subj = dir.path().join("subjective.csv");
    let mut text = String::from("image_id,dmos\n");
    for (k, line) in fs::read_to_string(&manifest).unwrap().lines().skip(1).enumerate() {
        text.push_str(&format!("{},{}\n", line.split(',').next().unwrap(), 100 - k));
    }
    fs::write(&subj, text).unwrap();
    let out2 = dir.path().join("oqa2");
    ok(&[
        "oqa",
        "--manifest",
        s(&manifest),
        "--subjective",
        s(&subj),
        "--weights",
        s(&w),
        "--layer",
        "relu1_2",
        "--metric",
        "p",
        "--out",
        s(&out2),
    ]);
    let row2 = fs::read_to_string(out2.join("oqa_summary.csv")).unwrap();
    assert_eq!(row2.lines().nth(1).unwrap().split(',').nth(5).unwrap().parse::<f64>().unwrap(), -1.0);

    let csv = dir.path().join("tradeoff.csv");
    let svg = dir.path().join("tradeoff.svg");
    ok(&[
        "tradeoff",
        "--manifest",
        s(&manifest),
        "--weights",
        s(&w),
        "--layer",
        "relu1_2",
        "--alphas",
        "0.3,0.6,0.9",
        "--out",
        s(&csv),
        "--svg",
        s(&svg),
    ]);
    let table = fs::read_to_string(&csv).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "alpha,ssim,psnr,l_p,l_p_att,l_cx,l_cx_att");
    assert_eq!(lines.count(), 3);
    assert!(fs::read_to_string(&svg).unwrap().contains("<polyline"));
}

#[test]
fn empty_corpus_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = csfp(&["corpus", "--src", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(4));
    let bad =
        csfp(&["corpus", "--src", s(dir.path()), "--out", s(dir.path()), "--kind", "down-up", "--severities", "5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn layers_listing() {
    let out = ok(&["layers", "--weights", s(&data("tiny2.cnnw"))]);
    assert_eq!(out, "name,kind,out_channels\nconv1,conv2d,4\nrelu1,relu,4\n");
}
