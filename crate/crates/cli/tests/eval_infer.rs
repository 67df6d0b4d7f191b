mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use image::{GrayImage, Luma};
use slsdeep::metrics::MetricsReport;
use slsdeep::network::{build, NetworkConfig};
use slsdeep::tensor::Tensor;
use slsdeep::trainer::{Checkpoint, OptimizerState, TrainState};

fn desk() -> NetworkConfig {
    NetworkConfig::desk(16, 64)
}

fn save_checkpoint(path: &Path, network: &NetworkConfig, background_bias: Option<f32>) {
    let (_, mut params) = build(network, 3).unwrap();
    if let Some(b) = background_bias {
        // Zero scale on the class logits leaves only the shift: a constant prediction.
        let g = params.tensor("decoder.head.bn2.gamma").unwrap().shape();
        params.set("decoder.head.bn2.gamma", Tensor::zeros(g)).unwrap();
        params.set("decoder.head.bn2.beta", Tensor::new(g, vec![b, -b]).unwrap()).unwrap();
    }
    let optimizer = OptimizerState::new(&params);
    Checkpoint { network: network.clone(), params, optimizer, state: TrainState::default() }.save(path).unwrap();
}

fn flags(cfg: &Path, out: &Path, ck: &Path) -> Vec<String> {
    vec![
        "--config".into(),
        s(cfg).into(),
        "--out".into(),
        s(out).into(),
        format!("--paths.checkpoint={}", s(ck)),
    ]
}

fn args<'a>(head: &[&'a str], rest: &'a [String]) -> Vec<&'a str> {
    head.iter().copied().chain(rest.iter().map(String::as_str)).collect()
}

fn report(out: &Path) -> MetricsReport {
    serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap()
}

/// Manifest of images whose masks are entirely background.
fn background_dataset(dir: &Path) -> PathBuf {
    let m = dataset(dir, "bg", 2, 50, 70);
    for i in 0..2 {
        GrayImage::from_pixel(70, 50, Luma([0])).save(dir.join(format!("bg/mask{i}.png"))).unwrap();
    }
    m
}

#[test]
fn oracle_checkpoint_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path(), "");
    let ck = tmp.path().join("oracle.slsd");
    save_checkpoint(&ck, &desk(), Some(20.0));
    let manifest = background_dataset(tmp.path());
    let out = tmp.path().join("eval");
    let f = flags(&cfg, &out, &ck);
    let m = format!("--paths.eval_manifest={}", s(&manifest));
    let o = run(&args(&["eval", &m], &f));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&out);
    assert_eq!(r.aggregate.values(), [1.0; 5]);
    assert_eq!(r.per_image.len(), 2);
    assert_eq!(r.counts.tn, 2 * 50 * 70);
}

#[test]
fn random_weights_report_has_schema_and_range() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path(), "");
    let ck = tmp.path().join("random.slsd");
    save_checkpoint(&ck, &desk(), None);
    let manifest = dataset(tmp.path(), "test", 3, 48, 80);
    let out = tmp.path().join("eval");
    let f = flags(&cfg, &out, &ck);
    let m = format!("--paths.eval_manifest={}", s(&manifest));
    let o = run(&args(&["eval", &m], &f));
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    let mut cols: Vec<&str> = raw["aggregate"].as_object().unwrap().keys().map(String::as_str).collect();
    cols.sort();
    assert_eq!(cols, ["ACC", "DIC", "JAC", "SEN", "SPE"]);
    assert_eq!(raw["schema_version"], 1);
    let r = report(&out);
    for img in &r.per_image {
        assert!(img.scores.values().iter().all(|v| (0.0..=1.0).contains(v)), "{img:?}");
        assert_eq!(img.counts.total(), 48 * 80);
    }
    assert!(r.aggregate.values().iter().all(|v| (0.0..=1.0).contains(v)));

    // Rerunning from the provenance copy reproduces the report.
    let again = tmp.path().join("again");
    let o = run(&["eval", "--config", s(&out.join("run_config.txt")), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(out.join("eval_report.json")).unwrap(), fs::read(again.join("eval_report.json")).unwrap());
}

#[test]
fn incompatible_checkpoint_names_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path(), "");
    let ck = tmp.path().join("wide.slsd");
    save_checkpoint(&ck, &NetworkConfig::desk(8, 64), None);
    let manifest = dataset(tmp.path(), "test", 1, 64, 64);
    let f = flags(&cfg, &tmp.path().join("eval"), &ck);
    let m = format!("--paths.eval_manifest={}", s(&manifest));
    let o = run(&args(&["eval", &m], &f));
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("parameter `") && err.contains("expected"), "{err}");
}

#[test]
fn eval_without_checkpoint_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(tmp.path(), "test", 1, 64, 64);
    let m = format!("--paths.eval_manifest={}", s(&manifest));
    let o = run(&["eval", &m, "--out", s(&tmp.path().join("e"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--paths.checkpoint"));
}

#[test]
fn infer_writes_source_sized_binary_masks_and_overlays() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path(), "");
    let ck = tmp.path().join("random.slsd");
    save_checkpoint(&ck, &desk(), None);
    dataset(tmp.path(), "in", 2, 45, 93);
    let out = tmp.path().join("masks");
    let f = flags(&cfg, &out, &ck);
    let a = tmp.path().join("in/img0.png");
    let b = tmp.path().join("in/img1.png");
    let o = run(&args(&["infer", s(&a), s(&b)], &f));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for stem in ["img0", "img1"] {
        let m = image::open(out.join(format!("{stem}_mask.png"))).unwrap().to_luma8();
        assert_eq!(m.dimensions(), (93, 45));
        assert!(m.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        assert!(!out.join(format!("{stem}_overlay.png")).exists());
    }

    let out2 = tmp.path().join("overlays");
    let f = flags(&cfg, &out2, &ck);
    let o = run(&args(&["infer", "--overlay", s(&a)], &f));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ov = image::open(out2.join("img0_overlay.png")).unwrap();
    assert_eq!((ov.width(), ov.height()), (93, 45));
    assert_eq!(fs::read_dir(&out2).unwrap().count(), 3);
}

#[test]
fn infer_reports_bad_files_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path(), "");
    let ck = tmp.path().join("random.slsd");
    save_checkpoint(&ck, &desk(), None);
    dataset(tmp.path(), "in", 1, 64, 64);
    let junk = tmp.path().join("junk.png");
    fs::write(&junk, b"not an image").unwrap();
    let out = tmp.path().join("masks");
    let f = flags(&cfg, &out, &ck);
    let good = tmp.path().join("in/img0.png");
    let o = run(&args(&["infer", s(&junk), s(&good)], &f));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("junk.png"), "{}", stderr(&o));
    assert!(out.join("img0_mask.png").is_file());
}

#[test]
fn boundary_is_drawn_on_mask_edges_only() {
    use slsdeep::metrics::Mask;
    let mut data = vec![0u8; 25];
    for y in 1..4 {
        for x in 1..4 {
            data[y * 5 + x] = 1;
        }
    }
    let mask = Mask::new(5, 5, data).unwrap();
    let mut img = image::RgbImage::new(5, 5);
    slsdeep_cli::commands::draw_boundary(&mut img, &mask);
    let red: Vec<(u32, u32)> = img.enumerate_pixels().filter(|p| p.2 .0 == [255, 0, 0]).map(|p| (p.0, p.1)).collect();
    assert_eq!(red.len(), 8);
    assert!(!red.contains(&(2, 2)));
}
