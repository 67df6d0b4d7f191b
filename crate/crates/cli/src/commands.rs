use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use image::{GrayImage, Rgb, RgbImage};
use rayon::prelude::*;
use serde::Serialize;
use slsdeep::checks::{run_all, run_scope, CaseResult, SCOPES};
use slsdeep::data::{load_manifest, read_image, read_mask, ManifestSource, SampleSource, Split};
use slsdeep::metrics::{evaluate_dataset, Mask, MetricsReport};
use slsdeep::network::{build, Model};
use slsdeep::trainer::{evaluate, segment, train, Checkpoint, TrainOptions};

use crate::config::{render, RunConfig, PROVENANCE_FILE};
use crate::{usage, CliError, CliResult, Command};

pub const FINAL_REPORT: &str = "final_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const GRADCHECK_REPORT: &str = "gradcheck_report.json";

pub fn dispatch(command: &Command, cfg: RunConfig) -> CliResult<()> {
    match command {
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Infer { images, overlay } => cmd_infer(cfg, images, *overlay),
        Command::Gradcheck { scope } => cmd_gradcheck(cfg, scope),
    }
}

fn validate(cfg: &RunConfig) -> CliResult<()> {
    cfg.network.validate().map_err(|e| usage(e.to_string()))?;
    cfg.loss.validate().map_err(|e| usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    cfg.augment.validate().map_err(|e| usage(e.to_string()))
}

fn require_file(path: &Option<PathBuf>, key: &str, what: &str) -> CliResult<PathBuf> {
    match path {
        None => Err(usage(format!("missing {what}: pass --{key}=<path> or set `{key}` in the config file"))),
        Some(p) if !p.is_file() => Err(usage(format!("{what} {} not found (--{key})", p.display()))),
        Some(p) => Ok(p.clone()),
    }
}

/// Creates the output directory and writes the resolved configuration into it.
fn prepare_out(cfg: &mut RunConfig) -> CliResult<PathBuf> {
    let out = cfg.out_dir();
    cfg.paths.out_dir = Some(out.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(PROVENANCE_FILE);
    fs::write(&path, render(cfg)).with_context(|| format!("writing {}", path.display()))?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn manifest_source(path: &Path, split: Split, cfg: &RunConfig) -> CliResult<ManifestSource> {
    Ok(ManifestSource { manifest: load_manifest(path, split)?, target: cfg.network.input_size })
}

fn load_checkpoint(cfg: &RunConfig) -> CliResult<Checkpoint> {
    let path = require_file(&cfg.paths.checkpoint, "paths.checkpoint", "checkpoint")?;
    Ok(Checkpoint::load_for(&path, &cfg.network).with_context(|| format!("loading {}", path.display()))?)
}

pub fn cmd_train(mut cfg: RunConfig) -> CliResult<()> {
    let train_path = require_file(&cfg.paths.train_manifest, "paths.train_manifest", "training manifest")?;
    let val_path = match &cfg.paths.val_manifest {
        Some(_) => Some(require_file(&cfg.paths.val_manifest, "paths.val_manifest", "validation manifest")?),
        None => None,
    };
    let resume = match &cfg.paths.resume {
        Some(_) => Some(require_file(&cfg.paths.resume, "paths.resume", "resume checkpoint")?),
        None => None,
    };
    validate(&cfg)?;
    let train_src = manifest_source(&train_path, Split::Train, &cfg)?;
    let val_src = val_path.map(|p| manifest_source(&p, Split::Validation, &cfg)).transpose()?;
    let resume = resume.map(|p| Checkpoint::load_for(&p, &cfg.network)).transpose()?;
    let out = prepare_out(&mut cfg)?;

    let (model, params) = build(&cfg.network, cfg.train.seed)?;
    let opts = TrainOptions {
        out_dir: Some(&out),
        validation: val_src.as_ref().map(|s| s as &dyn SampleSource),
        resume,
        stop_after: None,
    };
    let outcome = train(&model, params, &train_src, &cfg.train, &cfg.loss, &cfg.augment, opts)?;

    let scored: &dyn SampleSource = match &val_src {
        Some(v) => v,
        None => &train_src,
    };
    let report = evaluate(&model, &outcome.params, scored, cfg.train.batch_size)?;
    write_json(&out.join(FINAL_REPORT), &report)?;
    if let Some(last) = outcome.log.last() {
        println!("iterations {}  final l_total {:.6}", last.iter, last.l_total);
    }
    print_aggregate(&report);
    if let Some(ck) = &outcome.last_checkpoint {
        println!("checkpoint {}", ck.display());
    }
    Ok(())
}

pub fn cmd_eval(mut cfg: RunConfig) -> CliResult<()> {
    let manifest_path = require_file(&cfg.paths.eval_manifest, "paths.eval_manifest", "evaluation manifest")?;
    validate(&cfg)?;
    let ck = load_checkpoint(&cfg)?;
    let manifest = load_manifest(&manifest_path, Split::Test)?;
    let out = prepare_out(&mut cfg)?;
    let model = Model::new(&cfg.network)?;
    let pairs = manifest
        .records
        .par_iter()
        .map(|r| -> anyhow::Result<(String, Mask, Mask)> {
            let image = read_image(&r.image)?;
            let gt = Mask::from_tensor(&read_mask(r.mask.as_ref().expect("test split has masks"))?)?;
            let pred = segment(&model, &ck.params, &image)?;
            Ok((r.image.display().to_string(), pred, gt))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = evaluate_dataset(&pairs, true)?;
    write_json(&out.join(EVAL_REPORT), &report)?;
    print_aggregate(&report);
    Ok(())
}

fn print_aggregate(report: &MetricsReport) {
    let a = &report.aggregate;
    println!(
        "images {}  ACC {:.4}  DIC {:.4}  JAC {:.4}  SEN {:.4}  SPE {:.4}",
        report.per_image.len(),
        a.acc,
        a.dic,
        a.jac,
        a.sen,
        a.spe
    );
}

pub fn cmd_infer(mut cfg: RunConfig, images: &[PathBuf], overlay: bool) -> CliResult<()> {
    validate(&cfg)?;
    let ck = load_checkpoint(&cfg)?;
    let out = prepare_out(&mut cfg)?;
    let model = Model::new(&cfg.network)?;
    let mut seen = std::collections::BTreeSet::new();
    let stems: Vec<Option<String>> = images
        .iter()
        .map(|p| {
            let stem = p.file_stem()?.to_string_lossy().into_owned();
            seen.insert(stem.clone()).then_some(stem)
        })
        .collect();
    let results: Vec<anyhow::Result<PathBuf>> = images
        .par_iter()
        .zip(stems.par_iter())
        .map(|(path, stem)| {
            let stem = stem.as_ref().context("file name missing or shared with an earlier input")?;
            infer_one(&model, &ck, path, &out, stem, overlay)
        })
        .collect();
    let mut failed = 0;
    for (path, r) in images.iter().zip(results) {
        match r {
            Ok(mask) => println!("{} -> {}", path.display(), mask.display()),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e:#}", path.display());
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Failure(anyhow::anyhow!("{failed} of {} inputs failed", images.len())));
    }
    Ok(())
}

fn infer_one(model: &Model, ck: &Checkpoint, path: &Path, out: &Path, stem: &str, overlay: bool) -> anyhow::Result<PathBuf> {
    let image = read_image(path)?;
    let mask = segment(model, &ck.params, &image)?;
    let (w, h) = (mask.width as u32, mask.height as u32);
    let gray = GrayImage::from_raw(w, h, mask.data.iter().map(|&v| v * 255).collect()).expect("mask size");
    let mask_path = out.join(format!("{stem}_mask.png"));
    gray.save(&mask_path).with_context(|| format!("writing {}", mask_path.display()))?;
    if overlay {
        let mut rgb = image::open(path)?.to_rgb8();
        draw_boundary(&mut rgb, &mask);
        let p = out.join(format!("{stem}_overlay.png"));
        rgb.save(&p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(mask_path)
}

/// Paints foreground pixels that touch background (4-neighbourhood) red.
pub fn draw_boundary(img: &mut RgbImage, mask: &Mask) {
    let (h, w) = (mask.height, mask.width);
    let at = |y: usize, x: usize| mask.data[y * w + x] != 0;
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let edge = (y > 0 && !at(y - 1, x))
                || (y + 1 < h && !at(y + 1, x))
                || (x > 0 && !at(y, x - 1))
                || (x + 1 < w && !at(y, x + 1));
            if edge {
                img.put_pixel(x as u32, y as u32, Rgb([255, 0, 0]));
            }
        }
    }
}

pub fn cmd_gradcheck(cfg: RunConfig, scope: &str) -> CliResult<()> {
    let results: Vec<CaseResult> = if scope == "all" {
        run_all()?
    } else if SCOPES.contains(&scope) {
        run_scope(scope)?
    } else {
        return Err(usage(format!("unknown scope `{scope}`; valid scopes: all, {}", SCOPES.join(", "))));
    };
    for r in &results {
        println!(
            "{:<20} {:<36} max_rel_err {:.3e}  {}",
            r.scope,
            r.case,
            r.report.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = &cfg.paths.out_dir {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join(GRADCHECK_REPORT), &results)?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Failure(anyhow::anyhow!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}
