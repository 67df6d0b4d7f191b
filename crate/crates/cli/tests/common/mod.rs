#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, Luma, Rgb, RgbImage};

pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slsdeep")).args(args).env("RUST_LOG", "warn").output().expect("spawn slsdeep")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Dark disk on a lighter background, plus its 0/255 mask.
pub fn disk_pair(h: u32, w: u32, cy: f64, cx: f64, r: f64) -> (RgbImage, GrayImage) {
    let inside = |x: u32, y: u32| (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r;
    let img = RgbImage::from_fn(w, h, |x, y| {
        let t = ((x * 7 + y * 13) % 17) as u8;
        if inside(x, y) { Rgb([90 + t, 50 + t, 40]) } else { Rgb([210 - t, 160, 130 + t]) }
    });
    let mask = GrayImage::from_fn(w, h, |x, y| Luma([if inside(x, y) { 255 } else { 0 }]));
    (img, mask)
}

/// Writes `n` image/mask pairs of size `h × w` and a manifest listing them.
pub fn dataset(dir: &Path, name: &str, n: usize, h: u32, w: u32) -> PathBuf {
    let sub = dir.join(name);
    fs::create_dir_all(&sub).unwrap();
    let mut lines = String::new();
    for i in 0..n {
        let f = i as f64 / n.max(1) as f64;
        let (img, mask) = disk_pair(h, w, h as f64 * (0.4 + 0.2 * f), w as f64 * (0.6 - 0.2 * f), h.min(w) as f64 * (0.2 + 0.1 * f));
        img.save(sub.join(format!("img{i}.png"))).unwrap();
        mask.save(sub.join(format!("mask{i}.png"))).unwrap();
        lines.push_str(&format!("{{\"image\": \"{name}/img{i}.png\", \"mask\": \"{name}/mask{i}.png\"}}\n"));
    }
    let manifest = dir.join(format!("{name}.jsonl"));
    fs::write(&manifest, lines).unwrap();
    manifest
}

/// Small, fast configuration written to `dir/desk.txt`.
pub fn desk_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "# desk-scale run\n\
         network.width_scale = 1/16\n\
         network.input_size = 64, 64\n\
         train.epochs = 2\n\
         train.batch_size = 2\n\
         {extra}\n"
    );
    let p = dir.join("desk.txt");
    fs::write(&p, text).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
