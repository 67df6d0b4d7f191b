mod common;

use std::ffi::OsString;
use std::fs;

use clap::Parser;
use common::*;
use slsdeep_cli::config::RunConfig;
use slsdeep_cli::{resolve, split_overrides, Cli};

fn resolve_args(args: &[String]) -> RunConfig {
    let argv: Vec<OsString> = std::iter::once("slsdeep".to_string()).chain(args.iter().cloned()).map(Into::into).collect();
    let (rest, overrides) = split_overrides(argv).unwrap();
    let cli = Cli::try_parse_from(rest).unwrap();
    resolve(&cli, &overrides).unwrap()
}

/// Every combination of (file sets it, `--seed`/`--out` sets it, dotted flag sets it)
/// for keys of each value type; the highest-precedence source present must win.
#[test]
fn precedence_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    // (key, file value, dotted-flag value, default, reader)
    type Read = fn(&RunConfig) -> String;
    let keys: [(&str, &str, &str, Read); 6] = [
        ("loss.alpha", "0.25", "0.75", |c| c.loss.alpha.to_string()),
        ("loss.use_epe", "false", "true", |c| c.loss.use_epe.to_string()),
        ("train.epochs", "7", "9", |c| c.train.epochs.to_string()),
        ("network.pyramid_scales", "1, 3", "2", |c| format!("{:?}", c.network.pyramid_scales)),
        ("network.width_scale", "1/4", "1/8", |c| c.network.width_scale.to_string()),
        ("network.skip_mode", "all", "single", |c| format!("{:?}", c.network.skip_mode)),
    ];
    let norm = |key: &str, v: &str| -> String {
        let mut r = slsdeep_cli::config::Resolver::default();
        r.set(key, v).unwrap();
        let c = r.finish().unwrap();
        keys.iter().find(|k| k.0 == key).unwrap().3(&c)
    };
    let default = RunConfig::default();
    for &(key, file_v, flag_v, read) in &keys {
        for mask in 0..4 {
            let (in_file, in_flag) = (mask & 1 != 0, mask & 2 != 0);
            let cfg = tmp.path().join(format!("c{mask}.txt"));
            fs::write(&cfg, if in_file { format!("{key} = {file_v}\n") } else { String::new() }).unwrap();
            let mut args = vec!["--config".to_string(), s(&cfg).to_string()];
            if in_flag {
                args.push(format!("--{key}={flag_v}"));
            }
            args.push("train".into());
            let got = read(&resolve_args(&args));
            let want = if in_flag {
                norm(key, flag_v)
            } else if in_file {
                norm(key, file_v)
            } else {
                read(&default)
            };
            assert_eq!(got, want, "{key} file={in_file} flag={in_flag}");
        }
    }

    // Seeds: file < --seed < dotted flag, and --seed sets both streams.
    for mask in 0..8 {
        let (in_file, in_seed, in_flag) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let cfg = tmp.path().join(format!("s{mask}.txt"));
        fs::write(&cfg, if in_file { "train.seed = 5\naugment.seed = 5\n" } else { "" }).unwrap();
        let mut args = vec!["--config".to_string(), s(&cfg).to_string()];
        if in_seed {
            args.extend(["--seed".to_string(), "6".to_string()]);
        }
        args.push("train".into());
        if in_flag {
            args.push("--train.seed=7".into());
        }
        let c = resolve_args(&args);
        let base = if in_seed { 6 } else if in_file { 5 } else { 0 };
        assert_eq!(c.train.seed, if in_flag { 7 } else { base }, "mask {mask}");
        assert_eq!(c.augment.seed, base, "mask {mask}");
    }

    // --out against paths.out_dir in the file and as a dotted flag.
    let cfg = tmp.path().join("o.txt");
    fs::write(&cfg, "paths.out_dir = from_file\n").unwrap();
    let c = resolve_args(&["--config".into(), s(&cfg).into(), "train".into()]);
    assert_eq!(c.out_dir(), std::path::Path::new("from_file"));
    let c = resolve_args(&["--config".into(), s(&cfg).into(), "--out".into(), "flag".into(), "train".into()]);
    assert_eq!(c.out_dir(), std::path::Path::new("flag"));
    let c = resolve_args(&["--out".into(), "flag".into(), "train".into(), "--paths.out_dir".into(), "dotted".into()]);
    assert_eq!(c.out_dir(), std::path::Path::new("dotted"));
}

#[test]
fn provenance_copy_records_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let train = dataset(tmp.path(), "train", 1, 64, 64);
    let cfg = desk_config(tmp.path(), "loss.alpha = 0.25\ntrain.epochs = 1");
    let out = tmp.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out), "--paths.train_manifest", s(&train), "--loss.alpha=0.125"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("run_config.txt")).unwrap();
    assert!(text.lines().any(|l| l == "loss.alpha = 0.125"), "{text}");
    assert!(text.lines().any(|l| l == "train.epochs = 1"), "{text}");
}
