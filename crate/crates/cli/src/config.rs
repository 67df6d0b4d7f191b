//! Run configuration: a flat `section.key = value` text file merged over the built-in
//! defaults, then command-line overrides.
//!
//! Values are typed by the default they replace: integers, reals, booleans, strings and
//! comma-separated lists (`network.pyramid_scales = 1, 2, 3, 6`). An empty value clears an
//! optional path.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use slsdeep::data::AugmentConfig;
use slsdeep::loss::LossConfig;
use slsdeep::network::NetworkConfig;
use slsdeep::trainer::TrainConfig;

pub const SECTIONS: &[&str] = &["network", "loss", "train", "augment", "paths"];
pub const DEFAULT_OUT_DIR: &str = "out";
pub const PROVENANCE_FILE: &str = "run_config.txt";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Weights for `eval` and `infer`.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub paths: PathsConfig,
}

/// Where a setting came from, for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Flag,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

/// Splits config text into settings. `#` starts a comment line.
pub fn parse_text(text: &str, path: &std::path::Path) -> Result<Vec<Setting>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let origin = Origin::File { path: path.to_path_buf(), line: i + 1 };
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("{origin}: expected `section.key = value`, got `{line}`"));
        };
        out.push(Setting { key: key.trim().to_string(), value: unquote(value.trim()).to_string(), origin });
    }
    Ok(out)
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(s)
}

/// Builder that applies settings in precedence order: defaults, file, `--seed`/`--out`,
/// then dotted overrides.
pub struct Resolver {
    root: Value,
}

impl Default for Resolver {
    fn default() -> Self {
        Resolver { root: serde_json::to_value(RunConfig::default()).expect("config serializes") }
    }
}

impl Resolver {
    pub fn apply(&mut self, s: &Setting) -> Result<(), String> {
        let fail = |m: String| format!("{}: `{}`: {m}", s.origin, s.key);
        let (section, field) = s.key.split_once('.').ok_or_else(|| fail("key must look like section.key".into()))?;
        let table = self
            .root
            .get_mut(section)
            .and_then(Value::as_object_mut)
            .ok_or_else(|| fail(format!("unknown section; valid sections: {}", SECTIONS.join(", "))))?;
        let Some(current) = table.get(field) else {
            let mut keys: Vec<&String> = table.keys().collect();
            keys.sort();
            let keys: Vec<&str> = keys.into_iter().map(String::as_str).collect();
            return Err(fail(format!("unknown key; `{section}` accepts: {}", keys.join(", "))));
        };
        let value = typed(current, &s.value).map_err(fail)?;
        table.insert(field.to_string(), value);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        self.apply(&Setting { key: key.into(), value: value.into(), origin: Origin::Flag })
    }

    pub fn finish(self) -> Result<RunConfig, String> {
        serde_json::from_value(self.root).map_err(|e| format!("invalid configuration: {e}"))
    }
}

fn typed(current: &Value, raw: &str) -> Result<Value, String> {
    match current {
        Value::Bool(_) => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true or false, got `{raw}`")),
        },
        Value::Number(n) if n.is_f64() => {
            let v: f64 = raw.parse().map_err(|_| format!("expected a real number, got `{raw}`"))?;
            Number::from_f64(v).map(Value::Number).ok_or_else(|| format!("`{raw}` is not finite"))
        }
        Value::Number(_) => raw
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("expected a non-negative integer, got `{raw}`")),
        Value::Array(items) => {
            let inner = raw.trim().trim_start_matches('[').trim_end_matches(']');
            let element = items.first().cloned().unwrap_or(Value::from(0u64));
            if inner.trim().is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            inner.split(',').map(|p| typed(&element, p.trim())).collect::<Result<_, _>>().map(Value::Array)
        }
        Value::Null if raw.is_empty() => Ok(Value::Null),
        Value::Null | Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Object(_) => Err("not a scalar setting".into()),
    }
}

/// Renders every non-empty setting as config text that resolves back to `config`.
pub fn render(config: &RunConfig) -> String {
    let root = serde_json::to_value(config).expect("config serializes");
    let mut out = String::new();
    for section in SECTIONS {
        let table: &Map<String, Value> = root[section].as_object().expect("section table");
        for (key, value) in table {
            if value.is_null() {
                continue;
            }
            let _ = writeln!(out, "{section}.{key} = {}", scalar(value));
        }
    }
    out
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(scalar).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

impl RunConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}
