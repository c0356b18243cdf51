//! Experiment configuration: one TOML file, optionally patched by
//! `dotted.key=value` overrides from the command line.
//!
//! Loading is pure: the same file and override list always produce the same
//! [`ExperimentConfig`]. Overrides are applied left to right against the
//! fully resolved config (defaults filled in), so `trainer.max_epochs=20`
//! works whether or not the file spells out every trainer field. The value
//! side of an override is coerced to the type the field already has; an
//! unknown key fails with the closest existing key as a suggestion.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value as Toml;

use crate::data::TransformPipeline;
use crate::error::{Error, Result};
use crate::manager::TrainerConfig;
use crate::monitors::Distance;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Where checkpoints, metrics, and the config snapshot land. CLI flag
    /// and `SPK_RUN_DIR` both override this.
    #[serde(default = "default_run_dir")]
    pub run_dir: String,
    pub data: DataConfig,
    pub module: ModuleConfig,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub callbacks: Vec<CallbackCfg>,
}

fn default_run_dir() -> String {
    "runs/default".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetCfg,
    /// Rows per batch. Must be a multiple of the train pipeline's view
    /// count, because all views of a sample travel in the same batch.
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub drop_last: bool,
    /// Held-out samples drawn from the same generator family with a
    /// different seed. Zero disables the validation loop.
    #[serde(default)]
    pub val_samples: usize,
    #[serde(default)]
    pub train_transform: TransformPipeline,
    #[serde(default)]
    pub val_transform: TransformPipeline,
}

fn default_true() -> bool {
    true
}

/// Procedural dataset selector. `name` picks the generator, the remaining
/// keys are its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetCfg {
    SyntheticImages {
        n_samples: usize,
        n_classes: usize,
        #[serde(default = "default_image_size")]
        size: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    GaussianBlobs {
        n_samples: usize,
        n_classes: usize,
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
}

fn default_image_size() -> usize {
    16
}

fn default_noise() -> f64 {
    0.05
}

fn default_spread() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleConfig {
    /// Forward function, by registered name (`simclr`, `supervised`).
    pub forward: String,
    /// NT-Xent temperature; only the contrastive forward reads it.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub backbone: BlockCfg,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projector: Option<BlockCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<BlockCfg>,
    pub optim: OptimConfig,
}

fn default_temperature() -> f64 {
    0.5
}

/// Architecture selector for one module component. Dimensions are declared
/// here rather than inferred, so mismatches surface as shape errors naming
/// the offending component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockCfg {
    /// Three conv stages with average pooling, global pooling, then a
    /// linear projection to `embedding_dim`. Works on any input size the
    /// poolings don't exhaust.
    SmallConv {
        #[serde(default = "default_in_channels")]
        in_channels: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        embedding_dim: usize,
    },
    /// Flatten, then linear-ReLU-linear, with optional batch norm after
    /// the first linear.
    Mlp {
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        #[serde(default)]
        batch_norm: bool,
    },
    Linear { in_dim: usize, out_dim: usize },
}

fn default_in_channels() -> usize {
    3
}

fn default_channels() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CallbackCfg {
    OnlineProbe {
        name: String,
        #[serde(default = "default_input")]
        input: String,
        #[serde(default = "default_target")]
        target: String,
        n_classes: usize,
        #[serde(default = "default_probe_lr")]
        lr: f64,
    },
    OnlineKnn {
        name: String,
        #[serde(default = "default_input")]
        input: String,
        #[serde(default = "default_target")]
        target: String,
        queue_length: usize,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        distance: Distance,
    },
    Rankme {
        name: String,
        #[serde(default = "default_input")]
        input: String,
        #[serde(default = "default_target")]
        target: String,
        queue_length: usize,
    },
    Lidar {
        name: String,
        #[serde(default = "default_input")]
        input: String,
    },
    /// Expands into one probe per listed layer of `component`, each fed by
    /// a depth tap (`embedding::{layer}`).
    DepthProbes {
        name: String,
        #[serde(default = "default_component")]
        component: String,
        layers: Vec<String>,
        #[serde(default = "default_target")]
        target: String,
        n_classes: usize,
        #[serde(default = "default_probe_lr")]
        lr: f64,
    },
}

fn default_input() -> String {
    "embedding".to_string()
}

fn default_target() -> String {
    "label".to_string()
}

fn default_component() -> String {
    "backbone".to_string()
}

fn default_probe_lr() -> f64 {
    1e-3
}

fn default_k() -> usize {
    10
}

impl CallbackCfg {
    pub fn name(&self) -> &str {
        match self {
            CallbackCfg::OnlineProbe { name, .. }
            | CallbackCfg::OnlineKnn { name, .. }
            | CallbackCfg::Rankme { name, .. }
            | CallbackCfg::Lidar { name, .. }
            | CallbackCfg::DepthProbes { name, .. } => name,
        }
    }
}

/// Reads `path` and applies `overrides` left to right. Parse errors keep
/// the line/column report from the TOML parser.
pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::config(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_config(&text, overrides).map_err(|e| match e {
        Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// [`load_config`] on in-memory text.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    if overrides.is_empty() {
        return Ok(cfg);
    }
    // Patch the canonical tree rather than the raw file so overrides can
    // address defaulted fields the file never mentioned.
    let mut tree = to_tree(&cfg)?;
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "override {item:?} is not of the form dotted.key=value"
            ))
        })?;
        apply_override(&mut tree, key.trim(), value.trim())?;
    }
    tree.try_into()
        .map_err(|e| Error::config(format!("after overrides: {e}")))
}

/// Canonical TOML rendering of a config, defaults included. This is what
/// gets written to the run directory and hashed for resume compatibility.
pub fn resolved_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
}

fn to_tree(cfg: &ExperimentConfig) -> Result<toml::Table> {
    match Toml::try_from(cfg) {
        Ok(Toml::Table(t)) => Ok(t),
        Ok(_) => Err(Error::config("config did not serialize to a table")),
        Err(e) => Err(Error::config(format!("cannot serialize config: {e}"))),
    }
}

fn apply_override(tree: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if key.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override key {key:?} has an empty segment")));
    }
    let mut root = Toml::Table(std::mem::take(tree));
    let result = walk(&mut root, &segments, 0, key, raw);
    *tree = match root {
        Toml::Table(t) => t,
        _ => unreachable!("root stays a table"),
    };
    result
}

/// Descends one path segment at a time; tables are looked up by key,
/// arrays by numeric index (`callbacks.1.k`). The final segment's value is
/// replaced by `raw` coerced to its current type.
fn walk(value: &mut Toml, segments: &[&str], at: usize, full: &str, raw: &str) -> Result<()> {
    if at == segments.len() {
        let new = coerce(&*value, raw, full)?;
        *value = new;
        return Ok(());
    }
    let seg = segments[at];
    match value {
        Toml::Table(t) => {
            if !t.contains_key(seg) {
                let suggestion = nearest_key(seg, t).map(|best| {
                    let mut parts: Vec<&str> = segments[..at].to_vec();
                    parts.push(best);
                    parts.join(".")
                });
                return Err(Error::UnknownKey {
                    key: full.to_string(),
                    suggestion,
                });
            }
            walk(t.get_mut(seg).expect("present"), segments, at + 1, full, raw)
        }
        Toml::Array(items) => {
            let idx: usize = seg.parse().map_err(|_| {
                Error::config(format!(
                    "override {full:?}: {} is an array; expected a numeric index, got {seg:?}",
                    segments[..at].join(".")
                ))
            })?;
            let len = items.len();
            let item = items.get_mut(idx).ok_or_else(|| {
                Error::config(format!(
                    "override {full:?}: index {idx} out of range for {} (length {len})",
                    segments[..at].join(".")
                ))
            })?;
            walk(item, segments, at + 1, full, raw)
        }
        other => Err(Error::config(format!(
            "override {full:?}: {} is a {}, not a table",
            segments[..at].join("."),
            kind_name(other)
        ))),
    }
}

fn nearest_key<'t>(seg: &str, table: &'t toml::Table) -> Option<&'t str> {
    table
        .keys()
        .map(|k| (strsim::levenshtein(seg, k), k.as_str()))
        .min()
        .filter(|(d, _)| *d <= (seg.len() / 2).max(2))
        .map(|(_, k)| k)
}

fn kind_name(v: &Toml) -> &'static str {
    v.type_str()
}

/// Parses `raw` into the same TOML type `existing` has. Scalars accept
/// plain spellings (`5` for a float field, `true`, bare strings); arrays
/// and tables take TOML syntax.
fn coerce(existing: &Toml, raw: &str, key: &str) -> Result<Toml> {
    let fail = |want: &str| {
        Error::config(format!("override {key:?}: cannot parse {raw:?} as {want}"))
    };
    match existing {
        Toml::String(_) => Ok(Toml::String(raw.trim_matches('"').to_string())),
        Toml::Integer(_) => raw
            .parse::<i64>()
            .map(Toml::Integer)
            .or_else(|_| match raw.parse::<f64>() {
                Ok(f) if f.fract() == 0.0 && f.abs() <= i64::MAX as f64 => {
                    Ok(Toml::Integer(f as i64))
                }
                _ => Err(fail("an integer")),
            }),
        Toml::Float(_) => raw
            .parse::<f64>()
            .map(Toml::Float)
            .map_err(|_| fail("a number")),
        Toml::Boolean(_) => raw
            .parse::<bool>()
            .map(Toml::Boolean)
            .map_err(|_| fail("a boolean")),
        Toml::Array(_) | Toml::Table(_) => {
            let parsed: toml::Table = format!("v = {raw}")
                .parse()
                .map_err(|_| fail(kind_name(existing)))?;
            let value = parsed.get("v").cloned().ok_or_else(|| fail("a value"))?;
            if std::mem::discriminant(&value) == std::mem::discriminant(existing) {
                Ok(value)
            } else {
                Err(fail(kind_name(existing)))
            }
        }
        Toml::Datetime(_) => Err(fail("a datetime")),
    }
}
