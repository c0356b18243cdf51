//! From a config file to a finished run: load, construct, fit.
//!
//! Construction is fail-fast. Every name the config mentions (forwards,
//! datasets, callback targets, tap layers) resolves while building, so a
//! bad config dies with a specific message before the first batch.

use std::path::{Path, PathBuf};

use crate::checkpoint::CheckpointState;
use crate::config::{load_config, resolved_toml, ExperimentConfig};
use crate::error::{Error, Result};
use crate::logging::{ConsoleSink, CsvSink, Logger, MetricSink};
use crate::manager::{Manager, ResumeMode};
use crate::registry;

/// Command-line knobs. Each outranks both its environment variable and the
/// config file; the environment outranks the file.
#[derive(Debug, Default, Clone)]
pub struct LaunchOptions {
    pub run_dir: Option<String>,
    pub resume: Option<ResumeMode>,
    pub seed: Option<u64>,
}

impl LaunchOptions {
    /// Folds `SPK_RUN_DIR` and `SPK_RESUME` into unset slots.
    pub fn with_env(mut self) -> Result<Self> {
        if self.run_dir.is_none() {
            if let Ok(dir) = std::env::var("SPK_RUN_DIR") {
                if !dir.is_empty() {
                    self.run_dir = Some(dir);
                }
            }
        }
        if self.resume.is_none() {
            if let Ok(mode) = std::env::var("SPK_RESUME") {
                let parsed = mode.parse::<ResumeMode>().map_err(|e| match e {
                    Error::Config(msg) => Error::config(format!("SPK_RESUME: {msg}")),
                    other => other,
                })?;
                self.resume = Some(parsed);
            }
        }
        Ok(self)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> ResumeMode {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.run_dir {
            cfg.run_dir = dir.clone();
        }
        self.resume.unwrap_or_default()
    }
}

/// Loads the config, applies overrides and options, and returns the final
/// config plus the resume mode to run with.
pub fn resolve(
    path: impl AsRef<Path>,
    overrides: &[String],
    opts: LaunchOptions,
) -> Result<(ExperimentConfig, ResumeMode)> {
    let mut cfg = load_config(path, overrides)?;
    let resume = opts.with_env()?.apply(&mut cfg);
    Ok((cfg, resume))
}

/// What a dry construction learned about the config. Printed by
/// `spk validate`.
pub struct ValidationReport {
    pub run_dir: String,
    pub train_samples: usize,
    pub val_samples: usize,
    pub batches_per_epoch: usize,
    pub n_parameters: usize,
    pub callbacks: Vec<String>,
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "config ok")?;
        writeln!(f, "  run_dir: {}", self.run_dir)?;
        writeln!(
            f,
            "  train samples: {} ({} batches/epoch)",
            self.train_samples, self.batches_per_epoch
        )?;
        writeln!(f, "  val samples: {}", self.val_samples)?;
        writeln!(f, "  parameters: {}", self.n_parameters)?;
        write!(f, "  callbacks: {}", if self.callbacks.is_empty() {
            "(none)".to_string()
        } else {
            self.callbacks.join(", ")
        })
    }
}

/// Builds everything the config names without touching the filesystem.
pub fn validate_config(cfg: &ExperimentConfig) -> Result<ValidationReport> {
    let module = registry::build_module(&cfg.module, cfg.seed)?;
    let data = registry::build_data(&cfg.data, cfg.seed)?;
    let callbacks = registry::build_callbacks(&cfg.callbacks, &module)?;
    Ok(ValidationReport {
        run_dir: cfg.run_dir.clone(),
        train_samples: data.train.dataset().len(),
        val_samples: data.val.as_ref().map_or(0, |v| v.dataset().len()),
        batches_per_epoch: data.train.batches_per_epoch(),
        n_parameters: module
            .parameters()
            .iter()
            .map(|(_, p)| p.value().len())
            .sum(),
        callbacks: callbacks.iter().map(|c| c.name().to_string()).collect(),
    })
}

/// A constructed experiment, ready to train. The resolved config snapshot
/// and metric sinks already exist on disk by the time this is handed back.
pub struct Prepared {
    manager: Manager,
    run_dir: PathBuf,
}

impl Prepared {
    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn run(mut self) -> Result<CheckpointState> {
        self.manager.run()
    }
}

/// Constructs the full experiment and stages the run directory: the
/// resolved config lands in `config.toml` before any training happens, and
/// metrics stream to `metrics.csv` next to it.
pub fn prepare(cfg: &ExperimentConfig, resume: ResumeMode) -> Result<Prepared> {
    let resolved = resolved_toml(cfg)?;
    let module = registry::build_module(&cfg.module, cfg.seed)?;
    let data = registry::build_data(&cfg.data, cfg.seed)?;
    let callbacks = registry::build_callbacks(&cfg.callbacks, &module)?;

    let run_dir = PathBuf::from(&cfg.run_dir);
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.toml"), &resolved)?;

    let sinks: Vec<Box<dyn MetricSink>> = vec![
        Box::new(ConsoleSink),
        Box::new(CsvSink::create(&run_dir.join("metrics.csv"))?),
    ];
    let manager = Manager::new(
        cfg.trainer.clone(),
        module,
        data,
        callbacks,
        Logger::new(sinks),
        &run_dir,
        resolved,
        cfg.seed,
        resume,
    );
    Ok(Prepared { manager, run_dir })
}

/// Exit code for an error that happened after construction succeeded.
/// Refusing to resume is an invocation problem (2); everything else that
/// stops a running fit is a training abort (3).
pub fn run_error_code(err: &Error) -> i32 {
    match err {
        Error::ResumeRefused(_) => 2,
        _ => 3,
    }
}

/// Exit code for errors before training: always a config problem.
pub const CONFIG_ERROR_CODE: i32 = 2;

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_text(run_dir: &Path) -> String {
        format!(
            r#"
seed = 11
run_dir = "{}"

[data]
batch_size = 8
val_samples = 8
[data.dataset]
name = "gaussian_blobs"
n_samples = 24
n_classes = 3
dim = 5

[module]
forward = "supervised"
[module.backbone]
name = "mlp"
in_dim = 5
hidden = 12
out_dim = 8
[module.head]
name = "linear"
in_dim = 8
out_dim = 3
[module.optim.optimizer]
type = "SGD"
lr = 0.05

[trainer]
max_epochs = 1

[[callbacks]]
type = "online_knn"
name = "knn"
queue_length = 16
k = 3
"#,
            run_dir.display()
        )
    }

    #[test]
    fn fit_writes_snapshot_before_and_metrics_after() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(&cfg_path, cfg_text(&run_dir)).unwrap();

        let (cfg, resume) = resolve(&cfg_path, &[], LaunchOptions::default()).unwrap();
        let prepared = prepare(&cfg, resume).unwrap();
        assert!(run_dir.join("config.toml").exists());
        prepared.run().unwrap();

        let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("name,value,step,epoch\n"), "{metrics}");
        assert!(metrics.contains("train/loss"), "{metrics}");
        assert!(run_dir.join("last.ckpt").exists());
    }

    #[test]
    fn snapshot_reloads_to_the_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(&cfg_path, cfg_text(&run_dir)).unwrap();

        let (cfg, resume) = resolve(&cfg_path, &[], LaunchOptions::default()).unwrap();
        prepare(&cfg, resume).unwrap();
        let reloaded = load_config(run_dir.join("config.toml"), &[]).unwrap();
        assert_eq!(resolved_toml(&reloaded).unwrap(), resolved_toml(&cfg).unwrap());
    }

    #[test]
    fn options_outrank_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(&cfg_path, cfg_text(&dir.path().join("from_file"))).unwrap();

        let other = dir.path().join("elsewhere");
        let opts = LaunchOptions {
            run_dir: Some(other.display().to_string()),
            resume: Some(ResumeMode::Never),
            seed: Some(99),
        };
        let (cfg, resume) = resolve(&cfg_path, &[], opts).unwrap();
        assert_eq!(cfg.run_dir, other.display().to_string());
        assert_eq!(cfg.seed, 99);
        assert_eq!(resume, ResumeMode::Never);
    }

    #[test]
    fn validate_reports_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("never_created");
        let cfg_path = dir.path().join("exp.toml");
        std::fs::write(&cfg_path, cfg_text(&run_dir)).unwrap();

        let (cfg, _) = resolve(&cfg_path, &[], LaunchOptions::default()).unwrap();
        let report = validate_config(&cfg).unwrap();
        assert_eq!(report.train_samples, 24);
        assert_eq!(report.val_samples, 8);
        assert_eq!(report.callbacks, vec!["knn".to_string()]);
        assert!(report.n_parameters > 0);
        assert!(!run_dir.exists());
    }
}
