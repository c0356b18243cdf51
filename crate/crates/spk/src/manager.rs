//! End-to-end orchestration: the fit loop, metric emission, checkpointing,
//! and the preemption auto-resume protocol.
//!
//! The Manager owns the single training thread. Per train step it runs the
//! module forward, backpropagates the `loss` key, steps the optimizer,
//! appends requested feature queues, and fires callback hooks; per epoch it
//! runs validation, emits timings, and writes a rolling `last.ckpt`
//! atomically (plus numbered epoch checkpoints on the configured cadence).

use crate::batch::{Batch, Stage};
use crate::checkpoint::{CheckpointState, QueueDump};
use crate::data::DataModule;
use crate::error::{Error, Result};
use crate::logging::Logger;
use crate::module::Module;
use crate::monitors::callbacks::{detached_2d, Callback, CallbackCtx};
use crate::monitors::QueueRegistry;
use crate::optim::{build_optimizer, Interval, Optimizer};
use crate::tensor::Data;
use ndarray::Ix2;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResumeMode {
    /// Resume from `last.ckpt` when present and config-compatible.
    #[default]
    Auto,
    /// Always start fresh, ignoring any existing checkpoint.
    Never,
    /// Fail unless a resumable checkpoint exists.
    Must,
}

impl std::str::FromStr for ResumeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ResumeMode::Auto),
            "never" => Ok(ResumeMode::Never),
            "must" => Ok(ResumeMode::Must),
            other => Err(Error::config(format!(
                "resume mode {other:?} not one of auto, never, must"
            ))),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub max_epochs: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Numeric precision tag, recorded as-is. This engine computes in f64.
    #[serde(default = "default_precision")]
    pub precision: String,
    /// Keep a numbered checkpoint every N epochs (0 = only `last.ckpt`).
    #[serde(default = "default_cadence")]
    pub checkpoint_every_n_epochs: u64,
}

fn default_true() -> bool {
    true
}

fn default_precision() -> String {
    "64-full".to_string()
}

fn default_cadence() -> u64 {
    1
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1,
            deterministic: true,
            precision: default_precision(),
            checkpoint_every_n_epochs: default_cadence(),
        }
    }
}

pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

struct MergedQueueRequest {
    input: String,
    target: String,
    length: usize,
}

pub struct Manager {
    trainer: TrainerConfig,
    module: Module,
    data: DataModule,
    callbacks: Vec<Box<dyn Callback>>,
    logger: Logger,
    registry: QueueRegistry,
    run_dir: PathBuf,
    config_snapshot: String,
    seed: u64,
    resume: ResumeMode,
    global_step: u64,
    epoch: u64,
}

impl Manager {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        trainer: TrainerConfig,
        module: Module,
        data: DataModule,
        callbacks: Vec<Box<dyn Callback>>,
        logger: Logger,
        run_dir: impl Into<PathBuf>,
        config_snapshot: String,
        seed: u64,
        resume: ResumeMode,
    ) -> Self {
        Self {
            trainer,
            module,
            data,
            callbacks,
            logger,
            registry: QueueRegistry::new(),
            run_dir: run_dir.into(),
            config_snapshot,
            seed,
            resume,
            global_step: 0,
            epoch: 0,
        }
    }

    pub fn last_checkpoint_path(&self) -> PathBuf {
        self.run_dir.join("last.ckpt")
    }

    fn merged_queue_requests(&self) -> Result<Vec<MergedQueueRequest>> {
        let mut merged: Vec<MergedQueueRequest> = Vec::new();
        for cb in &self.callbacks {
            for req in cb.queue_requests() {
                match merged.iter_mut().find(|m| m.input == req.input) {
                    Some(existing) => {
                        if existing.target != req.target {
                            return Err(Error::config(format!(
                                "queue for {:?} requested with targets {:?} and {:?}",
                                req.input, existing.target, req.target
                            )));
                        }
                        existing.length = existing.length.max(req.length);
                    }
                    None => merged.push(MergedQueueRequest {
                        input: req.input,
                        target: req.target,
                        length: req.length,
                    }),
                }
            }
        }
        Ok(merged)
    }

    fn ensure_writable(&self) -> Result<()> {
        std::fs::create_dir_all(&self.run_dir)?;
        let probe = self.run_dir.join(".write_check");
        std::fs::write(&probe, b"ok").map_err(|e| {
            Error::config(format!(
                "run directory {} is not writable: {e}",
                self.run_dir.display()
            ))
        })?;
        std::fs::remove_file(&probe)?;
        Ok(())
    }

    fn snapshot_state(&self, optimizer: &Optimizer) -> CheckpointState {
        let mut optim_entries = Vec::new();
        let mut sched_entries = Vec::new();
        for (name, data) in optimizer.state_arrays() {
            if name == "sched_t" {
                sched_entries.push((name, data));
            } else {
                optim_entries.push((name, data));
            }
        }
        let queues = self
            .registry
            .all()
            .iter()
            .map(|q| {
                let (rows, labels) = q.snapshot();
                QueueDump {
                    key: q.key().to_string(),
                    dim: q.dim(),
                    capacity: q.capacity(),
                    rows: rows.into_raw_vec_and_offset().0,
                    labels,
                }
            })
            .collect();
        let mut callback_entries = Vec::new();
        for cb in &self.callbacks {
            for (name, data) in cb.state() {
                callback_entries.push((format!("{}.{name}", cb.name()), data));
            }
        }
        CheckpointState {
            version: env!("CARGO_PKG_VERSION").to_string(),
            global_step: self.global_step,
            epoch: self.epoch,
            weights: self.module.state(),
            optimizer: optim_entries,
            scheduler: sched_entries,
            seed: self.seed,
            queues,
            callbacks: callback_entries,
            config: self.config_snapshot.clone(),
        }
    }

    fn restore_state(&mut self, state: &CheckpointState, optimizer: &mut Optimizer) -> Result<()> {
        let weights: HashMap<String, Data> = state.weights.iter().cloned().collect();
        self.module.load_state(&weights)?;
        let mut optim_entries: HashMap<String, Data> =
            state.optimizer.iter().cloned().collect();
        optim_entries.extend(state.scheduler.iter().cloned());
        optimizer.load_state_arrays(&optim_entries)?;
        for dump in &state.queues {
            let queue = self.registry.register(&dump.key, dump.capacity, dump.dim)?;
            let rows = ndarray::Array2::from_shape_vec(
                (dump.labels.len(), dump.dim),
                dump.rows.clone(),
            )
            .map_err(|e| Error::checkpoint("queues", e.to_string()))?;
            queue.restore(rows.view(), &dump.labels)?;
        }
        for cb in &mut self.callbacks {
            let prefix = format!("{}.", cb.name());
            let entries: HashMap<String, Data> = state
                .callbacks
                .iter()
                .filter_map(|(name, data)| {
                    name.strip_prefix(&prefix)
                        .map(|rest| (rest.to_string(), data.clone()))
                })
                .collect();
            cb.load_state(&entries)?;
        }
        self.global_step = state.global_step;
        self.epoch = state.epoch;
        Ok(())
    }

    /// Decides whether to resume, enforcing the compatibility contract: a
    /// `last.ckpt` whose config hash differs is never silently retrained
    /// over.
    fn resolve_resume(&self) -> Result<Option<CheckpointState>> {
        let path = self.last_checkpoint_path();
        match self.resume {
            ResumeMode::Never => Ok(None),
            ResumeMode::Auto | ResumeMode::Must => {
                if !path.exists() {
                    if self.resume == ResumeMode::Must {
                        return Err(Error::ResumeRefused(format!(
                            "resume required but {} does not exist",
                            path.display()
                        )));
                    }
                    return Ok(None);
                }
                let state = CheckpointState::load(&path)?;
                let stored = config_hash(&state.config);
                let current = config_hash(&self.config_snapshot);
                if stored != current {
                    return Err(Error::ResumeRefused(format!(
                        "{} was written with config hash {stored}, current config hashes to \
                         {current}; pass --resume never to start fresh in a new run \
                         directory, or restore the original config",
                        path.display()
                    )));
                }
                log::info!(
                    "resuming from {} at epoch {}, step {}",
                    path.display(),
                    state.epoch,
                    state.global_step
                );
                Ok(Some(state))
            }
        }
    }

    fn scheduler_horizon(&self) -> u64 {
        let base = match self.module.optim().interval {
            Interval::Epoch => self.trainer.max_epochs.max(1),
            Interval::Step => {
                (self.data.train.batches_per_epoch() as u64 * self.trainer.max_epochs).max(1)
            }
        };
        // a horizon at or below warmup would be rejected; a 0-epoch run
        // never ticks the scheduler, so any valid horizon will do
        let floor = self
            .module
            .optim()
            .scheduler
            .as_ref()
            .map(|s| s.warmup_steps + 1)
            .unwrap_or(1);
        base.max(floor)
    }

    fn append_queues(&self, visible: &Batch, requests: &[MergedQueueRequest]) -> Result<()> {
        for req in requests {
            let features = detached_2d(visible, &req.input, "queue_append")?;
            let labels = visible.int_vec(&req.target)?;
            let queue = self
                .registry
                .register(&req.input, req.length, features.shape()[1])?;
            features.with_value(|f| {
                let f2 = f.view().into_dimensionality::<Ix2>().expect("2-d features");
                queue.append(f2, labels)
            })?;
        }
        Ok(())
    }

    fn merge_visible(input: &Batch, out: &Batch) -> Batch {
        let mut visible = input.clone();
        for (key, value) in out.iter() {
            visible.insert(key.to_string(), value.clone());
        }
        visible
    }

    fn fire_batch_hooks(&mut self, stage: Stage, visible: &Batch) -> Result<()> {
        let ctx = CallbackCtx {
            logger: &self.logger,
            registry: &self.registry,
            step: self.global_step,
            epoch: self.epoch,
        };
        for cb in &mut self.callbacks {
            cb.on_batch_end(stage, visible, &ctx)?;
        }
        Ok(())
    }

    fn fire_epoch_hooks(&mut self, stage: Stage) -> Result<()> {
        let ctx = CallbackCtx {
            logger: &self.logger,
            registry: &self.registry,
            step: self.global_step,
            epoch: self.epoch,
        };
        for cb in &mut self.callbacks {
            cb.on_epoch_end(stage, &ctx)?;
        }
        Ok(())
    }

    fn train_epoch(
        &mut self,
        epoch: u64,
        optimizer: &mut Optimizer,
        requests: &[MergedQueueRequest],
    ) -> Result<()> {
        let started = Instant::now();
        let mut batches = Vec::new();
        for batch in self.data.train.epoch(epoch) {
            batches.push(batch?);
        }
        for batch in batches {
            let out = self.module.run_forward(&batch, Stage::Train, self.global_step)?;
            if out.loss().is_some() {
                let loss = out.scalar("loss")?;
                // a bare scalar loss has no gradient path; only tensor
                // losses drive the optimizer
                if let Ok(loss_tensor) = out.tensor("loss") {
                    optimizer.zero_grad();
                    loss_tensor.backward()?;
                    optimizer.step().map_err(|e| self.abort_from(e))?;
                    if self.module.optim().interval == Interval::Step {
                        optimizer.scheduler_tick();
                    }
                }
                self.logger.log("train/loss", loss, self.global_step, epoch);
                self.logger
                    .log("train/lr", optimizer.current_lr(), self.global_step, epoch);
            }
            let visible = Self::merge_visible(&batch, &out);
            self.append_queues(&visible, requests)?;
            self.fire_batch_hooks(Stage::Train, &visible)?;
            self.global_step += 1;
        }
        if self.module.optim().interval == Interval::Epoch {
            optimizer.scheduler_tick();
        }
        self.fire_epoch_hooks(Stage::Train)?;
        self.logger.log(
            "train/timer/epoch_seconds",
            started.elapsed().as_secs_f64(),
            self.global_step,
            epoch,
        );
        Ok(())
    }

    fn val_epoch(&mut self, epoch: u64) -> Result<()> {
        let Some(val) = &self.data.val else {
            return Ok(());
        };
        let started = Instant::now();
        let mut batches = Vec::new();
        for batch in val.epoch(epoch) {
            batches.push(batch?);
        }
        for batch in batches {
            let out = self
                .module
                .run_forward(&batch, Stage::Validate, self.global_step)?;
            let visible = Self::merge_visible(&batch, &out);
            self.fire_batch_hooks(Stage::Validate, &visible)?;
        }
        self.fire_epoch_hooks(Stage::Validate)?;
        self.logger.log(
            "val/timer/epoch_seconds",
            started.elapsed().as_secs_f64(),
            self.global_step,
            epoch,
        );
        Ok(())
    }

    fn abort_from(&self, err: Error) -> Error {
        let last = self.last_checkpoint_path();
        Error::TrainAbort {
            step: self.global_step,
            reason: err.to_string(),
            last_good: last.exists().then(|| last.display().to_string()),
        }
    }

    fn write_checkpoints(&self, optimizer: &Optimizer, epoch: u64) -> Result<()> {
        let state = self.snapshot_state(optimizer);
        state.save(&self.last_checkpoint_path())?;
        let cadence = self.trainer.checkpoint_every_n_epochs;
        if cadence > 0 && (epoch + 1).is_multiple_of(cadence) {
            state.save(&self.run_dir.join(format!("epoch_{epoch}.ckpt")))?;
        }
        Ok(())
    }

    /// Runs the fit loop to `max_epochs` (resuming first when applicable)
    /// and returns the final state.
    pub fn run(&mut self) -> Result<CheckpointState> {
        self.ensure_writable()?;
        crate::rng::seed_everything(self.seed);
        let requests = self.merged_queue_requests()?;
        let mut optimizer = build_optimizer(
            self.module.parameters(),
            self.module.optim(),
            self.scheduler_horizon(),
        )?;
        if let Some(state) = self.resolve_resume()? {
            self.restore_state(&state, &mut optimizer)?;
        }
        while self.epoch < self.trainer.max_epochs {
            let epoch = self.epoch;
            match self.train_epoch(epoch, &mut optimizer, &requests) {
                Ok(()) => {}
                Err(e @ Error::NonFinite { .. }) => {
                    self.logger.sync();
                    return Err(self.abort_from(e));
                }
                Err(e) => return Err(e),
            }
            self.val_epoch(epoch)?;
            self.epoch = epoch + 1;
            self.write_checkpoints(&optimizer, epoch)?;
            self.logger.sync();
        }
        if self.trainer.max_epochs == 0 {
            self.val_epoch(0)?;
        }
        let state = self.snapshot_state(&optimizer);
        state.save(&self.last_checkpoint_path())?;
        self.logger.sync();
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::Value;
    use crate::data::{DataLoader, DatasetAdapter, GaussianBlobs, SamplerKind, TransformPipeline};
    use crate::logging::{LogRecord, MemorySink};
    use crate::module::{ForwardFn, Module};
    use crate::monitors::{Distance, OnlineKnn, OnlineProbe};
    use crate::nn::{Block, Layer, Linear, Sequential};
    use crate::optim::{OptimConfig, OptimKind, OptimizerCfg, SchedKind, SchedulerCfg};
    use crate::tensor::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::rc::Rc;
    use std::sync::{Arc, Mutex};

    fn blob_loader(n: usize, batch: usize, seed: u64, shuffle: bool) -> DataLoader {
        let source = Rc::new(GaussianBlobs::new(n, 3, 6, 0.2, seed).unwrap());
        let ds = DatasetAdapter::new(
            source,
            vec!["image".into(), "label".into()],
            TransformPipeline::Identity,
        )
        .unwrap();
        let kind = if shuffle { SamplerKind::RepeatedRandom } else { SamplerKind::Sequential };
        DataLoader::new(ds, batch, kind, true, seed).unwrap()
    }

    fn supervised_module(seed: u64) -> Module {
        crate::rng::seed_everything(seed);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let backbone = Sequential::new(vec![
            ("fc1", Layer::Linear(Linear::new(6, 12, &mut rng))),
            ("act", Layer::ReLU),
        ]);
        let head = Sequential::new(vec![("out", Layer::Linear(Linear::new(12, 3, &mut rng)))]);
        let forward: ForwardFn = Rc::new(|module, batch, stage| {
            let x = batch.tensor("image")?;
            let h = module.forward_component("backbone", x, stage)?;
            let logits = module.forward_component("head", &h, stage)?;
            let labels: Vec<usize> = batch
                .int_vec("label")?
                .iter()
                .map(|&l| l as usize)
                .collect();
            let mut out = Batch::new();
            out.insert("embedding", Value::Tensor(h));
            let loss = ops::cross_entropy_logits(&logits, &labels)?;
            out.insert("loss", Value::Tensor(loss));
            Ok(out)
        });
        let optim = OptimConfig {
            optimizer: OptimizerCfg {
                kind: OptimKind::Sgd,
                lr: 0.05,
                weight_decay: 0.0,
                momentum: 0.9,
                eps: 1e-8,
            },
            scheduler: Some(SchedulerCfg {
                kind: SchedKind::LinearWarmupCosineAnnealing,
                warmup_steps: 2,
                total_steps: None,
                eta_min: 0.0,
            }),
            interval: crate::optim::Interval::Epoch,
        };
        Module::new(
            vec![
                ("backbone".into(), Box::new(backbone) as Box<dyn Block>),
                ("head".into(), Box::new(head) as Box<dyn Block>),
            ],
            forward,
            optim,
        )
        .unwrap()
    }

    fn memory_manager(
        dir: &std::path::Path,
        max_epochs: u64,
        seed: u64,
        resume: ResumeMode,
    ) -> (Manager, Arc<Mutex<Vec<LogRecord>>>) {
        let sink = MemorySink::new();
        let handle = sink.handle();
        let data = DataModule::new(
            blob_loader(30, 10, seed, true),
            Some(blob_loader(12, 6, seed + 1, false)),
            None,
        );
        let callbacks: Vec<Box<dyn Callback>> = vec![
            Box::new(OnlineProbe::new("probe", "embedding", "label", 3).unwrap()),
            Box::new(OnlineKnn::new("knn", "embedding", "label", 64, 3, Distance::Euclidean).unwrap()),
        ];
        let manager = Manager::new(
            TrainerConfig {
                max_epochs,
                ..TrainerConfig::default()
            },
            supervised_module(seed),
            data,
            callbacks,
            Logger::new(vec![Box::new(sink)]),
            dir,
            "[module]\nname = \"test\"\n".to_string(),
            seed,
            resume,
        );
        (manager, handle)
    }

    #[test]
    fn fit_emits_losses_checkpoints_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let (mut manager, records) = memory_manager(dir.path(), 2, 5, ResumeMode::Never);
        let state = manager.run().unwrap();
        // 30 samples, batch 10 -> 3 steps per epoch, 2 epochs
        assert_eq!(state.global_step, 6);
        assert_eq!(state.epoch, 2);
        drop(manager);
        let got = records.lock().unwrap().clone();
        assert_eq!(got.iter().filter(|r| r.name == "train/loss").count(), 6);
        assert_eq!(got.iter().filter(|r| r.name == "train/lr").count(), 6);
        assert_eq!(
            got.iter().filter(|r| r.name == "val/knn/top1").count(),
            2,
            "one knn record per val epoch"
        );
        assert_eq!(got.iter().filter(|r| r.name == "val/probe/top1").count(), 2);
        assert!(got.iter().any(|r| r.name == "train/timer/epoch_seconds"));
        assert!(dir.path().join("last.ckpt").exists());
        assert!(dir.path().join("epoch_0.ckpt").exists());
        assert!(dir.path().join("epoch_1.ckpt").exists());
    }

    #[test]
    fn resume_continues_step_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let (mut first, _) = memory_manager(dir.path(), 1, 5, ResumeMode::Never);
        let state = first.run().unwrap();
        assert_eq!(state.global_step, 3);
        drop(first);

        let (mut second, _) = memory_manager(dir.path(), 2, 5, ResumeMode::Auto);
        let final_state = second.run().unwrap();
        assert_eq!(final_state.global_step, 6, "exactly one more epoch of steps");
        assert_eq!(final_state.epoch, 2);
    }

    #[test]
    fn split_run_matches_unbroken_run_bit_exactly() {
        let unbroken_dir = tempfile::tempdir().unwrap();
        let (mut unbroken, _) = memory_manager(unbroken_dir.path(), 2, 9, ResumeMode::Never);
        let reference = unbroken.run().unwrap();
        drop(unbroken);

        let split_dir = tempfile::tempdir().unwrap();
        let (mut part1, _) = memory_manager(split_dir.path(), 1, 9, ResumeMode::Never);
        part1.run().unwrap();
        drop(part1);
        let (mut part2, _) = memory_manager(split_dir.path(), 2, 9, ResumeMode::Must);
        let resumed = part2.run().unwrap();

        assert_eq!(reference.global_step, resumed.global_step);
        let ref_weights: HashMap<String, Data> = reference.weights.into_iter().collect();
        for (name, data) in resumed.weights {
            assert_eq!(ref_weights[&name], data, "{name} diverged after resume");
        }
    }

    #[test]
    fn config_change_refuses_resume_with_instructions() {
        let dir = tempfile::tempdir().unwrap();
        let (mut first, _) = memory_manager(dir.path(), 1, 5, ResumeMode::Never);
        first.run().unwrap();
        drop(first);

        let (mut second, _) = memory_manager(dir.path(), 2, 5, ResumeMode::Auto);
        second.config_snapshot = "[module]\nname = \"changed\"\n".to_string();
        let err = second.run().map(|_| ()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::ResumeRefused(_)), "got: {msg}");
        assert!(msg.contains("--resume never"), "instructions missing: {msg}");
    }

    #[test]
    fn must_resume_without_checkpoint_fails() {
        let dir = tempfile::tempdir().unwrap();
        let (mut manager, _) = memory_manager(dir.path(), 1, 5, ResumeMode::Must);
        let err = manager.run().map(|_| ()).unwrap_err();
        assert!(matches!(err, Error::ResumeRefused(_)));
    }

    #[test]
    fn zero_epochs_is_validation_only() {
        let dir = tempfile::tempdir().unwrap();
        let (mut manager, records) = memory_manager(dir.path(), 0, 5, ResumeMode::Never);
        let state = manager.run().unwrap();
        assert_eq!(state.global_step, 0);
        drop(manager);
        let got = records.lock().unwrap().clone();
        assert!(got.iter().all(|r| r.name != "train/loss"));
        assert!(got.iter().any(|r| r.name.starts_with("val/")));
    }

    fn plain_sgd() -> OptimConfig {
        OptimConfig {
            optimizer: OptimizerCfg {
                kind: OptimKind::Sgd,
                lr: 0.05,
                weight_decay: 0.0,
                momentum: 0.0,
                eps: 1e-8,
            },
            scheduler: None,
            interval: crate::optim::Interval::Epoch,
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_path() {
        let dir = tempfile::tempdir().unwrap();
        let forward: ForwardFn = Rc::new(|_m, _batch, _s| {
            let mut out = Batch::new();
            out.insert("loss", Value::Scalar(f64::NAN));
            Ok(out)
        });
        // first run one clean epoch so a last-good checkpoint exists
        let sink = MemorySink::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let clean_module = Module::new(
            vec![(
                "backbone".into(),
                Box::new(Sequential::new(vec![(
                    "fc",
                    Layer::Linear(Linear::new(6, 3, &mut rng)),
                )])) as Box<dyn Block>,
            )],
            Rc::new(|module: &Module, batch: &Batch, stage| {
                let h = module.forward_component("backbone", batch.tensor("image")?, stage)?;
                let mut out = Batch::new();
                out.insert("loss", Value::Tensor(ops::mean_all(&h)));
                Ok(out)
            }),
            plain_sgd(),
        )
        .unwrap();
        let mut clean = Manager::new(
            TrainerConfig { max_epochs: 1, ..TrainerConfig::default() },
            clean_module,
            DataModule::new(blob_loader(12, 6, 3, true), None, None),
            Vec::new(),
            Logger::new(vec![Box::new(sink)]),
            dir.path(),
            "cfg".into(),
            3,
            ResumeMode::Never,
        );
        clean.run().unwrap();
        drop(clean);

        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let poisoned = Module::new(
            vec![(
                "backbone".into(),
                Box::new(Sequential::new(vec![(
                    "fc",
                    Layer::Linear(Linear::new(6, 3, &mut rng)),
                )])) as Box<dyn Block>,
            )],
            forward,
            plain_sgd(),
        )
        .unwrap();
        let mut manager = Manager::new(
            TrainerConfig { max_epochs: 1, ..TrainerConfig::default() },
            poisoned,
            DataModule::new(blob_loader(12, 6, 3, true), None, None),
            Vec::new(),
            Logger::disabled(),
            dir.path(),
            "cfg".into(),
            3,
            ResumeMode::Never,
        );
        let err = manager.run().map(|_| ()).unwrap_err();
        match err {
            Error::TrainAbort { step, last_good, .. } => {
                assert_eq!(step, 0);
                assert!(last_good.unwrap().contains("last.ckpt"));
            }
            other => panic!("expected TrainAbort, got {other}"),
        }
    }

    #[test]
    fn same_seed_reproduces_loss_trace() {
        let trace = |seed: u64| -> Vec<f64> {
            let dir = tempfile::tempdir().unwrap();
            let (mut manager, records) = memory_manager(dir.path(), 1, seed, ResumeMode::Never);
            manager.run().unwrap();
            drop(manager);
            let got = records.lock().unwrap().clone();
            got.iter()
                .filter(|r| r.name == "train/loss")
                .map(|r| r.value)
                .collect()
        };
        let a = trace(11);
        let b = trace(11);
        let c = trace(12);
        assert_eq!(a, b, "same seed must reproduce the loss trace exactly");
        assert_ne!(a, c, "different seeds should differ");
    }
}
