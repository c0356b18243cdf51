//! The callback engine: hooks invoked by the training loop, probes with
//! isolated optimization, the online kNN evaluator, and collapse metric
//! reporters.
//!
//! Callbacks see a merged view of the input batch and the forward output
//! and log through `{stage}/{name}/{metric}` names. Feature queues are
//! declared via `queue_requests`; the engine owns the single append per
//! train batch, so two callbacks reading the same key share one buffer and
//! one write.

use super::collapse::{lidar, rankme, LIDAR_DELTA, LIDAR_EPS, RANKME_EPS};
use super::knn::{knn_predict, Distance};
use super::queue::QueueRegistry;
use crate::batch::{Batch, Stage};
use crate::error::{Error, Result};
use crate::logging::Logger;
use crate::metrics::topk_accuracy;
use crate::nn::Linear;
use crate::optim::{
    build_optimizer, Interval, OptimConfig, OptimKind, Optimizer, OptimizerCfg,
};
use crate::rng::{derive_rng, label};
use crate::tensor::{ops, Data, Tensor};
use ndarray::Ix2;
use std::collections::HashMap;

/// A feature queue a callback wants filled: rows from `input`, labels from
/// `target`, keeping the most recent `length` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueRequest {
    pub input: String,
    pub target: String,
    pub length: usize,
}

pub struct CallbackCtx<'a> {
    pub logger: &'a Logger,
    pub registry: &'a QueueRegistry,
    pub step: u64,
    pub epoch: u64,
}

impl CallbackCtx<'_> {
    pub fn log(&self, stage: Stage, source: &str, metric: &str, value: f64) {
        self.logger.log(
            format!("{}/{source}/{metric}", stage.log_prefix()),
            value,
            self.step,
            self.epoch,
        );
    }
}

pub trait Callback {
    fn name(&self) -> &str;

    fn queue_requests(&self) -> Vec<QueueRequest> {
        Vec::new()
    }

    fn on_batch_end(&mut self, stage: Stage, visible: &Batch, ctx: &CallbackCtx) -> Result<()> {
        let _ = (stage, visible, ctx);
        Ok(())
    }

    fn on_epoch_end(&mut self, stage: Stage, ctx: &CallbackCtx) -> Result<()> {
        let _ = (stage, ctx);
        Ok(())
    }

    /// Persistent state (probe weights, probe optimizer moments). The
    /// manager prefixes names with the callback name when checkpointing.
    fn state(&self) -> Vec<(String, Data)> {
        Vec::new()
    }

    fn load_state(&mut self, entries: &HashMap<String, Data>) -> Result<()> {
        let _ = entries;
        Ok(())
    }
}

pub(crate) fn detached_2d(visible: &Batch, key: &str, op: &'static str) -> Result<Tensor> {
    let t = visible.tensor(key)?.detach();
    if t.ndim() == 2 {
        Ok(t)
    } else if t.ndim() > 2 {
        ops::flatten_rows(&t)
    } else {
        Err(Error::shape(op, format!("key {key:?} is {}-d, need at least 2-d", t.ndim())))
    }
}

#[derive(Default)]
struct TopkTally {
    sum_top1: f64,
    sum_topk: f64,
    seen: usize,
}

/// Online linear probe: trains its own head on detached features with its
/// own optimizer. Gradients never reach the module that produced the
/// features.
pub struct OnlineProbe {
    name: String,
    input: String,
    target: String,
    n_classes: usize,
    lr: f64,
    extra_k: usize,
    head: Option<Linear>,
    opt: Option<Optimizer>,
    tallies: HashMap<&'static str, TopkTally>,
    pending_state: Option<HashMap<String, Data>>,
}

fn probe_optim_config(lr: f64) -> OptimConfig {
    OptimConfig {
        optimizer: OptimizerCfg {
            kind: OptimKind::AdamW,
            lr,
            weight_decay: 0.0,
            momentum: 0.9,
            eps: 1e-8,
        },
        scheduler: None,
        interval: Interval::Step,
    }
}

impl OnlineProbe {
    pub fn new(name: &str, input: &str, target: &str, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config(format!(
                "probe {name:?} needs at least 2 classes"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            input: input.to_string(),
            target: target.to_string(),
            n_classes,
            lr: 1e-3,
            extra_k: 5,
            head: None,
            opt: None,
            tallies: HashMap::new(),
            pending_state: None,
        })
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn head_parameters(&self) -> Vec<(String, Tensor)> {
        self.head.as_ref().map(Linear::named_parameters).unwrap_or_default()
    }

    fn ensure_head(&mut self, dim: usize) -> Result<()> {
        if let Some(head) = &self.head {
            let (_, d) = head.weight_dim();
            if d != dim {
                return Err(Error::shape(
                    "probe",
                    format!("{}: features are {dim}-wide, head expects {d}", self.name),
                ));
            }
            return Ok(());
        }
        let mut rng = derive_rng(
            crate::rng::global_seed(),
            &[label("probe"), label(&self.name)],
        );
        let head = Linear::new(dim, self.n_classes, &mut rng);
        let mut opt = build_optimizer(
            head.named_parameters(),
            &probe_optim_config(self.lr),
            1,
        )?;
        if let Some(entries) = self.pending_state.take() {
            let mut weights = HashMap::new();
            let mut opt_entries = HashMap::new();
            for (k, v) in entries {
                match k.strip_prefix("opt.") {
                    Some(rest) => {
                        opt_entries.insert(rest.to_string(), v);
                    }
                    None => {
                        weights.insert(k, v);
                    }
                }
            }
            for (pname, p) in head.named_parameters() {
                let data = weights.get(&pname).ok_or_else(|| {
                    Error::checkpoint("callbacks", format!("probe entry {pname:?} missing"))
                })?;
                p.set_value(data.clone())?;
            }
            opt.load_state_arrays(&opt_entries)?;
        }
        self.head = Some(head);
        self.opt = Some(opt);
        Ok(())
    }
}

impl Callback for OnlineProbe {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_batch_end(&mut self, stage: Stage, visible: &Batch, ctx: &CallbackCtx) -> Result<()> {
        let _ = ctx;
        let features = detached_2d(visible, &self.input, "probe")?;
        let labels: Vec<usize> = visible
            .int_vec(&self.target)?
            .iter()
            .map(|&l| l as usize)
            .collect();
        self.ensure_head(features.shape()[1])?;
        let head = self.head.as_ref().expect("built above");
        let logits = head.forward(&features)?;

        let k = self.extra_k.min(self.n_classes);
        let (top1, topk) = logits.with_value(|l| {
            let l2 = l.view().into_dimensionality::<Ix2>().expect("2-d logits");
            (
                topk_accuracy(l2, &labels, 1),
                topk_accuracy(l2, &labels, k),
            )
        });
        let tally = self.tallies.entry(stage.log_prefix()).or_default();
        tally.sum_top1 += top1? * labels.len() as f64;
        tally.sum_topk += topk? * labels.len() as f64;
        tally.seen += labels.len();

        if stage.is_train() {
            let opt = self.opt.as_mut().expect("built above");
            opt.zero_grad();
            let loss = ops::cross_entropy_logits(&logits, &labels)?;
            loss.backward()?;
            opt.step()?;
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, stage: Stage, ctx: &CallbackCtx) -> Result<()> {
        if let Some(tally) = self.tallies.remove(stage.log_prefix()) {
            if tally.seen > 0 {
                let n = tally.seen as f64;
                ctx.log(stage, &self.name, "top1", tally.sum_top1 / n);
                let k = self.extra_k.min(self.n_classes);
                ctx.log(stage, &self.name, &format!("top{k}"), tally.sum_topk / n);
            }
        }
        Ok(())
    }

    fn state(&self) -> Vec<(String, Data)> {
        let mut out = Vec::new();
        if let Some(head) = &self.head {
            for (pname, p) in head.named_parameters() {
                out.push((pname, p.value()));
            }
        }
        if let Some(opt) = &self.opt {
            for (sname, data) in opt.state_arrays() {
                out.push((format!("opt.{sname}"), data));
            }
        }
        out
    }

    fn load_state(&mut self, entries: &HashMap<String, Data>) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        self.head = None;
        self.opt = None;
        self.pending_state = Some(entries.clone());
        // materialize now: the stored weight shape tells us the input width
        if let Some(w) = entries.get("weight") {
            let dim = w.shape()[1];
            self.ensure_head(dim)?;
        }
        Ok(())
    }
}

/// Online kNN evaluation against a feature queue filled during training.
pub struct OnlineKnn {
    name: String,
    input: String,
    target: String,
    queue_length: usize,
    k: usize,
    distance: Distance,
    correct: usize,
    seen: usize,
    skipped: bool,
}

impl OnlineKnn {
    pub fn new(
        name: &str,
        input: &str,
        target: &str,
        queue_length: usize,
        k: usize,
        distance: Distance,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::config(format!("knn {name:?} needs k >= 1")));
        }
        if queue_length < k {
            return Err(Error::config(format!(
                "knn {name:?}: queue_length {queue_length} below k {k}"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            input: input.to_string(),
            target: target.to_string(),
            queue_length,
            k,
            distance,
            correct: 0,
            seen: 0,
            skipped: false,
        })
    }
}

impl Callback for OnlineKnn {
    fn name(&self) -> &str {
        &self.name
    }

    fn queue_requests(&self) -> Vec<QueueRequest> {
        vec![QueueRequest {
            input: self.input.clone(),
            target: self.target.clone(),
            length: self.queue_length,
        }]
    }

    fn on_batch_end(&mut self, stage: Stage, visible: &Batch, ctx: &CallbackCtx) -> Result<()> {
        if stage != Stage::Validate {
            return Ok(());
        }
        let queue = match ctx.registry.get(&self.input) {
            Some(q) if q.fill() >= self.k => q,
            _ => {
                self.skipped = true;
                return Ok(());
            }
        };
        let queries = detached_2d(visible, &self.input, "knn")?;
        let truth = visible.int_vec(&self.target)?;
        let (stored, labels) = queue.snapshot();
        let predicted = queries.with_value(|q| {
            let q2 = q.view().into_dimensionality::<Ix2>().expect("2-d queries");
            knn_predict(q2, stored.view(), &labels, self.k, self.distance)
        })?;
        self.correct += predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
        self.seen += truth.len();
        Ok(())
    }

    fn on_epoch_end(&mut self, stage: Stage, ctx: &CallbackCtx) -> Result<()> {
        if stage != Stage::Validate {
            return Ok(());
        }
        if self.seen > 0 {
            ctx.log(stage, &self.name, "top1", self.correct as f64 / self.seen as f64);
        } else if self.skipped {
            ctx.log(stage, &self.name, "insufficient_queue", 1.0);
        }
        self.correct = 0;
        self.seen = 0;
        self.skipped = false;
        Ok(())
    }
}

/// Logs the RankMe effective rank of the queued features once per training
/// epoch.
pub struct RankMeMonitor {
    name: String,
    input: String,
    queue_length: usize,
    target: String,
}

impl RankMeMonitor {
    pub fn new(name: &str, input: &str, target: &str, queue_length: usize) -> Self {
        Self {
            name: name.to_string(),
            input: input.to_string(),
            target: target.to_string(),
            queue_length,
        }
    }
}

impl Callback for RankMeMonitor {
    fn name(&self) -> &str {
        &self.name
    }

    fn queue_requests(&self) -> Vec<QueueRequest> {
        vec![QueueRequest {
            input: self.input.clone(),
            target: self.target.clone(),
            length: self.queue_length,
        }]
    }

    fn on_epoch_end(&mut self, stage: Stage, ctx: &CallbackCtx) -> Result<()> {
        if stage != Stage::Train {
            return Ok(());
        }
        if let Some(queue) = ctx.registry.get(&self.input) {
            if queue.fill() >= 2 {
                let (stored, _) = queue.snapshot();
                let value = rankme(stored.view(), RANKME_EPS)?;
                ctx.log(stage, &self.name, "rankme", value);
            }
        }
        Ok(())
    }
}

/// Logs LiDAR once per training epoch, computed from the most recent
/// multi-view train batch (samples act as surrogate classes).
pub struct LidarMonitor {
    name: String,
    input: String,
    held: Option<ndarray::Array3<f64>>,
}

impl LidarMonitor {
    pub fn new(name: &str, input: &str) -> Self {
        Self {
            name: name.to_string(),
            input: input.to_string(),
            held: None,
        }
    }
}

impl Callback for LidarMonitor {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_batch_end(&mut self, stage: Stage, visible: &Batch, ctx: &CallbackCtx) -> Result<()> {
        let _ = ctx;
        if !stage.is_train() {
            return Ok(());
        }
        let features = detached_2d(visible, &self.input, "lidar")?;
        let idx = visible.sample_idx()?;
        let views = crate::batch::fold_views(&features, idx)?;
        if views.len() < 2 || views[0].shape()[0] < 2 {
            return Ok(());
        }
        let n = views[0].shape()[0];
        let d = views[0].shape()[1];
        let q = views.len();
        let mut stacked = ndarray::Array3::zeros((n, q, d));
        for (j, view) in views.iter().enumerate() {
            view.with_value(|v| {
                let v2 = v.view().into_dimensionality::<Ix2>().expect("2-d view");
                stacked.slice_mut(ndarray::s![.., j, ..]).assign(&v2);
            });
        }
        self.held = Some(stacked);
        Ok(())
    }

    fn on_epoch_end(&mut self, stage: Stage, ctx: &CallbackCtx) -> Result<()> {
        if stage != Stage::Train {
            return Ok(());
        }
        if let Some(stacked) = self.held.take() {
            let value = lidar(stacked.view(), LIDAR_DELTA, LIDAR_EPS)?;
            ctx.log(stage, &self.name, "lidar", value);
        }
        Ok(())
    }
}

/// Registers depth taps on a module component so downstream probes can
/// target `embedding::{layer}` keys.
pub fn attach_depth_probes(
    module: &crate::module::Module,
    component: &str,
    layer_names: &[String],
) -> Result<()> {
    for layer in layer_names {
        module.add_tap(component, layer)?;
    }
    Ok(())
}
