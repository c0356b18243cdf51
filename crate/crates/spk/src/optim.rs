//! Optimizers and learning-rate schedules.
//!
//! One [`Optimizer`] owns the update rule, momentum/Adam state, and an
//! optional schedule for a fixed list of parameters. Layer-adaptive scaling
//! (LARS) applies per-parameter trust ratios to matrix-shaped parameters;
//! vectors and scalars (biases, norm gains) fall back to plain SGD steps
//! without weight decay, the usual convention for large-batch training.

use crate::error::{Error, Result};
use crate::tensor::{Data, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimKind {
    #[serde(rename = "LARS")]
    Lars,
    #[serde(rename = "SGD")]
    Sgd,
    #[serde(rename = "AdamW")]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedKind {
    LinearWarmupCosineAnnealing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interval {
    Step,
    #[default]
    Epoch,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerCfg {
    #[serde(rename = "type")]
    pub kind: OptimKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerCfg {
    #[serde(rename = "type")]
    pub kind: SchedKind,
    #[serde(default)]
    pub warmup_steps: u64,
    /// Length of the schedule in `interval` units; when absent the trainer
    /// supplies the run length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
    #[serde(default)]
    pub eta_min: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub optimizer: OptimizerCfg,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler: Option<SchedulerCfg>,
    #[serde(default)]
    pub interval: Interval,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.optimizer.lr.is_finite() || self.optimizer.lr <= 0.0 {
            return Err(Error::config("optimizer lr must be positive"));
        }
        if self.optimizer.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if let Some(s) = &self.scheduler {
            if s.eta_min < 0.0 {
                return Err(Error::config("eta_min must be non-negative"));
            }
            if let Some(t) = s.total_steps {
                if t <= s.warmup_steps {
                    return Err(Error::config(format!(
                        "scheduler total_steps {t} must exceed warmup_steps {}",
                        s.warmup_steps
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `cos(pi * x)` with exact values at the points the schedule's boundary
/// behavior depends on.
pub fn cos_pi(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x == 0.5 {
        0.0
    } else if x == 1.0 {
        -1.0
    } else {
        (std::f64::consts::PI * x).cos()
    }
}

/// Linear warmup to `base` over `warmup` units, then cosine decay to
/// `eta_min` at `total`. Past `total` the rate clamps to `eta_min` (with a
/// logged warning, since it usually means a misconfigured horizon).
pub fn warmup_cosine_lr(t: u64, warmup: u64, total: u64, base: f64, eta_min: f64) -> f64 {
    debug_assert!(total > warmup);
    if t < warmup {
        return base * t as f64 / warmup as f64;
    }
    if t > total {
        log::warn!("schedule queried at t={t} past total={total}; clamping to eta_min");
        return eta_min;
    }
    let ratio = (t - warmup) as f64 / (total - warmup) as f64;
    eta_min + 0.5 * (base - eta_min) * (1.0 + cos_pi(ratio))
}

/// One LARS update without momentum: the [OP]-level rule. Trust ratio
/// `r = |w| / (|g| + wd * |w| + eps)`, defined as 1 when either norm
/// vanishes; the returned weight is `w - lr * r * (g + wd * w)`.
pub fn lars_update(w: &Data, g: &Data, lr: f64, weight_decay: f64, eps: f64) -> Result<Data> {
    if w.shape() != g.shape() {
        return Err(Error::shape(
            "lars_update",
            format!("{:?} vs {:?}", w.shape(), g.shape()),
        ));
    }
    let step = lars_effective_step(w, g, lr, weight_decay, eps);
    Ok(w - &step)
}

fn norm(a: &Data) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn lars_effective_step(w: &Data, g: &Data, lr: f64, weight_decay: f64, eps: f64) -> Data {
    let wn = norm(w);
    let gn = norm(g);
    let r = if wn == 0.0 || gn == 0.0 {
        1.0
    } else {
        wn / (gn + weight_decay * wn + eps)
    };
    (g + &(w * weight_decay)) * (lr * r)
}

struct Scheduler {
    warmup: u64,
    total: u64,
    base: f64,
    eta_min: f64,
    t: u64,
}

impl Scheduler {
    fn current(&self) -> f64 {
        warmup_cosine_lr(self.t, self.warmup, self.total, self.base, self.eta_min)
    }
}

/// Update engine for one parameter list. Construct with [`build_optimizer`].
pub struct Optimizer {
    kind: OptimKind,
    names: Vec<String>,
    params: Vec<Tensor>,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    eps: f64,
    momentum_buf: Vec<Option<Data>>,
    adam_m: Vec<Option<Data>>,
    adam_v: Vec<Option<Data>>,
    adam_t: u64,
    scheduler: Option<Scheduler>,
}

/// Registers `params` with the configured update rule and schedule.
/// `default_total` supplies the schedule horizon (in `cfg.interval` units)
/// when the config does not pin one.
pub fn build_optimizer(
    params: Vec<(String, Tensor)>,
    cfg: &OptimConfig,
    default_total: u64,
) -> Result<Optimizer> {
    cfg.validate()?;
    if params.is_empty() {
        return Err(Error::invalid(
            "build_optimizer",
            "no trainable parameters",
        ));
    }
    let n = params.len();
    let (names, tensors): (Vec<_>, Vec<_>) = params.into_iter().unzip();
    let scheduler = match &cfg.scheduler {
        None => None,
        Some(s) => {
            let total = s.total_steps.unwrap_or(default_total);
            if total <= s.warmup_steps {
                return Err(Error::config(format!(
                    "schedule horizon {total} must exceed warmup {}",
                    s.warmup_steps
                )));
            }
            Some(Scheduler {
                warmup: s.warmup_steps,
                total,
                base: cfg.optimizer.lr,
                eta_min: s.eta_min,
                t: 0,
            })
        }
    };
    let lr = scheduler
        .as_ref()
        .map(|s| s.current())
        .unwrap_or(cfg.optimizer.lr);
    Ok(Optimizer {
        kind: cfg.optimizer.kind,
        names,
        params: tensors,
        lr,
        weight_decay: cfg.optimizer.weight_decay,
        momentum: cfg.optimizer.momentum,
        eps: cfg.optimizer.eps,
        momentum_buf: vec![None; n],
        adam_m: vec![None; n],
        adam_v: vec![None; n],
        adam_t: 0,
        scheduler,
    })
}

impl Optimizer {
    pub fn current_lr(&self) -> f64 {
        self.lr
    }

    /// Advances the schedule by one interval unit (no-op without one).
    pub fn scheduler_tick(&mut self) {
        if let Some(s) = &mut self.scheduler {
            s.t += 1;
            self.lr = s.current();
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Applies one update from the gradients currently stored on the
    /// parameters. Parameters without a gradient are left untouched.
    pub fn step(&mut self) -> Result<()> {
        if self.kind == OptimKind::AdamW {
            self.adam_t += 1;
        }
        for i in 0..self.params.len() {
            let Some(grad) = self.params[i].grad() else {
                continue;
            };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}", self.names[i]),
                    step: None,
                });
            }
            let w = self.params[i].value();
            match self.kind {
                OptimKind::Lars => {
                    // trust-ratio adaptation and decay apply to matrices
                    // only; 1-d parameters take plain SGD steps
                    let effective = if w.ndim() > 1 {
                        lars_effective_step(&w, &grad, self.lr, self.weight_decay, self.eps)
                    } else {
                        &grad * self.lr
                    };
                    let update = self.apply_momentum(i, effective);
                    self.params[i].update_value(|v| *v -= &update);
                }
                OptimKind::Sgd => {
                    let decayed = if w.ndim() > 1 && self.weight_decay != 0.0 {
                        &grad + &(&w * self.weight_decay)
                    } else {
                        grad.clone()
                    };
                    let update = self.apply_momentum(i, decayed * self.lr);
                    self.params[i].update_value(|v| *v -= &update);
                }
                OptimKind::AdamW => {
                    let beta1 = 0.9;
                    let beta2 = 0.999;
                    let m = self.adam_m[i].get_or_insert_with(|| Data::zeros(w.raw_dim()));
                    *m = &*m * beta1 + &(&grad * (1.0 - beta1));
                    let v = self.adam_v[i].get_or_insert_with(|| Data::zeros(w.raw_dim()));
                    *v = &*v * beta2 + &(grad.mapv(|g| g * g) * (1.0 - beta2));
                    let mhat = &*m / (1.0 - beta1.powi(self.adam_t as i32));
                    let vhat = &*v / (1.0 - beta2.powi(self.adam_t as i32));
                    let lr = self.lr;
                    let wd = self.weight_decay;
                    let eps = self.eps;
                    let direction =
                        mhat / &vhat.mapv(|x| x.sqrt() + eps) + &(&w * wd);
                    self.params[i].update_value(|val| *val -= &(direction * lr));
                }
            }
        }
        Ok(())
    }

    fn apply_momentum(&mut self, i: usize, effective: Data) -> Data {
        if self.momentum == 0.0 {
            return effective;
        }
        let buf = self.momentum_buf[i]
            .get_or_insert_with(|| Data::zeros(effective.raw_dim()));
        *buf = &*buf * self.momentum + &effective;
        buf.clone()
    }

    /// Serializable state: per-parameter buffers plus counters. Scalar
    /// counters travel as single-element arrays.
    pub fn state_arrays(&self) -> Vec<(String, Data)> {
        let mut out = Vec::new();
        let push_scalar = |out: &mut Vec<(String, Data)>, name: &str, v: f64| {
            out.push((
                name.to_string(),
                Data::from_elem(ndarray::IxDyn(&[1]), v),
            ));
        };
        push_scalar(&mut out, "adam_t", self.adam_t as f64);
        if let Some(s) = &self.scheduler {
            push_scalar(&mut out, "sched_t", s.t as f64);
        }
        for (i, name) in self.names.iter().enumerate() {
            if let Some(b) = &self.momentum_buf[i] {
                out.push((format!("momentum.{name}"), b.clone()));
            }
            if let Some(m) = &self.adam_m[i] {
                out.push((format!("adam_m.{name}"), m.clone()));
            }
            if let Some(v) = &self.adam_v[i] {
                out.push((format!("adam_v.{name}"), v.clone()));
            }
        }
        out
    }

    pub fn load_state_arrays(&mut self, entries: &HashMap<String, Data>) -> Result<()> {
        let scalar = |name: &str| -> Result<Option<f64>> {
            match entries.get(name) {
                None => Ok(None),
                Some(a) if a.len() == 1 => Ok(Some(*a.iter().next().unwrap())),
                Some(_) => Err(Error::invalid(
                    "optimizer load",
                    format!("{name} must be a single element"),
                )),
            }
        };
        self.adam_t = scalar("adam_t")?
            .ok_or_else(|| Error::invalid("optimizer load", "missing adam_t"))?
            as u64;
        if let Some(s) = &mut self.scheduler {
            s.t = scalar("sched_t")?
                .ok_or_else(|| Error::invalid("optimizer load", "missing sched_t"))?
                as u64;
            self.lr = s.current();
        }
        for (i, name) in self.names.iter().enumerate() {
            self.momentum_buf[i] = entries.get(&format!("momentum.{name}")).cloned();
            self.adam_m[i] = entries.get(&format!("adam_m.{name}")).cloned();
            self.adam_v[i] = entries.get(&format!("adam_v.{name}")).cloned();
        }
        Ok(())
    }
}
