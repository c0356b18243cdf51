//! The training module: named computational components bundled with one
//! stage-aware forward function and an optimizer configuration.
//!
//! The forward function owns all computation. It receives the module (for
//! component lookup), the incoming batch, and the stage, and returns a new
//! batch-shaped mapping. If that mapping carries a finite `loss` during
//! training, the engine optimizes it; every other key is visible to
//! callbacks unchanged.

use crate::batch::{Batch, Stage, Value};
use crate::error::{Error, Result};
use crate::losses::nt_xent;
use crate::nn::{reduce_activation, Block};
use crate::optim::OptimConfig;
use crate::tensor::{ops, Data, Tensor};
use indexmap::IndexMap;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub type ForwardFn = Rc<dyn Fn(&Module, &Batch, Stage) -> Result<Batch>>;

pub struct Module {
    components: IndexMap<String, Box<dyn Block>>,
    forward: ForwardFn,
    optim: OptimConfig,
    /// (component, layer) pairs whose activations are exported as
    /// `embedding::{layer}` keys on every forward output.
    taps: RefCell<Vec<(String, String)>>,
    captured: RefCell<Vec<(String, Tensor)>>,
}

impl Module {
    pub fn new(
        components: Vec<(String, Box<dyn Block>)>,
        forward: ForwardFn,
        optim: OptimConfig,
    ) -> Result<Self> {
        optim.validate()?;
        Ok(Self {
            components: components.into_iter().collect(),
            forward,
            optim,
            taps: RefCell::new(Vec::new()),
            captured: RefCell::new(Vec::new()),
        })
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    pub fn component_names(&self) -> Vec<&str> {
        self.components.keys().map(String::as_str).collect()
    }

    pub fn component(&self, name: &str) -> Result<&dyn Block> {
        self.components.get(name).map(Box::as_ref).ok_or_else(|| {
            Error::invalid(
                "component",
                format!(
                    "no component {name:?}; available: {:?}",
                    self.component_names()
                ),
            )
        })
    }

    /// Registers a depth tap: during every forward that routes through
    /// `component`, the named layer's output is reduced (pooled or
    /// flattened to 2-d) and exported under `embedding::{layer}`.
    pub fn add_tap(&self, component: &str, layer: &str) -> Result<()> {
        let block = self.component(component)?;
        let known = block.layer_names();
        if !known.iter().any(|n| n == layer) {
            return Err(Error::invalid(
                "add_tap",
                format!("layer {layer:?} not found in {component:?}; available: {known:?}"),
            ));
        }
        self.taps
            .borrow_mut()
            .push((component.to_string(), layer.to_string()));
        Ok(())
    }

    pub fn tap_keys(&self) -> Vec<String> {
        self.taps
            .borrow()
            .iter()
            .map(|(_, layer)| format!("embedding::{layer}"))
            .collect()
    }

    /// Runs a named component, collecting any tapped layer activations on
    /// the side. Forward functions should call this instead of invoking
    /// blocks directly so that depth taps work uniformly.
    pub fn forward_component(&self, name: &str, x: &Tensor, stage: Stage) -> Result<Tensor> {
        let block = self.component(name)?;
        let capture: Vec<String> = self
            .taps
            .borrow()
            .iter()
            .filter(|(c, _)| c == name)
            .map(|(_, l)| l.clone())
            .collect();
        if capture.is_empty() {
            return block.forward(x, stage.is_train());
        }
        let (out, grabbed) = block.forward_capturing(x, stage.is_train(), &capture)?;
        let mut store = self.captured.borrow_mut();
        for (layer, activation) in grabbed {
            store.push((layer, reduce_activation(&activation)?));
        }
        Ok(out)
    }

    /// Invokes the user forward and applies the engine-side contract:
    /// tapped activations are merged into the output, and a present but
    /// non-finite loss is rejected with the offending step number.
    pub fn run_forward(&self, batch: &Batch, stage: Stage, step: u64) -> Result<Batch> {
        self.captured.borrow_mut().clear();
        let mut out = (self.forward)(self, batch, stage)?;
        for (layer, activation) in self.captured.borrow_mut().drain(..) {
            out.insert(format!("embedding::{layer}"), Value::Tensor(activation));
        }
        if out.loss().is_some() {
            let loss = out.scalar("loss")?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    step: Some(step),
                });
            }
        }
        Ok(out)
    }

    /// All trainable parameters across components, names prefixed with the
    /// component name. Probe parameters live in callbacks, never here.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (cname, block) in &self.components {
            for (pname, p) in block.parameters() {
                out.push((format!("{cname}.{pname}"), p));
            }
        }
        out
    }

    /// Parameter values plus non-trainable buffers, for checkpointing.
    pub fn state(&self) -> Vec<(String, Data)> {
        let mut out = Vec::new();
        for (cname, block) in &self.components {
            for (sname, data) in block.state() {
                out.push((format!("{cname}.{sname}"), data));
            }
        }
        out
    }

    pub fn load_state(&self, entries: &HashMap<String, Data>) -> Result<()> {
        let mut by_component: HashMap<&str, HashMap<String, Data>> = HashMap::new();
        for (name, data) in entries {
            match name.split_once('.') {
                Some((cname, rest)) => {
                    by_component
                        .entry(cname)
                        .or_default()
                        .insert(rest.to_string(), data.clone());
                }
                None => {
                    return Err(Error::checkpoint(
                        "weights",
                        format!("unprefixed entry {name:?}"),
                    ))
                }
            }
        }
        for (cname, block) in &self.components {
            let sub = by_component.remove(cname.as_str()).unwrap_or_default();
            block.load_state(&sub)?;
        }
        if let Some(extra) = by_component.keys().next() {
            return Err(Error::checkpoint(
                "weights",
                format!("entries for unknown component {extra:?}"),
            ));
        }
        Ok(())
    }
}

/// Contrastive two-view forward: backbone embedding always, projector +
/// NT-Xent loss only while training.
pub fn simclr_forward(temperature: f64) -> ForwardFn {
    Rc::new(move |module, batch, stage| {
        let image = batch.tensor("image")?;
        let h = module.forward_component("backbone", image, stage)?;
        let mut out = Batch::new();
        out.insert("embedding", Value::Tensor(h.clone()));
        if stage.is_train() {
            let z = module.forward_component("projector", &h, stage)?;
            let views = crate::batch::fold_views(&z, batch.sample_idx()?)?;
            if views.len() != 2 {
                return Err(Error::invalid(
                    "simclr_forward",
                    format!("expected 2 views per sample, got {}", views.len()),
                ));
            }
            let loss = nt_xent(&views[0], &views[1], temperature)?;
            out.insert("loss", Value::Tensor(loss));
        }
        Ok(out)
    })
}

/// Plain supervised forward: backbone + head, cross-entropy on `label`.
pub fn supervised_forward() -> ForwardFn {
    Rc::new(|module, batch, stage| {
        let image = batch.tensor("image")?;
        let h = module.forward_component("backbone", image, stage)?;
        let logits = module.forward_component("head", &h, stage)?;
        let labels: Vec<usize> = batch
            .int_vec("label")?
            .iter()
            .map(|&l| l as usize)
            .collect();
        let mut out = Batch::new();
        out.insert("embedding", Value::Tensor(h));
        let loss = ops::cross_entropy_logits(&logits, &labels)?;
        out.insert("logits", Value::Tensor(logits));
        out.insert("loss", Value::Tensor(loss));
        Ok(out)
    })
}
