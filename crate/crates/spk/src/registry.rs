//! Turns config names into live objects. Everything a config can refer to
//! by string resolves through here, so a typo fails before training starts
//! and the error lists what would have worked.

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::config::{BlockCfg, CallbackCfg, DataConfig, DatasetCfg, ModuleConfig};
use crate::data::{
    DataLoader, DataModule, DatasetAdapter, GaussianBlobs, RecordSource, SamplerKind,
    SyntheticImages,
};
use crate::error::{Error, Result};
use crate::module::{simclr_forward, supervised_forward, ForwardFn, Module};
use crate::monitors::{
    attach_depth_probes, Callback, LidarMonitor, OnlineKnn, OnlineProbe, RankMeMonitor,
};
use crate::nn::{BatchNorm1d, Block, Conv2d, Layer, Linear, Sequential};
use crate::rng::{derive_rng, label};

pub const FORWARDS: &[&str] = &["simclr", "supervised"];

pub fn build_forward(cfg: &ModuleConfig) -> Result<ForwardFn> {
    match cfg.forward.as_str() {
        "simclr" => Ok(simclr_forward(cfg.temperature)),
        "supervised" => Ok(supervised_forward()),
        other => Err(Error::Registry {
            kind: "forward",
            name: other.to_string(),
            known: FORWARDS.join(", "),
        }),
    }
}

pub fn build_block(cfg: &BlockCfg, rng: &mut ChaCha12Rng) -> Box<dyn Block> {
    match *cfg {
        BlockCfg::SmallConv {
            in_channels,
            channels,
            embedding_dim,
        } => {
            let c = channels;
            Box::new(Sequential::new(vec![
                ("conv1", Layer::Conv2d(Conv2d::new(in_channels, c, 3, 1, 1, rng))),
                ("relu1", Layer::ReLU),
                ("pool1", Layer::AvgPool2d(2)),
                ("conv2", Layer::Conv2d(Conv2d::new(c, 2 * c, 3, 1, 1, rng))),
                ("relu2", Layer::ReLU),
                ("pool2", Layer::AvgPool2d(2)),
                ("conv3", Layer::Conv2d(Conv2d::new(2 * c, 2 * c, 3, 1, 1, rng))),
                ("relu3", Layer::ReLU),
                ("gap", Layer::GlobalAvgPool),
                ("fc", Layer::Linear(Linear::new(2 * c, embedding_dim, rng))),
            ]))
        }
        BlockCfg::Mlp {
            in_dim,
            hidden,
            out_dim,
            batch_norm,
        } => {
            let mut layers = vec![
                ("flatten", Layer::Flatten),
                ("fc1", Layer::Linear(Linear::new(in_dim, hidden, rng))),
            ];
            if batch_norm {
                layers.push(("bn1", Layer::BatchNorm1d(BatchNorm1d::new(hidden))));
            }
            layers.push(("relu1", Layer::ReLU));
            layers.push(("fc2", Layer::Linear(Linear::new(hidden, out_dim, rng))));
            Box::new(Sequential::new(layers))
        }
        BlockCfg::Linear { in_dim, out_dim } => Box::new(Sequential::new(vec![
            ("flatten", Layer::Flatten),
            ("fc", Layer::Linear(Linear::new(in_dim, out_dim, rng))),
        ])),
    }
}

/// Assembles the module: named components, forward function, optimizer
/// plan. Weight init draws from per-component streams of `seed`, so adding
/// a projector does not shift the backbone's initial weights.
pub fn build_module(cfg: &ModuleConfig, seed: u64) -> Result<Module> {
    let forward = build_forward(cfg)?;
    match cfg.forward.as_str() {
        "simclr" if cfg.projector.is_none() => {
            return Err(Error::config("the simclr forward needs [module.projector]"));
        }
        "supervised" if cfg.head.is_none() => {
            return Err(Error::config("the supervised forward needs [module.head]"));
        }
        _ => {}
    }
    let mut components: Vec<(String, Box<dyn Block>)> = Vec::new();
    let add = |name: &str, block_cfg: &BlockCfg, components: &mut Vec<_>| {
        let mut rng = derive_rng(seed, &[label("init"), label(name)]);
        components.push((name.to_string(), build_block(block_cfg, &mut rng)));
    };
    add("backbone", &cfg.backbone, &mut components);
    if let Some(p) = &cfg.projector {
        add("projector", p, &mut components);
    }
    if let Some(h) = &cfg.head {
        add("head", h, &mut components);
    }
    Module::new(components, forward, cfg.optim.clone())
}

/// Instantiates a procedural source. `n_samples` is passed explicitly so
/// the same spec can stamp out train and validation splits of different
/// sizes (with different seeds).
pub fn build_source(
    cfg: &DatasetCfg,
    n_samples: usize,
    seed: u64,
) -> Result<Rc<dyn RecordSource>> {
    Ok(match *cfg {
        DatasetCfg::SyntheticImages {
            n_classes,
            size,
            noise,
            ..
        } => Rc::new(SyntheticImages::new(n_samples, n_classes, size, noise, seed)?),
        DatasetCfg::GaussianBlobs {
            n_classes,
            dim,
            spread,
            ..
        } => Rc::new(GaussianBlobs::new(n_samples, n_classes, dim, spread, seed)?),
    })
}

fn dataset_n_samples(cfg: &DatasetCfg) -> usize {
    match *cfg {
        DatasetCfg::SyntheticImages { n_samples, .. }
        | DatasetCfg::GaussianBlobs { n_samples, .. } => n_samples,
    }
}

/// Field names every source exposes, in fetch order. The model input is
/// always published as `image` so forwards don't care which generator
/// produced it.
fn field_names() -> Vec<String> {
    vec!["image".to_string(), "label".to_string()]
}

pub fn build_data(cfg: &DataConfig, seed: u64) -> Result<DataModule> {
    let train_source = build_source(
        &cfg.dataset,
        dataset_n_samples(&cfg.dataset),
        crate::rng::mix(seed, &[label("data"), label("train")]),
    )?;
    let train = DataLoader::new(
        DatasetAdapter::new(train_source, field_names(), cfg.train_transform.clone())?,
        cfg.batch_size,
        SamplerKind::RepeatedRandom,
        cfg.drop_last,
        seed,
    )?;
    let val = if cfg.val_samples > 0 {
        let source = build_source(
            &cfg.dataset,
            cfg.val_samples,
            crate::rng::mix(seed, &[label("data"), label("val")]),
        )?;
        Some(DataLoader::new(
            DatasetAdapter::new(source, field_names(), cfg.val_transform.clone())?,
            cfg.batch_size,
            SamplerKind::Sequential,
            false,
            seed,
        )?)
    } else {
        None
    };
    Ok(DataModule::new(train, val, None))
}

/// Builds the callback list. Depth-probe specs register their taps on the
/// module here and expand into one probe per layer. Names must be unique
/// because checkpoint sections are keyed by them.
pub fn build_callbacks(
    cfgs: &[CallbackCfg],
    module: &Module,
) -> Result<Vec<Box<dyn Callback>>> {
    let mut out: Vec<Box<dyn Callback>> = Vec::new();
    for cfg in cfgs {
        match cfg {
            CallbackCfg::OnlineProbe {
                name,
                input,
                target,
                n_classes,
                lr,
            } => out.push(Box::new(
                OnlineProbe::new(name, input, target, *n_classes)?.with_lr(*lr),
            )),
            CallbackCfg::OnlineKnn {
                name,
                input,
                target,
                queue_length,
                k,
                distance,
            } => out.push(Box::new(OnlineKnn::new(
                name,
                input,
                target,
                *queue_length,
                *k,
                *distance,
            )?)),
            CallbackCfg::Rankme {
                name,
                input,
                target,
                queue_length,
            } => out.push(Box::new(RankMeMonitor::new(
                name,
                input,
                target,
                *queue_length,
            ))),
            CallbackCfg::Lidar { name, input } => {
                out.push(Box::new(LidarMonitor::new(name, input)))
            }
            CallbackCfg::DepthProbes {
                name,
                component,
                layers,
                target,
                n_classes,
                lr,
            } => {
                if layers.is_empty() {
                    return Err(Error::config(format!(
                        "depth_probes {name:?} lists no layers"
                    )));
                }
                attach_depth_probes(module, component, layers)?;
                for layer in layers {
                    out.push(Box::new(
                        OnlineProbe::new(
                            &format!("{name}_{layer}"),
                            &format!("embedding::{layer}"),
                            target,
                            *n_classes,
                        )?
                        .with_lr(*lr),
                    ));
                }
            }
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for cb in &out {
        if !seen.insert(cb.name().to_string()) {
            return Err(Error::config(format!(
                "duplicate callback name {:?}",
                cb.name()
            )));
        }
    }
    Ok(out)
}
