//! Modular self-supervised pretraining.
//!
//! The crate is organized around a small set of interlocking pieces:
//!
//! - [`batch`]: the dictionary-shaped batch that flows through everything.
//! - [`tensor`]: a reverse-mode autodiff engine over `f64` arrays.
//! - [`nn`]: layers and the [`nn::Block`] trait they implement.
//! - [`module`]: named components plus a user-supplied forward closure.
//! - [`data`]: sources, transforms, samplers, and the loader.
//! - [`optim`]: optimizers (including layer-adaptive scaling) and schedules.
//! - [`losses`] / [`metrics`]: contrastive objectives and evaluation helpers.
//! - [`monitors`]: train-time callbacks (probes, collapse diagnostics) and
//!   the shared feature queue they read from.
//! - [`manager`]: the loop that ties module, data, and monitors together,
//!   with checkpoint/resume.
//! - [`config`] / [`registry`] / [`launch`]: declarative experiment specs
//!   and the CLI entry points built on them.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod launch;
pub mod logging;
pub mod losses;
pub mod manager;
pub mod metrics;
pub mod module;
pub mod monitors;
pub mod nn;
pub mod optim;
pub mod registry;
pub mod error;
pub mod linalg;
pub mod rng;
pub mod tensor;

pub use batch::{Batch, Stage, Value};
pub use error::{Error, Result};
pub use tensor::Tensor;
