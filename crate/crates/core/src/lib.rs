//! Data-driven flow-map learning for autonomous ODE systems.
//!
//! Observations come as pairs of states separated by a fixed time lag. Three
//! residual-network families approximate the lag flow map:
//!
//! - [`ModelKind::ResNet`]: one block, `y = x + N(x)`.
//! - [`ModelKind::RtResNet`]: one shared block applied `K` times per lag.
//! - [`ModelKind::RsResNet`]: `K` distinct blocks composed per lag.
//!
//! The [`theory`] module checks the flow-map Lipschitz, composition, near
//! identity and rollout error bounds numerically against reference integration.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataio;
pub mod dynamics;
mod error;
pub mod flowmodels;
pub mod neuralnet;
pub mod rng;
pub mod theory;
pub mod training;

pub use dataio::{DataPair, NoiseSpec, TrainingSet};
pub use dynamics::{Domain, IntegratorConfig, IntegratorMethod, StateVector, SystemDef};
pub use error::{Error, Result};
pub use flowmodels::{DiscreteFlow, FlowModel, ModelKind, OracleFlow, RolloutTrajectory};
pub use neuralnet::{Architecture, FnnParams, Gradient};
pub use theory::BoundReport;
pub use training::{LossReport, Optimizer, TrainConfig};
