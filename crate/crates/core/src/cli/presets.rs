use serde::{Deserialize, Serialize};

use crate::flowmodels::ModelKind;

/// Weight initialization std used by the CLI and the presets.
pub const DEFAULT_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PresetId {
    Ex1,
    Ex2,
    Ex3,
    Ex4,
}

impl PresetId {
    pub const ALL: [PresetId; 4] = [PresetId::Ex1, PresetId::Ex2, PresetId::Ex3, PresetId::Ex4];

    pub fn name(self) -> &'static str {
        match self {
            PresetId::Ex1 => "ex1",
            PresetId::Ex2 => "ex2",
            PresetId::Ex3 => "ex3",
            PresetId::Ex4 => "ex4",
        }
    }
}

/// How rollout accuracy is scored against the reference trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMetric {
    /// `max_t ‖y(t) - x(t)‖`.
    Absolute,
    /// `max_t ‖y(t) - x(t)‖ / ‖x(t)‖`.
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentPreset {
    pub id: PresetId,
    pub system: &'static str,
    pub delta: f64,
    pub resnet_hidden: &'static [usize],
    pub block_hidden: &'static [usize],
    #[serde(rename = "K")]
    pub k: usize,
    pub horizon: f64,
    pub x0: &'static [f64],
    pub metric: ErrorMetric,
    pub threshold: f64,
    /// Model kinds whose rollout error must meet `threshold`.
    pub checked_kinds: &'static [ModelKind],
    /// Threshold for the RT-ResNet rollout at the block step, when checked.
    pub fine_threshold: Option<f64>,
}

const ALL_KINDS: &[ModelKind] = &ModelKind::ALL;

impl ExperimentPreset {
    pub fn get(id: PresetId) -> Self {
        match id {
            PresetId::Ex1 => ExperimentPreset {
                id,
                system: "example1",
                delta: 0.1,
                resnet_hidden: &[30, 30, 30],
                block_hidden: &[20, 20, 20],
                k: 3,
                horizon: 2.0,
                x0: &[1.5, 0.0],
                metric: ErrorMetric::Absolute,
                threshold: 5e-2,
                checked_kinds: ALL_KINDS,
                fine_threshold: Some(5e-2),
            },
            PresetId::Ex2 => ExperimentPreset {
                id,
                system: "example2",
                delta: 0.1,
                resnet_hidden: &[30, 30, 30],
                block_hidden: &[20, 20, 20],
                k: 3,
                horizon: 2.0,
                x0: &[0.0, -1.0],
                metric: ErrorMetric::Absolute,
                threshold: 5e-2,
                checked_kinds: ALL_KINDS,
                fine_threshold: None,
            },
            PresetId::Ex3 => ExperimentPreset {
                id,
                system: "pendulum",
                delta: 0.1,
                resnet_hidden: &[40, 40],
                block_hidden: &[40, 40],
                k: 3,
                horizon: 20.0,
                x0: &[-1.193, -3.876],
                metric: ErrorMetric::Relative,
                threshold: 0.1,
                checked_kinds: &[ModelKind::ResNet],
                fine_threshold: None,
            },
            PresetId::Ex4 => ExperimentPreset {
                id,
                system: "toggle",
                delta: 0.1,
                resnet_hidden: &[40, 40],
                block_hidden: &[40, 40],
                k: 3,
                horizon: 20.0,
                x0: &[19.0, 17.0],
                metric: ErrorMetric::Relative,
                threshold: 0.1,
                checked_kinds: &[ModelKind::ResNet],
                fine_threshold: None,
            },
        }
    }

    /// Number of lag steps to reach the horizon.
    pub fn steps(&self) -> usize {
        (self.horizon / self.delta).round() as usize
    }

    /// Hidden widths and number of blocks for a model kind.
    pub fn shape(&self, kind: ModelKind) -> (&'static [usize], usize) {
        match kind {
            ModelKind::ResNet => (self.resnet_hidden, 1),
            _ => (self.block_hidden, self.k),
        }
    }
}
