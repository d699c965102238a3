//! Residual flow-map models and their use as discrete dynamical systems.
//!
//! All three kinds are compositions of residual blocks `x ↦ x + N(x; Θ)`:
//! a ResNet applies one block per lag, an RT-ResNet applies one shared block
//! `K` times (each application stands for a step of `Δ/K`), and an RS-ResNet
//! applies `K` blocks with separate parameters in order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_flow, IntegratorConfig, StateVector, SystemDef};
use crate::error::{check_dim, Error, Result};
use crate::neuralnet::{init_params, Architecture, FnnCache, FnnParams, Gradient};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "ResNet")]
    ResNet,
    #[serde(rename = "RT-ResNet")]
    RtResNet,
    #[serde(rename = "RS-ResNet")]
    RsResNet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::ResNet, ModelKind::RtResNet, ModelKind::RsResNet];

    /// Short name used on the command line and in file names.
    pub fn short_name(self) -> &'static str {
        match self {
            ModelKind::ResNet => "resnet",
            ModelKind::RtResNet => "rt",
            ModelKind::RsResNet => "rs",
        }
    }

    pub fn from_short_name(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(ModelKind::ResNet),
            "rt" | "rt-resnet" => Ok(ModelKind::RtResNet),
            "rs" | "rs-resnet" => Ok(ModelKind::RsResNet),
            _ => Err(Error::Usage(format!(
                "unknown model kind '{s}' (expected resnet, rt or rs)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::ResNet => "ResNet",
            ModelKind::RtResNet => "RT-ResNet",
            ModelKind::RsResNet => "RS-ResNet",
        })
    }
}

/// A learned map advancing the state by one lag `Δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub kind: ModelKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub lag: f64,
    pub blocks: Vec<FnnParams>,
}

/// Intermediate states and per-application network caches.
#[derive(Clone, Debug)]
pub struct ModelCache {
    /// `y_0 = x, y_1, ..., y_K`.
    pub states: Vec<StateVector>,
    pub block_caches: Vec<FnnCache>,
}

#[derive(Clone, Debug)]
pub struct ModelGradient {
    /// One entry per stored block.
    pub blocks: Vec<Gradient>,
    pub input: StateVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub step: f64,
}

/// Anything that advances a state by one lag.
pub trait DiscreteFlow {
    fn lag(&self) -> f64;
    fn dim(&self) -> usize;
    fn advance(&self, x: &[f64]) -> Result<StateVector>;
}

impl FlowModel {
    pub fn new(kind: ModelKind, k: usize, lag: f64, blocks: Vec<FnnParams>) -> Result<Self> {
        let model = FlowModel {
            kind,
            k,
            lag,
            blocks,
        };
        model.validate()?;
        Ok(model)
    }

    /// Randomly initialized model. RS-ResNet blocks get independent seeds.
    pub fn init(
        kind: ModelKind,
        k: usize,
        lag: f64,
        arch: &Architecture,
        seed: u64,
        weight_std: Option<f64>,
    ) -> Result<Self> {
        let blocks = (0..Self::stored_blocks(kind, k))
            .map(|b| init_params(arch, rng::derive_seed(seed, b as u64), weight_std))
            .collect();
        FlowModel::new(kind, k, lag, blocks)
    }

    /// Model with every block identically zero, i.e. the identity map.
    pub fn zeros(kind: ModelKind, k: usize, lag: f64, arch: &Architecture) -> Result<Self> {
        let blocks = (0..Self::stored_blocks(kind, k))
            .map(|_| FnnParams::zeros(arch))
            .collect();
        FlowModel::new(kind, k, lag, blocks)
    }

    fn stored_blocks(kind: ModelKind, k: usize) -> usize {
        match kind {
            ModelKind::RsResNet => k,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Validation("K must be >= 1".into()));
        }
        if self.kind == ModelKind::ResNet && self.k != 1 {
            return Err(Error::Validation(format!(
                "ResNet requires K = 1, got {}",
                self.k
            )));
        }
        if !(self.lag > 0.0 && self.lag.is_finite()) {
            return Err(Error::Validation(format!(
                "lag must be positive, got {}",
                self.lag
            )));
        }
        let expected = Self::stored_blocks(self.kind, self.k);
        if self.blocks.len() != expected {
            return Err(Error::Validation(format!(
                "{} with K = {} needs {expected} block(s), found {}",
                self.kind,
                self.k,
                self.blocks.len()
            )));
        }
        let n = self.blocks[0].state_dim();
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate().map_err(|e| e.context(format!("block {i}")))?;
            if b.state_dim() != n {
                return Err(Error::Validation(format!(
                    "block {i} has a different state dimension"
                )));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.blocks[0].state_dim()
    }

    /// Block applications per lag.
    pub fn applications(&self) -> usize {
        match self.kind {
            ModelKind::ResNet => 1,
            _ => self.k,
        }
    }

    fn block_index(&self, application: usize) -> usize {
        match self.kind {
            ModelKind::RsResNet => application,
            _ => 0,
        }
    }

    /// One lag of the model: the composition of all block applications.
    pub fn forward(&self, x: &[f64]) -> Result<(StateVector, ModelCache)> {
        check_dim(self.state_dim(), x.len())?;
        let cache = self.forward_cache(x);
        Ok((cache.states.last().unwrap().clone(), cache))
    }

    pub(crate) fn forward_cache(&self, x: &[f64]) -> ModelCache {
        let apps = self.applications();
        let mut states = Vec::with_capacity(apps + 1);
        let mut block_caches = Vec::with_capacity(apps);
        states.push(StateVector::from(x));
        for a in 0..apps {
            let cache = self.blocks[self.block_index(a)].forward_cache(&states[a]);
            let next: Vec<f64> = states[a]
                .iter()
                .zip(cache.output())
                .map(|(y, dy)| y + dy)
                .collect();
            block_caches.push(cache);
            states.push(next.into());
        }
        ModelCache {
            states,
            block_caches,
        }
    }

    /// Gradient of `upstreamᵀ y` with respect to every stored block and the
    /// input. Shared RT-ResNet parameters accumulate over all applications.
    pub fn backward(&self, cache: &ModelCache, upstream: &[f64]) -> Result<ModelGradient> {
        let mut grads: Vec<Gradient> = self.blocks.iter().map(Gradient::zeros_like).collect();
        let input = self.backward_accumulate(cache, upstream, &mut grads)?;
        Ok(ModelGradient {
            blocks: grads,
            input: input.into(),
        })
    }

    pub fn backward_accumulate(
        &self,
        cache: &ModelCache,
        upstream: &[f64],
        grads: &mut [Gradient],
    ) -> Result<Vec<f64>> {
        let apps = self.applications();
        if cache.block_caches.len() != apps || cache.states.len() != apps + 1 {
            return Err(Error::Contract("model cache does not match model".into()));
        }
        if grads.len() != self.blocks.len() {
            return Err(Error::Contract(
                "gradient count does not match blocks".into(),
            ));
        }
        check_dim(self.state_dim(), upstream.len())?;
        let mut g = upstream.to_vec();
        for a in (0..apps).rev() {
            let b = self.block_index(a);
            let through_block =
                self.blocks[b].backward_accumulate(&cache.block_caches[a], &g, &mut grads[b])?;
            // Identity skip plus the path through N.
            g.iter_mut()
                .zip(&through_block)
                .for_each(|(gi, ti)| *gi += ti);
        }
        Ok(g)
    }

    /// `N(y_k)` for each block application along one lag.
    pub fn block_increments(&self, x: &[f64]) -> Result<Vec<StateVector>> {
        check_dim(self.state_dim(), x.len())?;
        Ok(self
            .forward_cache(x)
            .block_caches
            .iter()
            .map(|c| c.output().into())
            .collect())
    }

    /// Iterate the model from `x0`. Coarse mode records one state per lag;
    /// fine mode (RT-ResNet only) records one state per block application.
    pub fn rollout(&self, x0: &[f64], steps: usize, fine: bool) -> Result<RolloutTrajectory> {
        if !fine {
            return rollout_flow(self, x0, steps);
        }
        if self.kind != ModelKind::RtResNet {
            return Err(Error::Usage(format!(
                "fine rollout needs an RT-ResNet, model is {}",
                self.kind
            )));
        }
        check_dim(self.state_dim(), x0.len())?;
        let block = &self.blocks[0];
        let step = self.lag / self.k as f64;
        let mut states = Vec::with_capacity(steps + 1);
        states.push(StateVector::from(x0));
        for i in 0..steps {
            let cache = block.forward_cache(&states[i]);
            let next: Vec<f64> = states[i]
                .iter()
                .zip(cache.output())
                .map(|(y, dy)| y + dy)
                .collect();
            states.push(next.into());
        }
        Ok(trajectory(states, step))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: FlowModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FlowModel::from_json(&fs::read_to_string(path)?)
    }
}

impl DiscreteFlow for FlowModel {
    fn lag(&self) -> f64 {
        self.lag
    }

    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn advance(&self, x: &[f64]) -> Result<StateVector> {
        check_dim(self.state_dim(), x.len())?;
        Ok(self.forward_cache(x).states.pop().unwrap())
    }
}

/// The exact lag map `Φ_Δ = I + φ_Δ` computed by reference integration.
#[derive(Clone, Debug)]
pub struct OracleFlow {
    pub system: SystemDef,
    pub lag: f64,
    pub cfg: IntegratorConfig,
}

impl OracleFlow {
    pub fn new(system: SystemDef, lag: f64) -> Self {
        OracleFlow {
            system,
            lag,
            cfg: IntegratorConfig::default(),
        }
    }
}

impl DiscreteFlow for OracleFlow {
    fn lag(&self) -> f64 {
        self.lag
    }

    fn dim(&self) -> usize {
        self.system.dimension
    }

    fn advance(&self, x: &[f64]) -> Result<StateVector> {
        if !(self.lag > 0.0) {
            return Err(Error::Contract(format!(
                "lag must be positive, got {}",
                self.lag
            )));
        }
        integrate_flow(&self.system, x, self.lag, &self.cfg)
    }
}

fn trajectory(states: Vec<StateVector>, step: f64) -> RolloutTrajectory {
    RolloutTrajectory {
        times: (0..states.len()).map(|i| i as f64 * step).collect(),
        states,
        step,
    }
}

/// States at `t = 0, Δ, 2Δ, ...` produced by iterating `flow`.
pub fn rollout_flow(
    flow: &dyn DiscreteFlow,
    x0: &[f64],
    steps: usize,
) -> Result<RolloutTrajectory> {
    check_dim(flow.dim(), x0.len())?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(StateVector::from(x0));
    for i in 0..steps {
        let next = flow.advance(&states[i])?;
        states.push(next);
    }
    Ok(trajectory(states, flow.lag()))
}

/// CSV `t,x1,...,xn[,ref_x1,...,ref_xn]`.
pub fn trajectory_csv(
    traj: &RolloutTrajectory,
    reference: Option<&[StateVector]>,
) -> Result<String> {
    let n = traj.states.first().map_or(0, StateVector::dim);
    if let Some(r) = reference {
        if r.len() != traj.states.len() {
            return Err(Error::Contract(
                "reference length differs from trajectory".into(),
            ));
        }
    }
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    if reference.is_some() {
        cols.extend((1..=n).map(|i| format!("ref_x{i}")));
    }
    let mut out = cols.join(",");
    out.push('\n');
    for (i, (t, s)) in traj.times.iter().zip(&traj.states).enumerate() {
        write!(out, "{t}").unwrap();
        for v in s.iter() {
            write!(out, ",{v}").unwrap();
        }
        if let Some(r) = reference {
            for v in r[i].iter() {
                write!(out, ",{v}").unwrap();
            }
        }
        out.push('\n');
    }
    Ok(out)
}
