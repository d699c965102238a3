//! Mean-squared one-lag loss and the minibatch training loop.

use serde::{Deserialize, Serialize};

use crate::dataio::{shuffled_batches, TrainingSet};
use crate::dynamics::{integrate_flow, Domain, IntegratorConfig, SystemDef};
use crate::error::{Error, Result};
use crate::flowmodels::{DiscreteFlow, FlowModel};
use crate::neuralnet::Gradient;
use crate::rng;
use crate::StateVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Fraction of pairs held out from training, in `[0, 1)`.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 10,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Validation(
                "holdout fraction must be in [0, 1)".into(),
            ));
        }
        if !((0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0)
        {
            return Err(Error::Validation("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Loss over the training pairs after each epoch.
    pub per_epoch_train_loss: Vec<f64>,
    /// Loss over the held-out pairs after each epoch (empty without holdout).
    pub per_epoch_holdout_loss: Vec<f64>,
    pub final_holdout_loss: Option<f64>,
}

impl LossReport {
    /// CSV `epoch,train_loss[,holdout_loss]`.
    pub fn to_csv(&self) -> String {
        let with_holdout = !self.per_epoch_holdout_loss.is_empty();
        let mut out = String::from(if with_holdout {
            "epoch,train_loss,holdout_loss\n"
        } else {
            "epoch,train_loss\n"
        });
        for (e, l) in self.per_epoch_train_loss.iter().enumerate() {
            out.push_str(&format!("{},{l}", e + 1));
            if with_holdout {
                out.push_str(&format!(",{}", self.per_epoch_holdout_loss[e]));
            }
            out.push('\n');
        }
        out
    }
}

/// `(1/J) Σ_j ‖y_j - z_j‖²`.
pub fn mse_loss(outputs: &[StateVector], targets: &[StateVector]) -> Result<f64> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::Contract(format!(
            "mse_loss needs equal non-empty lists, got {} and {}",
            outputs.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (y, z) in outputs.iter().zip(targets) {
        if y.dim() != z.dim() {
            return Err(Error::Dimension {
                expected: z.dim(),
                got: y.dim(),
            });
        }
        total += y
            .iter()
            .zip(z.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / outputs.len() as f64)
}

/// Loss of `model` over the pairs at `indices`.
pub fn subset_loss(model: &FlowModel, set: &TrainingSet, indices: &[usize]) -> f64 {
    let total: f64 = indices
        .iter()
        .map(|&i| {
            let p = &set.pairs[i];
            let y = model.advance(&p.z1).expect("dimension checked");
            y.distance(&p.z2).powi(2)
        })
        .sum();
    total / indices.len() as f64
}

/// Batch loss and its gradient with respect to every stored block.
/// Per-sample gradients are summed in index order.
pub fn batch_loss_gradient(
    model: &FlowModel,
    set: &TrainingSet,
    indices: &[usize],
    grads: &mut [Gradient],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    grads.iter_mut().for_each(Gradient::fill_zero);
    let scale = 1.0 / indices.len() as f64;
    let mut loss = 0.0;
    for &i in indices {
        let p = &set.pairs[i];
        let cache = model.forward_cache(&p.z1);
        let y = cache.states.last().unwrap();
        let resid: Vec<f64> = y.iter().zip(p.z2.iter()).map(|(a, b)| a - b).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>();
        let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
        model.backward_accumulate(&cache, &upstream, grads)?;
    }
    Ok(loss * scale)
}

/// Per-parameter central-difference check of [`batch_loss_gradient`].
/// Returns the largest `|analytic - fd| / max(1e-12, |fd|)` over all
/// parameters of all blocks.
pub fn batch_gradient_check(
    model: &FlowModel,
    set: &TrainingSet,
    indices: &[usize],
    h: f64,
) -> Result<f64> {
    Ok(batch_gradient_errors(model, set, indices, h)?
        .into_iter()
        .map(|(a, fd)| (a - fd).abs() / fd.abs().max(1e-12))
        .fold(0.0, f64::max))
}

/// `(analytic, central difference)` for every parameter, block by block.
pub fn batch_gradient_errors(
    model: &FlowModel,
    set: &TrainingSet,
    indices: &[usize],
    h: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(h > 0.0) {
        return Err(Error::Contract(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut grads: Vec<Gradient> = model.blocks.iter().map(Gradient::zeros_like).collect();
    batch_loss_gradient(model, set, indices, &mut grads)?;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (b, g) in grads.iter().enumerate() {
        for (i, analytic) in g.values().enumerate() {
            let orig = *probe.blocks[b].values_mut().nth(i).unwrap();
            *probe.blocks[b].values_mut().nth(i).unwrap() = orig + h;
            let plus = subset_loss(&probe, set, indices);
            *probe.blocks[b].values_mut().nth(i).unwrap() = orig - h;
            let minus = subset_loss(&probe, set, indices);
            *probe.blocks[b].values_mut().nth(i).unwrap() = orig;
            out.push((analytic, (plus - minus) / (2.0 * h)));
        }
    }
    Ok(out)
}

struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl OptimizerState {
    fn new(model: &FlowModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .blocks
            .iter()
            .map(|b| vec![0.0; b.num_params()])
            .collect();
        OptimizerState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut FlowModel, grads: &[Gradient], cfg: &TrainConfig) {
        self.step += 1;
        let lr = cfg.learning_rate;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (block, g) in model.blocks.iter_mut().zip(grads) {
                    block
                        .values_mut()
                        .zip(g.values())
                        .for_each(|(p, g)| *p -= lr * g);
                }
            }
            Optimizer::Adam => {
                let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                for (((block, g), m), v) in model
                    .blocks
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((p, g), m), v) in block.values_mut().zip(g.values()).zip(m).zip(v) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
    }
}

const HOLDOUT_SALT: u64 = 0x686f6c64;
const EPOCH_SALT: u64 = 0x65706f63;

/// Split `0..j` into (training, holdout) index lists.
pub fn holdout_split(j: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_hold = (j as f64 * fraction).floor() as usize;
    let all: Vec<usize> = (0..j).collect();
    let order: Vec<usize> = shuffled_batches(&all, j.max(1), rng::derive_seed(seed, HOLDOUT_SALT))
        .into_iter()
        .flat_map(|b| b.indices)
        .collect();
    let (hold, train) = order.split_at(n_hold.min(j));
    (train.to_vec(), hold.to_vec())
}

/// Train `model` on `set`. The run is a deterministic function of the
/// inputs: batches are visited in order and gradients reduced sequentially.
pub fn train(
    model: &FlowModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(FlowModel, LossReport)> {
    cfg.validate()?;
    model.validate()?;
    set.validate()?;
    if model.state_dim() != set.dim() {
        return Err(Error::Validation(format!(
            "model state dimension {} differs from data dimension {}",
            model.state_dim(),
            set.dim()
        )));
    }
    if (model.lag - set.lag).abs() > 1e-12 * set.lag.abs().max(1.0) {
        return Err(Error::Validation(format!(
            "model lag {} differs from data lag {}",
            model.lag, set.lag
        )));
    }
    let (train_idx, hold_idx) = holdout_split(set.len(), cfg.holdout_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Validation("holdout leaves no training pairs".into()));
    }

    let mut model = model.clone();
    let mut state = OptimizerState::new(&model);
    let mut grads: Vec<Gradient> = model.blocks.iter().map(Gradient::zeros_like).collect();
    let mut report = LossReport::default();
    let mut recent: Vec<f64> = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_seed = rng::derive_seed(cfg.seed, EPOCH_SALT.wrapping_add(epoch as u64));
        for (b, batch) in shuffled_batches(&train_idx, cfg.batch_size, epoch_seed)
            .iter()
            .enumerate()
        {
            let loss = batch_loss_gradient(&model, set, &batch.indices, &mut grads)?;
            if recent.len() == 8 {
                recent.remove(0);
            }
            recent.push(loss);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {b}; recent batch losses {recent:?}"
                )));
            }
            state.apply(&mut model, &grads, cfg);
        }
        let train_loss = subset_loss(&model, set, &train_idx);
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite training loss after epoch {epoch}; recent batch losses {recent:?}"
            )));
        }
        report.per_epoch_train_loss.push(train_loss);
        if !hold_idx.is_empty() {
            report
                .per_epoch_holdout_loss
                .push(subset_loss(&model, set, &hold_idx));
        }
    }
    report.final_holdout_loss = report.per_epoch_holdout_loss.last().copied();
    Ok((model, report))
}

/// Sampled `sup` and mean of `‖flow(x) - Φ_Δ(x)‖` over uniform points of `domain`.
pub fn holdout_error(
    flow: &dyn DiscreteFlow,
    system: &SystemDef,
    domain: &Domain,
    points: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = rng::stream(seed, 0);
    let xs: Vec<StateVector> = (0..points).map(|_| domain.sample(&mut rng)).collect();
    holdout_error_at(flow, system, &xs)
}

/// As [`holdout_error`] at the given points.
pub fn holdout_error_at(
    flow: &dyn DiscreteFlow,
    system: &SystemDef,
    points: &[StateVector],
) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(Error::Contract("holdout_error needs >= 1 point".into()));
    }
    let cfg = IntegratorConfig::default();
    let mut sup = 0.0f64;
    let mut sum = 0.0;
    for x in points {
        let exact = integrate_flow(system, x, flow.lag(), &cfg)?;
        let err = flow.advance(x)?.distance(&exact);
        sup = sup.max(err);
        sum += err;
    }
    Ok((sup, sum / points.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_pairs, NoiseSpec};
    use crate::dynamics::lookup_system;
    use crate::flowmodels::{ModelKind, OracleFlow};
    use crate::neuralnet::Architecture;

    fn sv(v: &[f64]) -> StateVector {
        v.into()
    }

    #[test]
    fn mse_values() {
        let a = vec![sv(&[1.0, 2.0]), sv(&[3.0, 4.0])];
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(
            mse_loss(&[sv(&[1.0, 0.0])], &[sv(&[0.0, 0.0])]).unwrap(),
            1.0
        );
        let outs = vec![sv(&[1.0, 0.0]), sv(&[1.0, 2f64.sqrt()])];
        let tgts = vec![sv(&[0.0, 0.0]), sv(&[0.0, 0.0])];
        assert!((mse_loss(&outs, &tgts).unwrap() - 2.0).abs() < 1e-15);
        assert!(mse_loss(&[], &[]).is_err());
        assert!(mse_loss(&[sv(&[1.0])], &[sv(&[1.0, 2.0])]).is_err());
    }

    fn small_set(system: &str, j: usize) -> TrainingSet {
        let sys = lookup_system(system).unwrap();
        generate_pairs(
            &sys,
            &sys.default_domain,
            j,
            0.1,
            NoiseSpec::none(),
            &IntegratorConfig::default(),
            5,
        )
        .unwrap()
    }

    #[test]
    fn exact_zero_model_stays_put() {
        let set = small_set("zero2", 40);
        let arch = Architecture::with_hidden(2, &[6, 6]).unwrap();
        let model = FlowModel::zeros(ModelKind::ResNet, 1, 0.1, &arch).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let (trained, report) = train(&model, &set, &cfg).unwrap();
        assert_eq!(report.per_epoch_train_loss, vec![0.0; 3]);
        assert_eq!(trained, model);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let set = small_set("example1", 200);
        let arch = Architecture::with_hidden(2, &[10, 10]).unwrap();
        let model = FlowModel::init(ModelKind::RtResNet, 2, 0.1, &arch, 3, None).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            seed: 9,
            ..Default::default()
        };
        let (a, ra) = train(&model, &set, &cfg).unwrap();
        let (b, rb) = train(&model, &set, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.per_epoch_train_loss.len(), 30);
        assert_eq!(ra.per_epoch_holdout_loss.len(), 30);
        assert!(ra.per_epoch_train_loss[29] < ra.per_epoch_train_loss[0]);
        assert!(ra.final_holdout_loss.is_some());
        let sgd = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e-2,
            ..cfg
        };
        let (_, rs) = train(&model, &set, &sgd).unwrap();
        assert!(rs.per_epoch_train_loss[29] < rs.per_epoch_train_loss[0]);
    }

    #[test]
    fn lag_mismatch_is_rejected() {
        let set = small_set("example1", 20);
        let arch = Architecture::with_hidden(2, &[4]).unwrap();
        let model = FlowModel::zeros(ModelKind::ResNet, 1, 0.2, &arch).unwrap();
        assert!(matches!(
            train(&model, &set, &TrainConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let set = small_set("example2", 50);
        let arch = Architecture::with_hidden(2, &[8]).unwrap();
        let model = FlowModel::init(ModelKind::ResNet, 1, 0.1, &arch, 1, Some(3.0)).unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e6,
            epochs: 50,
            ..Default::default()
        };
        match train(&model, &set, &cfg) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let set = small_set("example1", 2);
        let arch = Architecture::with_hidden(2, &[5, 5]).unwrap();
        for kind in ModelKind::ALL {
            let k = if kind == ModelKind::ResNet { 1 } else { 3 };
            let model = FlowModel::init(kind, k, 0.1, &arch, 17, None).unwrap();
            let pairs = batch_gradient_errors(&model, &set, &[0, 1], 1e-5).unwrap();
            let scale = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
            for (a, fd) in pairs {
                assert!(
                    (a - fd).abs() <= 1e-6 * fd.abs().max(1e-3 * scale),
                    "{kind}: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn holdout_split_partitions() {
        let (train, hold) = holdout_split(25, 0.2, 3);
        assert_eq!((train.len(), hold.len()), (20, 5));
        let mut all: Vec<_> = train.iter().chain(&hold).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
        assert_eq!(holdout_split(10, 0.0, 3).1.len(), 0);
    }

    #[test]
    fn holdout_error_cases() {
        let sys = lookup_system("example1").unwrap();
        let oracle = OracleFlow::new(sys.clone(), 0.1);
        let (sup, _) = holdout_error(&oracle, &sys, &sys.default_domain, 50, 1).unwrap();
        assert!(sup < 1e-8);
        let arch = Architecture::with_hidden(2, &[3]).unwrap();
        let zero = FlowModel::zeros(ModelKind::ResNet, 1, 0.1, &arch).unwrap();
        let (sup, mean) = holdout_error_at(&zero, &sys, &[sv(&[1.0, 1.0])]).unwrap();
        assert_eq!((sup, mean), (0.0, 0.0));
        let (sup, mean) = holdout_error(&zero, &sys, &sys.default_domain, 2000, 1).unwrap();
        assert!(sup > mean && mean > 0.0);
    }
}
