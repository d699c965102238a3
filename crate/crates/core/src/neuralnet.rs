//! Fully connected feedforward networks with tanh hidden layers and a linear
//! output layer, written out by hand: forward pass, reverse-mode gradients,
//! and a finite-difference check of those gradients.
//!
//! Each layer matrix has shape `n_{j+1} x (n_j + 1)`; the last column holds
//! the bias and multiplies a constant 1 appended to the layer input.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::StateVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub hidden: HiddenActivation,
    pub output: OutputActivation,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        ActivationSpec {
            hidden: HiddenActivation::Tanh,
            output: OutputActivation::Identity,
        }
    }
}

/// Layer widths `[n_1, ..., n_M]`, input and output width equal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Architecture {
    layer_sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::Contract(format!(
                "architecture needs at least one hidden layer, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Contract(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        if layer_sizes[0] != layer_sizes[layer_sizes.len() - 1] {
            return Err(Error::Contract(format!(
                "input and output widths differ in {layer_sizes:?}"
            )));
        }
        Ok(Architecture { layer_sizes })
    }

    /// `[n, hidden..., n]`.
    pub fn with_hidden(state_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(state_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(state_dim);
        Architecture::new(sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn state_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn hidden(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

impl TryFrom<Vec<usize>> for Architecture {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Architecture::new(v)
    }
}

impl From<Architecture> for Vec<usize> {
    fn from(a: Architecture) -> Self {
        a.layer_sizes
    }
}

/// Dense row-major matrix. Serialized as a list of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..self.rows).map(|r| self.row(r)).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }
}

/// Network parameters `Θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnnParams {
    pub architecture: Architecture,
    pub activations: ActivationSpec,
    pub layers: Vec<Matrix>,
    /// Initialization scale; `None` means `1/sqrt(fan_in)` per layer.
    pub weight_std: Option<f64>,
    pub seed: Option<u64>,
}

/// Parameter gradient, one matrix per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Matrix>,
}

impl Gradient {
    pub fn zeros_like(params: &FnnParams) -> Self {
        Gradient {
            layers: params
                .layers
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.layers {
            m.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn fill_zero(&mut self) {
        for m in &mut self.layers {
            m.data.fill(0.0);
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|m| m.data.iter().copied())
    }
}

/// Layer outputs from a forward pass; `activations[0]` is the input and the
/// last entry is the network output.
#[derive(Clone, Debug)]
pub struct FnnCache {
    pub activations: Vec<Vec<f64>>,
}

impl FnnCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty cache")
    }
}

/// Gaussian weights, zero biases. Deterministic in `seed`.
pub fn init_params(arch: &Architecture, seed: u64, weight_std: Option<f64>) -> FnnParams {
    let mut rng = rng::stream(seed, 0);
    let layers = arch
        .layer_sizes()
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = weight_std.unwrap_or(1.0 / (fan_in as f64).sqrt());
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut m = Matrix::zeros(fan_out, fan_in + 1);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    m.set(r, c, normal.sample(&mut rng));
                }
            }
            m
        })
        .collect();
    FnnParams {
        architecture: arch.clone(),
        activations: ActivationSpec::default(),
        layers,
        weight_std,
        seed: Some(seed),
    }
}

impl FnnParams {
    /// All weights and biases zero: `N ≡ 0`.
    pub fn zeros(arch: &Architecture) -> Self {
        FnnParams {
            architecture: arch.clone(),
            activations: ActivationSpec::default(),
            layers: arch
                .layer_sizes()
                .windows(2)
                .map(|w| Matrix::zeros(w[1], w[0] + 1))
                .collect(),
            weight_std: None,
            seed: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.architecture.state_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|m| m.data.len()).sum()
    }

    /// Shape chain and finiteness.
    pub fn validate(&self) -> Result<()> {
        let sizes = self.architecture.layer_sizes();
        if self.layers.len() != sizes.len() - 1 {
            return Err(Error::Validation(format!(
                "expected {} layers, found {}",
                sizes.len() - 1,
                self.layers.len()
            )));
        }
        for (j, (m, w)) in self.layers.iter().zip(sizes.windows(2)).enumerate() {
            if m.shape() != (w[1], w[0] + 1) {
                return Err(Error::Validation(format!(
                    "layer {j} has shape {:?}, expected {:?}",
                    m.shape(),
                    (w[1], w[0] + 1)
                )));
            }
            if !m.data.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!(
                    "layer {j} has non-finite weights"
                )));
            }
        }
        Ok(())
    }

    /// `N(x; Θ)` with the cache needed by [`FnnParams::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<(StateVector, FnnCache)> {
        check_dim(self.state_dim(), x.len())?;
        let cache = self.forward_cache(x);
        Ok((cache.output().into(), cache))
    }

    pub(crate) fn forward_cache(&self, x: &[f64]) -> FnnCache {
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (j, w) in self.layers.iter().enumerate() {
            let input = &activations[j];
            let bias_col = w.cols - 1;
            let out: Vec<f64> = (0..w.rows)
                .map(|r| {
                    let row = w.row(r);
                    let z = row[..bias_col]
                        .iter()
                        .zip(input)
                        .fold(row[bias_col], |acc, (a, b)| acc + a * b);
                    if j == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            activations.push(out);
        }
        FnnCache { activations }
    }

    /// Gradient of `upstreamᵀ N(x)` with respect to `Θ` and `x`.
    pub fn backward(&self, cache: &FnnCache, upstream: &[f64]) -> Result<(Gradient, StateVector)> {
        let mut grad = Gradient::zeros_like(self);
        let input_grad = self.backward_accumulate(cache, upstream, &mut grad)?;
        Ok((grad, input_grad.into()))
    }

    /// As [`FnnParams::backward`], adding the parameter gradient into `grad`.
    pub fn backward_accumulate(
        &self,
        cache: &FnnCache,
        upstream: &[f64],
        grad: &mut Gradient,
    ) -> Result<Vec<f64>> {
        if cache.activations.len() != self.layers.len() + 1
            || cache
                .activations
                .iter()
                .zip(self.architecture.layer_sizes())
                .any(|(a, &n)| a.len() != n)
        {
            return Err(Error::Contract("cache does not match network shape".into()));
        }
        check_dim(self.state_dim(), upstream.len())?;
        if grad.layers.len() != self.layers.len()
            || grad
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, w)| g.shape() != w.shape())
        {
            return Err(Error::Contract(
                "gradient does not match network shape".into(),
            ));
        }

        let last = self.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for j in (0..self.layers.len()).rev() {
            let w = &self.layers[j];
            let output = &cache.activations[j + 1];
            if j != last {
                // tanh' = 1 - tanh^2
                delta
                    .iter_mut()
                    .zip(output)
                    .for_each(|(d, a)| *d *= 1.0 - a * a);
            }
            let input = &cache.activations[j];
            let g = &mut grad.layers[j];
            let bias_col = w.cols - 1;
            for (r, d) in delta.iter().enumerate() {
                let row = &mut g.data[r * w.cols..(r + 1) * w.cols];
                row[..bias_col]
                    .iter_mut()
                    .zip(input)
                    .for_each(|(gv, a)| *gv += d * a);
                row[bias_col] += d;
            }
            let mut prev = vec![0.0; bias_col];
            for (r, d) in delta.iter().enumerate() {
                prev.iter_mut()
                    .zip(&w.row(r)[..bias_col])
                    .for_each(|(p, wv)| *p += wv * d);
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Visit every scalar parameter mutably, in layer then row-major order.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|m| m.data.iter_mut())
    }
}

pub fn fnn_forward(params: &FnnParams, x: &[f64]) -> Result<(StateVector, FnnCache)> {
    params.forward(x)
}

pub fn fnn_backward(
    params: &FnnParams,
    cache: &FnnCache,
    upstream: &[f64],
) -> Result<(Gradient, StateVector)> {
    params.backward(cache, upstream)
}

/// Central-difference check of the parameter gradient of `sum(N(x; Θ))`.
/// Returns the largest `|analytic - fd| / max(1e-12, |fd|)`.
pub fn gradient_check(params: &FnnParams, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Contract(
            "finite-difference step must be positive".into(),
        ));
    }
    let ones = vec![1.0; params.state_dim()];
    let (_, cache) = params.forward(x)?;
    let (grad, _) = params.backward(&cache, &ones)?;
    let scalar = |p: &FnnParams| -> f64 { p.forward_cache(x).output().iter().sum() };

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let analytic: Vec<f64> = grad.values().collect();
    for (i, a) in analytic.iter().enumerate() {
        let orig = *probe.values_mut().nth(i).unwrap();
        *probe.values_mut().nth(i).unwrap() = orig + h;
        let plus = scalar(&probe);
        *probe.values_mut().nth(i).unwrap() = orig - h;
        let minus = scalar(&probe);
        *probe.values_mut().nth(i).unwrap() = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((a - fd).abs() / fd.abs().max(1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_net(w1: f64, w2: f64) -> FnnParams {
        let arch = Architecture::new(vec![1, 1, 1]).unwrap();
        let mut p = FnnParams::zeros(&arch);
        p.layers[0].set(0, 0, w1);
        p.layers[1].set(0, 0, w2);
        p
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let arch = Architecture::with_hidden(2, &[30, 30, 30]).unwrap();
        let p = init_params(&arch, 11, None);
        let shapes: Vec<_> = p.layers.iter().map(Matrix::shape).collect();
        assert_eq!(shapes, vec![(30, 3), (30, 31), (30, 31), (2, 31)]);
        for m in &p.layers {
            for r in 0..m.rows {
                assert_eq!(m.get(r, m.cols - 1), 0.0);
            }
        }
        assert_eq!(p, init_params(&arch, 11, None));
        assert_ne!(p, init_params(&arch, 12, None));
        p.validate().unwrap();
    }

    #[test]
    fn init_scale_follows_fan_in() {
        let arch = Architecture::with_hidden(2, &[40, 40]).unwrap();
        // Pool layer-wise standardized weights over several seeds.
        for layer in 0..3 {
            let mut draws = Vec::new();
            for seed in 0..40 {
                let p = init_params(&arch, seed, None);
                let m = &p.layers[layer];
                for r in 0..m.rows {
                    draws.extend_from_slice(&m.row(r)[..m.cols - 1]);
                }
            }
            let fan_in = arch.layer_sizes()[layer] as f64;
            let std = (draws.iter().map(|v| v * v).sum::<f64>() / draws.len() as f64).sqrt();
            let target = 1.0 / fan_in.sqrt();
            assert!(
                (std / target - 1.0).abs() < 0.1,
                "layer {layer}: {std} vs {target}"
            );
        }
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(vec![2, 2]).is_err());
        assert!(Architecture::new(vec![2, 0, 2]).is_err());
        assert!(Architecture::new(vec![2, 5, 3]).is_err());
        assert_eq!(
            Architecture::with_hidden(2, &[30, 30, 30])
                .unwrap()
                .num_params(),
            30 * 3 + 30 * 31 * 2 + 2 * 31
        );
    }

    #[test]
    fn zero_params_give_zero_output_and_gradient() {
        let arch = Architecture::with_hidden(2, &[5, 5]).unwrap();
        let p = FnnParams::zeros(&arch);
        let (y, cache) = p.forward(&[0.3, -1.2]).unwrap();
        assert_eq!(y.0, vec![0.0, 0.0]);
        let (_, dx) = p.backward(&cache, &[1.0, -2.0]).unwrap();
        assert_eq!(dx.0, vec![0.0, 0.0]);
        assert!(gradient_check(&p, &[0.3, -1.2], 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn hand_evaluations() {
        let (y, cache) = hand_net(1.0, 1.0).forward(&[0.5]).unwrap();
        assert!((y[0] - 0.462117157).abs() < 1e-9);
        let (_, dx) = hand_net(1.0, 1.0).backward(&cache, &[1.0]).unwrap();
        assert!((dx[0] - 0.786448).abs() < 1e-6);
        let (y, _) = hand_net(1.0, 3.0).forward(&[0.5]).unwrap();
        assert!((y[0] - 1.386351472).abs() < 1e-9);
        assert!(gradient_check(&hand_net(1.0, 1.0), &[0.5], 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = FnnParams::zeros(&Architecture::with_hidden(2, &[3]).unwrap());
        assert!(p.forward(&[1.0]).is_err());
        let (_, cache) = p.forward(&[1.0, 2.0]).unwrap();
        assert!(p.backward(&cache, &[1.0]).is_err());
        let other = FnnParams::zeros(&Architecture::with_hidden(2, &[4]).unwrap());
        assert!(other.backward(&cache, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let p = init_params(
            &Architecture::with_hidden(2, &[4, 3]).unwrap(),
            5,
            Some(0.3),
        );
        let s = serde_json::to_string(&p).unwrap();
        let q: FnnParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        let mut bad = q.clone();
        bad.layers[1] = Matrix::zeros(3, 4);
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<Architecture>("[2, 3]").is_err());
    }
}
