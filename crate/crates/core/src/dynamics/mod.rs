//! Autonomous ODE systems `dx/dt = f(x)`, reference integration of their flow
//! maps, and estimates of the constants that enter the error bounds.

mod constants;
mod integrator;
mod systems;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub use constants::{
    estimate_lipschitz, estimate_lipschitz_with, spectral_norm, sup_f_norm, top_singular_pair,
    LipschitzEstimate, LipschitzMethod,
};
pub use integrator::{
    effective_increment_oracle, integrate_flow, integrate_flow_tracked, reference_trajectory,
    IntegratorConfig, IntegratorMethod,
};
pub use systems::{builtin_systems, lookup_system, toggle_switch, TOGGLE_DEFAULT_ETA};

/// A point in state space.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn zeros(n: usize) -> Self {
        StateVector(vec![0.0; n])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn distance(&self, other: &[f64]) -> f64 {
        distance(&self.0, other)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for StateVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for StateVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        StateVector(v)
    }
}

impl From<&[f64]> for StateVector {
    fn from(v: &[f64]) -> Self {
        StateVector(v.to_vec())
    }
}

impl<const N: usize> From<[f64; N]> for StateVector {
    fn from(v: [f64; N]) -> Self {
        StateVector(v.to_vec())
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: StateVector,
    pub upper: StateVector,
}

impl Domain {
    pub fn new(lower: impl Into<StateVector>, upper: impl Into<StateVector>) -> Result<Self> {
        let (lower, upper) = (lower.into(), upper.into());
        check_dim(lower.dim(), upper.dim())?;
        if lower.dim() == 0 {
            return Err(Error::Contract("domain has zero dimension".into()));
        }
        for (i, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Contract(format!(
                    "degenerate domain in coordinate {i}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Domain { lower, upper })
    }

    /// Same box in every coordinate.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Domain::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.dim()
    }

    /// Re-check the invariants, for values that bypassed [`Domain::new`].
    pub fn validate(&self) -> Result<()> {
        Domain::new(self.lower.clone(), self.upper.clone()).map(|_| ())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVector {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect::<Vec<_>>()
            .into()
    }

    /// All `2^n` vertices of the box.
    pub fn corners(&self) -> Vec<StateVector> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            self.upper[i]
                        } else {
                            self.lower[i]
                        }
                    })
                    .collect::<Vec<_>>()
                    .into()
            })
            .collect()
    }

    /// Largest side length.
    pub fn scale(&self) -> f64 {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .map(|(lo, hi)| hi - lo)
            .fold(0.0, f64::max)
    }
}

/// Right-hand side `f`, writing `f(x)` into the output slice.
pub type RhsFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Closed-form flow map `(x0, t) -> x(t)`.
pub type AnalyticFlowFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;

/// An autonomous system together with its default computational domain.
#[derive(Clone)]
pub struct SystemDef {
    pub name: String,
    pub dimension: usize,
    pub rhs: RhsFn,
    pub analytic_flow: Option<AnalyticFlowFn>,
    pub default_domain: Domain,
    pub parameters: BTreeMap<String, f64>,
}

impl fmt::Debug for SystemDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemDef")
            .field("name", &self.name)
            .field("dimension", &self.dimension)
            .field("analytic_flow", &self.analytic_flow.is_some())
            .field("default_domain", &self.default_domain)
            .field("parameters", &self.parameters)
            .finish()
    }
}

impl SystemDef {
    pub fn new(
        name: impl Into<String>,
        dimension: usize,
        default_domain: Domain,
        rhs: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Contract("system dimension must be positive".into()));
        }
        check_dim(dimension, default_domain.dim())?;
        Ok(SystemDef {
            name: name.into(),
            dimension,
            rhs: Arc::new(rhs),
            analytic_flow: None,
            default_domain,
            parameters: BTreeMap::new(),
        })
    }

    pub fn with_analytic_flow(
        mut self,
        flow: impl Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.analytic_flow = Some(Arc::new(flow));
        self
    }

    pub fn with_parameter(mut self, name: &str, value: f64) -> Self {
        self.parameters.insert(name.to_string(), value);
        self
    }

    pub fn parameter(&self, name: &str) -> Option<f64> {
        self.parameters.get(name).copied()
    }

    /// `f ≡ 0` in `n` dimensions, on `[-1, 1]^n`.
    pub fn zero(n: usize) -> Self {
        SystemDef::new("zero", n, Domain::cube(n, -1.0, 1.0).unwrap(), |_, out| {
            out.fill(0.0)
        })
        .unwrap()
        .with_analytic_flow(|x, _| x.to_vec())
    }

    /// Evaluate `f(x)` with dimension and finiteness checks.
    pub fn rhs_eval(&self, x: &[f64]) -> Result<StateVector> {
        check_dim(self.dimension, x.len())?;
        let mut out = vec![0.0; self.dimension];
        (self.rhs)(x, &mut out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out.into())
        } else {
            Err(Error::Domain(format!(
                "{}: f({:?}) is not finite ({:?})",
                self.name, x, out
            )))
        }
    }
}

/// Free-function form of [`SystemDef::rhs_eval`].
pub fn rhs_eval(system: &SystemDef, x: &[f64]) -> Result<StateVector> {
    system.rhs_eval(x)
}
