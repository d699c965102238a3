//! Sampled estimates of the Lipschitz constant `L` and of `‖f‖_∞` over a domain.

use serde::{Deserialize, Serialize};

use super::{distance, norm, Domain, SystemDef};
use crate::error::{check_dim, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzMethod {
    JacobianSpectral,
    PairwiseQuotient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub sample_count: usize,
    pub method: LipschitzMethod,
}

const FD_STEP: f64 = 1e-6;
const POWER_ITERATIONS: usize = 50;

/// Largest singular value of a row-major `rows x cols` matrix by power
/// iteration on `MᵀM`.
pub fn spectral_norm(m: &[f64], rows: usize, cols: usize, iterations: usize) -> f64 {
    top_singular_pair(m, rows, cols, iterations).0
}

/// Largest singular value and a unit right singular vector (power iteration on
/// `MᵀM`). The vector is all zeros when `M = 0`.
pub fn top_singular_pair(
    m: &[f64],
    rows: usize,
    cols: usize,
    iterations: usize,
) -> (f64, Vec<f64>) {
    assert_eq!(m.len(), rows * cols, "matrix size");
    if rows == 0 || cols == 0 {
        return (0.0, vec![0.0; cols]);
    }
    // Fixed, non-symmetric start vector.
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 / (1.0 + i as f64).sqrt()).collect();
    let mut mv = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..iterations.max(1) {
        let vn = norm(&v);
        if vn == 0.0 {
            return (0.0, vec![0.0; cols]);
        }
        v.iter_mut().for_each(|x| *x /= vn);
        for (r, out) in mv.iter_mut().enumerate() {
            *out = m[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        sigma = norm(&mv);
        for (c, out) in v.iter_mut().enumerate() {
            *out = (0..rows).map(|r| m[r * cols + c] * mv[r]).sum();
        }
    }
    let vn = norm(&v);
    if vn > 0.0 {
        v.iter_mut().for_each(|x| *x /= vn);
    }
    (sigma, v)
}

/// Finite-difference Jacobian (row-major), central where the stencil stays in
/// the domain and one-sided otherwise.
fn jacobian(system: &SystemDef, domain: &Domain, x: &[f64]) -> Result<Vec<f64>> {
    let n = system.dimension;
    let mut jac = vec![0.0; n * n];
    let mut probe = x.to_vec();
    for c in 0..n {
        let (lo, hi) = (
            (x[c] - FD_STEP).max(domain.lower[c]),
            (x[c] + FD_STEP).min(domain.upper[c]),
        );
        probe[c] = hi;
        let fp = system.rhs_eval(&probe)?;
        probe[c] = lo;
        let fm = system.rhs_eval(&probe)?;
        probe[c] = x[c];
        let width = hi - lo;
        for r in 0..n {
            jac[r * n + c] = (fp[r] - fm[r]) / width;
        }
    }
    Ok(jac)
}

/// Default estimate: maximum Jacobian spectral norm over sampled points.
pub fn estimate_lipschitz(
    system: &SystemDef,
    domain: &Domain,
    samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    estimate_lipschitz_with(
        system,
        domain,
        samples,
        seed,
        LipschitzMethod::JacobianSpectral,
    )
}

/// The returned value is never below the largest difference quotient
/// `‖f(x) - f(x̃)‖ / ‖x - x̃‖` between consecutive samples.
pub fn estimate_lipschitz_with(
    system: &SystemDef,
    domain: &Domain,
    samples: usize,
    seed: u64,
    method: LipschitzMethod,
) -> Result<LipschitzEstimate> {
    domain.validate()?;
    check_dim(system.dimension, domain.dim())?;
    if samples < 2 {
        return Err(Error::Contract(
            "Lipschitz estimation needs >= 2 samples".into(),
        ));
    }
    let mut rng = rng::stream(seed, 0);
    let points: Vec<_> = (0..samples).map(|_| domain.sample(&mut rng)).collect();
    let values = points
        .iter()
        .map(|p| system.rhs_eval(p))
        .collect::<Result<Vec<_>>>()?;

    let mut value = 0.0f64;
    for (w, fw) in points.windows(2).zip(values.windows(2)) {
        let dx = distance(&w[0], &w[1]);
        if dx > 0.0 {
            value = value.max(distance(&fw[0], &fw[1]) / dx);
        }
    }
    if method == LipschitzMethod::JacobianSpectral {
        let n = system.dimension;
        for p in &points {
            let jac = jacobian(system, domain, p)?;
            value = value.max(spectral_norm(&jac, n, n, POWER_ITERATIONS));
        }
    }
    Ok(LipschitzEstimate {
        value,
        sample_count: samples,
        method,
    })
}

/// Sampled `sup ‖f‖` over the domain, including its corners.
pub fn sup_f_norm(system: &SystemDef, domain: &Domain, samples: usize, seed: u64) -> Result<f64> {
    check_dim(system.dimension, domain.dim())?;
    if samples < 1 {
        return Err(Error::Contract("sup_f_norm needs >= 1 sample".into()));
    }
    let mut rng = rng::stream(seed, 0);
    let mut sup = 0.0f64;
    for p in domain
        .corners()
        .into_iter()
        .chain((0..samples).map(|_| domain.sample(&mut rng)))
    {
        sup = sup.max(system.rhs_eval(&p)?.norm());
    }
    Ok(sup)
}
