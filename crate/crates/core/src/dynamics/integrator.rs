//! Reference integration of the flow map `Φ_t`.

use serde::{Deserialize, Serialize};

use super::{Domain, StateVector, SystemDef};
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorMethod {
    /// Classical fixed-step fourth-order Runge-Kutta.
    Rk4,
    /// Adaptive Dormand-Prince 5(4).
    Rk45,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: IntegratorMethod,
    /// RK4 steps per `nominal_lag` of elapsed time.
    pub substeps_per_lag: u32,
    pub nominal_lag: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: IntegratorMethod::Rk4,
            substeps_per_lag: 100,
            nominal_lag: 0.1,
            abs_tol: 1e-10,
            rel_tol: 1e-10,
        }
    }
}

impl IntegratorConfig {
    pub fn adaptive() -> Self {
        IntegratorConfig {
            method: IntegratorMethod::Rk45,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps_per_lag == 0 {
            return Err(Error::Contract("substeps_per_lag must be >= 1".into()));
        }
        if !(self.nominal_lag > 0.0 && self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::Contract(
                "integrator lag and tolerances must be positive".into(),
            ));
        }
        Ok(())
    }

    fn rk4_steps(&self, t: f64) -> usize {
        let exact = t / self.nominal_lag * self.substeps_per_lag as f64;
        ((exact - 1e-9).ceil() as usize).max(1)
    }
}

/// Numerical `Φ_t(x0)`. `t = 0` returns `x0` unchanged.
pub fn integrate_flow(
    system: &SystemDef,
    x0: &[f64],
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<StateVector> {
    integrate_with(system, x0, t, cfg, |_| {})
}

/// Like [`integrate_flow`], also reporting whether every intermediate state
/// stayed inside `domain`.
pub fn integrate_flow_tracked(
    system: &SystemDef,
    x0: &[f64],
    t: f64,
    cfg: &IntegratorConfig,
    domain: &Domain,
) -> Result<(StateVector, bool)> {
    let mut inside = true;
    let end = integrate_with(system, x0, t, cfg, |x| inside &= domain.contains(x))?;
    Ok((end, inside))
}

/// `φ_Δ(x) = Φ_Δ(x) - x`.
pub fn effective_increment_oracle(
    system: &SystemDef,
    x: &[f64],
    delta: f64,
    cfg: &IntegratorConfig,
) -> Result<StateVector> {
    if !(delta > 0.0) {
        return Err(Error::Contract(format!(
            "lag must be positive, got {delta}"
        )));
    }
    let mut y = integrate_flow(system, x, delta, cfg)?;
    y.iter_mut().zip(x).for_each(|(a, b)| *a -= b);
    Ok(y)
}

/// Reference states at `t = 0, step, 2 step, ...`, each obtained from the
/// previous one by integrating over `step`.
pub fn reference_trajectory(
    system: &SystemDef,
    x0: &[f64],
    step: f64,
    steps: usize,
    cfg: &IntegratorConfig,
) -> Result<Vec<StateVector>> {
    let mut states = Vec::with_capacity(steps + 1);
    states.push(StateVector::from(x0));
    for i in 0..steps {
        let next = integrate_flow(system, &states[i], step, cfg)?;
        states.push(next);
    }
    Ok(states)
}

fn integrate_with(
    system: &SystemDef,
    x0: &[f64],
    t: f64,
    cfg: &IntegratorConfig,
    mut observe: impl FnMut(&[f64]),
) -> Result<StateVector> {
    check_dim(system.dimension, x0.len())?;
    cfg.validate()?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Contract(format!(
            "integration time must be finite and >= 0, got {t}"
        )));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Contract(format!("non-finite initial state {x0:?}")));
    }
    observe(x0);
    if t == 0.0 {
        return Ok(x0.into());
    }
    match cfg.method {
        IntegratorMethod::Rk4 => rk4(system, x0, t, cfg.rk4_steps(t), &mut observe),
        IntegratorMethod::Rk45 => dopri5(system, x0, t, cfg, &mut observe),
    }
}

fn non_finite(system: &SystemDef, time: f64) -> Error {
    Error::Integration {
        time,
        reason: format!("{}: state became non-finite", system.name),
    }
}

fn rk4(
    system: &SystemDef,
    x0: &[f64],
    t: f64,
    steps: usize,
    observe: &mut impl FnMut(&[f64]),
) -> Result<StateVector> {
    let n = x0.len();
    let f = &system.rhs;
    let h = t / steps as f64;
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    );
    for step in 0..steps {
        f(&x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        f(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        f(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        f(&tmp, &mut k4);
        for i in 0..n {
            tmp[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !tmp.iter().all(|v| v.is_finite()) {
            return Err(non_finite(system, step as f64 * h));
        }
        std::mem::swap(&mut x, &mut tmp);
        observe(&x);
    }
    Ok(x.into())
}

// Dormand-Prince tableau. Nodes are not needed for autonomous systems.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn dopri5(
    system: &SystemDef,
    x0: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
    observe: &mut impl FnMut(&[f64]),
) -> Result<StateVector> {
    const MAX_STEPS: usize = 10_000_000;
    let n = x0.len();
    let f = &system.rhs;
    let mut x = x0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut x5 = vec![0.0; n];
    let mut t = 0.0;
    let mut h = (t_end / 100.0).min(1e-3);
    let h_min = 1e-14 * t_end.max(1.0);

    for _ in 0..MAX_STEPS {
        if t >= t_end {
            return Ok(x.into());
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        f(&x, &mut k[0]);
        #[allow(clippy::needless_range_loop)]
        for s in 1..7 {
            let (done, rest) = k.split_at_mut(s);
            for i in 0..n {
                stage[i] = x[i] + h * done.iter().zip(&A[s]).map(|(kj, a)| a * kj[i]).sum::<f64>();
            }
            f(&stage, &mut rest[0]);
        }
        let mut err = 0.0;
        for i in 0..n {
            let mut y5 = x[i];
            let mut y4 = x[i];
            for s in 0..7 {
                y5 += h * B5[s] * k[s][i];
                y4 += h * B4[s] * k[s][i];
            }
            x5[i] = y5;
            let sc = cfg.abs_tol + cfg.rel_tol * x[i].abs().max(y5.abs());
            err += ((y5 - y4) / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() {
            if h <= h_min {
                return Err(non_finite(system, t));
            }
            h *= 0.25;
            continue;
        }
        if err <= 1.0 {
            t = if last { t_end } else { t + h };
            std::mem::swap(&mut x, &mut x5);
            observe(&x);
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if h < h_min && t < t_end {
            return Err(Error::Integration {
                time: t,
                reason: format!("{}: step size underflow (h = {h:e})", system.name),
            });
        }
    }
    Err(Error::Integration {
        time: t,
        reason: format!("{}: exceeded {MAX_STEPS} steps", system.name),
    })
}
