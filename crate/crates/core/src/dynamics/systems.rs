//! Benchmark systems.

use std::f64::consts::PI;

use super::{Domain, SystemDef};
use crate::error::{Error, Result};

/// Exponent applied to the IPTG induction factor in the toggle switch.
/// Not fixed by the model equations; this is the value from the original
/// toggle-switch construction.
pub const TOGGLE_DEFAULT_ETA: f64 = 2.0015;

/// `x1' = x1 + x2 - 2`, `x2' = x1 - x2` on `[0, 2]^2`.
fn example1() -> SystemDef {
    let domain = Domain::cube(2, 0.0, 2.0).unwrap();
    SystemDef::new("example1", 2, domain, |x, out| {
        out[0] = x[0] + x[1] - 2.0;
        out[1] = x[0] - x[1];
    })
    .unwrap()
    .with_analytic_flow(|x0, t| {
        // x(t) = x* + e^{At}(x0 - x*), x* = (1, 1). A is symmetric with
        // A^2 = 2I, so e^{At} = cosh(rt) I + sinh(rt)/r A with r = sqrt(2).
        let r = 2f64.sqrt();
        let (c, s) = ((r * t).cosh(), (r * t).sinh() / r);
        let (d0, d1) = (x0[0] - 1.0, x0[1] - 1.0);
        vec![1.0 + c * d0 + s * (d0 + d1), 1.0 + c * d1 + s * (d0 - d1)]
    })
}

/// `x1' = x1 - 4 x2`, `x2' = 4 x1 - 7 x2` on `[-2, 2]^2`.
fn example2() -> SystemDef {
    let domain = Domain::cube(2, -2.0, 2.0).unwrap();
    SystemDef::new("example2", 2, domain, |x, out| {
        out[0] = x[0] - 4.0 * x[1];
        out[1] = 4.0 * x[0] - 7.0 * x[1];
    })
    .unwrap()
    .with_analytic_flow(|x0, t| {
        // Double eigenvalue -3 with nilpotent part A + 3I = [[4, -4], [4, -4]].
        let e = (-3.0 * t).exp();
        let w = 4.0 * t * (x0[0] - x0[1]);
        vec![e * (x0[0] + w), e * (x0[1] + w)]
    })
}

fn pendulum() -> SystemDef {
    let (alpha, beta) = (8.91, 0.2);
    let domain = Domain::new(vec![-PI, -2.0 * PI], vec![PI, 2.0 * PI]).unwrap();
    SystemDef::new("pendulum", 2, domain, move |x, out| {
        out[0] = x[1];
        out[1] = -alpha * x[1] - beta * x[0].sin();
    })
    .unwrap()
    .with_parameter("alpha", alpha)
    .with_parameter("beta", beta)
}

/// Genetic toggle switch with the algebraic variable
/// `z = x1 / (1 + [IPTG]/K)^eta` substituted into the second equation.
pub fn toggle_switch(eta: f64) -> SystemDef {
    let (alpha1, alpha2, beta, gamma, k, iptg): (f64, f64, f64, f64, f64, f64) =
        (156.25, 15.6, 2.5, 1.0, 2.9618e-5, 1e-5);
    let induction = (1.0 + iptg / k).powf(eta);
    let domain = Domain::cube(2, 0.0, 20.0).unwrap();
    SystemDef::new("toggle", 2, domain, move |x, out| {
        let z = x[0] / induction;
        out[0] = alpha1 / (1.0 + x[1].powf(beta)) - x[0];
        out[1] = alpha2 / (1.0 + z.powf(gamma)) - x[1];
    })
    .unwrap()
    .with_parameter("alpha1", alpha1)
    .with_parameter("alpha2", alpha2)
    .with_parameter("beta", beta)
    .with_parameter("gamma", gamma)
    .with_parameter("K", k)
    .with_parameter("iptg", iptg)
    .with_parameter("eta", eta)
}

/// Scalar decay `x' = -x` on `[-1, 1]`.
fn exponential() -> SystemDef {
    SystemDef::new(
        "exponential",
        1,
        Domain::cube(1, -1.0, 1.0).unwrap(),
        |x, out| out[0] = -x[0],
    )
    .unwrap()
    .with_analytic_flow(|x0, t| vec![x0[0] * (-t).exp()])
}

pub fn builtin_systems() -> Vec<SystemDef> {
    vec![
        example1(),
        example2(),
        pendulum(),
        toggle_switch(TOGGLE_DEFAULT_ETA),
        exponential(),
    ]
}

/// Find a builtin system by name. `zero<n>` (e.g. `zero2`) yields `f ≡ 0`.
pub fn lookup_system(name: &str) -> Result<SystemDef> {
    if let Some(n) = name.strip_prefix("zero") {
        let n = if n.is_empty() {
            Ok(2)
        } else {
            n.parse::<usize>()
        };
        if let Ok(n @ 1..) = n {
            return Ok(SystemDef::zero(n));
        }
    }
    builtin_systems()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            let known: Vec<_> = builtin_systems().into_iter().map(|s| s.name).collect();
            Error::Validation(format!(
                "unknown system '{name}' (known: {})",
                known.join(", ")
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn rhs_values() {
        let ex1 = lookup_system("example1").unwrap();
        assert_eq!(ex1.rhs_eval(&[1.0, 1.0]).unwrap().0, vec![0.0, 0.0]);
        assert_eq!(ex1.rhs_eval(&[1.5, 0.0]).unwrap().0, vec![-0.5, 1.5]);
        let ex2 = lookup_system("example2").unwrap();
        assert_eq!(ex2.rhs_eval(&[1.0, 1.0]).unwrap().0, vec![-3.0, -3.0]);
        let p = lookup_system("pendulum").unwrap();
        assert_eq!(p.rhs_eval(&[0.0, 0.0]).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn parameters_are_recorded() {
        let p = lookup_system("pendulum").unwrap();
        assert_eq!(p.parameter("alpha"), Some(8.91));
        assert_eq!(p.parameter("beta"), Some(0.2));
        let t = lookup_system("toggle").unwrap();
        assert_eq!(t.parameter("K"), Some(2.9618e-5));
        assert_eq!(t.parameter("eta"), Some(TOGGLE_DEFAULT_ETA));
        assert_eq!(t.default_domain, Domain::cube(2, 0.0, 20.0).unwrap());
    }

    #[test]
    fn analytic_flows_present_for_linear_systems() {
        for s in builtin_systems() {
            let expect = matches!(s.name.as_str(), "example1" | "example2" | "exponential");
            assert_eq!(s.analytic_flow.is_some(), expect, "{}", s.name);
        }
    }

    #[test]
    fn analytic_flow_is_identity_at_zero_and_matches_rhs() {
        // d/dt flow(x, t) at t=0 equals f(x): central difference check.
        for s in builtin_systems()
            .into_iter()
            .filter(|s| s.analytic_flow.is_some())
        {
            let flow = s.analytic_flow.clone().unwrap();
            let x: Vec<f64> = (0..s.dimension).map(|i| 0.3 + 0.2 * i as f64).collect();
            assert_close(&flow(&x, 0.0), &x, 1e-15);
            let h = 1e-6;
            let (p, m) = (flow(&x, h), flow(&x, -h));
            let fd: Vec<f64> = p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            assert_close(&fd, &s.rhs_eval(&x).unwrap(), 1e-7);
        }
    }

    #[test]
    fn example2_analytic_value() {
        let ex2 = lookup_system("example2").unwrap();
        let y = (ex2.analytic_flow.unwrap())(&[0.0, -1.0], 0.1);
        assert_close(&y, &[0.296327, -0.444491], 5e-7);
    }

    #[test]
    fn toggle_negative_concentration_is_domain_error() {
        let t = lookup_system("toggle").unwrap();
        assert!(matches!(t.rhs_eval(&[1.0, -0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn unknown_system_is_validation_error() {
        assert!(matches!(lookup_system("lorenz"), Err(Error::Validation(_))));
        assert_eq!(lookup_system("zero3").unwrap().dimension, 3);
    }
}
