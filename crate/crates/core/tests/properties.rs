use proptest::prelude::*;

use resflow::dataio::{batches, generate_pairs, NoiseSpec};
use resflow::dynamics::{
    estimate_lipschitz_with, integrate_flow, lookup_system, toggle_switch, LipschitzMethod,
};
use resflow::flowmodels::rollout_flow;
use resflow::neuralnet::init_params;
use resflow::*;

fn model(kind: ModelKind, k: usize, hidden: &[usize], seed: u64, std: f64) -> FlowModel {
    let arch = Architecture::with_hidden(2, hidden).unwrap();
    FlowModel::init(kind, k, 0.1, &arch, seed, Some(std)).unwrap()
}

fn kind_and_k() -> impl Strategy<Value = (ModelKind, usize)> {
    prop_oneof![
        Just((ModelKind::ResNet, 1)),
        (1usize..=3).prop_map(|k| (ModelKind::RtResNet, k)),
        (1usize..=3).prop_map(|k| (ModelKind::RsResNet, k)),
    ]
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, 2)
}

/// `s(Θ) = u · model(x)` by central differences over every stored parameter.
fn fd_gradient(m: &FlowModel, x: &[f64], u: &[f64], h: f64) -> Vec<f64> {
    let scalar = |m: &FlowModel| -> f64 {
        let (y, _) = m.forward(x).unwrap();
        y.iter().zip(u).map(|(a, b)| a * b).sum()
    };
    let mut probe = m.clone();
    let mut out = Vec::new();
    for b in 0..m.blocks.len() {
        for i in 0..m.blocks[b].num_params() {
            let orig = *probe.blocks[b].values_mut().nth(i).unwrap();
            *probe.blocks[b].values_mut().nth(i).unwrap() = orig + h;
            let plus = scalar(&probe);
            *probe.blocks[b].values_mut().nth(i).unwrap() = orig - h;
            let minus = scalar(&probe);
            *probe.blocks[b].values_mut().nth(i).unwrap() = orig;
            out.push((plus - minus) / (2.0 * h));
        }
    }
    out
}

fn assert_grad_close(analytic: &[f64], fd: &[f64]) {
    assert_eq!(analytic.len(), fd.len());
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, f) in analytic.iter().zip(fd) {
        let tol = 1e-6 * f.abs().max(1e-3 * scale) + 1e-13;
        assert!(
            (a - f).abs() <= tol,
            "analytic {a} vs fd {f} (scale {scale})"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_matches_finite_differences(
        (kind, k) in kind_and_k(),
        width in 2usize..7,
        depth in 1usize..4,
        seed in any::<u64>(),
        std in 0.2f64..1.2,
        x in point(),
        u in point(),
    ) {
        let m = model(kind, k, &vec![width; depth], seed, std);
        let (_, cache) = m.forward(&x).unwrap();
        let g = m.backward(&cache, &u).unwrap();
        let analytic: Vec<f64> = g.blocks.iter().flat_map(|b| b.values()).collect();
        assert_grad_close(&analytic, &fd_gradient(&m, &x, &u, 1e-5));

        // Input gradient.
        let h = 1e-5;
        for c in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let s = |p: &[f64]| -> f64 {
                m.forward(p).unwrap().0.iter().zip(&u).map(|(a, b)| a * b).sum()
            };
            let fd = (s(&xp) - s(&xm)) / (2.0 * h);
            prop_assert!((g.input[c] - fd).abs() <= 1e-6 * fd.abs().max(1e-3) + 1e-12);
        }
    }

    #[test]
    fn increments_telescope(
        (kind, k) in kind_and_k(),
        seed in any::<u64>(),
        x in point(),
    ) {
        let m = model(kind, k, &[5, 5], seed, 0.7);
        let (y, _) = m.forward(&x).unwrap();
        let incs = m.block_increments(&x).unwrap();
        prop_assert_eq!(incs.len(), k);
        let mut acc = x.clone();
        for d in &incs {
            for (a, b) in acc.iter_mut().zip(d.iter()) {
                *a += b;
            }
        }
        prop_assert_eq!(acc, y.into_inner());
    }

    #[test]
    fn single_block_models_coincide(seed in any::<u64>(), x in point()) {
        let arch = Architecture::with_hidden(2, &[6, 6]).unwrap();
        let block = init_params(&arch, seed, Some(0.8));
        let outputs: Vec<Vec<f64>> = ModelKind::ALL
            .iter()
            .map(|&kind| {
                let m = FlowModel::new(kind, 1, 0.1, vec![block.clone()]).unwrap();
                m.forward(&x).unwrap().0.into_inner()
            })
            .collect();
        prop_assert_eq!(&outputs[0], &outputs[1]);
        prop_assert_eq!(&outputs[0], &outputs[2]);
    }

    #[test]
    fn shared_gradient_is_sum_of_unshared(k in 1usize..=4, seed in any::<u64>(), x in point(), u in point()) {
        let arch = Architecture::with_hidden(2, &[5, 5]).unwrap();
        let block = init_params(&arch, seed, Some(0.9));
        let rt = FlowModel::new(ModelKind::RtResNet, k, 0.1, vec![block.clone()]).unwrap();
        let rs = FlowModel::new(ModelKind::RsResNet, k, 0.1, vec![block; k]).unwrap();
        let (y_rt, c_rt) = rt.forward(&x).unwrap();
        let (y_rs, c_rs) = rs.forward(&x).unwrap();
        prop_assert_eq!(&y_rt, &y_rs);
        let g_rt = rt.backward(&c_rt, &u).unwrap();
        let g_rs = rs.backward(&c_rs, &u).unwrap();
        let mut sum = Gradient::zeros_like(&rs.blocks[0]);
        for g in &g_rs.blocks {
            sum.add_assign(g);
        }
        for (a, b) in g_rt.blocks[0].values().zip(sum.values()) {
            prop_assert!((a - b).abs() <= 1e-13 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
        prop_assert_eq!(g_rt.input, g_rs.input);
    }

    #[test]
    fn fine_rollout_contains_coarse(k in 1usize..=4, seed in any::<u64>(), x in point(), steps in 0usize..8) {
        let m = model(ModelKind::RtResNet, k, &[4, 4], seed, 0.5);
        let coarse = m.rollout(&x, steps, false).unwrap();
        let fine = m.rollout(&x, steps * k, true).unwrap();
        prop_assert_eq!(fine.states.len(), steps * k + 1);
        for (i, s) in coarse.states.iter().enumerate() {
            prop_assert_eq!(s, &fine.states[i * k]);
        }
        prop_assert!((fine.step - 0.1 / k as f64).abs() < 1e-15);
    }

    #[test]
    fn rollout_is_iterated_forward(seed in any::<u64>(), x in point(), steps in 0usize..6) {
        let m = model(ModelKind::RsResNet, 2, &[4], seed, 0.5);
        let traj = rollout_flow(&m, &x, steps).unwrap();
        let mut s = StateVector::from(x.as_slice());
        for state in &traj.states {
            prop_assert_eq!(state, &s);
            s = m.forward(&s).unwrap().0;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flow_semigroup(
        name in prop::sample::select(vec!["example1", "example2", "pendulum", "toggle"]),
        u in prop::collection::vec(0.0f64..1.0, 2),
        s in 0.01f64..0.5,
        t in 0.01f64..0.5,
    ) {
        let sys = lookup_system(name).unwrap();
        let d = &sys.default_domain;
        let x: Vec<f64> = (0..2).map(|i| d.lower[i] + u[i] * (d.upper[i] - d.lower[i])).collect();
        let cfg = IntegratorConfig::default();
        let two = integrate_flow(&sys, &integrate_flow(&sys, &x, t, &cfg).unwrap(), s, &cfg).unwrap();
        let one = integrate_flow(&sys, &x, s + t, &cfg).unwrap();
        prop_assert!(two.distance(&one) <= 1e-8 * (1.0 + one.norm()), "{}: {:?} vs {:?}", name, two, one);
    }

    #[test]
    fn integrator_matches_closed_form(
        name in prop::sample::select(vec!["example1", "example2", "exponential"]),
        u in prop::collection::vec(0.0f64..1.0, 2),
        t in 0.0f64..1.0,
    ) {
        let sys = lookup_system(name).unwrap();
        let d = &sys.default_domain;
        let x: Vec<f64> = (0..sys.dimension).map(|i| d.lower[i] + u[i] * (d.upper[i] - d.lower[i])).collect();
        let exact = (sys.analytic_flow.as_ref().unwrap())(&x, t);
        for cfg in [IntegratorConfig::default(), IntegratorConfig::adaptive()] {
            let y = integrate_flow(&sys, &x, t, &cfg).unwrap();
            prop_assert!(y.distance(&exact) <= 1e-8 * (1.0 + resflow::dynamics::norm(&exact)));
        }
    }

    #[test]
    fn toggle_matches_algebraic_form(
        x1 in 0.0f64..20.0,
        x2 in 0.0f64..20.0,
        eta in 0.5f64..3.0,
    ) {
        // Differential-algebraic form: z is solved from its algebraic
        // equation, then both differential equations are evaluated.
        let (a1, a2, beta, gamma, k, iptg) = (156.25, 15.6, 2.5, 1.0, 2.9618e-5, 1e-5);
        let z = x1 / (1.0f64 + iptg / k).powf(eta);
        let f1 = a1 / (1.0 + x2.powf(beta)) - x1;
        let f2 = a2 / (1.0 + z.powf(gamma)) - x2;
        let f = toggle_switch(eta).rhs_eval(&[x1, x2]).unwrap();
        prop_assert!((f[0] - f1).abs() <= 1e-12 * (1.0 + f1.abs()));
        prop_assert!((f[1] - f2).abs() <= 1e-12 * (1.0 + f2.abs()));
    }

    #[test]
    fn lipschitz_estimate_dominates_quotients(seed in any::<u64>()) {
        let sys = lookup_system("pendulum").unwrap();
        let d = &sys.default_domain;
        let quotient = estimate_lipschitz_with(&sys, d, 50, seed, LipschitzMethod::PairwiseQuotient).unwrap();
        let spectral = estimate_lipschitz_with(&sys, d, 50, seed, LipschitzMethod::JacobianSpectral).unwrap();
        prop_assert!(quotient.value >= 0.0);
        prop_assert!(spectral.value >= quotient.value);
    }

    #[test]
    fn batches_partition_the_set(j in 1usize..60, bs in 1usize..20, epoch_seed in any::<u64>()) {
        let sys = SystemDef::zero(2);
        let set = generate_pairs(&sys, &sys.default_domain, j, 0.1, NoiseSpec::none(), &IntegratorConfig::default(), 0).unwrap();
        let bs = bs.min(j);
        let b = batches(&set, bs, epoch_seed).unwrap();
        let mut seen: Vec<usize> = b.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..j).collect::<Vec<_>>());
        prop_assert!(b.iter().all(|b| b.indices.len() <= bs));
        prop_assert_eq!(b.len(), j.div_ceil(bs));
    }
}

/// One-sample Kolmogorov-Smirnov statistic against uniform(lo, hi).
fn ks_uniform(mut v: Vec<f64>, lo: f64, hi: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn sampled_inputs_are_uniform() {
    let sys = lookup_system("pendulum").unwrap();
    let d = sys.default_domain.clone();
    let set = generate_pairs(
        &sys,
        &d,
        10_000,
        0.1,
        NoiseSpec::none(),
        &IntegratorConfig::default(),
        42,
    )
    .unwrap();
    // 1% critical value of the one-sample KS statistic for large n.
    let critical = 1.628 / (10_000f64).sqrt();
    for c in 0..2 {
        let v: Vec<f64> = set.pairs.iter().map(|p| p.z1[c]).collect();
        let ks = ks_uniform(v, d.lower[c], d.upper[c]);
        assert!(ks < critical, "coordinate {c}: KS {ks} >= {critical}");
    }
}
