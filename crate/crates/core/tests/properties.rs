//! Property tests for the structural invariants of each module.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpflow::flow::{gronwall_certificate, transport, FlowField};
use vpflow::iresnet::{IResNet, IResNetConfig};
use vpflow::nn::{Activation, DenseNet, SpectralConstraint};
use vpflow::ode::IntegratorConfig;
use vpflow::targets::{make_builtin_target, ClassTag, Params, BUILTIN_TARGETS};
use vpflow::vp::{VpSchedule, VpScoreModel};

fn model(name: &str) -> VpScoreModel {
    VpScoreModel::new(make_builtin_target(name, &Params::new()).unwrap()).unwrap()
}

fn builtin() -> impl Strategy<Value = &'static str> {
    prop::sample::select(BUILTIN_TARGETS.to_vec())
}

fn one_d() -> impl Strategy<Value = &'static str> {
    prop::sample::select(vec!["triangular", "two_uniform", "cubic_pullback", "gmm1d"])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_variance_preserving(t in 0.0f64..50.0) {
        prop_assert!((VpSchedule::a2(t) + VpSchedule::sigma2(t) - 1.0).abs() < 4.0 * f64::EPSILON);
        prop_assert!((VpSchedule::a(t).powi(2) - VpSchedule::a2(t)).abs() < 4.0 * f64::EPSILON);
    }

    #[test]
    fn target_pdf_nonnegative_and_compact(name in builtin(), x0 in -6.0f64..6.0, x1 in -6.0f64..6.0) {
        let t = make_builtin_target(name, &Params::new()).unwrap();
        let x = &[x0, x1][..t.dim];
        let p = t.pdf(x);
        prop_assert!(p >= 0.0 && p.is_finite());
        if t.class_tag == ClassTag::A1 && vpflow::linalg::norm(x) > t.support_radius {
            prop_assert_eq!(p, 0.0);
        }
    }

    #[test]
    fn scores_finite_on_admissible_times(name in builtin(), x0 in -5.0f64..5.0, x1 in -5.0f64..5.0, log_t in -7.0f64..2.0) {
        let m = model(name);
        let x = &[x0, x1][..m.dim()];
        let times = if m.allows_time_zero() { vec![0.0, log_t.exp()] } else { vec![log_t.exp()] };
        for t in times {
            let s = m.score(t, x).unwrap();
            prop_assert!(s.iter().all(|v| v.is_finite()), "{name} t={t}");
            prop_assert!(m.score_jacobian(t, x).unwrap().is_finite());
        }
    }

    #[test]
    fn theoretical_bound_positive_and_finite(name in builtin(), log_t in -6.0f64..1.6) {
        let m = model(name);
        if m.class_tag() == ClassTag::General {
            return Ok(());
        }
        let bound = m.lipschitz_bound(5.0).unwrap();
        let l = bound.at(log_t.exp()).unwrap();
        prop_assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn velocity_divergence_matches_jacobian_trace(name in builtin(), x0 in -3.0f64..3.0, x1 in -3.0f64..3.0, t in 0.05f64..3.0) {
        let m = model(name);
        let x = &[x0, x1][..m.dim()];
        let exact = FlowField::new(&m).velocity(t, x).unwrap().1.trace();
        let fd = FlowField::with_divergence(&m, vpflow::flow::DivergenceMode::FiniteDifference { rel_step: 1e-5 })
            .velocity(t, x)
            .unwrap()
            .1
            .trace();
        prop_assert!((exact - fd).abs() <= 1e-4 * exact.abs().max(1.0), "{exact} vs {fd}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flow_jacobian_matches_logdet_and_inverts(name in one_d(), x in -3.0f64..3.0) {
        let m = model(name);
        let field = FlowField::new(&m);
        let cfg = IntegratorConfig::default();
        let fwd = transport(&field, 0.01, 3.0, &[x], &cfg).unwrap();
        let j = fwd.jacobian.get(0, 0);
        prop_assert!((j.abs() / fwd.logdet.exp() - 1.0).abs() < 1e-6);
        let back = transport(&field, 3.0, 0.01, &fwd.endpoint, &cfg).unwrap();
        prop_assert!((back.endpoint[0] - x).abs() < 1e-6 * (1.0 + x.abs()));
    }

    #[test]
    fn gronwall_certificate_monotone_in_horizon(a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let curve = |t: f64| Ok(1.0 + (-t).exp());
        let short = gronwall_certificate(curve, 0.0, lo).unwrap().value;
        let long = gronwall_certificate(curve, 0.0, hi).unwrap().value;
        prop_assert!(short >= 1.0 && long >= short * (1.0 - 1e-12));
    }

    #[test]
    fn spectral_projection_respects_bound(seed in 0u64..1000, bound in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DenseNet::new(&[2, 16, 16, 2], &[Activation::Elu, Activation::Elu, Activation::Identity], &mut rng).unwrap();
        for l in &mut net.layers {
            l.weight *= 3.0;
        }
        let mut c = SpectralConstraint::new(&net, bound, &mut rng).unwrap();
        c.project_with(&mut net, SpectralConstraint::CERTIFY_ITERATIONS);
        for s in c.certify(&net).unwrap() {
            prop_assert!(s <= bound * (1.0 + 1e-3), "{s} > {bound}");
        }
    }

    #[test]
    fn iresnet_invertible_with_exact_logdet(seed in 0u64..1000, lip in 0.1f64..0.95, x0 in -3.0f64..3.0, x1 in -3.0f64..3.0) {
        let cfg = IResNetConfig { k: 3, lip, width: 16, seed, ..Default::default() };
        let mut net = IResNet::new(2, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = Array2::from_shape_fn((64, 2), |_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
        net.initialize_actnorm(&(batch * 1.7 + 0.3)).unwrap();
        let x = [x0, x1];
        let back = net.inverse(&net.forward(&x).unwrap()).unwrap();
        prop_assert!((back[0] - x0).abs() < 1e-8 && (back[1] - x1).abs() < 1e-8);
        let j = net.jacobian(&x).unwrap();
        prop_assert!((j.det().abs().ln() - net.logdet(&x).unwrap()).abs() < 1e-9);
        let cert = net.certify().unwrap();
        prop_assert!(cert.branch_lipschitz.iter().all(|l| *l <= lip * (1.0 + 1e-2)));
        prop_assert!(j.op_norm() <= cert.forward * (1.0 + 1e-2));
        prop_assert!(1.0 / j.min_singular() <= cert.inverse * (1.0 + 1e-2));
    }
}
