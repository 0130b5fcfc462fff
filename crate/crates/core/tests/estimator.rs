//! ELBO estimator properties on the closed-form Gaussian denoiser.

use elbo_align::elbo::{estimate_elbo, estimate_elbo_with, Parameterized, SamplingStrategy, StrategyKind};
use elbo_align::gaussian_oracle::{GaussianClass, GaussianClassModel, OracleDenoiser};
use elbo_align::objectives::ObjectiveKind;
use elbo_align::schedule::{all_kinds, Schedule};
use proptest::prelude::*;

fn model() -> GaussianClassModel {
    GaussianClassModel::isotropic(vec![vec![0.0, 0.5, -1.0, 2.0], vec![1.0, 1.0, 0.0, -1.0]], vec![0.5, 0.5]).unwrap()
}

fn elb(m: &GaussianClassModel, s: Schedule, steps: usize, antithetic: bool, class: usize) -> f64 {
    let x = m.sample(0, 3, 0).unwrap();
    let oracle = OracleDenoiser { model: m, schedule: s };
    let strategy = SamplingStrategy::new(StrategyKind::Even, steps, 0);
    estimate_elbo_with(&oracle, &x, &class, class, &strategy, &s, ObjectiveKind::Epsilon, 11, antithetic)
        .unwrap()
        .value
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn same_seed_same_bits() {
    let m = model();
    for s in all_kinds() {
        assert_eq!(elb(&m, s, 20, false, 1).to_bits(), elb(&m, s, 20, false, 1).to_bits());
        assert_eq!(elb(&m, s, 20, true, 0).to_bits(), elb(&m, s, 20, true, 0).to_bits());
    }
}

// The endpoint-inclusive grid puts a sample at t_min, where −λ'/2 is about
// 5·10³ (vp-linear) while ‖ε̂ − ε‖² ≈ ‖ε‖² for any denoiser of a non-degenerate
// density. That one point contributes f(t_min)/steps, so the raw estimate
// falls about fivefold from 200 to 2000 steps (measured: 185 → 35 on
// vp-linear) instead of settling within 2%.
#[test]
#[ignore = "raw estimate is dominated by the t_min grid point; 200 vs 2000 steps differ about fivefold"]
fn raw_estimate_settles_between_200_and_2000_steps() {
    let m = model();
    for s in all_kinds() {
        let (coarse, fine) = (elb(&m, s, 200, false, 0), elb(&m, s, 2000, false, 0));
        assert!(rel(coarse, fine) < 0.02, "{s}: {coarse} vs {fine}");
    }
}

/// What calibration consumes is the gap between classes on one noise stream.
/// With ±ε pairs its t_min singularity cancels and the gap converges.
#[test]
fn class_gap_settles_between_200_and_2000_steps() {
    let m = model();
    for s in all_kinds() {
        let gap = |n| elb(&m, s, n, true, 1) - elb(&m, s, n, true, 0);
        let (coarse, fine) = (gap(200), gap(2000));
        assert!(rel(coarse, fine) < 0.02, "{s}: {coarse} vs {fine}");
    }
}

/// For exact class denoisers the ELBO gap tends to the log-likelihood gap,
/// whatever the schedule; what is left comes from truncating to [t_min, t_max].
#[test]
fn class_gap_recovers_log_likelihood_gap() {
    let m = model();
    let x = m.sample(0, 3, 0).unwrap();
    let want = m.log_likelihood(0, &x).unwrap() - m.log_likelihood(1, &x).unwrap();
    for s in all_kinds() {
        let got = elb(&m, s, 4000, true, 1) - elb(&m, s, 4000, true, 0);
        assert!(rel(got, want) < 2e-3, "{s}: {got} vs {want}");
    }
}

#[test]
fn antithetic_pairs_do_not_move_the_limit() {
    let m = model();
    let s = Schedule::default();
    let plain = elb(&m, s, 20000, false, 0);
    let paired = elb(&m, s, 20000, true, 0);
    assert!(rel(paired, plain) < 1e-3, "{paired} vs {plain}");
}

fn arb_model() -> impl Strategy<Value = GaussianClassModel> {
    let class = (
        prop::collection::vec(-2.0..2.0f64, 4),
        prop::collection::vec(0.05..2.0f64, 4),
    )
        .prop_map(|(mean, variance)| GaussianClass { mean, variance, prior: 0.5 });
    prop::collection::vec(class, 2).prop_map(|classes| GaussianClassModel::new((1, 2, 2), classes).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parameterizations_agree(m in arb_model(), seed in any::<u64>(), class in 0usize..2) {
        let x = m.sample(1 - class, seed, 0).unwrap();
        for s in all_kinds() {
            let oracle = OracleDenoiser { model: &m, schedule: s };
            let strategy = SamplingStrategy::new(StrategyKind::Even, 10, 0);
            let base = estimate_elbo(&oracle, &x, &class, class, &strategy, &s, ObjectiveKind::Epsilon, seed).unwrap().value;
            for kind in ObjectiveKind::ALL {
                let wrapped = Parameterized { inner: &oracle, kind, schedule: s };
                let v = estimate_elbo(&wrapped, &x, &class, class, &strategy, &s, kind, seed).unwrap().value;
                prop_assert!(rel(v, base) < 1e-9, "{kind} {s}: {v} vs {base}");
            }
        }
    }
}
