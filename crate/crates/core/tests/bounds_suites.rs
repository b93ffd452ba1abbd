use dbos_core::belief::{
    chain_jacobian_closed, operator_norm_1to1, softmax, softmax_bayes_step, unroll_chain, BeliefMatrix,
    Stabilization,
};
use dbos_core::bounds::{
    gradient_error_constant, run_suite, verify_belief_error, verify_chain_identities, verify_gradient_error_bound,
    verify_lipschitz, verify_sufficient_statistic, BoundReport, GradientBoundSweep,
};
use proptest::prelude::*;

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn assert_clean(rep: &BoundReport) {
    assert!(rep.passed(), "{}: {} violations", rep.suite, rep.violations());
    assert!(!rep.trials.is_empty());
}

#[test]
fn lipschitz_hand_pair_and_identity() {
    let d = l1(&softmax(&[1.0, 0.0]), &softmax(&[0.0, 0.0]));
    // 2 (e / (1 + e) - 1/2)
    let e = 1.0f64.exp();
    assert!((d - 2.0 * (e / (1.0 + e) - 0.5)).abs() < 1e-15);
    assert!((d - 0.46212).abs() < 5e-6);
    assert_eq!(l1(&softmax(&[0.3, -2.0]), &softmax(&[0.3, -2.0])), 0.0);
    assert_clean(&verify_lipschitz(500, 2..=10, 1).unwrap());
    assert!(verify_lipschitz(1, 0..=0, 1).is_err());
}

#[test]
fn belief_error_examples() {
    let rep = verify_belief_error(3, 0.01, 200, 5).unwrap();
    assert_clean(&rep);
    assert!(rep.trials_for("belief_l1_uniform").all(|t| (t.bound - 0.06).abs() < 1e-15));
    let exact = verify_belief_error(5, 0.0, 50, 5).unwrap();
    assert!(exact.trials.iter().all(|t| t.measured == 0.0));
    assert!(verify_belief_error(0, 0.1, 1, 0).is_err());
}

#[test]
fn chain_suite_small() {
    let rep = verify_chain_identities(5, 4, 100, 9).unwrap();
    assert_clean(&rep);
    assert!(rep.max_measured("collapse") <= 1e-10);
}

#[test]
fn gradient_bound_examples() {
    assert_eq!(gradient_error_constant(2), 26.0);
    assert_eq!(gradient_error_constant(3), 48.0);
    let sweep = GradientBoundSweep {
        trials: 6,
        ..Default::default()
    };
    let rep = verify_gradient_error_bound(&sweep).unwrap();
    assert_clean(&rep);
    for t in &rep.trials {
        assert_eq!(t.constants["l_g"], 0.0);
        assert!(t.constants["g_pi"] > 0.0);
        assert!(t.bound.is_finite());
    }
}

#[test]
fn sufficient_statistic_small() {
    let rep = verify_sufficient_statistic(20, 3).unwrap();
    assert_clean(&rep);
    assert_eq!(rep.max_measured("non_belief_heads_inert"), 0.0);
}

#[test]
fn unknown_suite_is_an_error() {
    assert!(run_suite("tightness", 0).is_err());
}

#[test]
fn report_round_trips_through_json() {
    let rep = verify_chain_identities(2, 3, 3, 0).unwrap();
    let back: BoundReport = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
    assert_eq!(back, rep);
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n).prop_map(|x| {
        let b = softmax(&x);
        // keep entries away from zero
        b.iter().map(|v| 0.9 * v + 0.1 / b.len() as f64).collect()
    })
}

proptest! {
    #[test]
    fn softmax_is_two_lipschitz(x in prop::collection::vec(-20.0f64..20.0, 2..10), d in prop::collection::vec(-3.0f64..3.0, 10)) {
        let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let dx = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(l1(&softmax(&x), &softmax(&y)) <= 2.0 * dx + 1e-9);
    }

    #[test]
    fn one_step_error_is_twice_the_likelihood_gap(
        b in simplex(4),
        ell in prop::collection::vec(-4.0f64..0.0, 4),
        d in prop::collection::vec(-0.2f64..0.2, 4),
    ) {
        let hat: Vec<f64> = ell.iter().zip(&d).map(|(a, b)| a + b).collect();
        let stab = Stabilization::exact();
        let e = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let p = softmax_bayes_step(&b, &ell, &stab).unwrap();
        let q = softmax_bayes_step(&b, &hat, &stab).unwrap();
        prop_assert!(l1(&p, &q) <= 2.0 * e + 1e-9);
    }

    #[test]
    fn closed_chain_norm_bounded(
        b in simplex(5),
        ells in prop::collection::vec(prop::collection::vec(-3.0f64..0.0, 5), 1..6),
    ) {
        let start = BeliefMatrix::from_rows(&[0], &[b]).unwrap();
        let steps: Vec<Vec<Vec<f64>>> = ells.iter().map(|e| vec![e.clone()]).collect();
        let tape = unroll_chain(&start, &steps, steps.len(), &Stabilization::exact()).unwrap();
        let b_min = tape.beliefs.iter().map(BeliefMatrix::min_entry).fold(tape.start.min_entry(), f64::min);
        for s in 0..steps.len() {
            let pi = chain_jacobian_closed(tape.endpoint().row(0), tape.beliefs[s].row(0)).unwrap();
            prop_assert!(operator_norm_1to1(&pi) <= 4.0 / b_min + 1e-9);
        }
    }
}
