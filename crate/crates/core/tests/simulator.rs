mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use smpc::controllers::{ControllerDesign, ControllerKind, MultiStep};
use smpc::simulator::{monte_carlo, rollout, sample_sequence, sample_sequences, Entry, ExperimentConfig, Policy};
use smpc::system::{closed_loop, lqr_gain};
use smpc::tightening::Tightening;

use common::{double_integrator, scalar, small_scenario};

fn experiment(realizations: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        steps: 40,
        realizations,
        window: (10, 39),
        seed,
    }
}

fn entries() -> (smpc::SystemF64, Vec<Entry<f64>>) {
    let sys = double_integrator(0.8, 0.02);
    let k = lqr_gain(&sys.a, &sys.b, &sys.cost.q_mat, &sys.cost.r_mat).unwrap();
    let d = closed_loop(&sys, &k).unwrap();
    let t = Tightening::compute(&d, &sys.disturbance, None, &small_scenario(1)).unwrap();
    let mut out = Vec::new();
    for (name, kind) in [
        ("if", ControllerKind::If),
        ("rs", ControllerKind::Rs),
        ("ms", ControllerKind::Ms(MultiStep::Finite(3))),
    ] {
        let c = ControllerDesign::new(kind, 10, true, d.clone(), sys.cost.clone(), sys.h_u().clone(), &t).unwrap();
        assert!(c.is_feasible_design(), "{kind}");
        out.push(Entry {
            name: name.into(),
            policy: Policy::Mpc(Arc::new(c)),
        });
    }
    out.push(Entry {
        name: "lqr".into(),
        policy: Policy::Feedback(k),
    });
    (sys, out)
}

#[test]
fn reports_are_identical_across_runs_and_thread_counts() {
    let (sys, entries) = entries();
    let x0 = DVector::from_vec(vec![0.8, 0.0]);
    let exp = experiment(12, 3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let r = pool.install(|| monte_carlo(&sys, &entries, &x0, &exp, Some("lqr")).unwrap());
        serde_json::to_string(&r).unwrap()
    };
    let one = run(1);
    assert_eq!(one, run(1));
    assert_eq!(one, run(4));
    let other = serde_json::to_string(&monte_carlo(&sys, &entries, &x0, &experiment(12, 4), None).unwrap()).unwrap();
    assert_ne!(one, other);
}

#[test]
fn zero_disturbance_follows_the_closed_loop_exactly() {
    let sys = scalar::<f64>(0.9, 0.8, 10.0, 0.0);
    let k = DMatrix::from_element(1, 1, -0.4);
    let seq = sample_sequence(&sys.disturbance, 20, 0, 0).unwrap();
    assert!(seq.w.iter().all(|w| w[0] == 0.0));
    let x0 = DVector::from_element(1, 1.5);
    let tr = rollout(&sys, &Policy::Feedback(k), &x0, &seq).unwrap();
    for (i, x) in tr.x.iter().enumerate() {
        assert!((x[0] - 1.5 * 0.5f64.powi(i as i32)).abs() < 1e-14, "x_{i}");
    }
}

#[test]
fn one_step_matches_hand_propagation() {
    let sys = double_integrator(0.8, 0.3);
    let k = DMatrix::from_row_slice(1, 2, &[-2.0, -3.0]);
    let seq = sample_sequence(&sys.disturbance, 1, 5, 8).unwrap();
    let x0 = DVector::from_vec(vec![0.3, -0.2]);
    let tr = rollout(&sys, &Policy::Feedback(k), &x0, &seq).unwrap();
    let u = -2.0 * 0.3 + -3.0 * -0.2;
    let w = &seq.w[0];
    let x1 = [0.3 + 0.1 * -0.2 + 0.005 * u + w[0], -0.2 + 0.1 * u + w[1]];
    assert!((tr.u[0][0] - u).abs() < 1e-15);
    assert!((tr.x[1][0] - x1[0]).abs() < 1e-15);
    assert!((tr.x[1][1] - x1[1]).abs() < 1e-15);
    // ℓ = xᵀx + 0.1u²
    assert!((tr.stage_cost[0] - (0.09 + 0.04 + 0.1 * u * u)).abs() < 1e-15);
}

#[test]
fn uniform_samples_have_the_right_moments() {
    let sys = scalar::<f64>(0.5, 0.8, 1.0, 0.6);
    let seqs = sample_sequences(&sys.disturbance, 500, 40, 21).unwrap();
    let all: Vec<f64> = seqs.iter().flat_map(|s| s.w.iter().map(|w| w[0])).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    assert!(all.iter().all(|w| w.abs() <= 0.6));
    // Var = (2·0.6)²/12 = 0.12
    assert!(mean.abs() < 4.0 * (0.12 / n).sqrt(), "mean {mean}");
    assert!((var - 0.12).abs() < 0.01, "var {var}");
}

#[test]
fn sequences_are_shared_and_prefix_stable() {
    let sys = double_integrator(0.8, 0.1);
    let long = sample_sequence(&sys.disturbance, 50, 3, 7).unwrap();
    let short = sample_sequence(&sys.disturbance, 20, 3, 7).unwrap();
    assert_eq!(&long.w[..20], &short.w[..]);
    let other = sample_sequence(&sys.disturbance, 20, 4, 7).unwrap();
    assert_ne!(short.w, other.w);
}

#[test]
fn report_counts_are_consistent() {
    let (sys, entries) = entries();
    let x0 = DVector::from_vec(vec![0.9, 0.1]);
    let exp = experiment(6, 0);
    let r = monte_carlo(&sys, &entries, &x0, &exp, Some("lqr")).unwrap();
    assert_eq!(r.alarm_count(), 0);
    let lqr = r.get("lqr").unwrap();
    assert_eq!(lqr.normalized_cost, Some(1.0));
    for c in &r.controllers {
        assert_eq!(c.completed, 6);
        assert_eq!(c.realizations.len(), 6);
        assert_eq!(c.violation_curve.len(), 40);
        let mean = c.realizations.iter().map(|s| s.avg_cost).sum::<f64>() / 6.0;
        assert!((mean - c.avg_cost).abs() < 1e-12);
        let viol: usize = c.realizations.iter().map(|s| s.violations).sum();
        assert!((viol as f64 / (6.0 * 30.0) - c.violation_any).abs() < 1e-12);
        if c.kind != "feedback" {
            assert!(c.checks.candidates > 0);
            assert_eq!(c.checks.candidate_failures, 0);
            assert_eq!(c.checks.input_violations, 0);
        }
    }
}

#[test]
fn invalid_experiments_are_rejected() {
    let (sys, entries) = entries();
    let x0 = DVector::zeros(2);
    let mut exp = experiment(2, 0);
    exp.window = (30, 50);
    assert!(monte_carlo(&sys, &entries, &x0, &exp, None).is_err());
    let exp = experiment(2, 0);
    assert!(monte_carlo(&sys, &entries, &x0, &exp, Some("missing")).is_err());
    assert!(monte_carlo(&sys, &entries, &DVector::zeros(3), &exp, None).is_err());
}
