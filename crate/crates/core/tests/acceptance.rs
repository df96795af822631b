//! Full-scale acceptance suite over the bundled example configurations.
//!
//! Runs without the default test harness so every criterion prints exactly
//! one PASS/FAIL line. Pass a criterion number to run only that one, e.g.
//! `cargo test --test acceptance -- 3`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use smpc::artifact::{design_from_config, DesignOutput};
use smpc::config::ConfigFile;
use smpc::controllers::{ControllerKind, MultiStep};
use smpc::design::{build_controller, ControllerSpec, GainSpec};
use smpc::simulator::{rollout, sample_sequences, CheckStats, Policy, SimulationReport, Trajectory};
use smpc::terminal::{build_terminal_set, TerminalSet, TerminalSpec};
use smpc::tightening::{discard_count, TighteningProfile};
use smpc::{monte_carlo, ClosedLoopDesign};

const ORDER_TOL: f64 = 1e-12;
const SET_TOL: f64 = 1e-9;

fn config(name: &str) -> ConfigFile {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ConfigFile::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct Case {
    cfg: ConfigFile,
    design: DesignOutput,
}

fn design_case(name: &str) -> Case {
    let cfg = config(name);
    let design = design_from_config(&cfg).expect("design");
    for f in &design.feasibility {
        assert!(f.feasible, "{name}: {} design infeasible", f.name);
    }
    Case { cfg, design }
}

fn simulate(case: &Case) -> SimulationReport {
    let b = &case.design.bundle;
    monte_carlo(&b.system, &b.entries(), &b.x0, &case.cfg.experiment, b.reference.as_deref()).expect("simulation")
}

fn case1() -> &'static Case {
    static CELL: OnceLock<Case> = OnceLock::new();
    CELL.get_or_init(|| design_case("case1.json"))
}

fn case2() -> &'static Case {
    static CELL: OnceLock<Case> = OnceLock::new();
    CELL.get_or_init(|| design_case("case2.json"))
}

fn report1() -> &'static SimulationReport {
    static CELL: OnceLock<SimulationReport> = OnceLock::new();
    CELL.get_or_init(|| simulate(case1()))
}

fn report2() -> &'static SimulationReport {
    static CELL: OnceLock<SimulationReport> = OnceLock::new();
    CELL.get_or_init(|| simulate(case2()))
}

fn case1_lqr() -> &'static DesignOutput {
    static CELL: OnceLock<DesignOutput> = OnceLock::new();
    CELL.get_or_init(|| design_from_config(&config("case1_lqr.json")).expect("design"))
}

/// Rollouts of the two limit pairs on shared sequences.
struct Equivalence {
    pairs: Vec<(&'static str, Vec<Trajectory<f64>>, Vec<Trajectory<f64>>)>,
}

const EQUIVALENCE_REALIZATIONS: usize = 50;

fn equivalence() -> &'static Equivalence {
    static CELL: OnceLock<Equivalence> = OnceLock::new();
    CELL.get_or_init(|| {
        let c = case1();
        let sys = &c.design.bundle.system;
        let x0 = &c.design.bundle.x0;
        let exp = &c.cfg.experiment;
        let seqs = sample_sequences(&sys.disturbance, exp.steps, EQUIVALENCE_REALIZATIONS, exp.seed).unwrap();
        let of_kind = |kind: ControllerKind| c.design.controllers.iter().find(|d| d.spec.kind == kind).unwrap();
        let mut pairs = Vec::new();
        for (label, base_kind, ms) in [
            ("MS(M=1) vs RS", ControllerKind::Rs, MultiStep::Finite(1)),
            ("MS(M=inf) vs IF", ControllerKind::If, MultiStep::Infinite),
        ] {
            let base = of_kind(base_kind);
            let spec = ControllerSpec {
                name: label.into(),
                kind: ControllerKind::Ms(ms),
                horizon: base.spec.horizon,
                measured_input: base.spec.measured_input,
                gain: GainSpec::Explicit(c.design.tubes.tubes[base.tube].k.clone()),
            };
            let ms_design = build_controller(sys, &spec, &c.design.tubes.tubes[base.tube]).unwrap();
            let run = |p: &Policy<f64>| -> Vec<Trajectory<f64>> {
                seqs.iter()
                    .map(|s| rollout(sys, p, x0, s).unwrap_or_else(|a| panic!("{label}: alarm at {}: {}", a.step, a.error)))
                    .collect()
            };
            let base_runs = run(&Policy::Mpc(base.controller.clone()));
            let ms_runs = run(&Policy::Mpc(std::sync::Arc::new(ms_design)));
            pairs.push((label, ms_runs, base_runs));
        }
        Equivalence { pairs }
    })
}

/// Collects failed expectations of one criterion.
#[derive(Default)]
struct Check {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn within(&mut self, label: &str, value: f64, target: f64, tol: f64) {
        self.expect(
            (value - target).abs() <= tol,
            format!("{label} = {value:.4} (target {target} ± {tol})"),
        );
    }
}

fn criterion_1(c: &mut Check) {
    let r = report1();
    assert_eq!(case1().cfg.constraints.h_x.len(), 1);
    let rows: [(&str, f64, f64, Option<(f64, f64)>); 6] = [
        ("IF-SMPC", 1.00, 0.03, Some((27.08, 2.5))),
        ("MS-SMPC", 1.09, 0.06, Some((5.75, 2.0))),
        ("RS-MPC", 1.20, 0.08, None),
        ("K_LQR", 1.00, 0.03, Some((27.08, 2.5))),
        ("K_MS", 1.26, 0.06, Some((4.07, 2.0))),
        ("K_RS", 2.29, 0.12, None),
    ];
    for (name, cost, cost_tol, viol) in rows {
        let e = r.get(name).unwrap_or_else(|| panic!("missing {name}"));
        c.within(&format!("{name} normalized cost"), e.normalized_cost.unwrap(), cost, cost_tol);
        let v = 100.0 * e.violation_rate[0];
        match viol {
            Some((target, tol)) => c.within(&format!("{name} violation %"), v, target, tol),
            None => c.expect(v <= 0.1, format!("{name} violation % = {v:.4} (≤ 0.1)")),
        }
    }
}

fn criterion_2(c: &mut Check) {
    let case = case2();
    let r = report2();
    let window = case.cfg.experiment.window.1 - case.cfg.experiment.window.0 + 1;
    let cost = |n: &str| 100.0 * r.get(n).unwrap().avg_cost;
    for (name, target) in [("IF-SMPC", 1.71), ("MS-SMPC", 0.41), ("RS-MPC", 0.06)] {
        let v = cost(name);
        c.expect(
            (v - target).abs() <= 0.25 * target,
            format!("{name} cost x100 = {v:.4} (target {target} ± 25%)"),
        );
    }
    c.expect(
        cost("RS-MPC") < cost("MS-SMPC") && cost("MS-SMPC") < cost("IF-SMPC"),
        "cost ordering RS < MS < IF",
    );
    for e in &r.controllers {
        for (j, rate) in e.violation_rate.iter().enumerate() {
            let limit = 1.0 - case.cfg.constraints.p[j] + 3.0 * e.violation_std_error(j, window);
            c.expect(
                *rate <= limit,
                format!("{} row {j} violation {:.3}% ≤ {:.3}%", e.name, 100.0 * rate, 100.0 * limit),
            );
        }
    }
    let if_rate = 100.0 * r.get("IF-SMPC").unwrap().violation_rate[0];
    c.within("IF-SMPC violation %", if_rate, 9.5, 1.5);
}

fn state_max(p: &TighteningProfile<f64>, rows: usize) -> f64 {
    (0..rows).map(|j| p.saturation[j]).fold(f64::NEG_INFINITY, f64::max)
}

fn criterion_3(c: &mut Check) {
    let d = case1_lqr();
    let if_ctrl = d.controllers.iter().find(|x| x.spec.kind == ControllerKind::If).unwrap();
    let tube = &d.tubes.tubes[if_ctrl.tube];
    let t = &tube.tightening;
    let rows = d.bundle.system.h_x().nrows();
    let g = state_max(&t.gamma, rows);
    let bt = state_max(&t.beta_tilde(35).unwrap(), rows);
    let b = state_max(&t.beta().unwrap(), rows);
    c.expect((0.8..=1.0).contains(&g), format!("gamma_max = {g:.4} in [0.8, 1]"));
    c.expect((3.0..=5.0).contains(&bt), format!("beta_tilde_max(35) = {bt:.4} in [3, 5]"));
    c.expect(b > 15.0, format!("beta_max = {b:.4} > 15"));
    for f in &d.feasibility {
        let want = f.kind == ControllerKind::If;
        c.expect(
            f.feasible == want,
            format!("{} {}", f.name, if f.feasible { "feasible" } else { "infeasible" }),
        );
    }
}

fn criterion_4(c: &mut Check) {
    let r = discard_count(0.9, 1_000_000, 1e-4).unwrap();
    // Largest integer r with (1−p)N − r ≥ sqrt(2(1−p)N ln(1/δ)).
    let mass = 100_000.0_f64;
    let need = (2.0 * mass * 1e4_f64.ln()).sqrt();
    let oracle = (0..=100_000u64).rev().find(|&r| mass - r as f64 >= need).unwrap();
    c.expect(r as u64 == oracle, format!("discard count {r} (oracle {oracle})"));
    let pct = format!("{:.2}", 100.0 * r as f64 / 1e6);
    c.expect(pct == "9.86", format!("discard ratio {pct}%"));
}

fn criterion_5(c: &mut Check) {
    for (label, ms, base) in &equivalence().pairs {
        let mut worst = 0.0_f64;
        for (a, b) in ms.iter().zip(base) {
            for (ua, ub) in a.u.iter().zip(&b.u) {
                worst = worst.max((ua - ub).amax());
            }
        }
        c.expect(
            worst <= 1e-6 && ms.len() == EQUIVALENCE_REALIZATIONS,
            format!("{label}: max |Δu| = {worst:.2e}"),
        );
    }
}

fn guaranteed(kind: &str) -> bool {
    kind != "naive" && kind != "feedback"
}

fn check_stats(c: &mut Check, label: &str, s: &CheckStats) {
    c.expect(s.candidates > 0, format!("{label}: {} candidate checks ran", s.candidates));
    c.expect(s.candidate_failures == 0, format!("{label}: {} candidate failures", s.candidate_failures));
    c.expect(s.dominance_failures == 0, format!("{label}: {} cost dominance failures", s.dominance_failures));
    c.expect(s.input_violations == 0, format!("{label}: {} input violations", s.input_violations));
}

fn criterion_6(c: &mut Check) {
    for (case_name, case, report) in [("case 1", case1(), report1()), ("case 2", case2(), report2())] {
        for e in report.controllers.iter().filter(|e| guaranteed(&e.kind)) {
            let label = format!("{case_name} {}", e.name);
            c.expect(e.alarms.is_empty(), format!("{label}: {} alarms", e.alarms.len()));
            c.expect(
                e.completed == case.cfg.experiment.realizations,
                format!("{label}: {} realizations completed", e.completed),
            );
            c.expect(e.feasibility_failures == 0, format!("{label}: {} infeasible steps", e.feasibility_failures));
            check_stats(c, &label, &e.checks);
        }
    }
    for (label, ms, base) in &equivalence().pairs {
        let mut stats = CheckStats::default();
        for t in ms.iter().chain(base) {
            stats.merge(&t.checks);
            c.expect(t.feasible.iter().all(|f| *f), format!("{label}: all steps feasible"));
        }
        check_stats(c, label, &stats);
    }
}

fn criterion_7(c: &mut Check) {
    let mut checked = 0usize;
    for (case_name, d) in [("case 1", &case1().design), ("case 2", &case2().design)] {
        for (ti, tube) in d.tubes.tubes.iter().enumerate() {
            let t = &tube.tightening;
            let k_bar = t.k_bar;
            let rows = t.gamma.rows();
            let beta = t.beta().unwrap();
            let mut bad = Vec::new();
            for m in [1, 2, 5, 15, 35, 75] {
                let bt = t.beta_tilde(m).unwrap();
                for i in 0..=(k_bar + 2 * m + 2) {
                    for j in 0..rows {
                        let (g, b1, b2) = (t.gamma.value(i, j), bt.value(i, j), beta.value(i, j));
                        if g > b1 + ORDER_TOL || b1 > b2 + ORDER_TOL {
                            bad.push(format!("M={m} i={i} row {j}: {g} {b1} {b2}"));
                        }
                        checked += 1;
                    }
                }
            }
            for i in 0..k_bar {
                for j in 0..rows {
                    let step = t.gamma.value(i + 1, j) - t.gamma.value(i, j);
                    if step > t.a.value(i, j) + ORDER_TOL {
                        bad.push(format!("increment i={i} row {j}: {step} > {}", t.a.value(i, j)));
                    }
                }
            }
            for i in 0..=k_bar {
                for j in 0..rows {
                    if t.gamma.value(i, j) > t.gamma_max()[j] + ORDER_TOL {
                        bad.push(format!("gamma_{i} row {j} above gamma_max"));
                    }
                }
            }
            c.expect(
                bad.is_empty(),
                format!(
                    "{case_name} tube {ti}: {} ordering violations{}",
                    bad.len(),
                    bad.first().map(|b| format!(", first {b}")).unwrap_or_default()
                ),
            );
        }
    }
    c.expect(checked > 0, format!("{checked} ordered triples"));
}

/// Sampled points of `set` keep `F̃Φ^i x ≤ 1 − profile(offset + i)` for
/// `i ≤ 5·(determination index)`.
fn propagate(design: &ClosedLoopDesign<f64>, profile: &TighteningProfile<f64>, set: &TerminalSet<f64>, seed: u64) -> Result<usize, String> {
    let pts = set.polytope.sample_points(100, seed).map_err(|e| e.to_string())?;
    let horizon = 5 * set.determination_index.max(1);
    for x in &pts {
        let mut s = x.clone();
        for i in 0..=horizon {
            let y = &design.f_tilde * &s;
            for j in 0..y.len() {
                let bound = 1.0 - profile.value(set.offset + i, j);
                if y[j] > bound + SET_TOL {
                    return Err(format!("row {j} at i={i}: {} > {bound}", y[j]));
                }
            }
            s = &design.phi * s;
        }
    }
    Ok(pts.len())
}

fn contained(inner: &TerminalSet<f64>, outer: &TerminalSet<f64>, seed: u64) -> Result<(), String> {
    for x in inner.polytope.sample_points(100, seed).map_err(|e| e.to_string())? {
        let slack = outer.polytope.slack(&x).map_err(|e| e.to_string())?;
        if slack.min() < -SET_TOL {
            return Err(format!("point outside by {}", -slack.min()));
        }
    }
    Ok(())
}

fn criterion_8(c: &mut Check) {
    let mut seed = 0;
    for (case_name, d) in [("case 1", &case1().design), ("case 2", &case2().design)] {
        for dc in &d.controllers {
            let ctrl = &dc.controller;
            let sets: Vec<&TerminalSet<f64>> = ctrl.terminal.iter().chain(ctrl.z_terminal.iter()).collect();
            let mut total = 0;
            let mut err = None;
            for set in sets {
                seed += 1;
                match propagate(&ctrl.design, &ctrl.profile, set, seed) {
                    Ok(n) => total += n,
                    Err(e) => err = Some(e),
                }
            }
            c.expect(err.is_none(), format!(
                    "{case_name} {}: {total} points propagated{}",
                    dc.spec.name,
                    err.as_ref().map(|e| format!(", {e}")).unwrap_or_default()
                ));
        }
        // Nesting on the tube of the robust-stochastic design.
        let rs = d.controllers.iter().find(|x| x.spec.kind == ControllerKind::Rs).unwrap();
        let m = d
            .controllers
            .iter()
            .find_map(|x| match x.spec.kind {
                ControllerKind::Ms(MultiStep::Finite(m)) => Some(m),
                _ => None,
            })
            .unwrap();
        let tube = &d.tubes.tubes[rs.tube];
        let n = rs.spec.horizon;
        let t = &tube.tightening;
        let (beta, bt) = (t.beta().unwrap(), t.beta_tilde(m).unwrap());
        let build = |p: &TighteningProfile<f64>| {
            build_terminal_set(TerminalSpec {
                profile: p,
                offset: n,
                design: &tube.design,
            })
            .unwrap()
        };
        let (xb, xbt, xg) = (build(&beta), build(&bt), build(&t.gamma));
        seed += 1;
        let nest = contained(&xb, &xbt, seed).and_then(|_| contained(&xbt, &xg, seed + 1));
        c.expect(nest.is_ok(), format!(
                "{case_name}: X_f(beta) ⊆ X_f(beta_tilde M={m}) ⊆ X_f(gamma){}",
                nest.as_ref().err().map(|e| format!(", {e}")).unwrap_or_default()
            ));
    }
}

fn criterion_9(c: &mut Check) {
    for e in report1().controllers.iter().filter(|e| guaranteed(&e.kind)) {
        c.expect(
            e.avg_cost <= 1.05 * e.performance_bound,
            format!("{}: cost {:.5} ≤ 1.05 x bound {:.5}", e.name, e.avg_cost, e.performance_bound),
        );
    }
}

type Criterion = (u32, &'static str, fn(&mut Check));

const CRITERIA: [Criterion; 9] = [
    (1, "case 1 normalized costs and violation rates", criterion_1),
    (2, "case 2 costs, ordering and chance constraints", criterion_2),
    (3, "case 1 tightening magnitudes and design feasibility with K_LQR", criterion_3),
    (4, "scenario discard count", criterion_4),
    (5, "multi-step limits match RS and IF inputs", criterion_5),
    (6, "recursive feasibility, candidates and hard inputs", criterion_6),
    (7, "tightening ordering and increments", criterion_7),
    (8, "terminal set invariance and nesting", criterion_8),
    (9, "closed-loop cost below the performance bound", criterion_9),
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (n, name, _) in CRITERIA {
            println!("criterion_{n}: test  # {name}");
        }
        return ExitCode::SUCCESS;
    }
    let only: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in CRITERIA {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let mut check = Check::default();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut check)));
        let secs = start.elapsed().as_secs_f64();
        let pass = outcome.is_ok() && check.failures.is_empty();
        println!("{} criterion {n}: {name} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
        for note in &check.notes {
            println!("    ok   {note}");
        }
        for fail in &check.failures {
            println!("    FAIL {fail}");
        }
        if let Err(p) = outcome {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            println!("    panic: {msg}");
        }
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
