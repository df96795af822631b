//! Seeded Monte-Carlo closed-loop simulation.
//!
//! Disturbances are drawn from counter-addressed streams keyed by
//! `(seed, realization, step)`; every controller sees the same sequences and
//! the aggregation runs in realization order, so reports do not depend on
//! thread count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{ControllerDesign, ControllerKind, ControllerState, MultiStep};
use crate::design::{build_controller, tune_target, ControllerSpec, GainSpec, TubeSet};
use crate::error::{Result, SmpcError};
use crate::rng;
use crate::scalar::Real;
use crate::system::{closed_loop, stage_cost, DisturbanceModel, LinearStochasticSystem};

/// Slack on `H_x x ≤ 1` and `H_u u ≤ 1` before a row counts as violated.
pub const VIOLATION_TOL: f64 = 1e-9;
/// Relative slack allowed when comparing the optimal and candidate costs.
pub const COST_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub realizations: usize,
    /// Inclusive metric window `[k_lo, k_hi]`.
    pub window: (usize, usize),
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            realizations: 1000,
            window: (50, 299),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.window;
        if self.realizations == 0 {
            return Err(SmpcError::config("realizations must be ≥ 1"));
        }
        if lo > hi {
            return Err(SmpcError::config(format!("empty metric window [{lo}, {hi}]")));
        }
        if hi >= self.steps {
            return Err(SmpcError::config(format!(
                "metric window end {hi} must be below the simulation length {}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.window.1 - self.window.0 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSequence<T: Real> {
    pub realization: usize,
    pub w: Vec<DVector<T>>,
}

/// `w(0..steps)` of one realization.
pub fn sample_sequence<T: Real>(
    model: &DisturbanceModel<T>,
    steps: usize,
    realization: usize,
    seed: u64,
) -> Result<DisturbanceSequence<T>> {
    let base = rng::base(seed);
    let w = (0..steps)
        .map(|k| model.sample(&mut rng::at(&base, realization as u64, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DisturbanceSequence { realization, w })
}

pub fn sample_sequences<T: Real>(
    model: &DisturbanceModel<T>,
    steps: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<DisturbanceSequence<T>>> {
    if count == 0 {
        return Err(SmpcError::config("sequence count must be ≥ 1"));
    }
    (0..count).map(|r| sample_sequence(model, steps, r, seed)).collect()
}

/// What produces `u(k)`.
#[derive(Debug, Clone)]
pub enum Policy<T: Real> {
    Mpc(Arc<ControllerDesign<T>>),
    /// Pure linear feedback `u = Kx`.
    Feedback(DMatrix<T>),
}

impl<T: Real> Policy<T> {
    fn label(&self) -> String {
        match self {
            Policy::Mpc(d) => d.kind.to_string(),
            Policy::Feedback(_) => "feedback".into(),
        }
    }
}

/// Runtime proof checks accumulated along a trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckStats {
    pub candidates: usize,
    pub candidate_failures: usize,
    /// Smallest candidate slack seen.
    pub min_candidate_slack: Option<f64>,
    pub dominance_failures: usize,
    pub input_violations: usize,
}

impl CheckStats {
    pub fn merge(&mut self, o: &CheckStats) {
        self.candidates += o.candidates;
        self.candidate_failures += o.candidate_failures;
        self.min_candidate_slack = min_opt(self.min_candidate_slack, o.min_candidate_slack);
        self.dominance_failures += o.dominance_failures;
        self.input_violations += o.input_violations;
    }
}

fn min_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory<T: Real> {
    /// `x(0..=T)`.
    pub x: Vec<DVector<T>>,
    pub u: Vec<DVector<T>>,
    pub feasible: Vec<bool>,
    pub stage_cost: Vec<T>,
    pub iterations: Vec<usize>,
    pub checks: CheckStats,
}

impl<T: Real> Trajectory<T> {
    fn with_capacity(steps: usize) -> Self {
        Self {
            x: Vec::with_capacity(steps + 1),
            u: Vec::with_capacity(steps),
            feasible: Vec::with_capacity(steps),
            stage_cost: Vec::with_capacity(steps),
            iterations: Vec::with_capacity(steps),
            checks: CheckStats::default(),
        }
    }
}

/// A controller alarm with the trajectory up to the failing step.
#[derive(Debug)]
pub struct RolloutAlarm<T: Real> {
    pub step: usize,
    pub error: SmpcError,
    pub partial: Trajectory<T>,
}

fn max_excess<T: Real>(h: &DMatrix<T>, v: &DVector<T>) -> f64 {
    (h * v).iter().fold(f64::NEG_INFINITY, |a, r| a.max(r.as_f64() - 1.0))
}

/// Closed loop `x(k+1) = Ax + Bu + Dw` driven by `seq`.
///
/// MPC rollouts check, at every step after a feasible one, that the shifted
/// candidate is feasible and costs no less than the new optimum, and that
/// the applied input meets the hard constraints. For guaranteed controllers
/// any failed check is an alarm.
pub fn rollout<T: Real>(
    sys: &LinearStochasticSystem<T>,
    policy: &Policy<T>,
    x0: &DVector<T>,
    seq: &DisturbanceSequence<T>,
) -> std::result::Result<Trajectory<T>, Box<RolloutAlarm<T>>> {
    let steps = seq.w.len();
    let mut tr = Trajectory::with_capacity(steps);
    let mut x = x0.clone();
    let mut state = match policy {
        Policy::Mpc(d) => Some(ControllerState::new(d.clone(), x0)),
        Policy::Feedback(_) => None,
    };
    let guaranteed = matches!(policy, Policy::Mpc(d) if d.kind.is_guaranteed());
    let alarm = |tr: Trajectory<T>, step, message: String| {
        Box::new(RolloutAlarm {
            step,
            error: SmpcError::InvariantViolation { step, message },
            partial: tr,
        })
    };
    for (k, w) in seq.w.iter().enumerate() {
        tr.x.push(x.clone());
        let (u, c0, feasible, iterations) = match (&mut state, policy) {
            (Some(st), _) => {
                let cand = st.candidate(&x);
                let r = match st.step(&x) {
                    Ok(r) => r,
                    Err(error) => {
                        return Err(Box::new(RolloutAlarm {
                            step: k,
                            error,
                            partial: tr,
                        }))
                    }
                };
                if let Some(c) = cand.filter(|_| r.feasible) {
                    tr.checks.candidates += 1;
                    let slack = c.min_slack.as_f64();
                    tr.checks.min_candidate_slack = min_opt(tr.checks.min_candidate_slack, Some(slack));
                    if !c.feasible {
                        tr.checks.candidate_failures += 1;
                        if guaranteed {
                            return Err(alarm(tr, k, format!("shifted candidate infeasible (slack {slack:.3e})")));
                        }
                    } else {
                        let (opt, cc) = (r.qp_cost.as_f64(), c.cost.as_f64());
                        if opt > cc + COST_TOL * (1.0 + cc.abs()) {
                            tr.checks.dominance_failures += 1;
                            if guaranteed {
                                return Err(alarm(tr, k, format!("optimal cost {opt} exceeds candidate cost {cc}")));
                            }
                        }
                    }
                }
                (r.u, r.c[0].clone(), r.feasible, r.iterations)
            }
            (None, Policy::Feedback(gain)) => (gain * &x, DVector::zeros(sys.m()), true, 0),
            (None, Policy::Mpc(_)) => unreachable!(),
        };
        if sys.h_u().nrows() > 0 && max_excess(sys.h_u(), &u) > VIOLATION_TOL {
            tr.checks.input_violations += 1;
            if guaranteed {
                let e = max_excess(sys.h_u(), &u);
                return Err(alarm(tr, k, format!("hard input constraint exceeded by {e:.3e}")));
            }
        }
        tr.stage_cost.push(stage_cost(&x, &u, &sys.cost));
        let x_next = &sys.a * &x + &sys.b * &u + &sys.d * w;
        if let Some(st) = &mut state {
            st.advance(&x_next, &c0);
        }
        tr.u.push(u);
        tr.feasible.push(feasible);
        tr.iterations.push(iterations);
        x = x_next;
    }
    tr.x.push(x);
    Ok(tr)
}

/// One row of a Monte-Carlo comparison.
#[derive(Debug, Clone)]
pub struct Entry<T: Real> {
    pub name: String,
    pub policy: Policy<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub realization: usize,
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationSummary {
    pub index: usize,
    /// Windowed mean stage cost.
    pub avg_cost: f64,
    /// Window steps with any violated state row.
    pub violations: usize,
    pub infeasible_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    pub name: String,
    pub kind: String,
    /// Mean over realizations of the windowed mean stage cost.
    pub avg_cost: f64,
    pub normalized_cost: Option<f64>,
    /// Per state row: violated fraction of (realization, window step) pairs.
    pub violation_rate: Vec<f64>,
    /// Any state row violated.
    pub violation_any: f64,
    /// Per step `k < T`: fraction of realizations violating any state row.
    pub violation_curve: Vec<f64>,
    /// Steps where the QP was infeasible (naive fallback).
    pub feasibility_failures: usize,
    pub checks: CheckStats,
    pub mean_qp_iterations: f64,
    pub max_qp_iterations: usize,
    /// `tr(P_f D Σ_w Dᵀ)` of the tube gain.
    pub performance_bound: f64,
    /// Realizations that finished without an alarm.
    pub completed: usize,
    pub alarms: Vec<Alarm>,
    pub realizations: Vec<RealizationSummary>,
}

impl ControllerReport {
    /// Binomial standard error of a row's violation rate.
    pub fn violation_std_error(&self, row: usize, window_len: usize) -> f64 {
        let p = self.violation_rate[row];
        let n = (self.completed * window_len).max(1) as f64;
        (p * (1.0 - p) / n).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub experiment: ExperimentConfig,
    pub reference: Option<String>,
    pub controllers: Vec<ControllerReport>,
}

impl SimulationReport {
    pub fn get(&self, name: &str) -> Option<&ControllerReport> {
        self.controllers.iter().find(|c| c.name == name)
    }

    pub fn alarm_count(&self) -> usize {
        self.controllers.iter().map(|c| c.alarms.len()).sum()
    }
}

struct Outcome {
    summary: RealizationSummary,
    row_violations: Vec<usize>,
    curve: Vec<bool>,
    checks: CheckStats,
    iterations: (usize, usize, usize),
    alarm: Option<Alarm>,
}

fn summarize<T: Real>(
    sys: &LinearStochasticSystem<T>,
    exp: &ExperimentConfig,
    index: usize,
    result: std::result::Result<Trajectory<T>, Box<RolloutAlarm<T>>>,
) -> Outcome {
    let (tr, alarm) = match result {
        Ok(tr) => (tr, None),
        Err(a) => {
            let alarm = Alarm {
                realization: index,
                step: a.step,
                message: a.error.to_string(),
            };
            (a.partial, Some(alarm))
        }
    };
    let (lo, hi) = exp.window;
    let h_x = sys.h_x();
    let r_x = h_x.nrows();
    let mut row_violations = vec![0; r_x];
    let mut curve = vec![false; exp.steps];
    let mut violations = 0;
    let mut cost = 0.0;
    for (k, x) in tr.x.iter().enumerate().take(exp.steps) {
        let hx = h_x * x;
        let mut any = false;
        for j in 0..r_x {
            if hx[j].as_f64() > 1.0 + VIOLATION_TOL {
                any = true;
                if (lo..=hi).contains(&k) {
                    row_violations[j] += 1;
                }
            }
        }
        curve[k] = any;
        if (lo..=hi).contains(&k) {
            violations += usize::from(any);
            if let Some(c) = tr.stage_cost.get(k) {
                cost += c.as_f64();
            }
        }
    }
    let iters = &tr.iterations;
    Outcome {
        summary: RealizationSummary {
            index,
            avg_cost: cost / exp.window_len() as f64,
            violations,
            infeasible_steps: tr.feasible.iter().filter(|f| !**f).count(),
        },
        row_violations,
        curve,
        checks: tr.checks.clone(),
        iterations: (iters.iter().sum(), iters.len(), iters.iter().copied().max().unwrap_or(0)),
        alarm,
    }
}

/// Runs every entry on the same `realizations` disturbance sequences from
/// `x0`. Entries with alarms keep the realizations that completed; the
/// alarms are listed in their report.
pub fn monte_carlo<T: Real>(
    sys: &LinearStochasticSystem<T>,
    entries: &[Entry<T>],
    x0: &DVector<T>,
    exp: &ExperimentConfig,
    reference: Option<&str>,
) -> Result<SimulationReport> {
    exp.validate()?;
    if x0.len() != sys.n() {
        return Err(SmpcError::dim("initial state has the wrong dimension"));
    }
    if let Some(name) = reference {
        if !entries.iter().any(|e| e.name == name) {
            return Err(SmpcError::config(format!("reference {name:?} is not among the entries")));
        }
    }
    let mut bounds = Vec::with_capacity(entries.len());
    for e in entries {
        let design = match &e.policy {
            Policy::Mpc(d) => d.design.clone(),
            Policy::Feedback(k) => closed_loop(sys, k)?,
        };
        bounds.push(design.performance_bound(sys.disturbance.covariance()).as_f64());
    }

    let per_realization: Vec<Vec<Outcome>> = (0..exp.realizations)
        .into_par_iter()
        .map(|r| -> Result<Vec<Outcome>> {
            let seq = sample_sequence(&sys.disturbance, exp.steps, r, exp.seed)?;
            Ok(entries
                .iter()
                .map(|e| summarize(sys, exp, r, rollout(sys, &e.policy, x0, &seq)))
                .collect())
        })
        .collect::<Result<_>>()?;

    let r_x = sys.h_x().nrows();
    let mut reports = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let mut rows = vec![0usize; r_x];
        let mut curve = vec![0usize; exp.steps];
        let mut any = 0usize;
        let mut cost = 0.0;
        let mut checks = CheckStats::default();
        let (mut it_sum, mut it_n, mut it_max) = (0, 0, 0);
        let mut failures = 0;
        let mut completed = 0;
        let mut alarms = Vec::new();
        let mut summaries = Vec::new();
        for outcomes in &per_realization {
            let o = &outcomes[i];
            checks.merge(&o.checks);
            it_sum += o.iterations.0;
            it_n += o.iterations.1;
            it_max = it_max.max(o.iterations.2);
            if let Some(a) = &o.alarm {
                alarms.push(a.clone());
                continue;
            }
            completed += 1;
            cost += o.summary.avg_cost;
            any += o.summary.violations;
            failures += o.summary.infeasible_steps;
            for j in 0..r_x {
                rows[j] += o.row_violations[j];
            }
            for (c, v) in curve.iter_mut().zip(&o.curve) {
                *c += usize::from(*v);
            }
            summaries.push(o.summary.clone());
        }
        let denom = (completed * exp.window_len()).max(1) as f64;
        let done = completed.max(1) as f64;
        reports.push(ControllerReport {
            name: e.name.clone(),
            kind: e.policy.label(),
            avg_cost: cost / done,
            normalized_cost: None,
            violation_rate: rows.iter().map(|v| *v as f64 / denom).collect(),
            violation_any: any as f64 / denom,
            violation_curve: curve.iter().map(|v| *v as f64 / done).collect(),
            feasibility_failures: failures,
            checks,
            mean_qp_iterations: if it_n > 0 { it_sum as f64 / it_n as f64 } else { 0.0 },
            max_qp_iterations: it_max,
            performance_bound: bounds[i],
            completed,
            alarms,
            realizations: summaries,
        });
    }
    if let Some(name) = reference {
        let base = reports.iter().find(|r| r.name == name).map(|r| r.avg_cost).unwrap_or(f64::NAN);
        for r in &mut reports {
            r.normalized_cost = Some(r.avg_cost / base);
        }
    }
    Ok(SimulationReport {
        experiment: exp.clone(),
        reference: reference.map(str::to_string),
        controllers: reports,
    })
}

/// Pure feedback `u = Kx` on the experiment's sequences.
pub fn baseline_feedback<T: Real>(
    sys: &LinearStochasticSystem<T>,
    name: &str,
    k: &DMatrix<T>,
    x0: &DVector<T>,
    exp: &ExperimentConfig,
) -> Result<SimulationReport> {
    let entries = [Entry {
        name: name.to_string(),
        policy: Policy::Feedback(k.clone()),
    }];
    monte_carlo(sys, &entries, x0, exp, None)
}

/// One point of an `M` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m: MultiStep,
    /// Tuned weight of the tube gain, if tuned.
    pub weight: Option<f64>,
    pub gain: Vec<f64>,
    /// Why the point has no report (design infeasible or tuning failed).
    pub error: Option<String>,
    pub report: Option<ControllerReport>,
}

/// Multi-step controllers for each `M` in `ms`, each with its own tube gain
/// from `gain`, simulated on shared sequences. Design failures are recorded
/// per point.
pub fn sweep_m<T: Real>(
    sys: &LinearStochasticSystem<T>,
    template: &ControllerSpec<T>,
    ms: &[MultiStep],
    gain: &GainSpec<T>,
    tubes: &mut TubeSet<T>,
    x0: &DVector<T>,
    exp: &ExperimentConfig,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(ms.len());
    for &m in ms {
        let spec = ControllerSpec {
            name: format!("MS-SMPC M={m}"),
            kind: ControllerKind::Ms(m),
            gain: gain.clone(),
            ..template.clone()
        };
        let mut point = SweepPoint {
            m,
            weight: None,
            gain: Vec::new(),
            error: None,
            report: None,
        };
        let built = tubes
            .resolve(sys, &spec.gain, tune_target(spec.kind))
            .and_then(|i| {
                let tube = &tubes.tubes[i];
                point.weight = tube.weight.map(|w| w.as_f64());
                point.gain = tube.k.iter().map(|v| v.as_f64()).collect();
                build_controller(sys, &spec, tube)
            });
        match built {
            Err(e @ (SmpcError::Design(_) | SmpcError::Numerical(_))) => point.error = Some(e.to_string()),
            Err(e) => return Err(e),
            Ok(c) if !c.is_feasible_design() => point.error = Some("design infeasible".into()),
            Ok(c) => {
                let entries = [Entry {
                    name: spec.name.clone(),
                    policy: Policy::Mpc(Arc::new(c)),
                }];
                let mut rep = monte_carlo(sys, &entries, x0, exp, None)?;
                point.report = rep.controllers.pop();
            }
        }
        log::info!("sweep M = {m}: {}", point.error.as_deref().unwrap_or("ok"));
        points.push(point);
    }
    Ok(points)
}
