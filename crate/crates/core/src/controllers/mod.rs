//! Receding-horizon controllers sharing one condensed QP structure:
//! naive SMPC (measured initial state, `γ_i`), RS-MPC (`β_i`), IF-SMPC
//! (nominal initial state, `γ_{i+k}`) and MS-SMPC (two nominal states,
//! `β̃`, reset every `M` steps).

mod prediction;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpcError};
use crate::qp::{DenseQpSolver, QpOutcome, QpProblem};
use crate::scalar::Real;
use crate::system::{ocp_cost, ClosedLoopDesign, CostSpec};
use crate::terminal::{build_terminal_family, build_terminal_set, TerminalSet, TerminalSpec};
use crate::tightening::{Tightening, TighteningProfile};

use prediction::Prediction;

/// Slack below which a candidate solution counts as infeasible.
pub const CANDIDATE_TOL: f64 = 1e-8;

/// Multi-step horizon `M`, or the never-reset limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MultiStep {
    Finite(usize),
    Infinite,
}

impl MultiStep {
    /// `M_k`: how many steps back the `z` state is conditioned.
    pub fn m_k(self, k: usize) -> usize {
        match self {
            MultiStep::Finite(m) if k >= m => m + k % m,
            _ => k,
        }
    }

    /// `mod(k, M)` (`k` itself for `M = ∞`).
    pub fn phase(self, k: usize) -> usize {
        match self {
            MultiStep::Finite(m) => k % m,
            MultiStep::Infinite => k,
        }
    }

    /// Whether `s` resets to the measured state at time `k`.
    pub fn resets_at(self, k: usize) -> bool {
        match self {
            MultiStep::Finite(m) => k % m == 0,
            MultiStep::Infinite => false,
        }
    }
}

impl fmt::Display for MultiStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MultiStep::Finite(m) => write!(f, "{m}"),
            MultiStep::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for MultiStep {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MultiStep::Finite(m) => s.serialize_u64(*m as u64),
            MultiStep::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for MultiStep {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("M must be at least 1")),
            Raw::N(m) => Ok(MultiStep::Finite(m as usize)),
            Raw::S(s) if matches!(s.as_str(), "inf" | "infinity" | "∞") => Ok(MultiStep::Infinite),
            Raw::S(s) => Err(serde::de::Error::custom(format!("invalid M {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    Naive,
    Rs,
    If,
    Ms(MultiStep),
}

impl ControllerKind {
    /// Whether the closed loop is guaranteed recursively feasible.
    pub fn is_guaranteed(self) -> bool {
        !matches!(self, ControllerKind::Naive)
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControllerKind::Naive => write!(f, "naive"),
            ControllerKind::Rs => write!(f, "rs"),
            ControllerKind::If => write!(f, "if"),
            ControllerKind::Ms(m) => write!(f, "ms(M={m})"),
        }
    }
}

/// Which stored state a constraint row is written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Measured,
    Nominal,
    Second,
}

/// Constraint data of one step: row `j` reads
/// `g_j c ≤ base_j − coeff_j · v`, with `v` the state named by `source_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintTemplate<T: Real> {
    pub g: Arc<DMatrix<T>>,
    pub base: DVector<T>,
    pub coeff: Arc<DMatrix<T>>,
    pub source: Arc<[Source]>,
}

impl<T: Real> ConstraintTemplate<T> {
    pub fn rows(&self) -> usize {
        self.base.len()
    }

    /// Right-hand side for the given states.
    pub fn rhs(&self, x: &DVector<T>, s: &DVector<T>, z: &DVector<T>) -> DVector<T> {
        let mut h = self.base.clone();
        for j in 0..h.len() {
            let v = match self.source[j] {
                Source::Measured => x,
                Source::Nominal => s,
                Source::Second => z,
            };
            h[j] -= self.coeff.row(j).transpose().dot(v);
        }
        h
    }
}

/// Right-hand-side block: `1 − profile(i + shift)` on the first `rows`
/// rows (`shift = None` means the current time `k`), or a constant.
#[derive(Debug, Clone)]
enum BasePart<T: Real> {
    Stage {
        i: usize,
        rows: usize,
        shift: Option<usize>,
    },
    Fixed(DVector<T>),
}

/// Time-invariant part of a template.
#[derive(Debug, Clone)]
struct Structure<T: Real> {
    g: Arc<DMatrix<T>>,
    coeff: Arc<DMatrix<T>>,
    source: Arc<[Source]>,
    parts: Vec<BasePart<T>>,
}

impl<T: Real> Structure<T> {
    fn base(&self, k: usize, profile: &TighteningProfile<T>) -> DVector<T> {
        let mut base = DVector::zeros(self.g.nrows());
        let mut at = 0;
        for part in &self.parts {
            match part {
                BasePart::Stage { i, rows, shift } => {
                    let idx = i + shift.unwrap_or(k);
                    for j in 0..*rows {
                        base[at + j] = T::one() - profile.value(idx, j);
                    }
                    at += rows;
                }
                BasePart::Fixed(b) => {
                    base.rows_mut(at, b.len()).copy_from(b);
                    at += b.len();
                }
            }
        }
        base
    }
}

struct StructureBuilder<T: Real> {
    g: Vec<DMatrix<T>>,
    coeff: Vec<DMatrix<T>>,
    source: Vec<Source>,
    parts: Vec<BasePart<T>>,
}

impl<T: Real> StructureBuilder<T> {
    fn new() -> Self {
        Self {
            g: Vec::new(),
            coeff: Vec::new(),
            source: Vec::new(),
            parts: Vec::new(),
        }
    }

    fn push(&mut self, g: DMatrix<T>, part: BasePart<T>, coeff: DMatrix<T>, source: Source) {
        self.source.extend(std::iter::repeat_n(source, g.nrows()));
        self.g.push(g);
        self.parts.push(part);
        self.coeff.push(coeff);
    }

    fn finish(self, nc: usize, n: usize) -> Structure<T> {
        let rows: usize = self.g.iter().map(|g| g.nrows()).sum();
        let mut g = DMatrix::zeros(rows, nc);
        let mut coeff = DMatrix::zeros(rows, n);
        let mut at = 0;
        for (gb, cb) in self.g.iter().zip(&self.coeff) {
            let len = gb.nrows();
            g.view_mut((at, 0), (len, nc)).copy_from(gb);
            coeff.view_mut((at, 0), (len, n)).copy_from(cb);
            at += len;
        }
        Structure {
            g: Arc::new(g),
            coeff: Arc::new(coeff),
            source: self.source.into(),
            parts: self.parts,
        }
    }
}

/// `H_f s_N ≤ b_f` in condensed form.
#[derive(Debug, Clone)]
struct TerminalBlock<T: Real> {
    g: DMatrix<T>,
    coeff: DMatrix<T>,
    base: DVector<T>,
}

impl<T: Real> TerminalBlock<T> {
    fn new(set: &TerminalSet<T>, pred: &Prediction<T>) -> Self {
        let h = set.polytope.h();
        let n_idx = pred.horizon;
        Self {
            g: h * &pred.gamma[n_idx],
            coeff: h * &pred.phi_pow[n_idx],
            base: set.polytope.b().clone(),
        }
    }
}

/// Offline data of one controller: profile, terminal sets, condensed QP
/// matrices and the factored Hessian.
#[derive(Debug, Clone)]
pub struct ControllerDesign<T: Real> {
    pub kind: ControllerKind,
    pub horizon: usize,
    /// Current input constraint on `Kx + c_0` from the measured state.
    pub measured_input: bool,
    pub design: ClosedLoopDesign<T>,
    pub cost: CostSpec<T>,
    pub h_u: DMatrix<T>,
    /// Tightening used by the kind: `γ`, `β` or `β̃`.
    pub profile: TighteningProfile<T>,
    /// naive/rs/if: one set. ms (finite): `X_f^MS(j)`, `j = 0..M−1`.
    /// ms (∞): empty.
    pub terminal: Vec<TerminalSet<T>>,
    /// `Z_f^MS`; absent when `N ≥ 2M`.
    pub z_terminal: Option<TerminalSet<T>>,
    pred: Prediction<T>,
    terminal_blocks: Vec<TerminalBlock<T>>,
    z_terminal_block: Option<TerminalBlock<T>>,
    /// One per `M_k` for finite multi-step, otherwise one.
    structures: Vec<Structure<T>>,
    solver: DenseQpSolver<T>,
}

impl<T: Real> ControllerDesign<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: ControllerKind,
        horizon: usize,
        measured_input: bool,
        design: ClosedLoopDesign<T>,
        cost: CostSpec<T>,
        h_u: DMatrix<T>,
        tightening: &Tightening<T>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(SmpcError::config("prediction horizon N must be ≥ 1"));
        }
        if h_u.nrows() != design.rows() - design.r_x {
            return Err(SmpcError::dim("input rows differ from the design's input rows"));
        }
        let n = horizon;
        let (profile, terminal, z_terminal) = match kind {
            ControllerKind::Naive => {
                let p = tightening.gamma.clone();
                let t = build_terminal_set(TerminalSpec { profile: &p, offset: n, design: &design })?;
                (p, vec![t], None)
            }
            ControllerKind::Rs => {
                let p = tightening.beta()?;
                let t = build_terminal_set(TerminalSpec { profile: &p, offset: n, design: &design })?;
                (p, vec![t], None)
            }
            ControllerKind::If => {
                let p = tightening.gamma.clone();
                // γ_max everywhere: any offset in the saturated tail.
                let off = p.k_bar() + 1;
                let t = build_terminal_set(TerminalSpec { profile: &p, offset: off, design: &design })?;
                (p, vec![t], None)
            }
            ControllerKind::Ms(MultiStep::Finite(m)) => {
                if m == 0 {
                    return Err(SmpcError::config("multi-step horizon M must be ≥ 1"));
                }
                let p = tightening.beta_tilde(m)?;
                let offsets: Vec<usize> = (0..m).map(|j| n + j).collect();
                let xs = build_terminal_family(&p, &design, &offsets)?;
                let zf = if n >= 2 * m {
                    None
                } else {
                    Some(build_terminal_set(TerminalSpec {
                        profile: &p,
                        offset: n + 2 * m - 1,
                        design: &design,
                    })?)
                };
                (p, xs, zf)
            }
            ControllerKind::Ms(MultiStep::Infinite) => {
                let p = tightening.gamma.clone();
                let off = p.k_bar() + 1;
                let zf = build_terminal_set(TerminalSpec { profile: &p, offset: off, design: &design })?;
                (p, Vec::new(), Some(zf))
            }
        };
        Self::from_parts(kind, horizon, measured_input, design, cost, h_u, profile, terminal, z_terminal)
    }

    /// Assembles a controller from precomputed profile and terminal sets
    /// (for example ones reloaded from a design artifact).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kind: ControllerKind,
        horizon: usize,
        measured_input: bool,
        design: ClosedLoopDesign<T>,
        cost: CostSpec<T>,
        h_u: DMatrix<T>,
        profile: TighteningProfile<T>,
        terminal: Vec<TerminalSet<T>>,
        z_terminal: Option<TerminalSet<T>>,
    ) -> Result<Self> {
        let expected = match kind {
            ControllerKind::Ms(MultiStep::Finite(m)) => m,
            ControllerKind::Ms(MultiStep::Infinite) => 0,
            _ => 1,
        };
        if terminal.len() != expected {
            return Err(SmpcError::config(format!(
                "{kind} expects {expected} terminal sets, got {}",
                terminal.len()
            )));
        }
        let needs_z = match kind {
            ControllerKind::Ms(MultiStep::Finite(m)) => horizon < 2 * m,
            ControllerKind::Ms(MultiStep::Infinite) => true,
            _ => false,
        };
        if needs_z != z_terminal.is_some() {
            return Err(SmpcError::config(format!("{kind}: Z_f presence does not match N and M")));
        }
        if profile.rows() != design.rows() {
            return Err(SmpcError::dim("profile rows differ from constraint rows"));
        }
        let pred = Prediction::new(&design, &cost, &h_u, horizon);
        let terminal_blocks = terminal.iter().map(|t| TerminalBlock::new(t, &pred)).collect();
        let z_terminal_block = z_terminal.as_ref().map(|t| TerminalBlock::new(t, &pred));
        let solver = DenseQpSolver::new(&pred.hessian)?;
        let mut out = Self {
            kind,
            horizon,
            measured_input: matches!(kind, ControllerKind::Rs) || measured_input,
            design,
            cost,
            h_u,
            profile,
            terminal,
            z_terminal,
            pred,
            terminal_blocks,
            z_terminal_block,
            structures: Vec::new(),
            solver,
        };
        let count = match kind {
            ControllerKind::Ms(MultiStep::Finite(m)) => 2 * m,
            _ => 1,
        };
        out.structures = (0..count).map(|i| out.build_structure(i)).collect();
        Ok(out)
    }

    /// Whether every terminal set in use is nonempty and the profile
    /// saturation stays below 1 on all rows.
    pub fn is_feasible_design(&self) -> bool {
        self.profile.saturation.iter().all(|s| *s < T::one())
            && self.terminal.iter().all(|t| !t.empty)
            && self.z_terminal.as_ref().is_none_or(|t| !t.empty)
    }

    pub fn hessian(&self) -> &DMatrix<T> {
        &self.pred.hessian
    }

    fn nc(&self) -> usize {
        self.pred.m * self.horizon
    }

    /// Tightened rows for prediction indices `range` written in `source`,
    /// with tightening index `i + shift`. At `i = 0` the input rows are
    /// dropped when `drop_inputs_at_zero`.
    fn push_stage_rows(
        &self,
        b: &mut StructureBuilder<T>,
        range: std::ops::Range<usize>,
        shift: Option<usize>,
        source: Source,
        drop_inputs_at_zero: bool,
    ) {
        let r_x = self.design.r_x;
        let r = self.design.rows();
        for i in range {
            let rows = if i == 0 && drop_inputs_at_zero { r_x } else { r };
            b.push(
                self.pred.cc[i].rows(0, rows).into_owned(),
                BasePart::Stage { i, rows, shift },
                self.pred.cs[i].rows(0, rows).into_owned(),
                source,
            );
        }
    }

    fn push_terminal(b: &mut StructureBuilder<T>, blk: &TerminalBlock<T>, source: Source) {
        b.push(blk.g.clone(), BasePart::Fixed(blk.base.clone()), blk.coeff.clone(), source);
    }

    fn push_input_now(&self, b: &mut StructureBuilder<T>) {
        let ru = self.h_u.nrows();
        if ru == 0 {
            return;
        }
        b.push(
            self.pred.hu_e0.clone(),
            BasePart::Fixed(DVector::from_element(ru, T::one())),
            &self.h_u * &self.design.k,
            Source::Measured,
        );
    }

    /// Structure `index`: `M_k` for finite multi-step, otherwise 0.
    fn build_structure(&self, index: usize) -> Structure<T> {
        let n = self.horizon;
        let mut b = StructureBuilder::new();
        match self.kind {
            ControllerKind::Naive => {
                self.push_stage_rows(&mut b, 0..n, Some(0), Source::Measured, false);
                Self::push_terminal(&mut b, &self.terminal_blocks[0], Source::Measured);
            }
            ControllerKind::Rs => {
                self.push_stage_rows(&mut b, 1..n, Some(0), Source::Measured, false);
                Self::push_terminal(&mut b, &self.terminal_blocks[0], Source::Measured);
                self.push_input_now(&mut b);
            }
            ControllerKind::If => {
                self.push_stage_rows(&mut b, 0..n, None, Source::Nominal, self.measured_input);
                Self::push_terminal(&mut b, &self.terminal_blocks[0], Source::Nominal);
                if self.measured_input {
                    self.push_input_now(&mut b);
                }
            }
            ControllerKind::Ms(MultiStep::Finite(m)) => {
                let mk = index;
                let ph = mk % m;
                let split = (2 * m - mk).min(n);
                self.push_stage_rows(&mut b, 0..split, Some(mk), Source::Second, self.measured_input);
                self.push_stage_rows(&mut b, split..n, Some(ph), Source::Nominal, false);
                Self::push_terminal(&mut b, &self.terminal_blocks[ph], Source::Nominal);
                if let Some(blk) = &self.z_terminal_block {
                    Self::push_terminal(&mut b, blk, Source::Second);
                }
                if self.measured_input {
                    self.push_input_now(&mut b);
                }
            }
            ControllerKind::Ms(MultiStep::Infinite) => {
                self.push_stage_rows(&mut b, 0..n, None, Source::Second, self.measured_input);
                if let Some(blk) = &self.z_terminal_block {
                    Self::push_terminal(&mut b, blk, Source::Second);
                }
                if self.measured_input {
                    self.push_input_now(&mut b);
                }
            }
        }
        b.finish(self.nc(), self.design.n())
    }

    /// Constraint data of the problem solved at time `k`.
    pub fn template(&self, k: usize) -> ConstraintTemplate<T> {
        let st = match self.kind {
            ControllerKind::Ms(ms @ MultiStep::Finite(_)) => &self.structures[ms.m_k(k)],
            _ => &self.structures[0],
        };
        ConstraintTemplate {
            g: st.g.clone(),
            base: st.base(k, &self.profile),
            coeff: st.coeff.clone(),
            source: st.source.clone(),
        }
    }

    /// QP at time `k` for measured state `x` and nominal states `s`, `z`.
    pub fn problem(&self, k: usize, x: &DVector<T>, s: &DVector<T>, z: &DVector<T>) -> QpProblem<T> {
        let tpl = self.template(k);
        let h = tpl.rhs(x, s, z);
        QpProblem::new(self.pred.hessian.clone(), self.pred.linear_term(x)).with_inequalities((*tpl.g).clone(), h)
    }

    /// `J(x, c)` without the constant stage-cost offset.
    pub fn cost_of(&self, x: &DVector<T>, c: &[DVector<T>]) -> T {
        ocp_cost(x, c, &self.design, &self.cost)
    }
}

#[derive(Debug, Clone)]
pub struct StepResult<T: Real> {
    pub u: DVector<T>,
    /// Optimal `c*_{·|k}` (zeros on fallback).
    pub c: Vec<DVector<T>>,
    pub feasible: bool,
    pub qp_cost: T,
    pub active_set: usize,
    pub iterations: usize,
}

/// Shifted previous optimum checked against the current problem.
#[derive(Debug, Clone)]
pub struct CandidateReport<T: Real> {
    pub c: Vec<DVector<T>>,
    pub slack: DVector<T>,
    pub min_slack: T,
    pub feasible: bool,
    pub cost: T,
}

/// Per-trajectory controller state.
#[derive(Debug, Clone)]
pub struct ControllerState<T: Real> {
    pub design: Arc<ControllerDesign<T>>,
    pub k: usize,
    pub s: DVector<T>,
    pub z: DVector<T>,
    pub last_c: Option<Vec<DVector<T>>>,
    warm: Option<Vec<usize>>,
}

impl<T: Real> ControllerState<T> {
    /// `s(0) = z(0) = x(0)`.
    pub fn new(design: Arc<ControllerDesign<T>>, x0: &DVector<T>) -> Self {
        Self {
            design,
            k: 0,
            s: x0.clone(),
            z: x0.clone(),
            last_c: None,
            warm: None,
        }
    }

    pub fn kind(&self) -> ControllerKind {
        self.design.kind
    }

    pub fn template(&self) -> ConstraintTemplate<T> {
        self.design.template(self.k)
    }

    pub fn problem(&self, x: &DVector<T>) -> QpProblem<T> {
        self.design.problem(self.k, x, &self.s, &self.z)
    }

    /// Solves the problem at the current time. Infeasibility falls back to
    /// `u = Kx` for the naive controller and is an error for the others.
    pub fn step(&mut self, x: &DVector<T>) -> Result<StepResult<T>> {
        let d = &*self.design;
        let p = self.problem(x);
        let outcome = d.solver.solve_warm(&p, self.warm.as_deref())?;
        match outcome {
            QpOutcome::Solved(sol) => {
                let c = d.pred.unstack(&sol.z);
                let u = &d.design.k * x + &c[0];
                let qp_cost = d.cost_of(x, &c);
                self.warm = Some(sol.warm.clone());
                self.last_c = Some(c.clone());
                Ok(StepResult {
                    u,
                    c,
                    feasible: true,
                    qp_cost,
                    active_set: sol.active.len(),
                    iterations: sol.iterations,
                })
            }
            QpOutcome::Infeasible => {
                self.last_c = None;
                self.warm = None;
                match d.kind {
                    ControllerKind::Naive => {
                        let m = d.design.m();
                        let c = vec![DVector::zeros(m); d.horizon];
                        Ok(StepResult {
                            u: &d.design.k * x,
                            qp_cost: d.cost_of(x, &c),
                            c,
                            feasible: false,
                            active_set: 0,
                            iterations: 0,
                        })
                    }
                    kind if self.k == 0 => Err(SmpcError::InitialInfeasible(format!(
                        "{kind} problem infeasible at k = 0"
                    ))),
                    kind => Err(SmpcError::InvariantViolation {
                        step: self.k,
                        message: format!("{kind} problem infeasible after a feasible step"),
                    }),
                }
            }
        }
    }

    /// Nominal-state update after applying `c0` and measuring `x_next`.
    pub fn advance(&mut self, x_next: &DVector<T>, c0: &DVector<T>) {
        let d = &self.design.design;
        let prop = |v: &DVector<T>| &d.phi * v + &d.b * c0;
        match self.design.kind {
            ControllerKind::Naive | ControllerKind::Rs => {
                self.s = x_next.clone();
                self.z = x_next.clone();
            }
            ControllerKind::If | ControllerKind::Ms(MultiStep::Infinite) => {
                self.s = prop(&self.s);
                self.z = self.s.clone();
            }
            ControllerKind::Ms(ms) => {
                if ms.resets_at(self.k + 1) {
                    self.z = prop(&self.s);
                    self.s = x_next.clone();
                } else {
                    self.z = prop(&self.z);
                    self.s = prop(&self.s);
                }
            }
        }
        self.k += 1;
    }

    /// The previous optimum shifted by one step (`c_{i|k} = c*_{i+1|k−1}`,
    /// padded with 0), evaluated on the current problem.
    pub fn candidate(&self, x: &DVector<T>) -> Option<CandidateReport<T>> {
        let prev = self.last_c.as_ref()?;
        let m = self.design.design.m();
        let mut c: Vec<DVector<T>> = prev.iter().skip(1).cloned().collect();
        c.push(DVector::zeros(m));
        let tpl = self.template();
        let h = tpl.rhs(x, &self.s, &self.z);
        let slack = h - &*tpl.g * self.design.pred.stack(&c);
        let min_slack = slack.iter().fold(T::infinity(), |a, b| a.min(*b));
        Some(CandidateReport {
            cost: self.design.cost_of(x, &c),
            feasible: min_slack >= -T::lit(CANDIDATE_TOL),
            c,
            slack,
            min_slack,
        })
    }
}
