//! Dense two-phase simplex.
//!
//! Inequality-form programs `min cᵀx s.t. Ax ≤ b` with free `x` are solved
//! through their standard-form dual `min bᵀy s.t. Aᵀy = −c, y ≥ 0`. For the
//! programs built in this crate the number of primal variables (state
//! dimension, or horizon length) is much smaller than the number of rows, so
//! the dual tableau is short and wide.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmpcError};
use crate::scalar::Real;

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;
/// Relative objective progress below which a pivot counts as degenerate.
const STALL_TOL: f64 = 1e-10;
/// Pivots between reinversions of the tableau.
const REFRESH_EVERY: usize = 32;
/// Consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_SWITCH: usize = 50;

#[derive(Debug, Clone)]
pub struct LpSolution<T: Real> {
    pub x: DVector<T>,
    pub objective: T,
    /// Nonnegative multiplier per inequality row.
    pub multipliers: DVector<T>,
    /// Active rows of the optimal basis; reusable as a warm start.
    pub basis: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub enum LpOutcome<T: Real> {
    Optimal(LpSolution<T>),
    Infeasible,
    Unbounded,
}

impl<T: Real> LpOutcome<T> {
    pub fn optimal(self) -> Option<LpSolution<T>> {
        match self {
            LpOutcome::Optimal(s) => Some(s),
            _ => None,
        }
    }
}

/// `min cᵀx` subject to `Ax ≤ b`, `x` free.
pub fn minimize<T: Real>(c: &DVector<T>, a: &DMatrix<T>, b: &DVector<T>) -> Result<LpOutcome<T>> {
    minimize_warm(c, a, b, None)
}

/// `max cᵀx` subject to `Ax ≤ b`, `x` free.
pub fn maximize<T: Real>(c: &DVector<T>, a: &DMatrix<T>, b: &DVector<T>) -> Result<LpOutcome<T>> {
    Ok(match minimize(&(-c), a, b)? {
        LpOutcome::Optimal(mut s) => {
            s.objective = -s.objective;
            LpOutcome::Optimal(s)
        }
        other => other,
    })
}

/// As [`minimize`], optionally starting from a previously optimal basis.
pub fn minimize_warm<T: Real>(
    c: &DVector<T>,
    a: &DMatrix<T>,
    b: &DVector<T>,
    warm: Option<&[usize]>,
) -> Result<LpOutcome<T>> {
    let n = a.ncols();
    let m = a.nrows();
    if c.len() != n || b.len() != m {
        return Err(SmpcError::dim(format!(
            "LP with {m}×{n} rows, cost of length {}, rhs of length {}",
            c.len(),
            b.len()
        )));
    }
    let feas = T::tol(FEAS_TOL);

    // Normalize rows; zero rows are either trivially satisfied or infeasible.
    let mut keep = Vec::with_capacity(m);
    let mut scale = Vec::with_capacity(m);
    for i in 0..m {
        let norm = a.row(i).norm();
        if norm <= T::default_epsilon() {
            if b[i] < -feas {
                return Ok(LpOutcome::Infeasible);
            }
        } else {
            keep.push(i);
            scale.push(norm);
        }
    }
    let rows = keep.len();
    let mut at = DMatrix::<T>::zeros(n, rows);
    let mut bs = DVector::<T>::zeros(rows);
    for (k, &i) in keep.iter().enumerate() {
        for j in 0..n {
            at[(j, k)] = a[(i, j)] / scale[k];
        }
        bs[k] = b[i] / scale[k];
    }

    if n == 0 {
        // Nothing to optimize; feasibility already settled above.
        return Ok(LpOutcome::Optimal(LpSolution {
            x: DVector::zeros(0),
            objective: T::zero(),
            multipliers: DVector::zeros(m),
            basis: Vec::new(),
            iterations: 0,
        }));
    }

    let warm_cols: Option<Vec<usize>> = warm.map(|w| {
        w.iter()
            .filter_map(|orig| keep.iter().position(|k| k == orig))
            .collect()
    });

    let dual = solve_standard(&at, &(-c), &bs, warm_cols.as_deref())?;
    match dual {
        StandardOutcome::Optimal(sol) => {
            let mut multipliers = DVector::<T>::zeros(m);
            for (k, &i) in keep.iter().enumerate() {
                multipliers[i] = sol.y[k] / scale[k];
            }
            let x = sol.duals;
            let objective = c.dot(&x);
            let basis = sol.basis.iter().map(|&k| keep[k]).collect();
            Ok(LpOutcome::Optimal(LpSolution {
                x,
                objective,
                multipliers,
                basis,
                iterations: sol.iterations,
            }))
        }
        StandardOutcome::Unbounded => Ok(LpOutcome::Infeasible),
        StandardOutcome::Infeasible => {
            if primal_infeasible(&at, &bs)? {
                Ok(LpOutcome::Infeasible)
            } else {
                Ok(LpOutcome::Unbounded)
            }
        }
    }
}

/// Farkas test: `Ax ≤ b` is empty iff some `y ≥ 0` has `Aᵀy = 0`, `bᵀy < 0`.
/// `at` holds the (normalized) rows as columns.
fn primal_infeasible<T: Real>(at: &DMatrix<T>, b: &DVector<T>) -> Result<bool> {
    let n = at.nrows();
    let rows = at.ncols();
    let mut eq = DMatrix::<T>::zeros(n + 1, rows + 1);
    eq.view_mut((0, 0), (n, rows)).copy_from(at);
    for k in 0..=rows {
        eq[(n, k)] = T::one();
    }
    let mut rhs = DVector::<T>::zeros(n + 1);
    rhs[n] = T::one();
    let mut cost = DVector::<T>::zeros(rows + 1);
    cost.rows_mut(0, rows).copy_from(b);
    match solve_standard(&eq, &rhs, &cost, None)? {
        StandardOutcome::Optimal(sol) => Ok(sol.objective < -T::tol(FEAS_TOL)),
        // The normalized Farkas system is always feasible and bounded.
        _ => Err(SmpcError::numerical("Farkas subproblem failed")),
    }
}

#[derive(Debug, Clone)]
pub struct StandardSolution<T: Real> {
    pub y: DVector<T>,
    pub objective: T,
    /// Equality-constraint multipliers `π` with `Aᵀπ ≤ c` at optimality.
    pub duals: DVector<T>,
    pub basis: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub enum StandardOutcome<T: Real> {
    Optimal(StandardSolution<T>),
    Infeasible,
    Unbounded,
}

/// `min cᵀy` subject to `Ay = b`, `y ≥ 0`.
pub fn solve_standard<T: Real>(
    a: &DMatrix<T>,
    b: &DVector<T>,
    c: &DVector<T>,
    warm: Option<&[usize]>,
) -> Result<StandardOutcome<T>> {
    let mut tab = Tableau::new(a, b)?;
    let mut iterations = 0;
    let warmed = match warm {
        Some(basis) if basis.len() == a.nrows() => tab.install_basis(basis),
        _ => false,
    };
    if !warmed {
        tab.set_phase_one_costs();
        iterations += tab.run()?.1;
        if tab.objective_value() > T::tol(FEAS_TOL) * (T::one() + tab.rhs_scale) {
            return Ok(StandardOutcome::Infeasible);
        }
        tab.expel_artificials();
    }
    tab.set_costs(c);
    let (bounded, it) = tab.run()?;
    iterations += it;
    if !bounded {
        return Ok(StandardOutcome::Unbounded);
    }
    let mut y = DVector::<T>::zeros(tab.cols);
    for (i, &j) in tab.basis.iter().enumerate() {
        if j < tab.cols {
            y[j] = tab.rhs(i);
        }
    }
    let duals = DVector::from_iterator(
        tab.rows,
        (0..tab.rows).map(|i| -tab.obj[tab.cols + i] * tab.sign[i]),
    );
    let basis = tab.basis.iter().copied().filter(|&j| j < tab.cols).collect();
    Ok(StandardOutcome::Optimal(StandardSolution {
        objective: c.dot(&y),
        y,
        duals,
        basis,
        iterations,
    }))
}

/// Row-major tableau `[A | I | b]` with a reduced-cost row.
struct Tableau<T: Real> {
    rows: usize,
    cols: usize,
    width: usize,
    /// Initial tableau, kept for reinversion.
    orig: Vec<T>,
    data: Vec<T>,
    obj: Vec<T>,
    basis: Vec<usize>,
    sign: Vec<T>,
    rhs_scale: T,
    /// Phase-two costs; `None` during phase one.
    costs: Option<DVector<T>>,
}

impl<T: Real> Tableau<T> {
    fn new(a: &DMatrix<T>, b: &DVector<T>) -> Result<Self> {
        let rows = a.nrows();
        let cols = a.ncols();
        if b.len() != rows {
            return Err(SmpcError::dim("standard-form rhs length"));
        }
        let width = cols + rows + 1;
        let mut data = vec![T::zero(); rows * width];
        let mut sign = vec![T::one(); rows];
        let mut rhs_scale = T::zero();
        for i in 0..rows {
            let s = if b[i] < T::zero() { -T::one() } else { T::one() };
            sign[i] = s;
            let row = &mut data[i * width..(i + 1) * width];
            for j in 0..cols {
                row[j] = a[(i, j)] * s;
            }
            row[cols + i] = T::one();
            row[width - 1] = b[i] * s;
            rhs_scale = rhs_scale.max(b[i].abs());
        }
        Ok(Self {
            rows,
            cols,
            width,
            orig: data.clone(),
            data,
            obj: vec![T::zero(); width],
            basis: (cols..cols + rows).collect(),
            sign,
            rhs_scale,
            costs: None,
        })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.width + j]
    }

    #[inline]
    fn rhs(&self, i: usize) -> T {
        self.at(i, self.width - 1)
    }

    fn objective_value(&self) -> T {
        -self.obj[self.width - 1]
    }

    /// Recomputes the tableau for `basis` from the initial data; false if
    /// the basis matrix is singular.
    fn reinvert(&mut self, basis: &[usize]) -> bool {
        let m = self.rows;
        let w = self.width;
        let bmat = DMatrix::<T>::from_fn(m, m, |i, k| self.orig[i * w + basis[k]]);
        let Some(inv) = bmat.try_inverse() else {
            return false;
        };
        let mut next = vec![T::zero(); m * w];
        for i in 0..m {
            let dst = &mut next[i * w..(i + 1) * w];
            for k in 0..m {
                let f = inv[(i, k)];
                if f == T::zero() {
                    continue;
                }
                let src = &self.orig[k * w..(k + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += f * *s;
                }
            }
            for &j in basis {
                dst[j] = T::zero();
            }
            dst[basis[i]] = T::one();
        }
        self.data = next;
        self.basis = basis.to_vec();
        self.reprice();
        true
    }

    /// Reinverts the current basis to shed accumulated rounding error.
    fn refresh(&mut self) {
        let basis = self.basis.clone();
        if self.reinvert(&basis) {
            self.clamp_rhs();
        }
    }

    /// Replaces the starting basis by `basis`; false if it is singular or
    /// not primal feasible.
    fn install_basis(&mut self, basis: &[usize]) -> bool {
        if basis.iter().any(|&j| j >= self.cols) {
            return false;
        }
        let saved = (self.data.clone(), self.basis.clone());
        if !self.reinvert(basis) {
            return false;
        }
        let w = self.width;
        let tol = T::tol(FEAS_TOL) * (T::one() + self.rhs_scale);
        if (0..self.rows).any(|i| self.data[i * w + w - 1] < -tol) {
            (self.data, self.basis) = saved;
            self.reprice();
            return false;
        }
        self.clamp_rhs();
        true
    }

    fn reprice(&mut self) {
        match self.costs.take() {
            Some(c) => self.set_costs(&c),
            None => self.set_phase_one_costs(),
        }
    }

    fn set_phase_one_costs(&mut self) {
        self.costs = None;
        let w = self.width;
        self.obj.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..self.rows {
            if self.basis[i] >= self.cols {
                for j in 0..w {
                    if j < self.cols || j == w - 1 {
                        self.obj[j] -= self.data[i * w + j];
                    }
                }
            }
        }
    }

    fn set_costs(&mut self, c: &DVector<T>) {
        self.costs = Some(c.clone());
        let w = self.width;
        for j in 0..w {
            self.obj[j] = if j < self.cols { c[j] } else { T::zero() };
        }
        for i in 0..self.rows {
            let bj = self.basis[i];
            let cb = if bj < self.cols { c[bj] } else { T::zero() };
            if cb != T::zero() {
                for j in 0..w {
                    self.obj[j] -= cb * self.data[i * w + j];
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, e: usize) {
        let w = self.width;
        let p = self.data[r * w + e];
        for j in 0..w {
            self.data[r * w + j] /= p;
        }
        let (before, rest) = self.data.split_at_mut(r * w);
        let (prow, after) = rest.split_at_mut(w);
        for row in before.chunks_mut(w).chain(after.chunks_mut(w)) {
            let f = row[e];
            if f != T::zero() {
                for (d, s) in row.iter_mut().zip(prow.iter()) {
                    *d -= f * *s;
                }
                row[e] = T::zero();
            }
        }
        let f = self.obj[e];
        if f != T::zero() {
            for (d, s) in self.obj.iter_mut().zip(prow.iter()) {
                *d -= f * *s;
            }
            self.obj[e] = T::zero();
        }
        self.basis[r] = e;
    }

    /// Minimum ratio, ties broken by the smallest basic index.
    fn bland_ratio(&self, e: usize, piv_tol: T) -> Option<(usize, T)> {
        let mut leave: Option<(usize, T)> = None;
        for i in 0..self.rows {
            let a = self.at(i, e);
            if a > piv_tol {
                let ratio = self.rhs(i) / a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((li, lr)) => {
                        let tie = (ratio - lr).abs() <= piv_tol * (T::one() + lr.abs());
                        let better = if tie { self.basis[i] < self.basis[li] } else { ratio < lr };
                        Some(if better { (i, ratio) } else { (li, lr) })
                    }
                };
            }
        }
        leave
    }

    /// Two-pass ratio test: among rows within `slack` of the minimum ratio,
    /// take the largest pivot.
    fn harris_ratio(&self, e: usize, piv_tol: T, slack: T) -> Option<(usize, T)> {
        let mut bound: Option<T> = None;
        for i in 0..self.rows {
            let a = self.at(i, e);
            if a > piv_tol {
                let r = (self.rhs(i) + slack) / a;
                bound = Some(bound.map_or(r, |b: T| b.min(r)));
            }
        }
        let bound = bound?;
        let mut leave: Option<(usize, T, T)> = None;
        for i in 0..self.rows {
            let a = self.at(i, e);
            if a > piv_tol {
                let ratio = self.rhs(i) / a;
                if ratio <= bound && leave.is_none_or(|(_, _, la)| a > la) {
                    leave = Some((i, ratio, a));
                }
            }
        }
        leave.map(|(i, r, _)| (i, r))
    }

    /// Zeroes basic values that drifted slightly negative.
    fn clamp_rhs(&mut self) {
        let w = self.width;
        let tol = T::tol(FEAS_TOL) * (T::one() + self.rhs_scale);
        for i in 0..self.rows {
            let v = &mut self.data[i * w + w - 1];
            if *v < T::zero() && *v > -tol {
                *v = T::zero();
            }
        }
    }

    /// Pivots to optimality. Returns `(bounded, iterations)`.
    fn run(&mut self) -> Result<(bool, usize)> {
        let piv_tol = T::tol(PIVOT_TOL);
        let cost_scale = self.obj[..self.cols]
            .iter()
            .fold(T::one(), |a, v| a.max(v.abs()));
        let cost_tol = T::tol(COST_TOL) * cost_scale;
        let max_iter = 50 * (self.rows + self.cols) + 1000;
        let stall_tol = T::tol(STALL_TOL);
        let mut degenerate = 0usize;
        let mut bland = false;
        let mut since_refresh = 0usize;
        let harris = T::tol(FEAS_TOL) * (T::one() + self.rhs_scale);
        for iter in 0..max_iter {
            if since_refresh >= REFRESH_EVERY {
                self.refresh();
                since_refresh = 0;
            }
            // Once on, Bland's rule stays on: tolerance-level progress
            // between degenerate pivots can otherwise restart a cycle.
            bland |= degenerate >= DEGENERATE_SWITCH;
            let mut enter = None;
            let mut best = -cost_tol;
            for j in 0..self.cols {
                let d = self.obj[j];
                if d < best {
                    enter = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(e) = enter else {
                if since_refresh > 0 {
                    self.refresh();
                    since_refresh = 0;
                    continue;
                }
                return Ok((true, iter));
            };
            let leave = if bland {
                self.bland_ratio(e, piv_tol)
            } else {
                self.harris_ratio(e, piv_tol, harris)
            };
            let Some((r, ratio)) = leave else {
                return Ok((false, iter));
            };
            // Progress below noise level counts as a degenerate pivot.
            let gain = -self.obj[e] * ratio.max(T::zero());
            if gain <= stall_tol * (T::one() + self.objective_value().abs()) {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(r, e);
            self.clamp_rhs();
            since_refresh += 1;
        }
        Err(SmpcError::numerical(format!(
            "simplex exceeded {max_iter} pivots"
        )))
    }

    /// After phase one, pivots artificial columns out of the basis where a
    /// structural column can replace them. Rows where none can are
    /// linearly dependent and stay with a zero-valued artificial.
    fn expel_artificials(&mut self) {
        let piv_tol = T::tol(1e-9);
        for i in 0..self.rows {
            if self.basis[i] < self.cols {
                continue;
            }
            let mut best: Option<(usize, T)> = None;
            for j in 0..self.cols {
                let v = self.at(i, j).abs();
                if v > piv_tol && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                self.pivot(i, j);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lp(rows: &[&[f64]], b: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let n = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        (
            DMatrix::from_row_slice(rows.len(), n, &flat),
            DVector::from_column_slice(b),
        )
    }

    #[test]
    fn box_maximum_is_at_a_vertex() {
        let (a, b) = lp(
            &[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]],
            &[1.0, 1.0, 2.0, 2.0],
        );
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let sol = maximize(&c, &a, &b).unwrap().optimal().unwrap();
        assert_relative_eq!(sol.objective, 3.0, epsilon = 1e-10);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn multipliers_satisfy_stationarity() {
        let (a, b) = lp(
            &[&[1.0, 2.0], &[3.0, -1.0], &[-1.0, 0.0], &[0.0, -1.0]],
            &[4.0, 3.0, 0.0, 0.0],
        );
        let c = DVector::from_vec(vec![-1.0, -1.0]);
        let sol = minimize(&c, &a, &b).unwrap().optimal().unwrap();
        let grad = &c + a.transpose() * &sol.multipliers;
        assert!(grad.amax() < 1e-10);
        assert!(sol.multipliers.iter().all(|&l| l >= -1e-12));
        let slack = &b - &a * &sol.x;
        for i in 0..4 {
            assert!(slack[i] >= -1e-10);
            assert!((slack[i] * sol.multipliers[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn unbounded_and_infeasible_are_distinguished() {
        let (a, b) = lp(&[&[1.0, 0.0]], &[1.0]);
        let c = DVector::from_vec(vec![-1.0, 0.0]);
        assert!(matches!(minimize(&c, &a, &b).unwrap(), LpOutcome::Optimal(_)));
        let c = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(minimize(&c, &a, &b).unwrap(), LpOutcome::Unbounded));
        let (a, b) = lp(&[&[1.0], &[-1.0]], &[0.0, -1.0]);
        let c = DVector::from_vec(vec![1.0]);
        assert!(matches!(minimize(&c, &a, &b).unwrap(), LpOutcome::Infeasible));
    }

    #[test]
    fn zero_row_with_negative_rhs_is_infeasible() {
        let (a, b) = lp(&[&[0.0, 0.0], &[1.0, 1.0]], &[-1.0, 1.0]);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(minimize(&c, &a, &b).unwrap(), LpOutcome::Infeasible));
    }

    #[test]
    fn warm_start_reproduces_cold_solution() {
        let (a, b) = lp(
            &[&[1.0, 2.0], &[3.0, -1.0], &[-1.0, 0.0], &[0.0, -1.0], &[1.0, 1.0]],
            &[4.0, 3.0, 0.0, 0.0, 2.5],
        );
        let c = DVector::from_vec(vec![-1.0, -2.0]);
        let cold = minimize(&c, &a, &b).unwrap().optimal().unwrap();
        let b2 = DVector::from_vec(vec![4.1, 3.0, 0.0, 0.0, 2.6]);
        let warm = minimize_warm(&c, &a, &b2, Some(&cold.basis))
            .unwrap()
            .optimal()
            .unwrap();
        let fresh = minimize(&c, &a, &b2).unwrap().optimal().unwrap();
        assert_relative_eq!(warm.objective, fresh.objective, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_vertex_terminates() {
        // Many constraints through the same optimal vertex.
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for k in 0..20 {
            let t = k as f64 * 0.05;
            rows.push(vec![1.0 + t, 1.0 - t]);
            rhs.push(2.0);
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let a = DMatrix::from_row_slice(20, 2, &flat);
        let b = DVector::from_vec(rhs);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let sol = maximize(&c, &a, &b).unwrap().optimal().unwrap();
        assert_relative_eq!(sol.objective, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn standard_form_duals_match_textbook_example() {
        // min -x1 - x2  s.t. x1 + s1 = 1, x2 + s2 = 1
        let a = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let c = DVector::from_vec(vec![-1.0, -1.0, 0.0, 0.0]);
        let StandardOutcome::Optimal(sol) = solve_standard(&a, &b, &c, None).unwrap() else {
            panic!("expected optimum");
        };
        assert_relative_eq!(sol.objective, -2.0, epsilon = 1e-12);
        assert_relative_eq!(sol.duals[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.duals[1], -1.0, epsilon = 1e-12);
    }
}
