//! Dense convex QP solver.
//!
//! ```text
//!     minimize     ½ zᵀHz + fᵀz
//!     subject to   Gz ≤ h
//!                  Az = b
//! ```
//!
//! Strictly convex problems use the Goldfarb–Idnani dual active-set method,
//! which starts from the unconstrained minimizer and adds violated
//! constraints one at a time; infeasibility is detected when a violated
//! constraint can be reached neither by a primal nor by a dual step. A zero
//! Hessian is dispatched to the simplex solver. Singular, nonzero PSD
//! Hessians are handled by proximal-point iterations on `H + ρI`.
//!
//! The Hessian factorization is held by [`DenseQpSolver`] so controllers
//! whose Hessian never changes factor it once.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SmpcError};
use crate::linalg::{is_positive_semidefinite, symmetrize};
use crate::lp::{self, LpOutcome};
use crate::scalar::Real;

/// Primal feasibility tolerance on unit-normalized rows.
const FEAS_TOL: f64 = 1e-10;
const PROX_TOL: f64 = 1e-11;
const PROX_MAX_ITER: usize = 5_000;

/// A QP instance. Also the layout of the optional JSON debug dump
/// `{H, f, G, h, A, b}`.
#[derive(Debug, Clone)]
pub struct QpProblem<T: Real> {
    pub hessian: DMatrix<T>,
    pub linear: DVector<T>,
    pub ineq: DMatrix<T>,
    pub ineq_rhs: DVector<T>,
    pub eq: DMatrix<T>,
    pub eq_rhs: DVector<T>,
}

impl<T: Real> QpProblem<T> {
    pub fn new(hessian: DMatrix<T>, linear: DVector<T>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            ineq: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            eq: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, g: DMatrix<T>, h: DVector<T>) -> Self {
        self.ineq = g;
        self.ineq_rhs = h;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<T>, b: DVector<T>) -> Self {
        self.eq = a;
        self.eq_rhs = b;
        self
    }

    pub fn objective(&self, z: &DVector<T>) -> T {
        (z.dot(&(&self.hessian * z))) * T::lit(0.5) + self.linear.dot(z)
    }

    /// JSON dump for cross-checking with external solvers.
    pub fn to_json(&self) -> serde_json::Value {
        fn rows<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().map(|v| v.as_f64()).collect())
                .collect()
        }
        fn vec<T: Real>(v: &DVector<T>) -> Vec<f64> {
            v.iter().map(|x| x.as_f64()).collect()
        }
        serde_json::json!({
            "H": rows(&self.hessian),
            "f": vec(&self.linear),
            "G": rows(&self.ineq),
            "h": vec(&self.ineq_rhs),
            "A": rows(&self.eq),
            "b": vec(&self.eq_rhs),
        })
    }
}

/// KKT residual components of a candidate primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual<T: Real> {
    /// `‖Hz + f + Gᵀλ + Aᵀν‖∞`
    pub stationarity: T,
    /// Largest violation of `Gz ≤ h` and `|Az − b|`.
    pub primal: T,
    /// Largest negative part of `λ`.
    pub dual: T,
    /// `max |λᵢ (hᵢ − Gᵢz)|`
    pub complementarity: T,
}

impl<T: Real> KktResidual<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residual<T: Real>(
    p: &QpProblem<T>,
    z: &DVector<T>,
    lambda: &DVector<T>,
    nu: &DVector<T>,
) -> KktResidual<T> {
    let mut grad = &p.hessian * z + &p.linear;
    if p.ineq.nrows() > 0 {
        grad += p.ineq.transpose() * lambda;
    }
    if p.eq.nrows() > 0 {
        grad += p.eq.transpose() * nu;
    }
    let slack = &p.ineq_rhs - &p.ineq * z;
    let eq_res = &p.eq * z - &p.eq_rhs;
    let primal = slack
        .iter()
        .map(|s| (-*s).max(T::zero()))
        .chain(eq_res.iter().map(|e| e.abs()))
        .fold(T::zero(), |a, b| a.max(b));
    let dual = lambda
        .iter()
        .map(|l| (-*l).max(T::zero()))
        .fold(T::zero(), |a, b| a.max(b));
    let complementarity = lambda
        .iter()
        .zip(slack.iter())
        .map(|(l, s)| (*l * *s).abs())
        .fold(T::zero(), |a, b| a.max(b));
    KktResidual {
        stationarity: grad.amax(),
        primal,
        dual,
        complementarity,
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution<T: Real> {
    pub z: DVector<T>,
    pub objective: T,
    pub ineq_multipliers: DVector<T>,
    pub eq_multipliers: DVector<T>,
    /// Inequality rows in the final active set.
    pub active: Vec<usize>,
    /// Warm-start data for the next [`DenseQpSolver::solve_warm`] call.
    pub warm: Vec<usize>,
    pub iterations: usize,
    pub kkt: KktResidual<T>,
}

#[derive(Debug, Clone)]
pub enum QpOutcome<T: Real> {
    Solved(QpSolution<T>),
    /// No point satisfies the constraints.
    Infeasible,
}

impl<T: Real> QpOutcome<T> {
    pub fn solution(self) -> Option<QpSolution<T>> {
        match self {
            QpOutcome::Solved(s) => Some(s),
            QpOutcome::Infeasible => None,
        }
    }
}

/// One-shot solve.
pub fn solve_qp<T: Real>(p: &QpProblem<T>) -> Result<QpOutcome<T>> {
    DenseQpSolver::new(&p.hessian)?.solve(p)
}

#[derive(Debug, Clone)]
enum Factor<T: Real> {
    Strict(StrictFactor<T>),
    Linear,
    Proximal { rho: T, inner: StrictFactor<T> },
}

#[derive(Debug, Clone)]
struct StrictFactor<T: Real> {
    chol: Cholesky<T, Dyn>,
    /// `L⁻ᵀ` for `H = LLᵀ`.
    j0: DMatrix<T>,
}

impl<T: Real> StrictFactor<T> {
    fn new(h: &DMatrix<T>) -> Option<Self> {
        let chol = symmetrize(h).cholesky()?;
        let n = h.nrows();
        let l = chol.l();
        let l_inv = l.solve_lower_triangular(&DMatrix::identity(n, n))?;
        Some(Self {
            chol,
            j0: l_inv.transpose(),
        })
    }
}

/// QP solver bound to a fixed Hessian.
#[derive(Debug, Clone)]
pub struct DenseQpSolver<T: Real> {
    hessian: DMatrix<T>,
    factor: Factor<T>,
}

impl<T: Real> DenseQpSolver<T> {
    /// Validates `hessian` as PSD and factors it.
    pub fn new(hessian: &DMatrix<T>) -> Result<Self> {
        if !hessian.is_square() {
            return Err(SmpcError::dim("QP Hessian is not square"));
        }
        if hessian.iter().any(|v| !v.is_finite()) {
            return Err(SmpcError::numerical("QP Hessian has non-finite entries"));
        }
        let factor = if let Some(f) = StrictFactor::new(hessian) {
            Factor::Strict(f)
        } else if hessian.iter().all(|v| *v == T::zero()) {
            Factor::Linear
        } else if is_positive_semidefinite(hessian) {
            let n = hessian.nrows();
            let diag_mean = (0..n).fold(T::zero(), |a, i| a + hessian[(i, i)].abs())
                / T::lit(n.max(1) as f64);
            let rho = diag_mean.max(T::tol(1e-6));
            let shifted = hessian + DMatrix::identity(n, n) * rho;
            let inner = StrictFactor::new(&shifted)
                .ok_or_else(|| SmpcError::numerical("proximal Hessian not factorizable"))?;
            Factor::Proximal { rho, inner }
        } else {
            return Err(SmpcError::numerical("QP Hessian is not positive semi-definite"));
        };
        Ok(Self {
            hessian: hessian.clone(),
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn is_strictly_convex(&self) -> bool {
        matches!(self.factor, Factor::Strict(_))
    }

    pub fn solve(&self, p: &QpProblem<T>) -> Result<QpOutcome<T>> {
        self.solve_warm(p, None)
    }

    /// Solves `p` (whose Hessian must equal the factored one). `warm` is an
    /// active-set hint, used only by the simplex path.
    pub fn solve_warm(&self, p: &QpProblem<T>, warm: Option<&[usize]>) -> Result<QpOutcome<T>> {
        let n = self.dim();
        if p.linear.len() != n
            || p.ineq.ncols() != n
            || p.eq.ncols() != n
            || p.ineq.nrows() != p.ineq_rhs.len()
            || p.eq.nrows() != p.eq_rhs.len()
        {
            return Err(SmpcError::dim("QP data does not match the Hessian dimension"));
        }
        let mut basis = None;
        let raw = match &self.factor {
            Factor::Strict(f) => dual_active_set(f, &p.linear, p)?,
            Factor::Linear => self.solve_linear(p, warm)?.map(|(z, l, n, it, b)| {
                basis = Some(b);
                (z, l, n, it)
            }),
            Factor::Proximal { rho, inner } => self.solve_proximal(*rho, inner, p)?,
        };
        let Some((z, lambda, nu, iterations)) = raw else {
            return Ok(QpOutcome::Infeasible);
        };
        let kkt = kkt_residual(p, &z, &lambda, &nu);
        let act = T::tol(1e-9);
        let active: Vec<usize> = (0..lambda.len()).filter(|&i| lambda[i] > act).collect();
        Ok(QpOutcome::Solved(QpSolution {
            warm: basis.unwrap_or_else(|| active.clone()),
            objective: p.objective(&z),
            z,
            ineq_multipliers: lambda,
            eq_multipliers: nu,
            active,
            iterations,
            kkt,
        }))
    }

    #[allow(clippy::type_complexity)]
    fn solve_linear(
        &self,
        p: &QpProblem<T>,
        warm: Option<&[usize]>,
    ) -> Result<Option<(DVector<T>, DVector<T>, DVector<T>, usize, Vec<usize>)>> {
        let mi = p.ineq.nrows();
        let me = p.eq.nrows();
        let n = self.dim();
        let mut a = DMatrix::zeros(mi + 2 * me, n);
        let mut b = DVector::zeros(mi + 2 * me);
        a.view_mut((0, 0), (mi, n)).copy_from(&p.ineq);
        b.rows_mut(0, mi).copy_from(&p.ineq_rhs);
        a.view_mut((mi, 0), (me, n)).copy_from(&p.eq);
        b.rows_mut(mi, me).copy_from(&p.eq_rhs);
        a.view_mut((mi + me, 0), (me, n)).copy_from(&(-&p.eq));
        b.rows_mut(mi + me, me).copy_from(&(-&p.eq_rhs));
        match lp::minimize_warm(&p.linear, &a, &b, warm)? {
            LpOutcome::Optimal(sol) => {
                let lambda = sol.multipliers.rows(0, mi).into_owned();
                let nu = sol.multipliers.rows(mi, me) - sol.multipliers.rows(mi + me, me);
                Ok(Some((sol.x, lambda, nu, sol.iterations, sol.basis)))
            }
            LpOutcome::Infeasible => Ok(None),
            LpOutcome::Unbounded => Err(SmpcError::numerical(
                "QP with zero Hessian is unbounded below",
            )),
        }
    }

    #[allow(clippy::type_complexity)]
    fn solve_proximal(
        &self,
        rho: T,
        inner: &StrictFactor<T>,
        p: &QpProblem<T>,
    ) -> Result<Option<(DVector<T>, DVector<T>, DVector<T>, usize)>> {
        let n = self.dim();
        let mut center = DVector::<T>::zeros(n);
        let mut total = 0;
        let tol = T::tol(PROX_TOL);
        for _ in 0..PROX_MAX_ITER {
            let shifted = &p.linear - &center * rho;
            let Some((z, lambda, nu, it)) = dual_active_set(inner, &shifted, p)? else {
                return Ok(None);
            };
            total += it;
            let step = (&z - &center).amax();
            center = z;
            if step <= tol * (T::one() + center.amax()) {
                return Ok(Some((center, lambda, nu, total)));
            }
        }
        Err(SmpcError::numerical(
            "proximal-point iterations did not converge",
        ))
    }
}

/// Goldfarb–Idnani on `½zᵀHz + fᵀz` with `H` given by its factor.
#[allow(clippy::type_complexity)]
fn dual_active_set<T: Real>(
    factor: &StrictFactor<T>,
    f: &DVector<T>,
    p: &QpProblem<T>,
) -> Result<Option<(DVector<T>, DVector<T>, DVector<T>, usize)>> {
    let n = f.len();
    let me = p.eq.nrows();
    let mi = p.ineq.nrows();
    let feas = T::tol(FEAS_TOL);
    let tiny = T::default_epsilon() * T::lit(100.0);

    // Normalized inequality rows; zero rows are settled up front.
    let mut g_scale = vec![T::zero(); mi];
    for i in 0..mi {
        let norm = p.ineq.row(i).norm();
        if norm <= T::default_epsilon() {
            if p.ineq_rhs[i] < -feas {
                return Ok(None);
            }
        } else {
            g_scale[i] = norm;
        }
    }

    let mut x = -factor.chol.solve(f);
    let mut j = factor.j0.clone();
    let mut r = DMatrix::<T>::zeros(n, n);
    // Active constraints: id < me are equalities (with sign), else inequality id − me.
    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut flip: Vec<T> = Vec::with_capacity(n);
    let mut u: Vec<T> = Vec::with_capacity(n);
    let mut iterations = 0usize;
    let max_iter = 10 * (n + me + mi) + 100;

    let normal = |id: usize, sign: T| -> DVector<T> {
        if id < me {
            p.eq.row(id).transpose() * sign
        } else {
            let i = id - me;
            -p.ineq.row(i).transpose() / g_scale[i]
        }
    };
    let rhs = |id: usize, sign: T| -> T {
        if id < me {
            p.eq_rhs[id] * sign
        } else {
            let i = id - me;
            -p.ineq_rhs[i] / g_scale[i]
        }
    };

    let mut pending_eq = 0usize;
    loop {
        // Pick the next constraint: equalities in order, then the most violated row.
        let (pid, sign) = if pending_eq < me {
            let id = pending_eq;
            pending_eq += 1;
            let s = p.eq.row(id).dot(&x.transpose()) - p.eq_rhs[id];
            if s.abs() <= feas {
                // Still attach it so later steps keep it satisfied.
                (id, T::one())
            } else if s > T::zero() {
                (id, -T::one())
            } else {
                (id, T::one())
            }
        } else {
            let slack = &p.ineq_rhs - &p.ineq * &x;
            let mut worst: Option<(usize, T)> = None;
            for i in 0..mi {
                if g_scale[i] == T::zero() {
                    continue;
                }
                let s = slack[i] / g_scale[i];
                if s < -feas && worst.map_or(true, |(_, ws)| s < ws) {
                    worst = Some((i, s));
                }
            }
            match worst {
                Some((i, _)) => (me + i, T::one()),
                None => break,
            }
        };
        let is_eq = pid < me;
        let np = normal(pid, sign);
        let bp = rhs(pid, sign);
        let mut u_plus = T::zero();

        loop {
            iterations += 1;
            if iterations > max_iter {
                let slack = &p.ineq_rhs - &p.ineq * &x;
                let viol = slack.iter().fold(T::zero(), |a, s| a.max(-*s));
                return Err(SmpcError::numerical(format!(
                    "dual active-set exceeded {max_iter} iterations (max violation {:.3e})",
                    viol.as_f64()
                )));
            }
            let q = active.len();
            let d = j.transpose() * &np;
            // Primal direction z = J₂ d₂, dual direction r = R⁻¹ d₁.
            let mut z = DVector::<T>::zeros(n);
            for c in q..n {
                let dc = d[c];
                if dc != T::zero() {
                    z.axpy(dc, &j.column(c), T::one());
                }
            }
            let mut rv = DVector::<T>::zeros(q);
            for i in (0..q).rev() {
                let mut acc = d[i];
                for k in i + 1..q {
                    acc -= r[(i, k)] * rv[k];
                }
                rv[i] = acc / r[(i, i)];
            }
            // Partial step: largest dual step keeping inequality multipliers ≥ 0.
            let mut t1 = T::infinity();
            let mut drop_at = None;
            for k in 0..q {
                if active[k] >= me && rv[k] > tiny {
                    let ratio = u[k] / rv[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
            }
            let d2 = (q..n).fold(T::zero(), |a, c| a + d[c] * d[c]);
            let dn = d.iter().fold(T::zero(), |a, v| a + *v * *v);
            let s_p = np.dot(&x) - bp;
            let z_zero = d2 <= tiny * tiny * dn.max(T::one());
            let t2 = if z_zero {
                T::infinity()
            } else {
                -s_p / np.dot(&z)
            };

            if z_zero && drop_at.is_none() {
                if is_eq && s_p.abs() <= feas {
                    // Dependent but consistent equality.
                    break;
                }
                return Ok(None);
            }
            if z_zero {
                let t = t1;
                for k in 0..q {
                    u[k] -= t * rv[k];
                }
                u_plus += t;
                drop_constraint(&mut j, &mut r, drop_at.unwrap(), q);
                active.remove(drop_at.unwrap());
                flip.remove(drop_at.unwrap());
                u.remove(drop_at.unwrap());
                continue;
            }
            let t = if t2 <= t1 { t2 } else { t1 };
            x.axpy(t, &z, T::one());
            for k in 0..q {
                u[k] -= t * rv[k];
            }
            u_plus += t;
            if t2 <= t1 {
                add_constraint(&mut j, &mut r, d, q);
                active.push(pid);
                flip.push(sign);
                u.push(u_plus);
                break;
            }
            let k = drop_at.unwrap();
            drop_constraint(&mut j, &mut r, k, q);
            active.remove(k);
            flip.remove(k);
            u.remove(k);
        }
    }

    let mut lambda = DVector::<T>::zeros(mi);
    let mut nu = DVector::<T>::zeros(me);
    for (k, &id) in active.iter().enumerate() {
        if id < me {
            // Hz + f = u·(sign·a)  ⇒  ν = −sign·u
            nu[id] = -flip[k] * u[k];
        } else {
            let i = id - me;
            lambda[i] = u[k] / g_scale[i];
        }
    }
    Ok(Some((x, lambda, nu, iterations)))
}

/// Appends a constraint with `d = Jᵀn` to the factorization `JᵀN = [R; 0]`.
fn add_constraint<T: Real>(j: &mut DMatrix<T>, r: &mut DMatrix<T>, mut d: DVector<T>, q: usize) {
    let n = j.nrows();
    for i in (q + 1..n).rev() {
        let a = d[i - 1];
        let b = d[i];
        if b == T::zero() {
            continue;
        }
        let h = (a * a + b * b).sqrt();
        let (c, s) = (a / h, b / h);
        d[i - 1] = h;
        d[i] = T::zero();
        for k in 0..n {
            let ja = j[(k, i - 1)];
            let jb = j[(k, i)];
            j[(k, i - 1)] = c * ja + s * jb;
            j[(k, i)] = -s * ja + c * jb;
        }
    }
    for i in 0..=q {
        r[(i, q)] = d[i];
    }
}

/// Removes active constraint `l` of `q` and restores triangularity of R.
fn drop_constraint<T: Real>(j: &mut DMatrix<T>, r: &mut DMatrix<T>, l: usize, q: usize) {
    let n = j.nrows();
    for c in l..q - 1 {
        for i in 0..n {
            r[(i, c)] = r[(i, c + 1)];
        }
    }
    for i in 0..n {
        r[(i, q - 1)] = T::zero();
    }
    for c in l..q - 1 {
        let a = r[(c, c)];
        let b = r[(c + 1, c)];
        if b == T::zero() {
            continue;
        }
        let h = (a * a + b * b).sqrt();
        let (cs, sn) = (a / h, b / h);
        for k in c..q - 1 {
            let ra = r[(c, k)];
            let rb = r[(c + 1, k)];
            r[(c, k)] = cs * ra + sn * rb;
            r[(c + 1, k)] = -sn * ra + cs * rb;
        }
        r[(c + 1, c)] = T::zero();
        for k in 0..n {
            let ja = j[(k, c)];
            let jb = j[(k, c + 1)];
            j[(k, c)] = cs * ja + sn * jb;
            j[(k, c + 1)] = -sn * ja + cs * jb;
        }
    }
}
