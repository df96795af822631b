//! Half-space polytopes `{x | Hx ≤ b}`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SmpcError};
use crate::lp::{self, LpOutcome};
use crate::scalar::Real;

/// Membership tolerance on `Hx ≤ b`.
pub const CONTAINS_TOL: f64 = 1e-9;
/// Tolerance of LP redundancy certificates.
pub const REDUNDANCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Polytope<T: Real> {
    h: DMatrix<T>,
    b: DVector<T>,
}

impl<T: Real> Polytope<T> {
    /// Builds `{x | Hx ≤ b}`. Zero rows with `b ≥ 0` are dropped; a zero
    /// row with `b < 0` makes the set empty by construction and is rejected.
    pub fn new(h: DMatrix<T>, b: DVector<T>) -> Result<Self> {
        if h.nrows() != b.len() {
            return Err(SmpcError::dim(format!(
                "polytope with {} rows but rhs of length {}",
                h.nrows(),
                b.len()
            )));
        }
        let mut keep = Vec::with_capacity(h.nrows());
        for i in 0..h.nrows() {
            if h.row(i).iter().all(|v| *v == T::zero()) {
                if b[i] < T::zero() {
                    return Err(SmpcError::design(format!(
                        "row {i} reads 0 ≤ {:.3e}: empty by construction",
                        b[i].as_f64()
                    )));
                }
            } else if !b[i].is_finite() || h.row(i).iter().any(|v| !v.is_finite()) {
                return Err(SmpcError::numerical(format!("non-finite polytope row {i}")));
            } else {
                keep.push(i);
            }
        }
        if keep.len() == h.nrows() {
            return Ok(Self { h, b });
        }
        Ok(Self {
            h: h.select_rows(keep.iter()),
            b: b.select_rows(keep.iter()),
        })
    }

    /// The whole space `R^n` (no rows).
    pub fn universe(dim: usize) -> Self {
        Self {
            h: DMatrix::zeros(0, dim),
            b: DVector::zeros(0),
        }
    }

    /// Axis-aligned box `lower ≤ x ≤ upper`.
    pub fn from_box(lower: &[T], upper: &[T]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(SmpcError::dim("box bounds of different length"));
        }
        let n = lower.len();
        if lower.iter().zip(upper).any(|(l, u)| l > u) {
            return Err(SmpcError::design("box with lower bound above upper bound"));
        }
        let mut h = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            h[(2 * i, i)] = T::one();
            b[2 * i] = upper[i];
            h[(2 * i + 1, i)] = -T::one();
            b[2 * i + 1] = -lower[i];
        }
        Ok(Self { h, b })
    }

    pub fn h(&self) -> &DMatrix<T> {
        &self.h
    }

    pub fn b(&self) -> &DVector<T> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.h.nrows()
    }

    /// Per-row slack `b − Hx`.
    pub fn slack(&self, x: &DVector<T>) -> Result<DVector<T>> {
        if x.len() != self.dim() {
            return Err(SmpcError::dim(format!(
                "point of dimension {} tested against a {}-dimensional polytope",
                x.len(),
                self.dim()
            )));
        }
        Ok(&self.b - &self.h * x)
    }

    /// True iff `Hx ≤ b + 1e-9` elementwise; also returns the slack vector.
    pub fn contains_with_slack(&self, x: &DVector<T>) -> Result<(bool, DVector<T>)> {
        let s = self.slack(x)?;
        let tol = T::tol(CONTAINS_TOL);
        Ok((s.iter().all(|v| *v >= -tol), s))
    }

    pub fn contains(&self, x: &DVector<T>) -> Result<bool> {
        Ok(self.contains_with_slack(x)?.0)
    }

    /// `max cᵀx` over the polytope.
    pub fn maximize(&self, c: &DVector<T>) -> Result<LpOutcome<T>> {
        lp::maximize(c, &self.h, &self.b)
    }

    /// Largest inscribed ball `(center, radius)`; `None` when empty.
    /// The radius is capped at 1e6 for unbounded sets.
    pub fn chebyshev_ball(&self) -> Result<Option<(DVector<T>, T)>> {
        let n = self.dim();
        let m = self.num_rows();
        if m == 0 {
            return Ok(Some((DVector::zeros(n), T::lit(1e6))));
        }
        let mut a = DMatrix::zeros(m + 1, n + 1);
        let mut rhs = DVector::zeros(m + 1);
        for i in 0..m {
            for j in 0..n {
                a[(i, j)] = self.h[(i, j)];
            }
            a[(i, n)] = self.h.row(i).norm();
            rhs[i] = self.b[i];
        }
        a[(m, n)] = T::one();
        rhs[m] = T::lit(1e6);
        let mut c = DVector::zeros(n + 1);
        c[n] = T::one();
        match lp::maximize(&c, &a, &rhs)? {
            LpOutcome::Optimal(sol) => {
                let r = sol.x[n];
                if r < -T::tol(REDUNDANCY_TOL) {
                    Ok(None)
                } else {
                    Ok(Some((sol.x.rows(0, n).into_owned(), r.max(T::zero()))))
                }
            }
            LpOutcome::Infeasible => Ok(None),
            LpOutcome::Unbounded => Err(SmpcError::numerical("Chebyshev LP unbounded")),
        }
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.chebyshev_ball()?.is_none())
    }

    /// Removes rows implied by the others. Each removed row `j` is certified
    /// by `max_{H₋ⱼx ≤ b₋ⱼ} Hⱼx ≤ bⱼ + 1e-9`; rows whose LP is unbounded are
    /// kept.
    pub fn remove_redundant(&self) -> Result<Self> {
        let m = self.num_rows();
        let tol = T::tol(REDUNDANCY_TOL);
        let mut active: Vec<bool> = vec![true; m];
        for j in 0..m {
            let others: Vec<usize> = (0..m).filter(|&i| i != j && active[i]).collect();
            if others.is_empty() {
                continue;
            }
            let hs = self.h.select_rows(others.iter());
            let bs = self.b.select_rows(others.iter());
            let c = self.h.row(j).transpose();
            if let LpOutcome::Optimal(sol) = lp::maximize(&c, &hs, &bs)? {
                if sol.objective <= self.b[j] + tol {
                    active[j] = false;
                }
            }
        }
        let keep: Vec<usize> = (0..m).filter(|&i| active[i]).collect();
        Ok(Self {
            h: self.h.select_rows(keep.iter()),
            b: self.b.select_rows(keep.iter()),
        })
    }

    /// Whether row `(c, d)` is implied by this polytope (`max cᵀx ≤ d + tol`).
    pub fn implies(&self, c: &DVector<T>, d: T) -> Result<bool> {
        if self.num_rows() == 0 {
            return Ok(c.iter().all(|v| *v == T::zero()) && d >= T::zero());
        }
        Ok(match self.maximize(c)? {
            LpOutcome::Optimal(sol) => sol.objective <= d + T::tol(REDUNDANCY_TOL),
            // An empty set implies everything.
            LpOutcome::Infeasible => true,
            LpOutcome::Unbounded => false,
        })
    }

    /// Appends rows.
    pub fn push_rows(&mut self, h: &DMatrix<T>, b: &DVector<T>) -> Result<()> {
        if h.ncols() != self.dim() || h.nrows() != b.len() {
            return Err(SmpcError::dim("appended rows do not match polytope"));
        }
        let m = self.num_rows();
        let mut nh = DMatrix::zeros(m + h.nrows(), self.dim());
        nh.view_mut((0, 0), (m, self.dim())).copy_from(&self.h);
        nh.view_mut((m, 0), (h.nrows(), self.dim())).copy_from(h);
        let mut nb = DVector::zeros(m + b.len());
        nb.rows_mut(0, m).copy_from(&self.b);
        nb.rows_mut(m, b.len()).copy_from(b);
        self.h = nh;
        self.b = nb;
        Ok(())
    }

    /// Lower and upper bounds when the polytope is an axis-aligned box
    /// (every row is `±eᵢ`), else `None`.
    pub fn as_box(&self) -> Option<(Vec<T>, Vec<T>)> {
        let n = self.dim();
        let mut lo = vec![-T::infinity(); n];
        let mut hi = vec![T::infinity(); n];
        for i in 0..self.num_rows() {
            let row = self.h.row(i);
            let nz: Vec<usize> = (0..n).filter(|&j| row[j] != T::zero()).collect();
            if nz.len() != 1 {
                return None;
            }
            let j = nz[0];
            let v = row[j];
            let bound = self.b[i] / v;
            if v > T::zero() {
                hi[j] = hi[j].min(bound);
            } else {
                lo[j] = lo[j].max(bound);
            }
        }
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        Some((lo, hi))
    }

    /// Vertices of a box-shaped polytope (`2^n` of them).
    pub fn box_vertices(&self) -> Option<Vec<DVector<T>>> {
        let (lo, hi) = self.as_box()?;
        let n = lo.len();
        if n > 20 {
            return None;
        }
        Some(
            (0..1usize << n)
                .map(|mask| {
                    DVector::from_iterator(
                        n,
                        (0..n).map(|j| if mask >> j & 1 == 1 { hi[j] } else { lo[j] }),
                    )
                })
                .collect(),
        )
    }

    /// Per-coordinate bounds `[min xⱼ, max xⱼ]` by LP.
    pub fn bounding_box(&self) -> Result<(Vec<T>, Vec<T>)> {
        if let Some(bx) = self.as_box() {
            return Ok(bx);
        }
        let n = self.dim();
        let mut lo = Vec::with_capacity(n);
        let mut hi = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = T::one();
            let up = match self.maximize(&e)? {
                LpOutcome::Optimal(s) => s.objective,
                LpOutcome::Unbounded => {
                    return Err(SmpcError::design("polytope is unbounded"));
                }
                LpOutcome::Infeasible => return Err(SmpcError::design("polytope is empty")),
            };
            let down = match self.maximize(&(-e))? {
                LpOutcome::Optimal(s) => -s.objective,
                LpOutcome::Unbounded => {
                    return Err(SmpcError::design("polytope is unbounded"));
                }
                LpOutcome::Infeasible => return Err(SmpcError::design("polytope is empty")),
            };
            lo.push(down);
            hi.push(up);
        }
        Ok((lo, hi))
    }

    /// Approximately uniform points by hit-and-run from the Chebyshev center.
    pub fn sample_points(&self, count: usize, seed: u64) -> Result<Vec<DVector<T>>> {
        let n = self.dim();
        let Some((center, radius)) = self.chebyshev_ball()? else {
            return Err(SmpcError::design("cannot sample an empty polytope"));
        };
        if radius >= T::lit(1e6) {
            return Err(SmpcError::design("cannot sample an unbounded polytope"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = center;
        let mut out = Vec::with_capacity(count);
        let thin = 5 * n.max(1);
        for k in 0..count * thin + 10 * thin {
            let mut d = DVector::<T>::from_iterator(
                n,
                (0..n).map(|_| T::lit(rng.sample::<f64, _>(rand_distr::StandardNormal))),
            );
            let dn = d.norm();
            if dn <= T::zero() {
                continue;
            }
            d /= dn;
            let hd = &self.h * &d;
            let slack = &self.b - &self.h * &x;
            let mut lo = -T::infinity();
            let mut hi = T::infinity();
            for i in 0..self.num_rows() {
                let s = slack[i].max(T::zero());
                if hd[i] > T::zero() {
                    hi = hi.min(s / hd[i]);
                } else if hd[i] < T::zero() {
                    lo = lo.max(s / hd[i]);
                }
            }
            if !lo.is_finite() || !hi.is_finite() {
                return Err(SmpcError::design("cannot sample an unbounded polytope"));
            }
            let u: f64 = rng.random();
            let t = lo + (hi - lo) * T::lit(u);
            x += d * t;
            if k >= 10 * thin && (k - 10 * thin) % thin == thin - 1 {
                out.push(x.clone());
            }
        }
        Ok(out)
    }
}
