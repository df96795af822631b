//! Condensed prediction: every nominal trajectory and the cost are affine in
//! the stacked decision `c = (c_0, …, c_{N−1})`.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Real;
use crate::system::{ClosedLoopDesign, CostSpec};

#[derive(Debug, Clone)]
pub(crate) struct Prediction<T: Real> {
    pub horizon: usize,
    pub m: usize,
    /// `Φ^i`, `i = 0..=N`.
    pub phi_pow: Vec<DMatrix<T>>,
    /// `Γ_i` with `s_i = Φ^i s_0 + Γ_i c`, `i = 0..=N`.
    pub gamma: Vec<DMatrix<T>>,
    /// `F̃Γ_i + G E_i`, `i = 0..N−1`.
    pub cc: Vec<DMatrix<T>>,
    /// `F̃Φ^i`, `i = 0..N−1`.
    pub cs: Vec<DMatrix<T>>,
    /// `H_u E_0`.
    pub hu_e0: DMatrix<T>,
    pub hessian: DMatrix<T>,
    /// Linear cost term is `fx · x + f0`.
    pub fx: DMatrix<T>,
    pub f0: DVector<T>,
}

impl<T: Real> Prediction<T> {
    pub fn new(design: &ClosedLoopDesign<T>, cost: &CostSpec<T>, h_u: &DMatrix<T>, horizon: usize) -> Self {
        let n = design.n();
        let m = design.m();
        let nc = m * horizon;
        let mut phi_pow = Vec::with_capacity(horizon + 1);
        phi_pow.push(DMatrix::identity(n, n));
        for i in 0..horizon {
            let next = &design.phi * &phi_pow[i];
            phi_pow.push(next);
        }
        let mut gamma = Vec::with_capacity(horizon + 1);
        gamma.push(DMatrix::zeros(n, nc));
        for i in 0..horizon {
            // Γ_{i+1} = ΦΓ_i + B E_i
            let mut next = &design.phi * &gamma[i];
            let mut blk = next.view_mut((0, i * m), (n, m));
            blk += &design.b;
            gamma.push(next);
        }
        let e = |i: usize| {
            let mut e = DMatrix::<T>::zeros(m, nc);
            e.view_mut((0, i * m), (m, m)).fill_with_identity();
            e
        };
        let cc = (0..horizon)
            .map(|i| &design.f_tilde * &gamma[i] + &design.g * e(i))
            .collect();
        let cs = (0..horizon).map(|i| &design.f_tilde * &phi_pow[i]).collect();
        let hu_e0 = if horizon > 0 { h_u * e(0) } else { DMatrix::zeros(h_u.nrows(), 0) };

        let two = T::lit(2.0);
        let mut hessian = DMatrix::<T>::zeros(nc, nc);
        let mut fx = DMatrix::<T>::zeros(nc, n);
        let mut f0 = DVector::<T>::zeros(nc);
        for i in 0..horizon {
            let g = &gamma[i];
            let u = &design.k * g + e(i);
            let ukp = &design.k * &phi_pow[i];
            let gt_q = g.transpose() * &cost.q_mat;
            let ut_r = u.transpose() * &cost.r_mat;
            hessian += (&gt_q * g + &ut_r * &u) * two;
            fx += (&gt_q * &phi_pow[i] + &ut_r * &ukp) * two;
            f0 += g.transpose() * &cost.q + u.transpose() * &cost.r;
        }
        let gn = &gamma[horizon];
        let gn_t_p = gn.transpose() * &design.p_f;
        hessian += &gn_t_p * gn * two;
        fx += &gn_t_p * &phi_pow[horizon] * two;
        f0 += gn.transpose() * &design.p_f_lin;
        let hessian = (&hessian + hessian.transpose()) * T::lit(0.5);
        Self {
            horizon,
            m,
            phi_pow,
            gamma,
            cc,
            cs,
            hu_e0,
            hessian,
            fx,
            f0,
        }
    }

    pub fn linear_term(&self, x: &DVector<T>) -> DVector<T> {
        &self.fx * x + &self.f0
    }

    pub fn stack(&self, c: &[DVector<T>]) -> DVector<T> {
        let m = self.m;
        let mut out = DVector::zeros(m * self.horizon);
        for (i, ci) in c.iter().enumerate().take(self.horizon) {
            out.rows_mut(i * m, m).copy_from(ci);
        }
        out
    }

    pub fn unstack(&self, c: &DVector<T>) -> Vec<DVector<T>> {
        let m = self.m;
        (0..self.horizon)
            .map(|i| c.rows(i * m, m).into_owned())
            .collect()
    }
}
