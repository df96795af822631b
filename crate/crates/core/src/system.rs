//! Plant, constraints, disturbance model, cost and the closed-loop quantities
//! derived from a tube gain `K`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpcError};
use crate::linalg::{
    dare, discrete_lyapunov, frobenius, is_positive_definite, is_positive_semidefinite,
    norm2, require_schur_stable,
};
use crate::polytope::Polytope;
use crate::scalar::Real;

/// Residual tolerance for the terminal-cost identities.
pub const TERMINAL_COST_TOL: f64 = 1e-9;
/// Rejection cap per truncated-Gaussian draw.
pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Uniform over a box support.
    Uniform,
    /// Zero-mean Gaussian with covariance `Σ_w`, truncated to the support.
    TruncatedGaussian,
}

/// i.i.d. additive disturbance `w(k) ∈ W`.
#[derive(Debug, Clone)]
pub struct DisturbanceModel<T: Real> {
    support: Polytope<T>,
    distribution: Distribution,
    covariance: DMatrix<T>,
    /// Box bounds when the support is a box.
    bounds: Option<(Vec<T>, Vec<T>)>,
    /// Cholesky factor of the pre-truncation covariance.
    gaussian_factor: Option<DMatrix<T>>,
}

impl<T: Real> DisturbanceModel<T> {
    /// Uniform distribution on `[lower, upper]`; the box must be centered at 0.
    pub fn uniform_box(lower: &[T], upper: &[T]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(SmpcError::dim("disturbance bounds have different lengths"));
        }
        for (l, u) in lower.iter().zip(upper) {
            if *l > *u {
                return Err(SmpcError::config("disturbance lower bound exceeds upper bound"));
            }
            if (*l + *u).abs() > T::tol(1e-12) * (T::one() + u.abs()) {
                return Err(SmpcError::config(
                    "uniform disturbance box must be symmetric about 0 (zero mean)",
                ));
            }
        }
        let q = lower.len();
        let twelve = T::lit(12.0);
        let covariance = DMatrix::from_fn(q, q, |i, j| {
            if i == j {
                (upper[i] - lower[i]) * (upper[i] - lower[i]) / twelve
            } else {
                T::zero()
            }
        });
        Ok(Self {
            support: Polytope::from_box(lower, upper)?,
            distribution: Distribution::Uniform,
            covariance,
            bounds: Some((lower.to_vec(), upper.to_vec())),
            gaussian_factor: None,
        })
    }

    /// Zero-mean Gaussian with covariance `covariance`, truncated to a compact
    /// `support` that must contain the origin.
    pub fn truncated_gaussian(support: Polytope<T>, covariance: DMatrix<T>) -> Result<Self> {
        let q = support.dim();
        if covariance.shape() != (q, q) {
            return Err(SmpcError::dim("disturbance covariance does not match support"));
        }
        if !is_positive_semidefinite(&covariance) {
            return Err(SmpcError::config("disturbance covariance is not PSD"));
        }
        if !support.contains(&DVector::zeros(q))? {
            return Err(SmpcError::config("disturbance support must contain the origin"));
        }
        let bounds = support.as_box();
        support.bounding_box()?;
        let n = q;
        let shifted = &covariance + DMatrix::identity(n, n) * T::tol(1e-14);
        let factor = shifted
            .cholesky()
            .ok_or_else(|| SmpcError::config("disturbance covariance is not factorizable"))?
            .l();
        Ok(Self {
            support,
            distribution: Distribution::TruncatedGaussian,
            covariance,
            bounds,
            gaussian_factor: Some(factor),
        })
    }

    pub fn support(&self) -> &Polytope<T> {
        &self.support
    }

    pub fn distribution(&self) -> Distribution {
        self.distribution
    }

    /// `Σ_w` used in the performance bound. For the truncated Gaussian this is
    /// the pre-truncation covariance, an upper bound on the true one.
    pub fn covariance(&self) -> &DMatrix<T> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    /// Whether `W = {0}`.
    pub fn is_zero(&self) -> bool {
        match &self.bounds {
            Some((l, u)) => l.iter().chain(u).all(|v| *v == T::zero()),
            None => false,
        }
    }

    /// Draws one sample in `W`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<T>> {
        let q = self.dim();
        match self.distribution {
            Distribution::Uniform => {
                let (l, u) = self.bounds.as_ref().expect("uniform support is a box");
                Ok(DVector::from_fn(q, |i, _| {
                    let t: f64 = rng.random();
                    l[i] + (u[i] - l[i]) * T::lit(t)
                }))
            }
            Distribution::TruncatedGaussian => {
                let factor = self.gaussian_factor.as_ref().expect("gaussian factor");
                for _ in 0..MAX_REJECTIONS {
                    let z = DVector::from_fn(q, |_, _| {
                        let v: f64 = rng.sample(StandardNormal);
                        T::lit(v)
                    });
                    let w = factor * z;
                    if self.support.contains(&w)? {
                        return Ok(w);
                    }
                }
                Err(SmpcError::numerical(format!(
                    "truncated Gaussian sampler rejected {MAX_REJECTIONS} draws in a row"
                )))
            }
        }
    }

    /// Points whose convex hull contains `W` (exact vertices for a box).
    pub fn enclosing_vertices(&self) -> Result<Vec<DVector<T>>> {
        if let Some(v) = self.support.box_vertices() {
            return Ok(v);
        }
        let (l, u) = self.support.bounding_box()?;
        Ok(Polytope::from_box(&l, &u)?
            .box_vertices()
            .expect("bounding box is a box"))
    }

    /// Upper bound on `max_{w∈W} ‖Dw‖₂` (exact for box supports).
    pub fn max_norm_dw(&self, d: &DMatrix<T>) -> Result<T> {
        Ok(self
            .enclosing_vertices()?
            .iter()
            .map(|w| norm2(&(d * w)))
            .fold(T::zero(), |a, b| a.max(b)))
    }
}

/// Stage cost `ℓ(x,u) = xᵀQx + uᵀRu + qᵀx + rᵀu + offset`.
#[derive(Debug, Clone)]
pub struct CostSpec<T: Real> {
    pub q_mat: DMatrix<T>,
    pub r_mat: DMatrix<T>,
    pub q: DVector<T>,
    pub r: DVector<T>,
    /// Constant added to reported stage costs; it does not affect any minimizer.
    pub offset: T,
    /// Uniform lower bound on `ℓ` (recorded, not verified).
    pub lower_bound: T,
}

impl<T: Real> CostSpec<T> {
    pub fn quadratic(q_mat: DMatrix<T>, r_mat: DMatrix<T>) -> Self {
        let n = q_mat.nrows();
        let m = r_mat.nrows();
        Self {
            q_mat,
            r_mat,
            q: DVector::zeros(n),
            r: DVector::zeros(m),
            offset: T::zero(),
            lower_bound: T::zero(),
        }
    }

    fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.q_mat.shape() != (n, n)
            || self.r_mat.shape() != (m, m)
            || self.q.len() != n
            || self.r.len() != m
        {
            return Err(SmpcError::config("cost weights do not match system dimensions"));
        }
        if !is_positive_semidefinite(&self.q_mat) {
            return Err(SmpcError::config("Q is not positive semi-definite"));
        }
        if !is_positive_semidefinite(&self.r_mat) {
            return Err(SmpcError::config("R is not positive semi-definite"));
        }
        Ok(())
    }

    /// Whether the quadratic input weight is positive definite.
    pub fn has_definite_input_weight(&self) -> bool {
        is_positive_definite(&self.r_mat)
    }
}

/// Constraint data as supplied, before normalization.
#[derive(Debug, Clone)]
pub struct ConstraintSpec<T: Real> {
    /// `H_x x ≤ rhs_x` with probability `p`.
    pub h_x: DMatrix<T>,
    pub rhs_x: DVector<T>,
    pub p: Vec<T>,
    /// `H_u u ≤ rhs_u` surely.
    pub h_u: DMatrix<T>,
    pub rhs_u: DVector<T>,
}

/// `x(k+1) = Ax + Bu + Dw` with chance constraints on the state and hard
/// input constraints, all normalized to right-hand side 1.
#[derive(Debug, Clone)]
pub struct LinearStochasticSystem<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub d: DMatrix<T>,
    h_x: DMatrix<T>,
    p: Vec<T>,
    h_u: DMatrix<T>,
    pub disturbance: DisturbanceModel<T>,
    pub cost: CostSpec<T>,
}

fn normalize_rows<T: Real>(h: &DMatrix<T>, rhs: &DVector<T>, what: &str) -> Result<DMatrix<T>> {
    if h.nrows() != rhs.len() {
        return Err(SmpcError::dim(format!("{what} rows and right-hand side differ in length")));
    }
    let mut out = h.clone();
    for i in 0..h.nrows() {
        let v = rhs[i];
        if v == T::zero() || !v.is_finite() {
            return Err(SmpcError::config(format!(
                "{what} row {i} has right-hand side {}; only finite nonzero values normalize to 1",
                v.as_f64()
            )));
        }
        if v < T::zero() {
            return Err(SmpcError::config(format!(
                "{what} row {i} has negative right-hand side; the origin must be admissible"
            )));
        }
        let scaled = out.row(i) / v;
        out.set_row(i, &scaled);
    }
    Ok(out)
}

impl<T: Real> LinearStochasticSystem<T> {
    pub fn new(
        a: DMatrix<T>,
        b: DMatrix<T>,
        d: DMatrix<T>,
        constraints: ConstraintSpec<T>,
        disturbance: DisturbanceModel<T>,
        cost: CostSpec<T>,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(SmpcError::dim("A must be square"));
        }
        if b.nrows() != n || d.nrows() != n {
            return Err(SmpcError::dim("B and D must have as many rows as A"));
        }
        let m = b.ncols();
        if d.ncols() != disturbance.dim() {
            return Err(SmpcError::dim("D columns must match the disturbance dimension"));
        }
        let ConstraintSpec {
            h_x,
            rhs_x,
            p,
            h_u,
            rhs_u,
        } = constraints;
        if h_x.ncols() != n && h_x.nrows() > 0 {
            return Err(SmpcError::dim("state constraint rows must have n columns"));
        }
        if h_u.ncols() != m && h_u.nrows() > 0 {
            return Err(SmpcError::dim("input constraint rows must have m columns"));
        }
        if p.len() != h_x.nrows() {
            return Err(SmpcError::dim("one probability level per state constraint row"));
        }
        for (j, pj) in p.iter().enumerate() {
            if !(*pj > T::zero() && *pj <= T::one()) {
                return Err(SmpcError::config(format!(
                    "probability level of state row {j} must lie in (0, 1]"
                )));
            }
        }
        let h_x = if h_x.nrows() == 0 {
            DMatrix::zeros(0, n)
        } else {
            normalize_rows(&h_x, &rhs_x, "state constraint")?
        };
        let h_u = if h_u.nrows() == 0 {
            DMatrix::zeros(0, m)
        } else {
            normalize_rows(&h_u, &rhs_u, "input constraint")?
        };
        cost.validate(n, m)?;
        Ok(Self {
            a,
            b,
            d,
            h_x,
            p,
            h_u,
            disturbance,
            cost,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn q(&self) -> usize {
        self.d.ncols()
    }

    /// Normalized state rows `H_x`.
    pub fn h_x(&self) -> &DMatrix<T> {
        &self.h_x
    }

    pub fn h_u(&self) -> &DMatrix<T> {
        &self.h_u
    }

    /// Probability levels of the state rows.
    pub fn state_probabilities(&self) -> &[T] {
        &self.p
    }

    pub fn with_cost(&self, cost: CostSpec<T>) -> Result<Self> {
        cost.validate(self.n(), self.m())?;
        let mut out = self.clone();
        out.cost = cost;
        Ok(out)
    }
}

/// Stacked `F x + G u ≤ 1` rows with probability levels.
#[derive(Debug, Clone)]
pub struct MixedConstraints<T: Real> {
    pub f: DMatrix<T>,
    pub g: DMatrix<T>,
    pub p: Vec<T>,
    /// Number of leading state rows.
    pub r_x: usize,
}

impl<T: Real> MixedConstraints<T> {
    pub fn rows(&self) -> usize {
        self.p.len()
    }
}

/// State rows first (`(H_x, 0)`, level `p_j`), then input rows (`(0, H_u)`, level 1).
pub fn assemble_mixed_constraints<T: Real>(sys: &LinearStochasticSystem<T>) -> MixedConstraints<T> {
    let (n, m) = (sys.n(), sys.m());
    let r_x = sys.h_x.nrows();
    let r_u = sys.h_u.nrows();
    let r = r_x + r_u;
    let mut f = DMatrix::zeros(r, n);
    let mut g = DMatrix::zeros(r, m);
    if r_x > 0 {
        f.view_mut((0, 0), (r_x, n)).copy_from(&sys.h_x);
    }
    if r_u > 0 {
        g.view_mut((r_x, 0), (r_u, m)).copy_from(&sys.h_u);
    }
    let mut p = sys.p.clone();
    p.extend(std::iter::repeat_n(T::one(), r_u));
    MixedConstraints { f, g, p, r_x }
}

/// Everything derived from a fixed tube gain `K`.
#[derive(Debug, Clone)]
pub struct ClosedLoopDesign<T: Real> {
    pub k: DMatrix<T>,
    pub phi: DMatrix<T>,
    pub b: DMatrix<T>,
    pub d: DMatrix<T>,
    pub f: DMatrix<T>,
    pub g: DMatrix<T>,
    pub f_tilde: DMatrix<T>,
    pub p: Vec<T>,
    pub r_x: usize,
    pub p_f: DMatrix<T>,
    pub p_f_lin: DVector<T>,
    pub spectral_radius: T,
}

impl<T: Real> ClosedLoopDesign<T> {
    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn rows(&self) -> usize {
        self.p.len()
    }

    /// Terminal cost `V_f(x) = xᵀP_f x + p_fᵀx`.
    pub fn terminal_cost(&self, x: &DVector<T>) -> T {
        x.dot(&(&self.p_f * x)) + self.p_f_lin.dot(x)
    }

    /// `tr(P_f D Σ_w Dᵀ)`, the asymptotic average cost bound.
    pub fn performance_bound(&self, sigma_w: &DMatrix<T>) -> T {
        (&self.p_f * &self.d * sigma_w * self.d.transpose()).trace()
    }
}

/// Terminal cost pair `(P_f, p_f)`:
/// `ΦᵀP_fΦ + Q + KᵀRK = P_f` and `Φᵀp_f + q + Kᵀr = p_f`,
/// so that `V_f(x) = ℓ(x, Kx) + V_f(Φx)` up to the constant offset.
pub fn terminal_cost<T: Real>(
    phi: &DMatrix<T>,
    q_mat: &DMatrix<T>,
    r_mat: &DMatrix<T>,
    k: &DMatrix<T>,
    q: &DVector<T>,
    r: &DVector<T>,
) -> Result<(DMatrix<T>, DVector<T>)> {
    let w = q_mat + k.transpose() * r_mat * k;
    let p_f = discrete_lyapunov(phi, &w)?;
    let n = phi.nrows();
    let rhs = q + k.transpose() * r;
    let p_lin = (DMatrix::identity(n, n) - phi.transpose())
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SmpcError::numerical("I − Φᵀ is singular"))?;
    let res_quad = frobenius(&(phi.transpose() * &p_f * phi + &w - &p_f));
    let res_lin = norm2(&(phi.transpose() * &p_lin + &rhs - &p_lin));
    let scale = T::one() + frobenius(&p_f);
    if res_quad > T::tol(TERMINAL_COST_TOL) * scale || res_lin > T::tol(TERMINAL_COST_TOL) * (T::one() + norm2(&p_lin)) {
        return Err(SmpcError::numerical(format!(
            "terminal cost residuals too large ({:.3e}, {:.3e})",
            res_quad.as_f64(),
            res_lin.as_f64()
        )));
    }
    Ok((p_f, p_lin))
}

/// Infinite-horizon discrete LQR gain (`u = Kx`).
pub fn lqr_gain<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let (k, _) = dare(a, b, q, r)?;
    require_schur_stable(&(a + b * &k), "LQR closed loop")?;
    Ok(k)
}

/// Builds `Φ = A + BK`, `F̃ = F + GK` and the terminal cost.
pub fn closed_loop<T: Real>(sys: &LinearStochasticSystem<T>, k: &DMatrix<T>) -> Result<ClosedLoopDesign<T>> {
    if k.shape() != (sys.m(), sys.n()) {
        return Err(SmpcError::dim(format!(
            "gain K must be {}×{}, got {}×{}",
            sys.m(),
            sys.n(),
            k.nrows(),
            k.ncols()
        )));
    }
    let phi = &sys.a + &sys.b * k;
    let spectral_radius = require_schur_stable(&phi, "closed loop A + BK")?;
    let mixed = assemble_mixed_constraints(sys);
    let f_tilde = &mixed.f + &mixed.g * k;
    let c = &sys.cost;
    let (p_f, p_f_lin) = terminal_cost(&phi, &c.q_mat, &c.r_mat, k, &c.q, &c.r)?;
    Ok(ClosedLoopDesign {
        k: k.clone(),
        phi,
        b: sys.b.clone(),
        d: sys.d.clone(),
        f: mixed.f,
        g: mixed.g,
        f_tilde,
        p: mixed.p,
        r_x: mixed.r_x,
        p_f,
        p_f_lin,
        spectral_radius,
    })
}

/// `ℓ(x, u)` including the constant offset.
pub fn stage_cost<T: Real>(x: &DVector<T>, u: &DVector<T>, cost: &CostSpec<T>) -> T {
    x.dot(&(&cost.q_mat * x)) + u.dot(&(&cost.r_mat * u)) + cost.q.dot(x) + cost.r.dot(u) + cost.offset
}

/// `Σ_{i<N} ℓ(x̄_i, ū_i) + V_f(x̄_N)` along `x̄_{i+1} = Φx̄_i + Bc_i`,
/// `ū_i = Kx̄_i + c_i`, without the constant offset.
pub fn ocp_cost<T: Real>(
    x0: &DVector<T>,
    c: &[DVector<T>],
    design: &ClosedLoopDesign<T>,
    cost: &CostSpec<T>,
) -> T {
    let mut x = x0.clone();
    let mut total = T::zero();
    for ci in c {
        let u = &design.k * &x + ci;
        total += stage_cost(&x, &u, cost) - cost.offset;
        x = &design.phi * &x + &design.b * ci;
    }
    total + design.terminal_cost(&x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_system(a: f64, hx: f64, hu: f64) -> LinearStochasticSystem<f64> {
        LinearStochasticSystem::new(
            scalar(a),
            scalar(1.0),
            scalar(1.0),
            ConstraintSpec {
                h_x: scalar(hx),
                rhs_x: DVector::from_element(1, 1.0),
                p: vec![0.8],
                h_u: DMatrix::from_row_slice(2, 1, &[hu, -hu]),
                rhs_u: DVector::from_element(2, 1.0),
            },
            DisturbanceModel::uniform_box(&[-1.0], &[1.0]).unwrap(),
            CostSpec::quadratic(scalar(1.0), scalar(1.0)),
        )
        .unwrap()
    }

    #[test]
    fn stacking_matches_hand_layout() {
        let sys = scalar_system(0.5, 2.0, 0.5);
        let mc = assemble_mixed_constraints(&sys);
        assert_eq!(mc.f.as_slice(), &[2.0, 0.0, 0.0]);
        assert_eq!(mc.g.as_slice(), &[0.0, 0.5, -0.5]);
        assert_eq!(mc.p, vec![0.8, 1.0, 1.0]);
    }

    #[test]
    fn nonunit_rhs_is_divided_through_and_zero_rejected() {
        let mk = |rhs: f64| {
            LinearStochasticSystem::new(
                scalar(0.5),
                scalar(1.0),
                scalar(1.0),
                ConstraintSpec {
                    h_x: scalar(1.0),
                    rhs_x: DVector::from_element(1, rhs),
                    p: vec![0.9],
                    h_u: DMatrix::zeros(0, 1),
                    rhs_u: DVector::zeros(0),
                },
                DisturbanceModel::uniform_box(&[-1.0], &[1.0]).unwrap(),
                CostSpec::quadratic(scalar(1.0), scalar(1.0)),
            )
        };
        assert_relative_eq!(mk(0.1).unwrap().h_x()[(0, 0)], 10.0);
        assert!(matches!(mk(0.0), Err(SmpcError::Config(_))));
    }

    #[test]
    fn scalar_terminal_cost() {
        let (p, pl) = terminal_cost(
            &scalar(0.5),
            &scalar(1.0),
            &scalar(1.0),
            &scalar(0.0),
            &DVector::zeros(1),
            &DVector::zeros(1),
        )
        .unwrap();
        assert_relative_eq!(p[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
        assert_eq!(pl[0], 0.0);
    }

    #[test]
    fn deadbeat_lqr_gain_is_zero() {
        let k = lqr_gain(&scalar(0.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert!(k[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn unstable_closed_loop_names_radius() {
        let sys = scalar_system(2.0, 1.0, 1.0);
        let err = closed_loop(&sys, &scalar(0.0)).unwrap_err().to_string();
        assert!(err.contains("2.000000"), "{err}");
    }

    #[test]
    fn empty_horizon_cost_is_terminal_cost() {
        let sys = scalar_system(0.5, 1.0, 1.0);
        let design = closed_loop(&sys, &scalar(0.0)).unwrap();
        let x0 = DVector::from_element(1, 2.0);
        assert_relative_eq!(ocp_cost(&x0, &[], &design, &sys.cost), 4.0 * 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_samples_stay_in_support() {
        let model = DisturbanceModel::uniform_box(&[-4.0], &[4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let w: DVector<f64> = model.sample(&mut rng).unwrap();
            assert!(w[0].abs() <= 4.0);
        }
        assert_relative_eq!(model.covariance()[(0, 0)], 64.0 / 12.0);
    }

    #[test]
    fn asymmetric_uniform_box_is_rejected() {
        assert!(DisturbanceModel::<f64>::uniform_box(&[-1.0], &[2.0]).is_err());
    }
}
