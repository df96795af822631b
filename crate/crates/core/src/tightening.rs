//! Offline constraint tightening: robust terms `a_l`, scenario-based
//! stochastic terms `γ_k`, the saturation `γ_max`, and the derived profiles
//! `β` (stochastic first step, robust remainder) and `β̃` (stochastic for
//! the first `M` steps).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpcError};
use crate::linalg::powers;
use crate::lp::LpOutcome;
use crate::rng;
use crate::scalar::Real;
use crate::system::{closed_loop, lqr_gain, ClosedLoopDesign, DisturbanceModel, LinearStochasticSystem};

/// Tail accuracy used to pick the default `k̄`.
pub const DEFAULT_TAIL_TOL: f64 = 1e-3;
pub const MAX_K_BAR: usize = 500;
/// Horizon over which decay pairs are searched.
const DECAY_SEARCH_CAP: usize = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Gamma,
    A,
    Beta,
    BetaTilde,
}

/// Sampling parameters of the scenario approach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_samples: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_samples: 100_000,
            delta: 1e-4,
            seed: 0,
        }
    }
}

/// Per-row tightening values for indices `0..=k̄`, constant beyond.
#[derive(Debug, Clone, PartialEq)]
pub struct TighteningProfile<T: Real> {
    pub kind: ProfileKind,
    /// `(k̄+1) × r`.
    pub prefix: DMatrix<T>,
    pub saturation: DVector<T>,
    pub provenance: Option<ScenarioConfig>,
}

impl<T: Real> TighteningProfile<T> {
    pub fn new(kind: ProfileKind, prefix: DMatrix<T>, saturation: DVector<T>) -> Result<Self> {
        if prefix.nrows() == 0 || prefix.ncols() != saturation.len() {
            return Err(SmpcError::dim("profile prefix and saturation disagree"));
        }
        Ok(Self {
            kind,
            prefix,
            saturation,
            provenance: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.saturation.len()
    }

    /// Last index stored explicitly.
    pub fn k_bar(&self) -> usize {
        self.prefix.nrows() - 1
    }

    pub fn value(&self, index: usize, row: usize) -> T {
        if index <= self.k_bar() {
            self.prefix[(index, row)]
        } else {
            self.saturation[row]
        }
    }

    /// Values of all rows at `index`.
    pub fn at(&self, index: usize) -> DVector<T> {
        if index <= self.k_bar() {
            self.prefix.row(index).transpose()
        } else {
            self.saturation.clone()
        }
    }

    /// Whether `index` lies in the constant tail.
    pub fn is_saturated(&self, index: usize) -> bool {
        index > self.k_bar()
    }
}

/// `a_l = max_{w∈W} F̃_j Φ^l D w` for `l = 0..length−1`.
pub fn robust_terms<T: Real>(
    design: &ClosedLoopDesign<T>,
    disturbance: &DisturbanceModel<T>,
    length: usize,
) -> Result<TighteningProfile<T>> {
    let r = design.rows();
    let support = disturbance.support();
    let bx = support.as_box();
    let mut prefix = DMatrix::zeros(length.max(1), r);
    let mut ft_phi = design.f_tilde.clone();
    for l in 0..length {
        let g = &ft_phi * &design.d;
        for j in 0..r {
            let c = g.row(j).transpose();
            prefix[(l, j)] = match &bx {
                Some((lo, hi)) => (0..c.len()).fold(T::zero(), |acc, i| {
                    acc + (c[i] * lo[i]).max(c[i] * hi[i])
                }),
                None => match support.maximize(&c)? {
                    LpOutcome::Optimal(s) => s.objective,
                    LpOutcome::Unbounded => {
                        return Err(SmpcError::design("disturbance support is unbounded"))
                    }
                    LpOutcome::Infeasible => {
                        return Err(SmpcError::design("disturbance support is empty"))
                    }
                },
            };
        }
        ft_phi = &ft_phi * &design.phi;
    }
    let saturation = DVector::from_fn(r, |j, _| {
        (0..prefix.nrows()).fold(T::zero(), |a, l| a.max(prefix[(l, j)]))
    });
    TighteningProfile::new(ProfileKind::A, prefix, saturation)
}

/// Largest `r ≤ (1−p)N_s − sqrt(2(1−p)N_s ln(1/δ))`.
pub fn discard_count(p: f64, num_samples: usize, delta: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&p) || !(delta > 0.0 && delta <= 1.0) {
        return Err(SmpcError::config(format!(
            "discard count needs p ∈ [0,1) and δ ∈ (0,1], got p={p}, δ={delta}"
        )));
    }
    let n = num_samples as f64;
    let mass = (1.0 - p) * n;
    let bound = mass - (2.0 * mass * (1.0 / delta).ln()).sqrt();
    if bound < 0.0 {
        return Err(SmpcError::config(format!(
            "N_s = {num_samples} is too small for p = {p}, δ = {delta}; increase the sample count"
        )));
    }
    // Guard against representation error in (1 − p)·N_s.
    Ok((bound + 1e-9).floor() as usize)
}

/// `γ_k` for `k = 0..=k̄`. Rows with `p_j = 1` use the exact robust sum;
/// the others use the `(N_s − r_j)`-th order statistic of `F̃_j e(k)`,
/// then every row is made nondecreasing in `k`.
///
/// All `k` share one set of sampled sequences. Sample `s` realizes
/// `F̃e(k)` as `Σ_{l<k} F̃Φ^l D w_l`, with `w_l` drawn from slot `(s, l)`.
pub fn stochastic_terms<T: Real>(
    design: &ClosedLoopDesign<T>,
    disturbance: &DisturbanceModel<T>,
    k_bar: usize,
    scenario: &ScenarioConfig,
) -> Result<TighteningProfile<T>> {
    if k_bar < 1 {
        return Err(SmpcError::config("k̄ must be at least 1"));
    }
    let r = design.rows();
    let a = robust_terms(design, disturbance, k_bar)?;
    let mut prefix = DMatrix::<T>::zeros(k_bar + 1, r);
    for j in 0..r {
        for k in 1..=k_bar {
            prefix[(k, j)] = prefix[(k - 1, j)] + a.prefix[(k - 1, j)];
        }
    }

    let stochastic: Vec<usize> = (0..r).filter(|&j| design.p[j] < T::one()).collect();
    let mut uses_samples = false;
    if !stochastic.is_empty() && !disturbance.is_zero() {
        uses_samples = true;
        let n_s = scenario.num_samples;
        let order: Vec<usize> = stochastic
            .iter()
            .map(|&j| {
                let discard = discard_count(design.p[j].as_f64(), n_s, scenario.delta)?;
                Ok(n_s - discard - 1)
            })
            .collect::<Result<_>>()?;
        let rows_ft = design.f_tilde.select_rows(stochastic.iter());
        let phi_pow = powers(&design.phi, k_bar);
        let gains: Vec<DMatrix<T>> = phi_pow.iter().map(|p| &rows_ft * p * &design.d).collect();
        let rs = stochastic.len();
        let base = rng::base(scenario.seed);
        // values[s * rs + t]: accumulated F̃_t e for sample s.
        let mut values = vec![T::zero(); n_s * rs];
        let mut column = vec![T::zero(); n_s];
        for k in 1..=k_bar {
            let g = &gains[k - 1];
            values
                .par_chunks_mut(rs)
                .enumerate()
                .try_for_each(|(s, v)| -> Result<()> {
                    let mut rng = rng::at(&base, s as u64, (k - 1) as u64);
                    let w = disturbance.sample(&mut rng)?;
                    let inc = g * w;
                    for t in 0..rs {
                        v[t] += inc[t];
                    }
                    Ok(())
                })?;
            for (t, &j) in stochastic.iter().enumerate() {
                for s in 0..n_s {
                    column[s] = values[s * rs + t];
                }
                let (_, q, _) = column.select_nth_unstable_by(order[t], |x, y| {
                    x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal)
                });
                prefix[(k, j)] = *q;
            }
        }
        for &j in &stochastic {
            prefix[(0, j)] = T::zero();
            for k in 1..=k_bar {
                if prefix[(k, j)] < prefix[(k - 1, j)] {
                    prefix[(k, j)] = prefix[(k - 1, j)];
                }
            }
        }
    } else {
        for &j in &stochastic {
            for k in 0..=k_bar {
                prefix[(k, j)] = T::zero();
            }
        }
    }
    let saturation = prefix.row(k_bar).transpose();
    let mut out = TighteningProfile::new(ProfileKind::Gamma, prefix, saturation)?;
    if uses_samples {
        out.provenance = Some(*scenario);
    }
    Ok(out)
}

/// `‖Φ^k‖₂ ≤ Cρ^k` for every `k ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayPair<T: Real> {
    pub c: T,
    pub rho: T,
}

fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(T::zero(), |a, b| a.max(*b))
}

/// Candidate decay pairs for a Schur-stable `Φ`.
///
/// For each trial rate `ρ ∈ (sr(Φ), 1)`, the first `K0` with
/// `‖Φ^{K0}‖ ≤ ρ^{K0}` is found and `C = max_{k<K0} ‖Φ^k‖/ρ^k`; by
/// submultiplicativity this bounds every power.
pub fn decay_pairs<T: Real>(phi: &DMatrix<T>, spectral_radius: T) -> Result<Vec<DecayPair<T>>> {
    if spectral_radius >= T::one() {
        return Err(SmpcError::design(format!(
            "no decay pair: spectral radius {:.6} ≥ 1",
            spectral_radius.as_f64()
        )));
    }
    let norms: Vec<T> = powers(phi, DECAY_SEARCH_CAP + 1).iter().map(spectral_norm).collect();
    let mut out = Vec::new();
    for f in [0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
        let rho = spectral_radius + (T::one() - spectral_radius) * T::lit(f);
        let rho = rho.max(T::lit(1e-3));
        let mut ratio = T::one();
        let mut c = T::one();
        for k in 1..=DECAY_SEARCH_CAP {
            ratio *= rho;
            if norms[k] <= ratio {
                out.push(DecayPair { c, rho });
                break;
            }
            c = c.max(norms[k] / ratio);
        }
    }
    if out.is_empty() {
        return Err(SmpcError::design(format!(
            "no decay pair certified within {DECAY_SEARCH_CAP} powers"
        )));
    }
    Ok(out)
}

/// Rigorous bound on `Σ_{l≥from} a_{l,j}`:
/// `‖F̃_jΦ^{from}‖ · C · max‖Dw‖ / (1−ρ)`, minimized over decay pairs.
pub fn robust_tail<T: Real>(
    design: &ClosedLoopDesign<T>,
    disturbance: &DisturbanceModel<T>,
    from: usize,
) -> Result<DVector<T>> {
    let pairs = decay_pairs(&design.phi, design.spectral_radius)?;
    let max_dw = disturbance.max_norm_dw(&design.d)?;
    let mut phi_k = DMatrix::identity(design.n(), design.n());
    for _ in 0..from {
        phi_k = &design.phi * phi_k;
    }
    let lead = &design.f_tilde * phi_k;
    let best = pairs
        .iter()
        .map(|p| p.c / (T::one() - p.rho))
        .fold(T::infinity(), |a, b| a.min(b));
    Ok(DVector::from_fn(design.rows(), |j, _| {
        lead.row(j).norm() * max_dw * best
    }))
}

/// `γ_max = γ_{k̄} + tail(k̄)` elementwise.
pub fn saturation_bound<T: Real>(
    design: &ClosedLoopDesign<T>,
    gamma: &TighteningProfile<T>,
    disturbance: &DisturbanceModel<T>,
    k_bar: usize,
) -> Result<DVector<T>> {
    if k_bar > gamma.k_bar() {
        return Err(SmpcError::design("γ prefix does not reach k̄"));
    }
    let tail = robust_tail(design, disturbance, k_bar)?;
    Ok(gamma.at(k_bar) + tail)
}

/// Smallest `k` whose robust tail is below `tol` on every row, capped at
/// [`MAX_K_BAR`]; at least 1.
pub fn default_k_bar<T: Real>(
    design: &ClosedLoopDesign<T>,
    disturbance: &DisturbanceModel<T>,
    tol: f64,
) -> Result<usize> {
    let pairs = decay_pairs(&design.phi, design.spectral_radius)?;
    let max_dw = disturbance.max_norm_dw(&design.d)?;
    let best = pairs
        .iter()
        .map(|p| p.c / (T::one() - p.rho))
        .fold(T::infinity(), |a, b| a.min(b));
    let tol = T::lit(tol);
    let mut lead = design.f_tilde.clone();
    for k in 0..=MAX_K_BAR {
        let worst = (0..design.rows()).fold(T::zero(), |a, j| a.max(lead.row(j).norm()));
        if k >= 1 && worst * max_dw * best < tol {
            return Ok(k);
        }
        lead = &lead * &design.phi;
    }
    Ok(MAX_K_BAR)
}

/// Replaces the last prefix row's successor by `base + tail` as saturation.
fn finish_profile<T: Real>(
    kind: ProfileKind,
    prefix: DMatrix<T>,
    tail: &DVector<T>,
) -> Result<TighteningProfile<T>> {
    let last = prefix.nrows() - 1;
    let saturation = prefix.row(last).transpose() + tail;
    TighteningProfile::new(kind, prefix, saturation)
}

/// `β_0 = 0`, `β_i = γ_1 + Σ_{l=1}^{i−1} a_l` for `i = 1..=L`, with `L` the
/// length of `a`; saturation `β_L + tail`, `tail ≥ Σ_{l≥L} a_l`.
pub fn rs_profile<T: Real>(
    gamma: &TighteningProfile<T>,
    a: &TighteningProfile<T>,
    tail: &DVector<T>,
) -> Result<TighteningProfile<T>> {
    let len = a.prefix.nrows();
    let r = gamma.rows();
    let mut prefix = DMatrix::zeros(len + 1, r);
    for j in 0..r {
        if len >= 1 {
            prefix[(1, j)] = gamma.value(1, j);
        }
        for i in 2..=len {
            prefix[(i, j)] = prefix[(i - 1, j)] + a.prefix[(i - 1, j)];
        }
    }
    let mut out = finish_profile(ProfileKind::Beta, prefix, tail)?;
    out.provenance = gamma.provenance;
    Ok(out)
}

/// `β̃_i = γ_i` for `i ≤ M`, `β̃_{i+1} = β̃_i + a_i` for `i ≥ M`, up to
/// `L` = length of `a`. If `M ≥ L` the profile is `γ` itself.
pub fn ms_profile<T: Real>(
    gamma: &TighteningProfile<T>,
    a: &TighteningProfile<T>,
    m: usize,
    tail: &DVector<T>,
) -> Result<TighteningProfile<T>> {
    if m == 0 {
        return Err(SmpcError::config("multi-step horizon M must be ≥ 1"));
    }
    let len = a.prefix.nrows();
    let r = gamma.rows();
    if m >= len {
        let mut out = gamma.clone();
        out.kind = ProfileKind::BetaTilde;
        return Ok(out);
    }
    let mut prefix = DMatrix::zeros(len + 1, r);
    for j in 0..r {
        for i in 1..=m {
            prefix[(i, j)] = gamma.value(i, j);
        }
        for i in m..len {
            prefix[(i + 1, j)] = prefix[(i, j)] + a.prefix[(i, j)];
        }
    }
    let mut out = finish_profile(ProfileKind::BetaTilde, prefix, tail)?;
    out.provenance = gamma.provenance;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowFeasibility {
    pub feasible: bool,
    /// `1 − saturation`.
    pub slack: f64,
}

/// A row is infeasible iff its saturation reaches the normalized RHS 1.
pub fn design_feasibility<T: Real>(profile: &TighteningProfile<T>) -> Vec<RowFeasibility> {
    profile
        .saturation
        .iter()
        .map(|s| RowFeasibility {
            feasible: *s < T::one(),
            slack: 1.0 - s.as_f64(),
        })
        .collect()
}

/// Offline tightening bundle for one design.
#[derive(Debug, Clone)]
pub struct Tightening<T: Real> {
    pub k_bar: usize,
    pub a: TighteningProfile<T>,
    /// `γ`, with `γ_max` as saturation.
    pub gamma: TighteningProfile<T>,
    /// Bound on `Σ_{l≥k̄} a_l` per row.
    pub tail: DVector<T>,
}

impl<T: Real> Tightening<T> {
    pub fn compute(
        design: &ClosedLoopDesign<T>,
        disturbance: &DisturbanceModel<T>,
        k_bar: Option<usize>,
        scenario: &ScenarioConfig,
    ) -> Result<Self> {
        let k_bar = match k_bar {
            Some(k) => k.max(1),
            None => default_k_bar(design, disturbance, DEFAULT_TAIL_TOL)?,
        };
        let a = robust_terms(design, disturbance, k_bar)?;
        let mut gamma = stochastic_terms(design, disturbance, k_bar, scenario)?;
        let tail = robust_tail(design, disturbance, k_bar)?;
        gamma.saturation = gamma.at(k_bar) + &tail;
        Ok(Self {
            k_bar,
            a,
            gamma,
            tail,
        })
    }

    pub fn gamma_max(&self) -> &DVector<T> {
        &self.gamma.saturation
    }

    pub fn beta(&self) -> Result<TighteningProfile<T>> {
        rs_profile(&self.gamma, &self.a, &self.tail)
    }

    pub fn beta_tilde(&self, m: usize) -> Result<TighteningProfile<T>> {
        ms_profile(&self.gamma, &self.a, m, &self.tail)
    }
}

/// Which profile a tuned gain must render feasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneTarget {
    /// `γ_max`.
    If,
    Rs,
    Ms { m: usize },
}

#[derive(Debug, Clone)]
pub struct TunedGain<T: Real> {
    pub weight: T,
    pub k: DMatrix<T>,
    /// Largest state-row saturation at `weight`.
    pub saturation: T,
}

/// Smallest state-row saturation-relevant value for a given gain.
fn state_saturation<T: Real>(
    sys: &LinearStochasticSystem<T>,
    k: &DMatrix<T>,
    target: TuneTarget,
    scenario: &ScenarioConfig,
    k_bar: Option<usize>,
) -> Result<T> {
    let design = closed_loop(sys, k)?;
    let t = Tightening::compute(&design, &sys.disturbance, k_bar, scenario)?;
    let profile = match target {
        TuneTarget::If => t.gamma,
        TuneTarget::Rs => t.beta()?,
        TuneTarget::Ms { m } => t.beta_tilde(m)?,
    };
    Ok((0..design.r_x).fold(T::zero(), |a, j| a.max(profile.saturation[j])))
}

/// Bisection (in log scale) over the `(entry, entry)` weight of `Q` in the
/// LQR design, returning the smallest weight whose profile saturation on
/// the state rows is at most `target`. Saturation is assumed to decrease as
/// the weight grows.
#[allow(clippy::too_many_arguments)]
pub fn tune_tube_gain<T: Real>(
    sys: &LinearStochasticSystem<T>,
    kind: TuneTarget,
    target: T,
    range: (T, T),
    entry: usize,
    scenario: &ScenarioConfig,
    k_bar: Option<usize>,
) -> Result<TunedGain<T>> {
    let (lo, hi) = range;
    if !(lo > T::zero() && hi > lo) {
        return Err(SmpcError::config("tuning range must satisfy 0 < lo < hi"));
    }
    if entry >= sys.n() {
        return Err(SmpcError::config("tuning entry outside the state dimension"));
    }
    let eval = |w: T| -> Result<(DMatrix<T>, T)> {
        let mut q = sys.cost.q_mat.clone();
        q[(entry, entry)] = w;
        let k = lqr_gain(&sys.a, &sys.b, &q, &sys.cost.r_mat)?;
        let s = state_saturation(sys, &k, kind, scenario, k_bar)?;
        Ok((k, s))
    };
    let (k_lo, s_lo) = eval(lo)?;
    if s_lo <= target {
        return Ok(TunedGain {
            weight: lo,
            k: k_lo,
            saturation: s_lo,
        });
    }
    let (k_hi, s_hi) = eval(hi)?;
    if s_hi > target {
        return Err(SmpcError::design(format!(
            "saturation {:.4} at the range maximum still exceeds the target {:.4}",
            s_hi.as_f64(),
            target.as_f64()
        )));
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut best = (hi, k_hi, s_hi);
    let band = T::lit(0.02);
    for _ in 0..60 {
        if (b - a) < T::lit(1e-3) {
            break;
        }
        let mid = (a + b) * T::lit(0.5);
        let w = mid.exp();
        let (k, s) = eval(w)?;
        if s <= target {
            b = mid;
            best = (w, k, s);
            if target - s <= band * T::lit(0.05) {
                break;
            }
        } else {
            a = mid;
        }
    }
    let (weight, k, saturation) = best;
    log::info!(
        "tuned weight {:.4} → saturation {:.4}",
        weight.as_f64(),
        saturation.as_f64()
    );
    Ok(TunedGain {
        weight,
        k,
        saturation,
    })
}
