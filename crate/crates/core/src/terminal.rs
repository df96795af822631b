//! Terminal sets `{s | F̃Φ^i s ≤ 1 − profile(offset + i), i ≥ 0}` in
//! finite half-space form.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmpcError};
use crate::lp::LpOutcome;
use crate::polytope::{Polytope, REDUNDANCY_TOL};
use crate::scalar::Real;
use crate::system::ClosedLoopDesign;
use crate::tightening::TighteningProfile;

/// Largest determination index tried before giving up.
pub const MAX_DETERMINATION_INDEX: usize = 1000;

#[derive(Debug, Clone, Copy)]
pub struct TerminalSpec<'a, T: Real> {
    pub profile: &'a TighteningProfile<T>,
    pub offset: usize,
    pub design: &'a ClosedLoopDesign<T>,
}

#[derive(Debug, Clone)]
pub struct TerminalSet<T: Real> {
    pub polytope: Polytope<T>,
    /// Last propagation index whose rows were needed.
    pub determination_index: usize,
    pub offset: usize,
    /// The tightened constraints admit no state.
    pub empty: bool,
}

impl<T: Real> TerminalSet<T> {
    pub fn contains(&self, x: &DVector<T>) -> Result<bool> {
        if self.empty {
            return Ok(false);
        }
        self.polytope.contains(x)
    }
}

/// Maximal admissible set under `s⁺ = Φs` with the time-varying bounds
/// `1 − profile(offset + i)`.
///
/// Rows are added for `i = 0, 1, …`; each new row is kept only if the
/// current rows do not already imply it. The iteration stops at the first
/// `i` whose successors at `i + 1` are all implied while `offset + i` lies
/// in the constant tail of the profile; past that point the bounds are
/// time-invariant and nonincreasing ones are implied by induction.
pub fn build_terminal_set<T: Real>(spec: TerminalSpec<'_, T>) -> Result<TerminalSet<T>> {
    let TerminalSpec {
        profile,
        offset,
        design,
    } = spec;
    let n = design.n();
    let r = design.rows();
    if profile.rows() != r {
        return Err(SmpcError::dim("profile rows differ from constraint rows"));
    }
    let bound = |i: usize| -> DVector<T> { profile.at(offset + i).map(|v| T::one() - v) };
    let empty_set = |index| TerminalSet {
        polytope: Polytope::universe(n),
        determination_index: index,
        offset,
        empty: true,
    };
    if profile.saturation.iter().any(|s| *s > T::one()) {
        return Ok(empty_set(0));
    }

    let tol = T::tol(REDUNDANCY_TOL);
    let mut lead = design.f_tilde.clone();
    let mut poly = Polytope::new(DMatrix::zeros(0, n), DVector::zeros(0))?;
    {
        let c0 = bound(0);
        poly.push_rows(&lead, &c0)?;
        if poly.is_empty()? {
            return Ok(empty_set(0));
        }
    }
    for i in 1..=MAX_DETERMINATION_INDEX + 1 {
        lead = &lead * &design.phi;
        let c = bound(i);
        let mut any_added = false;
        for j in 0..r {
            let row = lead.row(j).transpose();
            let implied = if row.iter().all(|v| *v == T::zero()) {
                c[j] >= T::zero()
            } else {
                match poly.maximize(&row)? {
                    LpOutcome::Optimal(s) => s.objective <= c[j] + tol,
                    LpOutcome::Unbounded => false,
                    LpOutcome::Infeasible => return Ok(empty_set(i - 1)),
                }
            };
            if !implied {
                poly.push_rows(&DMatrix::from_row_slice(1, n, row.as_slice()), &DVector::from_element(1, c[j]))?;
                any_added = true;
            }
        }
        if any_added {
            if poly.is_empty()? {
                return Ok(empty_set(i));
            }
        } else if profile.is_saturated(offset + i - 1) {
            let polytope = poly.remove_redundant()?;
            return Ok(TerminalSet {
                polytope,
                determination_index: i - 1,
                offset,
                empty: false,
            });
        }
    }
    Err(SmpcError::design(format!(
        "terminal set not finitely determined within {MAX_DETERMINATION_INDEX} steps (offset {offset})"
    )))
}

/// Builds terminal sets for many offsets of one profile, sharing the sets of
/// offsets in the saturated tail (they coincide).
pub fn build_terminal_family<T: Real>(
    profile: &TighteningProfile<T>,
    design: &ClosedLoopDesign<T>,
    offsets: &[usize],
) -> Result<Vec<TerminalSet<T>>> {
    let cap = profile.k_bar() + 1;
    let mut cache: HashMap<usize, TerminalSet<T>> = HashMap::new();
    let mut out = Vec::with_capacity(offsets.len());
    for &off in offsets {
        let key = off.min(cap);
        if !cache.contains_key(&key) {
            let set = build_terminal_set(TerminalSpec {
                profile,
                offset: key,
                design,
            })?;
            cache.insert(key, set);
        }
        let mut set = cache[&key].clone();
        set.offset = off;
        out.push(set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tightening::ProfileKind;

    fn scalar_design(phi: f64) -> ClosedLoopDesign<f64> {
        let one = DMatrix::from_element(1, 1, 1.0);
        ClosedLoopDesign {
            k: DMatrix::zeros(1, 1),
            phi: DMatrix::from_element(1, 1, phi),
            b: one.clone(),
            d: one.clone(),
            f: one.clone(),
            g: DMatrix::zeros(1, 1),
            f_tilde: one.clone(),
            p: vec![1.0],
            r_x: 1,
            p_f: one,
            p_f_lin: DVector::zeros(1),
            spectral_radius: phi.abs(),
        }
    }

    fn flat(value: f64) -> TighteningProfile<f64> {
        TighteningProfile::new(
            ProfileKind::Gamma,
            DMatrix::from_element(2, 1, value),
            DVector::from_element(1, value),
        )
        .unwrap()
    }

    #[test]
    fn contracting_scalar_keeps_only_the_first_row() {
        let design = scalar_design(0.5);
        let set = build_terminal_set(TerminalSpec {
            profile: &flat(0.0),
            offset: 0,
            design: &design,
        })
        .unwrap();
        assert!(!set.empty);
        assert_eq!(set.polytope.num_rows(), 1);
        assert!(set.contains(&DVector::from_element(1, 1.0)).unwrap());
        assert!(!set.contains(&DVector::from_element(1, 1.1)).unwrap());
    }

    #[test]
    fn deadbeat_is_determined_at_zero() {
        let design = scalar_design(0.0);
        let set = build_terminal_set(TerminalSpec {
            profile: &flat(0.2),
            offset: 5,
            design: &design,
        })
        .unwrap();
        assert_eq!(set.determination_index, 0);
        assert!(set.contains(&DVector::from_element(1, 0.8)).unwrap());
        assert!(!set.contains(&DVector::from_element(1, 0.81)).unwrap());
    }

    #[test]
    fn oversaturated_profile_is_flagged_empty() {
        let design = scalar_design(0.5);
        let set = build_terminal_set(TerminalSpec {
            profile: &flat(1.5),
            offset: 0,
            design: &design,
        })
        .unwrap();
        assert!(set.empty);
    }
}
