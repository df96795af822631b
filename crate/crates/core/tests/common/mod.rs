#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use smpc::system::{ConstraintSpec, CostSpec, DisturbanceModel, LinearStochasticSystem};
use smpc::tightening::ScenarioConfig;
use smpc::Real;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// `x⁺ = a x + u + w`, `x ≤ 1` with probability `p`, `|u| ≤ u_max`,
/// `w ~ U[-w_max, w_max]`, cost `x² + u²`.
pub fn scalar<T: Real>(a: f64, p: f64, u_max: f64, w_max: f64) -> LinearStochasticSystem<T> {
    let m = |v: f64| DMatrix::from_element(1, 1, T::lit(v));
    LinearStochasticSystem::new(
        m(a),
        m(1.0),
        m(1.0),
        ConstraintSpec {
            h_x: m(1.0),
            rhs_x: DVector::from_element(1, T::one()),
            p: vec![T::lit(p)],
            h_u: DMatrix::from_row_slice(2, 1, &[T::one(), -T::one()]),
            rhs_u: DVector::from_element(2, T::lit(u_max)),
        },
        DisturbanceModel::uniform_box(&[T::lit(-w_max)], &[T::lit(w_max)]).unwrap(),
        CostSpec::quadratic(m(1.0), m(1.0)),
    )
    .unwrap()
}

/// Double integrator with `x₁ ≤ 1` (probability `p`), `|u| ≤ 1` and a
/// uniform disturbance on both states.
pub fn double_integrator(p: f64, w_max: f64) -> LinearStochasticSystem<f64> {
    LinearStochasticSystem::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.005, 0.1]),
        DMatrix::identity(2, 2),
        ConstraintSpec {
            h_x: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            rhs_x: DVector::from_element(1, 1.0),
            p: vec![p],
            h_u: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            rhs_u: DVector::from_element(2, 1.0),
        },
        DisturbanceModel::uniform_box(&[-w_max, -w_max], &[w_max, w_max]).unwrap(),
        CostSpec::quadratic(DMatrix::identity(2, 2), DMatrix::from_element(1, 1, 0.1)),
    )
    .unwrap()
}

pub fn small_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        num_samples: 20_000,
        delta: 1e-3,
        seed,
    }
}
