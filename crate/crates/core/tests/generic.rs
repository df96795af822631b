mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use smpc::controllers::{ControllerDesign, ControllerKind, ControllerState, MultiStep};
use smpc::system::{closed_loop, lqr_gain, LinearStochasticSystem};
use smpc::tightening::Tightening;
use smpc::Real;

use common::{scalar, small_scenario};

/// Inputs of a short closed loop with a fixed disturbance pattern.
fn inputs<T: Real>(kind: ControllerKind) -> Vec<f64> {
    let sys: LinearStochasticSystem<T> = scalar(1.1, 0.8, 1.0, 0.05);
    let k = lqr_gain(&sys.a, &sys.b, &sys.cost.q_mat, &sys.cost.r_mat).unwrap();
    let d = closed_loop(&sys, &k).unwrap();
    let t = Tightening::compute(&d, &sys.disturbance, Some(40), &small_scenario(2)).unwrap();
    let design = ControllerDesign::new(kind, 8, true, d, sys.cost.clone(), sys.h_u().clone(), &t).unwrap();
    let mut x = DVector::from_element(1, T::lit(0.8));
    let mut st = ControllerState::new(Arc::new(design), &x);
    let mut out = Vec::new();
    for i in 0..20 {
        let w = T::lit(0.05 * ((i as f64) * 1.7).sin());
        let r = st.step(&x).unwrap();
        out.push(r.u[0].as_f64());
        let next = &sys.a * &x + &sys.b * &r.u + DMatrix::from_element(1, 1, w) * DVector::from_element(1, T::one());
        st.advance(&next, &r.c[0]);
        x = next;
    }
    out
}

#[test]
fn single_precision_tracks_double_precision() {
    for kind in [ControllerKind::If, ControllerKind::Rs, ControllerKind::Ms(MultiStep::Finite(2))] {
        let a = inputs::<f32>(kind);
        let b = inputs::<f64>(kind);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 2e-3 * (1.0 + y.abs()), "{kind}: {x} vs {y}");
        }
    }
}
