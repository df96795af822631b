//! Offline pipeline: tube gains, tightening bundles and controller designs
//! for a list of controller specifications on one system.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::controllers::{ControllerDesign, ControllerKind, MultiStep};
use crate::error::{Result, SmpcError};
use crate::scalar::Real;
use crate::system::{closed_loop, lqr_gain, ClosedLoopDesign, LinearStochasticSystem};
use crate::tightening::{
    design_feasibility, tune_tube_gain, RowFeasibility, ScenarioConfig, Tightening, TuneTarget,
};

/// Where a tube gain `K` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GainSpec<T: Real> {
    Explicit(DMatrix<T>),
    /// LQR gain; missing weights fall back to the system's cost.
    Lqr {
        q: Option<DMatrix<T>>,
        r: Option<DMatrix<T>>,
    },
    /// Smallest `Q[entry, entry]` (in `range`) whose profile saturation on
    /// the state rows is at most `target`.
    Tuned { entry: usize, target: T, range: (T, T) },
}

#[derive(Debug, Clone)]
pub struct ControllerSpec<T: Real> {
    pub name: String,
    pub kind: ControllerKind,
    pub horizon: usize,
    pub measured_input: bool,
    pub gain: GainSpec<T>,
}

/// Tightening target a tuned gain is chosen for.
pub fn tune_target(kind: ControllerKind) -> TuneTarget {
    match kind {
        ControllerKind::Rs => TuneTarget::Rs,
        ControllerKind::Ms(MultiStep::Finite(m)) => TuneTarget::Ms { m },
        _ => TuneTarget::If,
    }
}

/// Everything derived from one tube gain.
#[derive(Debug, Clone)]
pub struct Tube<T: Real> {
    pub k: DMatrix<T>,
    /// Tuned weight, if the gain was tuned.
    pub weight: Option<T>,
    pub design: ClosedLoopDesign<T>,
    pub tightening: Tightening<T>,
}

/// Resolves a gain specification to `K` (and the tuned weight).
pub fn resolve_gain<T: Real>(
    sys: &LinearStochasticSystem<T>,
    gain: &GainSpec<T>,
    target: TuneTarget,
    scenario: &ScenarioConfig,
    k_bar: Option<usize>,
) -> Result<(DMatrix<T>, Option<T>)> {
    match gain {
        GainSpec::Explicit(k) => {
            if k.nrows() != sys.m() || k.ncols() != sys.n() {
                return Err(SmpcError::dim(format!(
                    "gain is {}x{}, expected {}x{}",
                    k.nrows(),
                    k.ncols(),
                    sys.m(),
                    sys.n()
                )));
            }
            Ok((k.clone(), None))
        }
        GainSpec::Lqr { q, r } => {
            let q = q.as_ref().unwrap_or(&sys.cost.q_mat);
            let r = r.as_ref().unwrap_or(&sys.cost.r_mat);
            Ok((lqr_gain(&sys.a, &sys.b, q, r)?, None))
        }
        GainSpec::Tuned {
            entry,
            target: level,
            range,
        } => {
            let t = tune_tube_gain(sys, target, *level, *range, *entry, scenario, k_bar)?;
            Ok((t.k, Some(t.weight)))
        }
    }
}

/// Tubes keyed by gain so controllers sharing `K` share one tightening run.
#[derive(Debug, Clone)]
pub struct TubeSet<T: Real> {
    pub scenario: ScenarioConfig,
    pub k_bar: Option<usize>,
    pub tubes: Vec<Tube<T>>,
}

impl<T: Real> TubeSet<T> {
    pub fn new(scenario: ScenarioConfig, k_bar: Option<usize>) -> Self {
        Self {
            scenario,
            k_bar,
            tubes: Vec::new(),
        }
    }

    /// Index of the tube for `k`, computing it on first use.
    pub fn get_or_insert(
        &mut self,
        sys: &LinearStochasticSystem<T>,
        k: DMatrix<T>,
        weight: Option<T>,
    ) -> Result<usize> {
        if let Some(i) = self.tubes.iter().position(|t| t.k == k) {
            return Ok(i);
        }
        let design = closed_loop(sys, &k)?;
        let tightening = Tightening::compute(&design, &sys.disturbance, self.k_bar, &self.scenario)?;
        log::info!(
            "tube {}: spectral radius {:.4}, k̄ = {}",
            self.tubes.len(),
            design.spectral_radius.as_f64(),
            tightening.k_bar
        );
        self.tubes.push(Tube {
            k,
            weight,
            design,
            tightening,
        });
        Ok(self.tubes.len() - 1)
    }

    /// Resolves `gain` and returns the matching tube index.
    pub fn resolve(
        &mut self,
        sys: &LinearStochasticSystem<T>,
        gain: &GainSpec<T>,
        target: TuneTarget,
    ) -> Result<usize> {
        let (k, weight) = resolve_gain(sys, gain, target, &self.scenario, self.k_bar)?;
        self.get_or_insert(sys, k, weight)
    }
}

/// Design-stage verdict for one controller.
#[derive(Debug, Clone)]
pub struct FeasibilityEntry {
    pub name: String,
    pub kind: ControllerKind,
    /// Per constraint row: `1 − saturation` of the profile in use.
    pub rows: Vec<RowFeasibility>,
    pub terminal_empty: bool,
    pub feasible: bool,
}

/// A controller together with the tube it was built on.
#[derive(Debug, Clone)]
pub struct DesignedController<T: Real> {
    pub spec: ControllerSpec<T>,
    pub tube: usize,
    pub controller: Arc<ControllerDesign<T>>,
}

impl<T: Real> DesignedController<T> {
    pub fn feasibility(&self) -> FeasibilityEntry {
        let c = &self.controller;
        let terminal_empty = c.terminal.iter().chain(c.z_terminal.iter()).any(|t| t.empty);
        FeasibilityEntry {
            name: self.spec.name.clone(),
            kind: self.spec.kind,
            rows: design_feasibility(&c.profile),
            terminal_empty,
            feasible: c.is_feasible_design(),
        }
    }
}

/// Builds the controller for `spec` on tube `tube`.
pub fn build_controller<T: Real>(
    sys: &LinearStochasticSystem<T>,
    spec: &ControllerSpec<T>,
    tube: &Tube<T>,
) -> Result<ControllerDesign<T>> {
    ControllerDesign::new(
        spec.kind,
        spec.horizon,
        spec.measured_input,
        tube.design.clone(),
        sys.cost.clone(),
        sys.h_u().clone(),
        &tube.tightening,
    )
}

/// Resolves every gain, computes the tightening per distinct gain and
/// builds all controllers.
pub fn design_all<T: Real>(
    sys: &LinearStochasticSystem<T>,
    specs: &[ControllerSpec<T>],
    tubes: &mut TubeSet<T>,
) -> Result<Vec<DesignedController<T>>> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let idx = tubes.resolve(sys, &spec.gain, tune_target(spec.kind))?;
        let controller = build_controller(sys, spec, &tubes.tubes[idx])?;
        out.push(DesignedController {
            spec: spec.clone(),
            tube: idx,
            controller: Arc::new(controller),
        });
    }
    Ok(out)
}
