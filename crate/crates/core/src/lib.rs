//! Stochastic MPC with constraint tightening for linear systems under
//! additive i.i.d. disturbances.

pub mod artifact;
pub mod config;
pub mod controllers;
pub mod design;
pub mod error;
pub mod linalg;
pub mod lp;
pub mod polytope;
pub mod qp;
pub mod rng;
pub mod scalar;
pub mod simulator;
pub mod system;
pub mod terminal;
pub mod tightening;

pub use artifact::{design_from_config, DesignArtifact, DesignBundle};
pub use config::ConfigFile;
pub use controllers::{ControllerDesign, ControllerKind, ControllerState, MultiStep};
pub use error::{Result, SmpcError};
pub use polytope::Polytope;
pub use qp::{DenseQpSolver, QpOutcome, QpProblem, QpSolution};
pub use scalar::Real;
pub use simulator::{monte_carlo, ExperimentConfig, SimulationReport};
pub use system::{ClosedLoopDesign, LinearStochasticSystem};
pub use terminal::TerminalSet;
pub use tightening::{Tightening, TighteningProfile};

pub type PolytopeF64 = Polytope<f64>;
pub type QpProblemF64 = QpProblem<f64>;
pub type SystemF64 = LinearStochasticSystem<f64>;
pub type ClosedLoopDesignF64 = ClosedLoopDesign<f64>;
pub type TighteningF64 = Tightening<f64>;
pub type TighteningProfileF64 = TighteningProfile<f64>;
pub type TerminalSetF64 = TerminalSet<f64>;
pub type ControllerDesignF64 = ControllerDesign<f64>;
pub type ControllerStateF64 = ControllerState<f64>;
