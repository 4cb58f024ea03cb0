//! Simulation and verification laboratory for supercritical branching
//! particle systems on finite state spaces.
//!
//! The crate builds a jump-process motion with optional killing, attaches a
//! state-dependent branching rate and offspring law, computes the principal
//! eigen-triple of the Feynman-Kac operator, and then simulates the
//! particle system two ways: forward under the original measure, and
//! through the spine construction under the size-biased measure. A
//! verification harness checks the additive martingale, the spine
//! decomposition, the unit-mass genealogy identity, the `L log L`
//! dichotomy, and the strong law of large numbers against matrix-analytic
//! oracles.

pub mod branching;
pub mod forward;
pub mod harness;
pub mod error;
pub mod motion;
pub mod spectral;
pub mod spine;
pub mod stats;
pub mod streams;

pub use branching::{BranchingLaw, LlogLReport, OffspringLaw};
pub use error::{Error, Result};
pub use forward::{simulate, EventLog, PointMeasure, SimConfig, SimResult, SimStatus, StateCounts};
pub use harness::{dichotomy_experiment, run_ensemble, verify_ratio_limit, verify_slln, EnsembleConfig, EnsembleResult};
pub use motion::{MotionModel, Trajectory};
pub use spectral::{h_transform, iu_fit, FeynmanKacOperator, IUFit, SpectralTriple};
pub use spine::{unit_mass_identity, SpineRecord, SpineSimulator};
