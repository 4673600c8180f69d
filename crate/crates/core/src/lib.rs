//! Transit-resolved optical Bloch simulation and interferometric retrieval of the
//! intensity-dependent refractive index of hot alkali vapors.

// `!(x > 0.0)` is used on purpose to reject NaN together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atomvapor;
pub mod bloch;
pub mod bucket;
pub mod constants;
pub mod error;
pub mod fitting;
pub mod interferometry;
pub mod montecarlo;
pub mod ode;

pub use atomvapor::{AtomicSystem, VaporCell, VelocityClass};
pub use bloch::{BlochOperator, DensityState};
pub use bucket::{CosineFit, RampTrace, Roi};
pub use error::{Error, Result};
pub use fitting::{ExpGrowthFit, KerrFit, PowerLawFit};
pub use interferometry::{Interferogram, PeakDetection, PhaseMap};
pub use montecarlo::{BeamField, CoherenceGrid, RunConfig, SusceptibilityMap, Trajectory};
