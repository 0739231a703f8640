//! Phase masks for a phase-only modulator by alternating projections.
//!
//! The modulator field `u` is pushed back and forth between the set of
//! fields with the prescribed modulator amplitudes and the set whose
//! Fourier transform has the prescribed target moduli. The phase of the
//! final iterate is the mask.

pub mod backends;
pub mod bench;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod patterns;
pub mod pipeline;
pub mod projections;
pub mod solver;
pub mod transform;

pub use backends::{BackendSelector, Executor, Strategy};
pub use error::{Error, Result};
pub use grid::{Field, GridSpec, PhaseMask, Plane, Precision, PrecisionTag, Real, RealGrid};
pub use metrics::{ConvergenceRecord, Contrast, ErrorTolerances, PhysicalError};
pub use projections::{FourierConstraint, SlmConstraint};
pub use solver::{solve, solve_observed, SolveConfig, SolveResult, StopReason};
pub use transform::{FourierProvider, RustFftProvider};
