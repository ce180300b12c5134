//! Proton transport and treatment-plan optimization.
//!
//! Stochastic track-length transport ([`sde`]) and a deterministic 1D
//! continuous-slowing-down solver ([`pde`]) compute the same fluence from two
//! directions; [`optimizer`] combines them to fit beam weights to a
//! prescribed depth-dose.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod materials;
pub mod optimizer;
pub mod pde;
pub mod phase_space;
pub mod rng;
pub mod scattering;
pub mod sde;
pub mod tally;
pub mod vec3;

pub use error::{Error, Result};
pub use materials::{Medium, Phantom, ScenarioParams};
pub use phase_space::{EnergyWindow, PhaseState, SpatialDomain};
pub use sde::{PencilBeam, SimConfig, Source, TransportMode, TransportModel};
pub use tally::{DoseMap, Edges, Grid, Tally};
