//! Phase-space states, spatial domains, the energy window, and the split of
//! the phase-space boundary into inflow (Γ−) and outflow (Γ+) parts.
//!
//! Γ+ holds states on the spatial boundary moving outward (`ω·n ≥ 0`, the tie
//! included) and states whose energy is exhausted. Γ− holds states on the
//! spatial boundary moving inward and states at the top of the energy window.

use crate::error::{Error, Result};
use crate::vec3::{self, Vec3};

/// Distance (cm) within which a position counts as lying on a face.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// A proton state `(x, ω, E)` or the absorbing cemetery marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseState {
    pub position: Vec3,
    pub direction: Vec3,
    pub energy: f64,
    pub alive: bool,
}

impl PhaseState {
    pub fn new(position: Vec3, direction: Vec3, energy: f64) -> Self {
        PhaseState {
            position,
            direction: vec3::normalize(direction),
            energy,
            alive: true,
        }
    }

    /// A state at depth `z` travelling along +z (1D mode convention).
    pub fn on_axis(z: f64, energy: f64) -> Self {
        PhaseState {
            position: [0.0, 0.0, z],
            direction: [0.0, 0.0, 1.0],
            energy,
            alive: true,
        }
    }

    pub fn cemetery() -> Self {
        PhaseState {
            position: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            energy: 0.0,
            alive: false,
        }
    }

    #[inline]
    pub fn depth(&self) -> f64 {
        self.position[2]
    }

    /// Applies a test function with the cemetery convention `f(†) = 0`.
    #[inline]
    pub fn observe<F: Fn(&PhaseState) -> f64>(&self, f: F) -> f64 {
        if self.alive {
            f(self)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyWindow {
    pub e_min: f64,
    pub e_max: f64,
}

impl EnergyWindow {
    pub fn new(e_min: f64, e_max: f64) -> Result<Self> {
        if !(e_min > 0.0 && e_min < e_max && e_max.is_finite()) {
            return Err(Error::Config(format!(
                "energy window needs 0 < e_min < e_max (got [{e_min}, {e_max}])"
            )));
        }
        Ok(EnergyWindow { e_min, e_max })
    }

    #[inline]
    pub fn contains_open(&self, e: f64) -> bool {
        e > self.e_min && e < self.e_max
    }
}

/// Spatial domain D. The beam axis is +z and depth runs over `[0, L]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialDomain {
    /// Laterally unbounded slab `0 ≤ z ≤ length`.
    Slab1d { length: f64 },
    /// Box `[-x/2, x/2] × [-y/2, y/2] × [0, z]`.
    Box3d { extent: [f64; 3] },
}

impl SpatialDomain {
    pub fn slab(length: f64) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::Config(format!("slab length must be > 0 (got {length})")));
        }
        Ok(SpatialDomain::Slab1d { length })
    }

    pub fn cuboid(extent: [f64; 3]) -> Result<Self> {
        if extent.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("box extents must be > 0 (got {extent:?})")));
        }
        Ok(SpatialDomain::Box3d { extent })
    }

    pub fn depth_length(&self) -> f64 {
        match *self {
            SpatialDomain::Slab1d { length } => length,
            SpatialDomain::Box3d { extent } => extent[2],
        }
    }

    /// Lower and upper bounds per axis; infinite for unbounded axes.
    pub fn bounds(&self) -> [(f64, f64); 3] {
        match *self {
            SpatialDomain::Slab1d { length } => [
                (f64::NEG_INFINITY, f64::INFINITY),
                (f64::NEG_INFINITY, f64::INFINITY),
                (0.0, length),
            ],
            SpatialDomain::Box3d { extent } => [
                (-0.5 * extent[0], 0.5 * extent[0]),
                (-0.5 * extent[1], 0.5 * extent[1]),
                (0.0, extent[2]),
            ],
        }
    }

    /// True for points in the closed domain, with [`BOUNDARY_TOL`] slack.
    pub fn contains(&self, x: Vec3) -> bool {
        self.bounds()
            .iter()
            .zip(x)
            .all(|(&(lo, hi), xi)| xi >= lo - BOUNDARY_TOL && xi <= hi + BOUNDARY_TOL)
    }

    /// Outward normal at `x` if `x` lies on `∂D`. On edges and corners the
    /// normalized sum of the active face normals is returned.
    pub fn outward_normal(&self, x: Vec3) -> Option<Vec3> {
        let mut n = [0.0; 3];
        let mut on_face = false;
        for (axis, &(lo, hi)) in self.bounds().iter().enumerate() {
            if (x[axis] - lo).abs() <= BOUNDARY_TOL {
                n[axis] -= 1.0;
                on_face = true;
            } else if (x[axis] - hi).abs() <= BOUNDARY_TOL {
                n[axis] += 1.0;
                on_face = true;
            }
        }
        on_face.then(|| vec3::normalize(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryClass {
    Interior,
    GammaMinus,
    GammaPlus,
}

/// Classifies a live state against the boundary decomposition.
///
/// Energy exhaustion takes precedence, then the spatial normal test, then the
/// top of the energy window. States strictly outside D have already left the
/// domain and classify as Γ+.
pub fn classify(state: &PhaseState, domain: &SpatialDomain, window: &EnergyWindow) -> Result<BoundaryClass> {
    if !state.alive {
        return Err(Error::Contract("classify called on the cemetery state".into()));
    }
    if state.energy <= window.e_min {
        return Ok(BoundaryClass::GammaPlus);
    }
    if !domain.contains(state.position) {
        return Ok(BoundaryClass::GammaPlus);
    }
    if let Some(n) = domain.outward_normal(state.position) {
        return Ok(if vec3::dot(state.direction, n) >= 0.0 {
            BoundaryClass::GammaPlus
        } else {
            BoundaryClass::GammaMinus
        });
    }
    if state.energy >= window.e_max {
        return Ok(BoundaryClass::GammaMinus);
    }
    Ok(BoundaryClass::Interior)
}

/// Why a track ended at an exit crossing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCause {
    SpatialExit,
    RangeOut,
}

/// The first point on a step segment where the state leaves the interior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub state: PhaseState,
    /// Fraction of the step travelled before the crossing, in `[0, 1]`.
    pub fraction: f64,
    pub cause: ExitCause,
}

/// Locates an exit between `previous` and `next` by linear interpolation on
/// the step segment. Returns `None` if `next` is still interior.
///
/// Position moves along `previous.direction` during an Euler step, so the
/// crossing state keeps that direction.
pub fn exit_test(
    previous: &PhaseState,
    next: &PhaseState,
    domain: &SpatialDomain,
    window: &EnergyWindow,
) -> Option<Crossing> {
    // (step fraction, cause, face hit as (axis, coordinate))
    type Candidate = (f64, ExitCause, Option<(usize, f64)>);
    let mut best: Option<Candidate> = None;

    if next.energy <= window.e_min {
        let drop = previous.energy - next.energy;
        let t = if drop > 0.0 {
            ((previous.energy - window.e_min) / drop).clamp(0.0, 1.0)
        } else {
            0.0
        };
        best = Some((t, ExitCause::RangeOut, None));
    }

    for (axis, &(lo, hi)) in domain.bounds().iter().enumerate() {
        let (a, b) = (previous.position[axis], next.position[axis]);
        let face = if b > hi {
            Some(hi)
        } else if b < lo {
            Some(lo)
        } else {
            None
        };
        if let Some(face) = face {
            let t = if b != a {
                ((face - a) / (b - a)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            if best.is_none_or(|(tb, _, _)| t < tb) {
                best = Some((t, ExitCause::SpatialExit, Some((axis, face))));
            }
        }
    }

    best.map(|(t, cause, face)| {
        let mut position = vec3::lerp(previous.position, next.position, t);
        if let Some((axis, value)) = face {
            position[axis] = value;
        }
        let energy = match cause {
            ExitCause::RangeOut => window.e_min,
            ExitCause::SpatialExit => previous.energy + t * (next.energy - previous.energy),
        };
        Crossing {
            state: PhaseState {
                position,
                direction: previous.direction,
                energy,
                alive: true,
            },
            fraction: t,
            cause,
        }
    })
}
