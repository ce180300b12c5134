//! Cross sections and the elastic/non-elastic mixture transition kernel.
//!
//! Given a collision at `(x, ω, E)`, the post-collision state is drawn from
//!
//! ```text
//! π = (σ_e/σ_n)·π_e(ω → ω')·δ(E' − E) + (σ_ne/σ_n)·π_ne(ω → ω')·U(E' ∈ [f_lo·E, f_hi·E])
//! ```
//!
//! with weights evaluated at the pre-collision state. Both angular laws are
//! the rotationally symmetric exponential-concentration density
//! `κ·exp(κ ω·ω') / (4π sinh κ)` about the incoming direction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::phase_space::{EnergyWindow, PhaseState};
use crate::vec3::{self, Vec3};

/// `σ(E) = σ_ref · (E / E_ref)^exponent` (per cm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateLaw {
    pub sigma_ref: f64,
    pub e_ref: f64,
    pub exponent: f64,
}

impl RateLaw {
    pub const ZERO: RateLaw = RateLaw {
        sigma_ref: 0.0,
        e_ref: 100.0,
        exponent: 0.0,
    };

    pub fn constant(sigma: f64) -> Self {
        RateLaw {
            sigma_ref: sigma,
            ..Self::ZERO
        }
    }

    #[inline]
    pub fn eval(&self, e: f64) -> f64 {
        if self.exponent == 0.0 || self.sigma_ref == 0.0 {
            self.sigma_ref
        } else {
            self.sigma_ref * (e.max(1e-3) / self.e_ref).powf(self.exponent)
        }
    }

    /// Upper bound over the energy window (a power law is monotone).
    pub fn upper_bound(&self, window: &EnergyWindow) -> f64 {
        self.eval(window.e_min).max(self.eval(window.e_max))
    }

    fn violations(&self, what: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.sigma_ref >= 0.0 && self.sigma_ref.is_finite()) {
            out.push(format!("{what}: sigma must be >= 0 (got {})", self.sigma_ref));
        }
        if !(self.e_ref > 0.0) {
            out.push(format!("{what}: e_ref must be > 0"));
        }
        if !self.exponent.is_finite() {
            out.push(format!("{what}: exponent must be finite"));
        }
        out
    }
}

/// Elastic and non-elastic rates over one depth interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XsRegion {
    pub z_end: f64,
    pub elastic: RateLaw,
    pub nonelastic: RateLaw,
}

/// Piecewise-constant-in-depth cross sections.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSections {
    regions: Vec<XsRegion>,
}

impl CrossSections {
    pub fn none() -> Self {
        Self::uniform(RateLaw::ZERO, RateLaw::ZERO)
    }

    pub fn uniform(elastic: RateLaw, nonelastic: RateLaw) -> Self {
        CrossSections {
            regions: vec![XsRegion {
                z_end: f64::INFINITY,
                elastic,
                nonelastic,
            }],
        }
    }

    /// Regions must be given in increasing `z_end`; the last is extended to
    /// infinite depth.
    pub fn layered(mut regions: Vec<XsRegion>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Config("cross sections need at least one region".into()));
        }
        if regions.windows(2).any(|w| !(w[0].z_end < w[1].z_end)) {
            return Err(Error::Config("cross-section regions must be ordered by depth".into()));
        }
        let problems: Vec<String> = regions
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                let mut v = r.elastic.violations(&format!("region {i} elastic"));
                v.extend(r.nonelastic.violations(&format!("region {i} non-elastic")));
                v
            })
            .collect();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        if let Some(last) = regions.last_mut() {
            last.z_end = f64::INFINITY;
        }
        Ok(CrossSections { regions })
    }

    pub fn regions(&self) -> &[XsRegion] {
        &self.regions
    }

    #[inline]
    fn region_at(&self, z: f64) -> &XsRegion {
        self.regions
            .iter()
            .find(|r| z < r.z_end)
            .unwrap_or(&self.regions[self.regions.len() - 1])
    }

    /// `(σ_e, σ_ne)` at depth `z` and energy `e`.
    #[inline]
    pub fn rates(&self, z: f64, e: f64) -> (f64, f64) {
        let r = self.region_at(z);
        (r.elastic.eval(e), r.nonelastic.eval(e))
    }

    /// A bound on `σ_n` valid everywhere inside the energy window, used as the
    /// majorant rate of the thinned jump clock.
    pub fn rate_bound(&self, window: &EnergyWindow) -> f64 {
        self.regions
            .iter()
            .map(|r| r.elastic.upper_bound(window) + r.nonelastic.upper_bound(window))
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.regions
            .iter()
            .all(|r| r.elastic.sigma_ref == 0.0 && r.nonelastic.sigma_ref == 0.0)
    }
}

/// Total collision rate `σ_n = σ_e + σ_ne` at the state.
#[inline]
pub fn total_rate(state: &PhaseState, xs: &CrossSections) -> f64 {
    let (e, ne) = xs.rates(state.depth(), state.energy);
    e + ne
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    /// Elastic angular concentration; larger is more forward-peaked.
    pub kappa_e: f64,
    pub ne_frac_min: f64,
    pub ne_frac_max: f64,
    pub kappa_ne: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            kappa_e: 2000.0,
            ne_frac_min: 0.5,
            ne_frac_max: 0.95,
            kappa_ne: 20.0,
        }
    }
}

impl KernelParams {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.kappa_e > 0.0) {
            out.push("kappa_e must be > 0".to_string());
        }
        if !(self.kappa_ne > 0.0) {
            out.push("kappa_ne must be > 0".to_string());
        }
        if !(self.ne_frac_min > 0.0 && self.ne_frac_min <= self.ne_frac_max && self.ne_frac_max <= 1.0) {
            out.push(format!(
                "ne_frac_min/ne_frac_max must satisfy 0 < min <= max <= 1 (got {}, {})",
                self.ne_frac_min, self.ne_frac_max
            ));
        }
        out
    }
}

/// Angular density per steradian of the concentration-`kappa` law at
/// `cos = ω·ω'`.
pub fn angular_density(kappa: f64, cos: f64) -> f64 {
    kappa * (kappa * (cos - 1.0)).exp() / (2.0 * std::f64::consts::PI * -(-2.0 * kappa).exp_m1())
}

/// Draws `ω'` about `w` (unit) from the concentration-`kappa` law.
pub fn sample_concentrated_direction<R: Rng + ?Sized>(w: Vec3, kappa: f64, rng: &mut R) -> Vec3 {
    // Inverse CDF in t = 1 − cos θ, stable for large kappa.
    let xi = 1.0 - rng.random::<f64>();
    let t = (-(xi + (1.0 - xi) * (-2.0 * kappa).exp()).ln() / kappa).clamp(0.0, 2.0);
    let cos = 1.0 - t;
    let sin = (t * (2.0 - t)).max(0.0).sqrt();
    let phi = std::f64::consts::TAU * rng.random::<f64>();
    let (u, v) = vec3::orthonormal_frame(w);
    let d = [
        cos * w[0] + sin * (phi.cos() * u[0] + phi.sin() * v[0]),
        cos * w[1] + sin * (phi.cos() * u[1] + phi.sin() * v[1]),
        cos * w[2] + sin * (phi.cos() * u[2] + phi.sin() * v[2]),
    ];
    vec3::normalize(d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub direction: Vec3,
    pub energy: f64,
    pub elastic: bool,
}

/// Samples the post-collision direction and energy from the mixture kernel.
pub fn sample_transition<R: Rng + ?Sized>(
    state: &PhaseState,
    xs: &CrossSections,
    params: &KernelParams,
    rng: &mut R,
) -> Result<Transition> {
    let (se, sne) = xs.rates(state.depth(), state.energy);
    let total = se + sne;
    if !(total > 0.0) {
        return Err(Error::Contract(
            "sample_transition at a state with zero collision rate".into(),
        ));
    }
    let elastic = rng.random::<f64>() * total < se;
    if elastic {
        Ok(Transition {
            direction: sample_concentrated_direction(state.direction, params.kappa_e, rng),
            energy: state.energy,
            elastic: true,
        })
    } else {
        let frac = params.ne_frac_min + (params.ne_frac_max - params.ne_frac_min) * rng.random::<f64>();
        Ok(Transition {
            direction: sample_concentrated_direction(state.direction, params.kappa_ne, rng),
            energy: state.energy * frac,
            elastic: false,
        })
    }
}

/// `2π ∫ f(cos) d(cos)` of the concentration-`kappa` density by composite
/// Simpson on panels graded geometrically toward the forward direction.
fn angular_mass(kappa: f64, panels: usize) -> f64 {
    let panels = panels.max(2);
    let norm = -(-2.0 * kappa).exp_m1();
    let f = |t: f64| kappa * (-kappa * t).exp() / norm;
    let t_min = (1e-3 / kappa).min(1e-3);
    let ratio = (2.0 / t_min).powf(1.0 / (panels - 1) as f64);
    let simpson = |a: f64, b: f64| (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
    let mut sum = simpson(0.0, t_min);
    let mut a = t_min;
    for k in 1..panels {
        let b = if k + 1 == panels { 2.0 } else { a * ratio };
        sum += simpson(a, b);
        a = b;
    }
    sum
}

/// Midpoint quadrature of the retained-energy density over `[0, e]`.
fn energy_mass(e: f64, params: &KernelParams, cells: usize) -> f64 {
    let lo = params.ne_frac_min * e;
    let hi = params.ne_frac_max * e;
    if hi <= lo {
        // Degenerate fraction: a point mass.
        return 1.0;
    }
    let density = |x: f64| if x >= lo && x <= hi { 1.0 / (hi - lo) } else { 0.0 };
    let mut total = 0.0;
    // Panels aligned with the support edges.
    for (a, b, n) in [(0.0, lo, cells / 4), (lo, hi, cells / 2), (hi, e, cells / 4)] {
        let n = n.max(1);
        let h = (b - a) / n as f64;
        total += (0..n).map(|i| density(a + (i as f64 + 0.5) * h) * h).sum::<f64>();
    }
    total
}

/// Numerically integrates the implemented mixture kernel over `(ω', E')`.
/// Should equal 1 up to quadrature error.
pub fn kernel_mass(state: &PhaseState, xs: &CrossSections, params: &KernelParams, resolution: usize) -> Result<f64> {
    let (se, sne) = xs.rates(state.depth(), state.energy);
    let total = se + sne;
    if !(total > 0.0) {
        return Err(Error::Contract(
            "kernel_mass at a state with zero collision rate".into(),
        ));
    }
    let (we, wne) = (se / total, sne / total);
    let elastic = if we > 0.0 {
        we * angular_mass(params.kappa_e, resolution / 2)
    } else {
        0.0
    };
    let nonelastic = if wne > 0.0 {
        wne * angular_mass(params.kappa_ne, resolution / 2) * energy_mass(state.energy, params, resolution)
    } else {
        0.0
    };
    Ok(elastic + nonelastic)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::rng::{tag, StreamFactory};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn transitions_stay_on_the_sphere_and_never_gain_energy(
            seed in any::<u64>(), e in 1.5f64..250.0, mu in -1.0f64..1.0, phi in 0.0f64..std::f64::consts::TAU,
            se in 0.0f64..1.0, sne in 0.0f64..1.0, kappa_e in 0.01f64..1e5,
        ) {
            prop_assume!(se + sne > 1e-6);
            let s = (1.0 - mu * mu).sqrt();
            let state = PhaseState::new([0.0; 3], [s * phi.cos(), s * phi.sin(), mu], e);
            let xs = CrossSections::uniform(RateLaw::constant(se), RateLaw::constant(sne));
            let params = KernelParams { kappa_e, ..KernelParams::default() };
            let mut rng = StreamFactory::new(seed, tag::TRANSPORT).stream(0);
            for _ in 0..50 {
                let t = sample_transition(&state, &xs, &params, &mut rng).unwrap();
                prop_assert!((vec3::norm(t.direction) - 1.0).abs() < 1e-12);
                if t.elastic {
                    prop_assert_eq!(t.energy, e);
                } else {
                    prop_assert!(t.energy < e && t.energy > 0.0);
                }
            }
        }
    }
}
