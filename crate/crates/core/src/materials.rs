//! Media, the range–energy power law and Bragg–Kleeman stopping power.
//!
//! Range in a homogeneous medium follows `R(E) = α·E^p`. Differentiating the
//! residual range along depth gives the stopping power `S(E) = E^(1-p)/(α·p)`,
//! which diverges as `E → 0` for `p > 1`. Below a screening energy the law is
//! held constant, so `S` stays finite and non-increasing in `E`.
//!
//! Built-in media carry the range-law constants of water, muscle, bone and
//! lung. The densities and the 1 MeV screening energy are not part of those
//! tables; they are documented defaults.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Default screening energy below which stopping power is held constant (MeV).
pub const DEFAULT_E_SCREEN: f64 = 1.0;

/// Published spread of the water range coefficient (cm·MeV^-p). Informational
/// only; the nominal value is used everywhere.
pub const WATER_ALPHA_UNCERTAINTY: f64 = 0.00025;

#[derive(Debug, Clone, PartialEq)]
pub struct Medium {
    pub name: String,
    /// Range coefficient α (cm·MeV^-p).
    pub alpha: f64,
    /// Range exponent p.
    pub p: f64,
    /// Mass density (g/cm³).
    pub rho: f64,
    /// Screening energy (MeV).
    pub e_screen: f64,
}

impl Medium {
    /// Validated constructor. Struct literals bypass validation on purpose so
    /// that tests can build deliberately unphysical media.
    pub fn new(name: impl Into<String>, alpha: f64, p: f64, rho: f64, e_screen: f64) -> Result<Self> {
        let m = Medium {
            name: name.into(),
            alpha,
            p,
            rho,
            e_screen,
        };
        let problems = m.violations();
        if problems.is_empty() {
            Ok(m)
        } else {
            Err(Error::Config(format!("medium `{}`: {}", m.name, problems.join("; "))))
        }
    }

    /// Every invariant the medium breaks, as `(field, message)`-style strings.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            out.push(format!("alpha must be > 0 (got {})", self.alpha));
        }
        if !(1.0..=2.0).contains(&self.p) {
            out.push(format!("p must lie in [1, 2] (got {})", self.p));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            out.push(format!("rho must be > 0 (got {})", self.rho));
        }
        if !(self.e_screen > 0.0 && self.e_screen.is_finite()) {
            out.push(format!("e_screen must be > 0 (got {})", self.e_screen));
        }
        out
    }

    pub fn water() -> Self {
        Medium {
            name: "water".into(),
            alpha: 0.00246,
            p: 1.75,
            rho: 1.0,
            e_screen: DEFAULT_E_SCREEN,
        }
    }

    pub fn muscle() -> Self {
        Medium {
            name: "muscle".into(),
            alpha: 0.0021,
            p: 1.75,
            rho: 1.05,
            e_screen: DEFAULT_E_SCREEN,
        }
    }

    pub fn bone() -> Self {
        Medium {
            name: "bone".into(),
            alpha: 0.0011,
            p: 1.77,
            rho: 1.85,
            e_screen: DEFAULT_E_SCREEN,
        }
    }

    pub fn lung() -> Self {
        Medium {
            name: "lung".into(),
            alpha: 0.0033,
            p: 1.74,
            rho: 0.26,
            e_screen: DEFAULT_E_SCREEN,
        }
    }

    /// The four built-in media.
    pub fn builtins() -> Vec<Medium> {
        vec![Self::water(), Self::muscle(), Self::bone(), Self::lung()]
    }

    /// CSDA range `α·e0^p` (cm).
    pub fn range(&self, e0: f64) -> Result<f64> {
        if !(e0 >= 0.0) {
            return Err(Error::Domain(format!("range of negative energy {e0} MeV")));
        }
        Ok(self.range_unchecked(e0))
    }

    #[inline]
    pub(crate) fn range_unchecked(&self, e0: f64) -> f64 {
        self.alpha * e0.powf(self.p)
    }

    /// Energy remaining after travelling `z` cm from initial energy `e0`;
    /// zero at and beyond the range.
    pub fn energy_at_depth(&self, e0: f64, z: f64) -> f64 {
        let residual = self.range_unchecked(e0.max(0.0)) - z.max(0.0);
        if residual <= 0.0 {
            0.0
        } else {
            (residual / self.alpha).powf(1.0 / self.p)
        }
    }

    /// Screened Bragg–Kleeman stopping power (MeV/cm).
    #[inline]
    pub fn stopping_power(&self, e: f64) -> f64 {
        let e = e.max(self.e_screen);
        e.powf(1.0 - self.p) / (self.alpha * self.p)
    }

    /// Mass stopping power `S/ρ` (MeV·cm²/g).
    #[inline]
    pub fn mass_stopping_power(&self, e: f64) -> f64 {
        self.stopping_power(e) / self.rho
    }
}

/// Multiplicative truncated-Gaussian perturbation of density and range coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub density_rel_sigma: f64,
    pub alpha_rel_sigma: f64,
    /// Largest allowed |relative perturbation|; must lie in (0, 1).
    pub truncation: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            density_rel_sigma: 0.03,
            alpha_rel_sigma: 0.03,
            truncation: 0.2,
        }
    }
}

impl ScenarioParams {
    /// No perturbation at all.
    pub fn nominal() -> Self {
        ScenarioParams {
            density_rel_sigma: 0.0,
            alpha_rel_sigma: 0.0,
            truncation: 0.2,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.density_rel_sigma >= 0.0) {
            out.push("density_rel_sigma must be >= 0".to_string());
        }
        if !(self.alpha_rel_sigma >= 0.0) {
            out.push("alpha_rel_sigma must be >= 0".to_string());
        }
        if !(self.truncation > 0.0 && self.truncation < 1.0) {
            out.push(format!("truncation must lie in (0, 1) (got {})", self.truncation));
        }
        out
    }

    pub fn is_degenerate(&self) -> bool {
        self.density_rel_sigma == 0.0 && self.alpha_rel_sigma == 0.0
    }
}

fn truncated_multiplier<R: Rng + ?Sized>(sigma: f64, truncation: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    loop {
        let eps: f64 = normal.sample(rng);
        if eps.abs() <= truncation {
            return 1.0 + eps;
        }
    }
}

/// A perturbed copy of `medium`: `rho` and `alpha` are scaled by independent
/// truncated-Gaussian factors `1 + ε`, `|ε| ≤ truncation`.
pub fn perturb_medium<R: Rng + ?Sized>(medium: &Medium, params: &ScenarioParams, rng: &mut R) -> Medium {
    let rho_factor = truncated_multiplier(params.density_rel_sigma, params.truncation, rng);
    let alpha_factor = truncated_multiplier(params.alpha_rel_sigma, params.truncation, rng);
    Medium {
        rho: medium.rho * rho_factor,
        alpha: medium.alpha * alpha_factor,
        ..medium.clone()
    }
}

/// One depth layer of a piecewise-constant phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Depth at which this layer ends (cm); the last layer may be infinite.
    pub z_end: f64,
    pub medium: Medium,
}

/// Piecewise-constant media stacked along the beam axis (depth `z`).
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    layers: Vec<Layer>,
}

impl Phantom {
    pub fn uniform(medium: Medium) -> Self {
        Phantom {
            layers: vec![Layer {
                z_end: f64::INFINITY,
                medium,
            }],
        }
    }

    /// Builds a layered phantom from `(medium, thickness)` pairs. The last
    /// layer is extended to infinite depth.
    pub fn layered(stack: Vec<(Medium, f64)>) -> Result<Self> {
        if stack.is_empty() {
            return Err(Error::Config("phantom needs at least one layer".into()));
        }
        let n = stack.len();
        let mut z = 0.0;
        let mut layers = Vec::with_capacity(n);
        for (i, (medium, thickness)) in stack.into_iter().enumerate() {
            if !(thickness > 0.0) {
                return Err(Error::Config(format!("layer {i} thickness must be > 0")));
            }
            z += thickness;
            let z_end = if i + 1 == n { f64::INFINITY } else { z };
            layers.push(Layer { z_end, medium });
        }
        Ok(Phantom { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Medium occupying depth `z`; interfaces belong to the deeper layer.
    #[inline]
    pub fn medium_at(&self, z: f64) -> &Medium {
        &self.layers[self.layer_index(z)].medium
    }

    #[inline]
    pub fn layer_index(&self, z: f64) -> usize {
        self.layers
            .iter()
            .position(|l| z < l.z_end)
            .unwrap_or(self.layers.len() - 1)
    }

    /// Largest stopping power over all layers at energy `e`.
    pub fn max_stopping_power(&self, e: f64) -> f64 {
        self.layers
            .iter()
            .map(|l| l.medium.stopping_power(e))
            .fold(0.0, f64::max)
    }

    /// Independently perturbs every layer.
    pub fn perturbed<R: Rng + ?Sized>(&self, params: &ScenarioParams, rng: &mut R) -> Phantom {
        Phantom {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    z_end: l.z_end,
                    medium: perturb_medium(&l.medium, params, rng),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn range_examples() {
        let w = Medium::water();
        // 0.00246 * 150^1.75 evaluated independently: 150^1.75 = exp(1.75 ln 150)
        let expected = 0.00246 * (1.75f64 * 150f64.ln()).exp();
        assert!((w.range(150.0).unwrap() - expected).abs() < 1e-12);
        assert!((w.range(150.0).unwrap() - 15.8).abs() < 0.05);

        let unit = Medium {
            alpha: 1.0,
            p: 1.0,
            ..Medium::water()
        };
        assert_eq!(unit.range(5.0).unwrap(), 5.0);

        let m = Medium::muscle();
        assert!((m.range(100.0).unwrap() - 6.65).abs() < 0.01);

        assert!(matches!(w.range(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn energy_at_depth_examples() {
        let w = Medium::water();
        let r0 = w.range(150.0).unwrap();
        assert!((w.energy_at_depth(150.0, 0.0) - 150.0).abs() < 1e-10);
        assert_eq!(w.energy_at_depth(150.0, r0), 0.0);
        let half = w.energy_at_depth(150.0, r0 / 2.0);
        assert!((half - 150.0 * 0.5f64.powf(1.0 / 1.75)).abs() < 1e-9);
        assert!((half - 100.9).abs() < 0.05);
    }

    #[test]
    fn stopping_power_examples() {
        let w = Medium::water();
        assert!((w.stopping_power(150.0) - 5.42).abs() < 0.01);
        let flat = Medium {
            alpha: 0.37,
            p: 1.0,
            ..Medium::water()
        };
        for e in [0.0, 0.5, 3.0, 250.0] {
            assert!((flat.stopping_power(e) - 1.0 / 0.37).abs() < 1e-12);
        }
        assert_eq!(w.stopping_power(w.e_screen / 2.0), w.stopping_power(w.e_screen));
        assert!(w.stopping_power(0.0).is_finite());
    }

    #[test]
    fn validation_rejects_bad_exponent() {
        assert!(Medium::new("x", 0.002, 2.5, 1.0, 1.0).is_err());
        assert!(Medium::new("x", -0.002, 1.5, 1.0, 1.0).is_err());
        assert!(Medium::new("x", 0.002, 1.5, 1.0, 1.0).is_ok());
        for m in Medium::builtins() {
            assert!(m.violations().is_empty(), "{}", m.name);
        }
    }

    #[test]
    fn integrating_stopping_power_recovers_range() {
        // RK4 on dE/dz = -S(E) from e0 down to e_screen.
        let w = Medium::water();
        for e0 in [60.0, 105.0, 150.0] {
            let h = 1e-4;
            let (mut e, mut z) = (e0, 0.0);
            let f = |e: f64| -w.stopping_power(e);
            while e > w.e_screen {
                let k1 = f(e);
                let k2 = f(e + 0.5 * h * k1);
                let k3 = f(e + 0.5 * h * k2);
                let k4 = f(e + h * k3);
                let next = e + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                if next <= w.e_screen {
                    z += h * (e - w.e_screen) / (e - next);
                    break;
                }
                e = next;
                z += h;
            }
            let r = w.range(e0).unwrap();
            assert!((z - r).abs() / r < 0.005, "e0={e0}: {z} vs {r}");
        }
    }

    #[test]
    fn zero_sigma_perturbation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Medium::water();
        assert_eq!(perturb_medium(&w, &ScenarioParams::nominal(), &mut rng), w);
    }

    #[test]
    fn perturbed_density_mean_matches_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Medium::water();
        let params = ScenarioParams::default();
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| perturb_medium(&w, &params, &mut rng).rho).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - w.rho).abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(draws.iter().all(|&r| r > 0.0));
        assert!(draws
            .iter()
            .all(|&r| (r / w.rho - 1.0).abs() <= params.truncation + 1e-15));
    }

    #[test]
    fn layered_lookup_switches_at_interface() {
        let ph = Phantom::layered(vec![(Medium::water(), 2.0), (Medium::bone(), 1.0)]).unwrap();
        assert_eq!(ph.medium_at(1.999).name, "water");
        assert_eq!(ph.medium_at(2.0).name, "bone");
        assert_eq!(ph.medium_at(50.0).name, "bone");
    }

    proptest! {
        #[test]
        fn residual_range_identity(e0 in 2.0f64..250.0, frac in 0.0f64..0.999) {
            let w = Medium::water();
            let r0 = w.range(e0).unwrap();
            let z = frac * r0;
            let e = w.energy_at_depth(e0, z);
            let lhs = w.range(e).unwrap();
            prop_assert!(((lhs - (r0 - z)) / r0).abs() < 1e-10);
        }

        #[test]
        fn stopping_power_non_increasing(e in 0.0f64..300.0, de in 0.0f64..50.0) {
            for m in Medium::builtins() {
                prop_assert!(m.stopping_power(e + de) <= m.stopping_power(e));
                prop_assert!(m.stopping_power(e) > 0.0);
            }
        }

        #[test]
        fn range_strictly_increasing(e in 0.0f64..300.0, de in 1e-6f64..50.0) {
            let w = Medium::water();
            prop_assert!(w.range(e + de).unwrap() > w.range(e).unwrap());
        }
    }
}
