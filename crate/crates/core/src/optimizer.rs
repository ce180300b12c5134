//! Beam-weight optimization against a prescribed depth-dose.
//!
//! The cost is
//!
//! ```text
//! J(g) = Σ_b w_b (D_b[g] − d_b)² h + (α/2) ‖g‖²
//! ```
//!
//! over depth bins of width `h`, minimized over the box `0 ≤ g ≤ g_max`.
//! Three gradient paths share one interface: a precomputed influence matrix,
//! the discrete adjoint of the 1D solver, and a hybrid estimator that takes
//! the dose from Monte Carlo and the adjoint from the 1D solver, averaged
//! over sampled physics scenarios.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::materials::{Medium, Phantom, ScenarioParams};
use crate::pde::{adjoint_inflow_trace, beam_spectrum, solve_projected, AdjointSource, Mesh1D, SolverOptions};
use crate::phase_space::{EnergyWindow, SpatialDomain};
use crate::rng::{tag, StreamFactory};
use crate::sde::{run_batch_with_streams, PencilBeam, SimConfig, Source, TransportModel};
use crate::tally::{DoseMap, Edges, Estimate, Grid};

/// One Gaussian pencil beam of the bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beam {
    pub energy: f64,
    pub sigma: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamBank {
    pub beams: Vec<Beam>,
}

impl BeamBank {
    pub fn new(beams: Vec<Beam>, window: &EnergyWindow) -> Result<Self> {
        let bank = BeamBank { beams };
        let v = bank.violations(window);
        if v.is_empty() {
            Ok(bank)
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn violations(&self, window: &EnergyWindow) -> Vec<String> {
        let mut out = Vec::new();
        for (i, b) in self.beams.iter().enumerate() {
            if !(b.energy > window.e_min && b.energy <= window.e_max) {
                out.push(format!(
                    "beam {i}: energy {} MeV outside window ({}, {}]",
                    b.energy, window.e_min, window.e_max
                ));
            }
            if !(b.sigma >= 0.0 && b.sigma.is_finite()) {
                out.push(format!("beam {i}: sigma must be >= 0"));
            }
            if !(b.weight >= 0.0 && b.weight.is_finite()) {
                out.push(format!("beam {i}: weight must be >= 0"));
            }
        }
        out
    }

    /// `n` beams whose ranges in `medium` are evenly spaced over
    /// `[range_lo, range_hi]`.
    pub fn range_spread(n: usize, range_lo: f64, range_hi: f64, sigma: f64, medium: &Medium) -> Self {
        let beams = (0..n)
            .map(|i| {
                let r = if n == 1 {
                    range_hi
                } else {
                    range_lo + (range_hi - range_lo) * i as f64 / (n - 1) as f64
                };
                Beam {
                    energy: (r / medium.alpha).powf(1.0 / medium.p),
                    sigma,
                    weight: 1.0,
                }
            })
            .collect();
        BeamBank { beams }
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.beams.iter().map(|b| b.weight).collect()
    }

    pub fn pencil(&self, i: usize) -> PencilBeam {
        PencilBeam::axial(self.beams[i].energy, self.beams[i].sigma)
    }
}

/// Target dose and weights per depth bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Prescription {
    pub bins: Edges,
    pub dose: Vec<f64>,
    pub weights: Vec<f64>,
    pub target: (f64, f64),
}

impl Prescription {
    /// Dose `level` with weight `w_in` on bins whose centers lie in the
    /// target, zero dose with weight `w_out` elsewhere.
    pub fn target_box(bins: Edges, target: (f64, f64), level: f64, w_in: f64, w_out: f64) -> Result<Self> {
        if !(target.1 > target.0) {
            return Err(Error::Config(format!(
                "empty target interval [{}, {}]",
                target.0, target.1
            )));
        }
        if !(level >= 0.0 && w_in >= 0.0 && w_out >= 0.0) {
            return Err(Error::Config("prescription level and weights must be >= 0".into()));
        }
        let inside = |i: usize| {
            let c = bins.center(i);
            c >= target.0 && c <= target.1
        };
        Ok(Prescription {
            bins,
            dose: (0..bins.n).map(|i| if inside(i) { level } else { 0.0 }).collect(),
            weights: (0..bins.n).map(|i| if inside(i) { w_in } else { w_out }).collect(),
            target,
        })
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.dose.len() != self.bins.n || self.weights.len() != self.bins.n {
            out.push("prescription vectors must match the depth bins".into());
        }
        if self.dose.iter().any(|&d| !(d >= 0.0)) {
            out.push("prescribed dose must be >= 0".into());
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            out.push("prescription weights must be >= 0".into());
        }
        out
    }

    /// Bins lying entirely inside the target interval.
    pub fn target_bins(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.bins.n)
            .filter(|&i| self.bins.edge(i) >= self.target.0 - 1e-12 && self.bins.edge(i + 1) <= self.target.1 + 1e-12)
    }

    /// Σ w (D − d)² h
    pub fn fidelity(&self, dose: &[f64]) -> f64 {
        let h = self.bins.width();
        dose.iter()
            .zip(&self.dose)
            .zip(&self.weights)
            .map(|((d, p), w)| w * (d - p) * (d - p))
            .sum::<f64>()
            * h
    }

    /// ∂/∂D of [`fidelity`](Self::fidelity): 2 w (D − d) h.
    pub fn fidelity_gradient(&self, dose: &[f64]) -> Vec<f64> {
        let h = self.bins.width();
        dose.iter()
            .zip(&self.dose)
            .zip(&self.weights)
            .map(|((d, p), w)| 2.0 * w * (d - p) * h)
            .collect()
    }
}

/// (α/2) ‖g‖²
pub fn regularization(g: &[f64], alpha_reg: f64) -> f64 {
    0.5 * alpha_reg * g.iter().map(|x| x * x).sum::<f64>()
}

/// Component-wise clamp to `[0, g_max]`.
pub fn project(g: &[f64], g_max: f64) -> Vec<f64> {
    g.iter().map(|&x| x.max(0.0).min(g_max)).collect()
}

/// ‖g − Π(g − ∇J)‖, zero exactly at solutions of the box-constrained
/// variational inequality.
pub fn vi_residual(g: &[f64], grad: &[f64], g_max: f64) -> f64 {
    g.iter()
        .zip(grad)
        .map(|(&x, &d)| {
            let r = x - (x - d).max(0.0).min(g_max);
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Dose per depth bin from unit weight of each beam (rows: bins).
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub bins: Edges,
    pub matrix: DMatrix<f64>,
    /// Standard error of each entry; zero for deterministic columns.
    pub stderr: DMatrix<f64>,
}

impl InfluenceMatrix {
    /// A matrix without statistical error.
    pub fn exact(bins: Edges, matrix: DMatrix<f64>) -> Self {
        let stderr = DMatrix::zeros(matrix.nrows(), matrix.ncols());
        InfluenceMatrix { bins, matrix, stderr }
    }

    /// Dose of the plan `g` with its standard error (columns are independent).
    pub fn dose_map(&self, g: &[f64]) -> DoseMap {
        let values = self.dose(g);
        let stderr = (0..self.bins.n)
            .map(|i| {
                g.iter()
                    .enumerate()
                    .map(|(j, &gj)| (gj * self.stderr[(i, j)]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        DoseMap {
            depth: self.bins,
            values,
            stderr,
        }
    }

    pub fn n_beams(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn dose(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.n_beams());
        let mut out = vec![0.0; self.bins.n];
        for (j, &gj) in g.iter().enumerate() {
            for (o, &d) in out.iter_mut().zip(self.matrix.column(j).iter()) {
                *o += d * gj;
            }
        }
        out
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.matrix.column(j).iter().copied().collect()
    }
}

/// How a dose is computed from beam weights.
#[derive(Debug, Clone, PartialEq)]
pub enum DoseEngine {
    /// 1D deterministic solve.
    Pde { mesh: Mesh1D, opts: SolverOptions },
    /// Track-length Monte Carlo; `energy_bins` sets the stopping-power
    /// resolution of the fluence → dose map.
    MonteCarlo {
        sim: SimConfig,
        n_particles: usize,
        energy_bins: usize,
    },
}

/// The fixed data of a planning problem.
#[derive(Debug, Clone)]
pub struct PlanProblem {
    pub bank: BeamBank,
    pub prescription: Prescription,
    pub phantom: Phantom,
    pub domain: SpatialDomain,
    pub window: EnergyWindow,
    pub alpha_reg: f64,
    pub g_max: f64,
    pub q_factor: f64,
}

impl PlanProblem {
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.bank.violations(&self.window);
        out.extend(self.prescription.violations());
        if !(self.alpha_reg >= 0.0) {
            out.push(format!("alpha_reg must be >= 0 (got {})", self.alpha_reg));
        }
        if !(self.g_max > 0.0) {
            out.push(format!("g_max must be > 0 (got {})", self.g_max));
        }
        out
    }

    pub fn cost(&self, dose: &[f64], g: &[f64]) -> f64 {
        self.prescription.fidelity(dose) + regularization(g, self.alpha_reg)
    }

    fn transport_model(&self, phantom: &Phantom) -> TransportModel {
        TransportModel::csda(self.domain, self.window, phantom.clone())
    }

    fn tally_grid(&self, energy_bins: usize) -> Result<Grid> {
        Grid::new(
            self.prescription.bins,
            Edges::new(self.window.e_min, self.window.e_max, energy_bins)?,
            None,
        )
    }

    /// Dose of the plan `g` in `phantom`; `streams` feeds Monte Carlo.
    pub fn plan_dose(
        &self,
        g: &[f64],
        phantom: &Phantom,
        engine: &DoseEngine,
        streams: &StreamFactory,
    ) -> Result<DoseMap> {
        match engine {
            DoseEngine::Pde { mesh, opts } => {
                let mut spectrum = vec![0.0; mesh.n_e];
                for (b, &gb) in self.bank.beams.iter().zip(g) {
                    if gb != 0.0 {
                        for (s, x) in spectrum.iter_mut().zip(beam_spectrum(b.energy, b.sigma, mesh)?) {
                            *s += gb * x;
                        }
                    }
                }
                Ok(solve_projected(&spectrum, mesh, phantom, opts, self.prescription.bins, None)?.dose)
            }
            DoseEngine::MonteCarlo {
                sim,
                n_particles,
                energy_bins,
            } => {
                let total: f64 = g.iter().sum();
                if total <= 0.0 {
                    return Ok(DoseMap::zeros(self.prescription.bins));
                }
                let source = Source::bank((0..self.bank.len()).map(|i| (self.bank.pencil(i), g[i])).collect())?;
                let tally = run_batch_with_streams(
                    &source,
                    *n_particles,
                    &self.transport_model(phantom),
                    sim,
                    &self.tally_grid(*energy_bins)?,
                    streams,
                )?;
                let mut dose = tally.dose();
                for (v, s) in dose.values.iter_mut().zip(dose.stderr.iter_mut()) {
                    *v *= total;
                    *s *= total;
                }
                Ok(dose)
            }
        }
    }
}

/// Column `j` is the dose of unit weight on beam `j` in the nominal phantom.
pub fn influence_matrix(problem: &PlanProblem, engine: &DoseEngine, seed: u64) -> Result<InfluenceMatrix> {
    let bins = problem.prescription.bins;
    let n = problem.bank.len();
    let mut matrix = DMatrix::zeros(bins.n, n);
    let mut stderr = DMatrix::zeros(bins.n, n);
    let root = StreamFactory::new(seed, tag::TRANSPORT);
    for j in 0..n {
        let mut unit = vec![0.0; n];
        unit[j] = 1.0;
        let dose = problem.plan_dose(&unit, &problem.phantom, engine, &root.derive(j as u64))?;
        matrix.set_column(j, &DVector::from_vec(dose.values));
        stderr.set_column(j, &DVector::from_vec(dose.stderr));
    }
    Ok(InfluenceMatrix { bins, matrix, stderr })
}

/// A cost with gradient over beam weights. `iteration` selects the random
/// streams, so repeated calls with the same iteration see the same samples.
pub trait Objective {
    fn n_controls(&self) -> usize;
    fn cost(&mut self, g: &[f64], iteration: u64) -> Result<f64>;
    fn cost_and_gradient(&mut self, g: &[f64], iteration: u64) -> Result<(f64, Vec<f64>)>;
    fn alpha_reg(&self) -> f64;
    fn is_deterministic(&self) -> bool;
    /// Convex in `g` for a fixed `iteration`.
    fn is_convex(&self) -> bool {
        false
    }
}

/// Exact quadratic through a precomputed influence matrix.
#[derive(Debug, Clone)]
pub struct InfluenceObjective {
    pub influence: InfluenceMatrix,
    pub prescription: Prescription,
    pub alpha_reg: f64,
}

impl InfluenceObjective {
    pub fn gradient(&self, g: &[f64]) -> Vec<f64> {
        let dose = self.influence.dose(g);
        let r = self.prescription.fidelity_gradient(&dose);
        let m = &self.influence.matrix;
        (0..m.ncols())
            .map(|j| m.column(j).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() + self.alpha_reg * g[j])
            .collect()
    }

    /// Hessian 2 DᵀWD h + α I.
    pub fn hessian(&self) -> DMatrix<f64> {
        let m = &self.influence.matrix;
        let h = self.prescription.bins.width();
        let w = DMatrix::from_diagonal(&DVector::from_iterator(
            self.prescription.weights.len(),
            self.prescription.weights.iter().map(|w| 2.0 * w * h),
        ));
        m.transpose() * w * m + DMatrix::identity(m.ncols(), m.ncols()) * self.alpha_reg
    }
}

impl Objective for InfluenceObjective {
    fn n_controls(&self) -> usize {
        self.influence.n_beams()
    }

    fn cost(&mut self, g: &[f64], _: u64) -> Result<f64> {
        Ok(self.prescription.fidelity(&self.influence.dose(g)) + regularization(g, self.alpha_reg))
    }

    fn cost_and_gradient(&mut self, g: &[f64], it: u64) -> Result<(f64, Vec<f64>)> {
        Ok((self.cost(g, it)?, self.gradient(g)))
    }

    fn alpha_reg(&self) -> f64 {
        self.alpha_reg
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn is_convex(&self) -> bool {
        true
    }
}

/// Gradient of the fidelity term through one adjoint solve.
fn adjoint_beam_gradient(
    problem: &PlanProblem,
    dose: &[f64],
    phantom: &Phantom,
    mesh: &Mesh1D,
    opts: &SolverOptions,
    spectra: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let source = AdjointSource {
        bins: problem.prescription.bins,
        dcost_ddose: problem.prescription.fidelity_gradient(dose),
        q_factor: problem.q_factor,
    };
    let trace = adjoint_inflow_trace(&source, mesh, phantom, opts)?;
    Ok(spectra
        .iter()
        .map(|s| s.iter().zip(&trace).map(|(a, b)| a * b).sum())
        .collect())
}

fn beam_spectra(bank: &BeamBank, mesh: &Mesh1D) -> Result<Vec<Vec<f64>>> {
    bank.beams
        .iter()
        .map(|b| beam_spectrum(b.energy, b.sigma, mesh))
        .collect()
}

/// Forward and adjoint 1D solves in the nominal phantom.
#[derive(Debug, Clone)]
pub struct AdjointObjective {
    pub problem: PlanProblem,
    pub mesh: Mesh1D,
    pub opts: SolverOptions,
    spectra: Vec<Vec<f64>>,
}

impl AdjointObjective {
    pub fn new(problem: PlanProblem, mesh: Mesh1D, opts: SolverOptions) -> Result<Self> {
        let spectra = beam_spectra(&problem.bank, &mesh)?;
        Ok(AdjointObjective {
            problem,
            mesh,
            opts,
            spectra,
        })
    }

    fn dose(&self, g: &[f64]) -> Result<Vec<f64>> {
        let engine = DoseEngine::Pde {
            mesh: self.mesh,
            opts: self.opts,
        };
        Ok(self
            .problem
            .plan_dose(g, &self.problem.phantom, &engine, &StreamFactory::new(0, 0))?
            .values)
    }
}

impl Objective for AdjointObjective {
    fn n_controls(&self) -> usize {
        self.problem.bank.len()
    }

    fn cost(&mut self, g: &[f64], _: u64) -> Result<f64> {
        Ok(self.problem.cost(&self.dose(g)?, g))
    }

    fn cost_and_gradient(&mut self, g: &[f64], _: u64) -> Result<(f64, Vec<f64>)> {
        let dose = self.dose(g)?;
        let mut grad = adjoint_beam_gradient(
            &self.problem,
            &dose,
            &self.problem.phantom,
            &self.mesh,
            &self.opts,
            &self.spectra,
        )?;
        for (d, &x) in grad.iter_mut().zip(g) {
            *d += self.problem.alpha_reg * x;
        }
        Ok((self.problem.cost(&dose, g), grad))
    }

    fn alpha_reg(&self) -> f64 {
        self.problem.alpha_reg
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn is_convex(&self) -> bool {
        true
    }
}

/// Monte Carlo dose and 1D adjoint per sampled scenario, averaged.
#[derive(Debug, Clone)]
pub struct HybridObjective {
    pub problem: PlanProblem,
    pub mesh: Mesh1D,
    pub opts: SolverOptions,
    pub sim: SimConfig,
    pub n_particles: usize,
    pub energy_bins: usize,
    pub n_scenarios: usize,
    pub scenario: ScenarioParams,
    pub seed: u64,
    spectra: Vec<Vec<f64>>,
}

/// Per-scenario samples behind one hybrid evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridSample {
    pub costs: Vec<f64>,
    pub gradients: Vec<Vec<f64>>,
}

impl HybridSample {
    pub fn mean_cost(&self) -> Estimate {
        mean_estimate(&self.costs)
    }

    pub fn mean_gradient(&self) -> Vec<f64> {
        let n = self.gradients.len() as f64;
        let m = self.gradients[0].len();
        (0..m)
            .map(|j| self.gradients.iter().map(|g| g[j]).sum::<f64>() / n)
            .collect()
    }
}

fn mean_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let stderr = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Estimate { mean, stderr }
}

impl HybridObjective {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        problem: PlanProblem,
        mesh: Mesh1D,
        opts: SolverOptions,
        sim: SimConfig,
        n_particles: usize,
        energy_bins: usize,
        n_scenarios: usize,
        scenario: ScenarioParams,
        seed: u64,
    ) -> Result<Self> {
        if n_scenarios == 0 {
            return Err(Error::Config("n_scenarios must be >= 1".into()));
        }
        let spectra = beam_spectra(&problem.bank, &mesh)?;
        Ok(HybridObjective {
            problem,
            mesh,
            opts,
            sim,
            n_particles,
            energy_bins,
            n_scenarios,
            scenario,
            seed,
            spectra,
        })
    }

    /// Fidelity costs (with regularization) and full gradients per scenario.
    pub fn sample(&self, g: &[f64], iteration: u64, with_gradient: bool) -> Result<HybridSample> {
        let scen = StreamFactory::new(self.seed, tag::SCENARIO).derive(iteration);
        let transport = StreamFactory::new(self.seed, tag::SCENARIO_TRANSPORT).derive(iteration);
        let engine = DoseEngine::MonteCarlo {
            sim: self.sim,
            n_particles: self.n_particles,
            energy_bins: self.energy_bins,
        };
        let reg = regularization(g, self.problem.alpha_reg);
        let mut costs = Vec::with_capacity(self.n_scenarios);
        let mut gradients = Vec::new();
        for i in 0..self.n_scenarios {
            let phantom = self
                .problem
                .phantom
                .perturbed(&self.scenario, &mut scen.stream(i as u64));
            let dose = self
                .problem
                .plan_dose(g, &phantom, &engine, &transport.derive(i as u64))?;
            costs.push(self.problem.prescription.fidelity(&dose.values) + reg);
            if with_gradient {
                let mut grad = adjoint_beam_gradient(
                    &self.problem,
                    &dose.values,
                    &phantom,
                    &self.mesh,
                    &self.opts,
                    &self.spectra,
                )?;
                for (d, &x) in grad.iter_mut().zip(g) {
                    *d += self.problem.alpha_reg * x;
                }
                gradients.push(grad);
            }
        }
        Ok(HybridSample { costs, gradients })
    }
}

impl Objective for HybridObjective {
    fn n_controls(&self) -> usize {
        self.problem.bank.len()
    }

    fn cost(&mut self, g: &[f64], iteration: u64) -> Result<f64> {
        Ok(self.sample(g, iteration, false)?.mean_cost().mean)
    }

    fn cost_and_gradient(&mut self, g: &[f64], iteration: u64) -> Result<(f64, Vec<f64>)> {
        let s = self.sample(g, iteration, true)?;
        Ok((s.mean_cost().mean, s.mean_gradient()))
    }

    fn alpha_reg(&self) -> f64 {
        self.problem.alpha_reg
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

/// E_θ[fidelity(D_θ[g])] + (α/2)‖g‖², averaging over `n_scenarios`
/// perturbed phantoms, each with its own dose solve.
pub fn expected_cost(
    problem: &PlanProblem,
    g: &[f64],
    engine: &DoseEngine,
    scenario: &ScenarioParams,
    n_scenarios: usize,
    seed: u64,
) -> Result<(Estimate, Vec<DoseMap>)> {
    if n_scenarios == 0 {
        return Err(Error::Config("n_scenarios must be >= 1".into()));
    }
    let scen = StreamFactory::new(seed, tag::SCENARIO);
    let transport = StreamFactory::new(seed, tag::SCENARIO_TRANSPORT);
    let mut fid = Vec::with_capacity(n_scenarios);
    let mut doses = Vec::with_capacity(n_scenarios);
    for i in 0..n_scenarios {
        let phantom = problem.phantom.perturbed(scenario, &mut scen.stream(i as u64));
        let dose = problem.plan_dose(g, &phantom, engine, &transport.derive(i as u64))?;
        fid.push(problem.prescription.fidelity(&dose.values));
        doses.push(dose);
    }
    let mut e = mean_estimate(&fid);
    e.mean += regularization(g, problem.alpha_reg);
    Ok((e, doses))
}

/// The weight `u` minimizing the fidelity of the plan `u·(1, …, 1)`, given
/// that plan's dose at `u = 1`.
pub fn uniform_weight(unit_dose: &[f64], prescription: &Prescription) -> f64 {
    let num: f64 = unit_dose
        .iter()
        .zip(&prescription.dose)
        .zip(&prescription.weights)
        .map(|((a, d), w)| w * a * d)
        .sum();
    let den: f64 = unit_dose
        .iter()
        .zip(&prescription.weights)
        .map(|(a, w)| w * a * a)
        .sum();
    if den > 0.0 && num > 0.0 {
        num / den
    } else {
        1.0
    }
}

/// The per-beam bound: `factor` times the least-squares uniform weight.
pub fn default_g_max(influence: &InfluenceMatrix, prescription: &Prescription, factor: f64) -> f64 {
    factor * uniform_weight(&influence.dose(&vec![1.0; influence.n_beams()]), prescription)
}

/// Shape of a depth-dose relative to a flat target prescription.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobpMetrics {
    /// Prescribed level: the largest prescribed dose in the target.
    pub level: f64,
    /// (max − min)/level over bins lying entirely inside the target.
    pub ripple: f64,
    pub target_min: f64,
    pub target_max: f64,
    pub target_mean: f64,
    /// Dose in the first depth bin.
    pub entrance: f64,
}

pub fn sobp_metrics(dose: &[f64], prescription: &Prescription) -> Option<SobpMetrics> {
    let bins: Vec<usize> = prescription.target_bins().collect();
    let level = bins.iter().map(|&i| prescription.dose[i]).fold(0.0, f64::max);
    if bins.is_empty() || level <= 0.0 || dose.is_empty() {
        return None;
    }
    let target_min = bins.iter().map(|&i| dose[i]).fold(f64::INFINITY, f64::min);
    let target_max = bins.iter().map(|&i| dose[i]).fold(f64::NEG_INFINITY, f64::max);
    let target_mean = bins.iter().map(|&i| dose[i]).sum::<f64>() / bins.len() as f64;
    Some(SobpMetrics {
        level,
        ripple: (target_max - target_min) / level,
        target_min,
        target_max,
        target_mean,
        entrance: dose[0],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// g ← Π(g − τ_k ∇J) with τ_k = τ₀ / (1 + k/k₀).
    Fixed { tau0: f64, k0: f64 },
    /// Projected gradient with a Barzilai–Borwein trial step and Armijo
    /// backtracking.
    Backtracking { c: f64, shrink: f64 },
    /// g ← Π(−z/α) with z = ∇J − α g.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub step: StepRule,
    pub tol_eps: f64,
    pub max_iters: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            step: StepRule::Backtracking { c: 1e-4, shrink: 0.5 },
            tol_eps: 1e-6,
            max_iters: 500,
        }
    }
}

impl OptConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.tol_eps > 0.0) {
            out.push(format!("tol_eps must be > 0 (got {})", self.tol_eps));
        }
        match self.step {
            StepRule::Fixed { tau0, k0 } if !(tau0 > 0.0 && k0 > 0.0) => {
                out.push("fixed step needs tau0 > 0 and k0 > 0".into())
            }
            StepRule::Backtracking { c, shrink } if !(c > 0.0 && c < 1.0 && shrink > 0.0 && shrink < 1.0) => {
                out.push("backtracking needs 0 < c < 1 and 0 < shrink < 1".into())
            }
            _ => {}
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub weights: Vec<f64>,
    /// Cost at each iterate, including the final one.
    pub cost_trace: Vec<f64>,
    /// ‖g − Π(g − ∇J)‖ at each iterate.
    pub residual_trace: Vec<f64>,
    /// ‖∇J‖ = ‖z + αg‖ at each iterate, the unprojected stopping quantity.
    pub gradient_norm_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The initial weights were infeasible and were projected.
    pub projected_start: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projected-gradient minimization over `[0, g_max]^n`.
pub fn optimize(objective: &mut dyn Objective, g0: &[f64], g_max: f64, config: &OptConfig) -> Result<OptResult> {
    let v = config.violations();
    if !v.is_empty() {
        return Err(Error::Config(v.join("; ")));
    }
    if g0.len() != objective.n_controls() {
        return Err(Error::Contract(format!(
            "initial weights have {} entries, objective has {} controls",
            g0.len(),
            objective.n_controls()
        )));
    }
    let alpha = objective.alpha_reg();
    if config.step == StepRule::Exact && !(alpha > 0.0) {
        return Err(Error::Config("the exact step rule needs alpha_reg > 0".into()));
    }

    let mut g = project(g0, g_max);
    let projected_start = g != g0;
    let mut result = OptResult {
        weights: Vec::new(),
        cost_trace: Vec::new(),
        residual_trace: Vec::new(),
        gradient_norm_trace: Vec::new(),
        iterations: 0,
        converged: false,
        projected_start,
    };
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut last_tau = 1.0;
    let convex = objective.is_convex();

    for k in 0..=config.max_iters {
        let it = k as u64;
        let (cost, grad) = objective.cost_and_gradient(&g, it)?;
        let res = vi_residual(&g, &grad, g_max);
        result.cost_trace.push(cost);
        result.residual_trace.push(res);
        result.gradient_norm_trace.push(norm(&grad));
        if res <= config.tol_eps {
            result.converged = true;
            break;
        }
        if k == config.max_iters {
            break;
        }
        result.iterations = k + 1;

        let next = match config.step {
            StepRule::Exact => project(
                &grad
                    .iter()
                    .zip(&g)
                    .map(|(d, x)| -(d - alpha * x) / alpha)
                    .collect::<Vec<_>>(),
                g_max,
            ),
            StepRule::Fixed { tau0, k0 } => {
                let tau = tau0 / (1.0 + k as f64 / k0);
                project(
                    &g.iter().zip(&grad).map(|(x, d)| x - tau * d).collect::<Vec<_>>(),
                    g_max,
                )
            }
            StepRule::Backtracking { c, shrink } => {
                let mut tau = match &previous {
                    Some((gp, dp)) => {
                        let s: Vec<f64> = g.iter().zip(gp).map(|(a, b)| a - b).collect();
                        let y: Vec<f64> = grad.iter().zip(dp).map(|(a, b)| a - b).collect();
                        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                        let ss: f64 = s.iter().map(|a| a * a).sum();
                        if sy > 0.0 {
                            ss / sy
                        } else {
                            last_tau
                        }
                    }
                    None => {
                        let gn = norm(&g);
                        if gn > 0.0 {
                            gn / norm(&grad)
                        } else {
                            1.0 / norm(&grad)
                        }
                    }
                };
                let mut accepted = None;
                for _ in 0..80 {
                    let trial = project(
                        &g.iter().zip(&grad).map(|(x, d)| x - tau * d).collect::<Vec<_>>(),
                        g_max,
                    );
                    let decrease: f64 = grad
                        .iter()
                        .zip(trial.iter().zip(&g))
                        .map(|(d, (t, x))| d * (t - x))
                        .sum();
                    let trial_cost = objective.cost(&trial, it)?;
                    if trial == g {
                        break;
                    }
                    if trial_cost <= cost + c * decrease {
                        accepted = Some(trial);
                        break;
                    }
                    // Near the optimum the change in cost drops below its
                    // rounding error. For a convex cost, a non-positive slope
                    // at the trial point along the step still certifies
                    // descent.
                    if convex && trial_cost <= cost && (cost - trial_cost).abs() <= 1e-10 * cost.abs() {
                        let (_, trial_grad) = objective.cost_and_gradient(&trial, it)?;
                        let slope: f64 = trial_grad
                            .iter()
                            .zip(trial.iter().zip(&g))
                            .map(|(d, (t, x))| d * (t - x))
                            .sum();
                        if slope <= 0.0 {
                            accepted = Some(trial);
                            break;
                        }
                    }
                    tau *= shrink;
                }
                match accepted {
                    Some(t) => {
                        last_tau = tau;
                        t
                    }
                    // No representable step decreases the cost: stationary to rounding.
                    None => break,
                }
            }
        };
        previous = Some((g.clone(), grad));
        g = next;
    }
    result.weights = g;
    Ok(result)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn instance() -> impl Strategy<Value = (Vec<f64>, usize, usize, f64, f64)> {
        (2usize..6, 1usize..5).prop_flat_map(|(rows, cols)| {
            (
                proptest::collection::vec(0.0f64..2.0, rows * cols),
                Just(rows),
                Just(cols),
                0.0f64..0.1,
                0.1f64..5.0,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn projection_is_feasible_and_idempotent(g in proptest::collection::vec(-5.0f64..5.0, 1..8), g_max in 0.1f64..4.0) {
            let p = project(&g, g_max);
            prop_assert!(p.iter().all(|&x| (0.0..=g_max).contains(&x)));
            prop_assert_eq!(project(&p, g_max), p.clone());
            // A feasible point with zero gradient is a fixed point.
            prop_assert_eq!(vi_residual(&p, &vec![0.0; p.len()], g_max), 0.0);
        }

        #[test]
        fn backtracking_is_feasible_monotone_and_stationary((entries, rows, cols, alpha, g_max) in instance()) {
            let bins = Edges::new(0.0, 1.0, rows).unwrap();
            let matrix = DMatrix::from_row_slice(rows, cols, &entries);
            let mut obj = InfluenceObjective {
                influence: InfluenceMatrix::exact(bins, matrix),
                prescription: Prescription::target_box(bins, (0.2, 0.8), 1.0, 1.0, 0.1).unwrap(),
                alpha_reg: alpha,
            };
            let config = OptConfig { tol_eps: 1e-7, max_iters: 20_000, ..OptConfig::default() };
            let r = optimize(&mut obj, &vec![g_max * 2.0; cols], g_max, &config).unwrap();
            prop_assert!(r.weights.iter().all(|&x| (0.0..=g_max).contains(&x)));
            prop_assert!(r.cost_trace.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(r.converged, "residual {:?}", r.residual_trace.last());
            // Sampled VI check: no feasible direction descends.
            let grad = obj.gradient(&r.weights);
            for k in 0..20 {
                let other: Vec<f64> = (0..cols).map(|j| g_max * (((k * 7 + j * 3) % 11) as f64 / 10.0)).collect();
                let d: Vec<f64> = other.iter().zip(&r.weights).map(|(a, b)| a - b).collect();
                let len = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                let slope: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
                prop_assert!(slope >= -1e-6 * len.max(1.0), "slope {}", slope);
            }
        }
    }
}
