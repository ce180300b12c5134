//! The four subcommands. Each has a computational core returning structured
//! results and a thin writer producing the CSV files and manifest.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use protonplan::materials::Phantom;
use protonplan::optimizer::{
    influence_matrix, optimize, sobp_metrics, uniform_weight, AdjointObjective, DoseEngine, HybridObjective,
    InfluenceObjective, Objective, OptResult, PlanProblem, SobpMetrics,
};
use protonplan::pde::{beam_spectrum, solve_projected, Mesh1D, ProjectedSolution};
use protonplan::rng::{tag, StreamFactory};
use protonplan::sde::{run_batch, SimConfig, TransportMode, TransportModel};
use protonplan::tally::{relative_l2, write_dose_csv, write_fluence_csv, DoseMap, Grid, Tally};

use crate::config::{Engine, OptMode, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    SolvePde,
    Optimize,
    VerifyDuality,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolvePde => "solve-pde",
            Command::Optimize => "optimize",
            Command::VerifyDuality => "verify-duality",
        }
    }
}

/// Key–value lines of a run manifest, in insertion order.
#[derive(Debug, Default)]
struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.effective_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_with<F>(dir: &Path, name: &str, f: F) -> Result<PathBuf, CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let path = dir.join(name);
    let mut w = create(&path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn num(x: f64) -> String {
    format!("{x:.10e}")
}

fn slab_length(cfg: &RunConfig, command: &str) -> Result<f64, CliError> {
    let b = cfg.model.domain.bounds();
    if b[0].0.is_finite() || b[1].0.is_finite() {
        return Err(CliError::Validation(vec![format!(
            "domain.kind must be \"slab\" for {command} (the deterministic solver is one-dimensional)"
        )]));
    }
    Ok(cfg.model.domain.depth_length())
}

/// The deterministic mesh: explicit `mesh.n_z`, or the coarsest admissible one.
pub fn pde_mesh(cfg: &RunConfig, length: f64, phantom: &Phantom) -> Result<Mesh1D, CliError> {
    let window = cfg.window();
    Ok(match cfg.raw.mesh.n_z {
        Some(n_z) => Mesh1D::new(length, n_z, &window, cfg.raw.mesh.n_e)?,
        None => Mesh1D::for_cfl(length, &window, cfg.raw.mesh.n_e, phantom, cfg.solver.cfl_max)?,
    })
}

/// Inflow spectrum of the source beams, normalized to one source particle.
fn source_spectrum(cfg: &RunConfig, mesh: &Mesh1D) -> Result<Vec<f64>, CliError> {
    let total: f64 = cfg.source_beams.iter().map(|b| b.weight).sum();
    let mut g = vec![0.0; mesh.n_e];
    for b in &cfg.source_beams {
        if b.weight > 0.0 {
            for (gi, x) in g.iter_mut().zip(beam_spectrum(b.energy, b.sigma, mesh)?) {
                *gi += b.weight / total * x;
            }
        }
    }
    Ok(g)
}

pub fn simulate(cfg: &RunConfig) -> Result<Tally, CliError> {
    Ok(run_batch(
        &cfg.source(),
        cfg.sim.n_particles,
        &cfg.model,
        &cfg.sim,
        &cfg.grid,
    )?)
}

pub fn solve_pde(cfg: &RunConfig) -> Result<(Mesh1D, ProjectedSolution), CliError> {
    let length = slab_length(cfg, "solve-pde")?;
    let mesh = pde_mesh(cfg, length, cfg.phantom())?;
    let g = source_spectrum(cfg, &mesh)?;
    let sol = solve_projected(
        &g,
        &mesh,
        cfg.phantom(),
        &cfg.solver,
        cfg.grid.depth,
        Some(cfg.grid.energy),
    )?;
    Ok((mesh, sol))
}

pub fn plan_problem(cfg: &RunConfig) -> PlanProblem {
    PlanProblem {
        bank: cfg.bank.clone(),
        prescription: cfg.prescription.clone(),
        phantom: cfg.phantom().clone(),
        domain: cfg.model.domain,
        window: cfg.window(),
        alpha_reg: cfg.raw.optimizer.alpha_reg,
        g_max: cfg.raw.optimizer.g_max.unwrap_or(f64::INFINITY),
        q_factor: cfg.q_factor,
    }
}

/// Everything an optimization run produces.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub problem: PlanProblem,
    pub result: OptResult,
    /// Final dose under the objective's own forward model.
    pub dose: DoseMap,
    pub g_max: f64,
    pub initial_weight: f64,
    pub metrics: Option<SobpMetrics>,
    pub particles: usize,
}

fn mc_sim(cfg: &RunConfig) -> SimConfig {
    SimConfig {
        n_particles: cfg.raw.optimizer.n_mc,
        ..cfg.sim
    }
}

pub fn optimize_plan(cfg: &RunConfig) -> Result<PlanOutcome, CliError> {
    let o = &cfg.raw.optimizer;
    let mut problem = plan_problem(cfg);
    if problem.bank.is_empty() {
        return Err(CliError::Validation(vec!["bank: the beam bank is empty".into()]));
    }
    let n = problem.bank.len();
    let ones = vec![1.0; n];
    let needs_mesh = cfg.opt_mode != OptMode::Influence || cfg.engine == Engine::Pde;
    let mesh = if needs_mesh {
        let length = slab_length(cfg, "optimize")?;
        Some(pde_mesh(cfg, length, cfg.phantom())?)
    } else {
        None
    };
    let mc_engine = DoseEngine::MonteCarlo {
        sim: mc_sim(cfg),
        n_particles: o.n_mc,
        energy_bins: cfg.raw.tally.energy_bins,
    };

    let mut particles = 0;
    let mut stored_influence = None;
    let (mut objective, unit_dose): (Box<dyn Objective>, Vec<f64>) = match cfg.opt_mode {
        OptMode::Influence => {
            let engine = match (cfg.engine, mesh) {
                (Engine::Pde, Some(mesh)) => DoseEngine::Pde { mesh, opts: cfg.solver },
                _ => {
                    particles = n * o.n_mc;
                    mc_engine.clone()
                }
            };
            let influence = influence_matrix(&problem, &engine, cfg.seed)?;
            let unit = influence.dose(&ones);
            stored_influence = Some(influence.clone());
            (
                Box::new(InfluenceObjective {
                    influence,
                    prescription: problem.prescription.clone(),
                    alpha_reg: o.alpha_reg,
                }),
                unit,
            )
        }
        OptMode::Adjoint | OptMode::Hybrid => {
            let mesh = mesh.expect("mesh built for adjoint modes");
            let unit = problem
                .plan_dose(
                    &ones,
                    &problem.phantom,
                    &DoseEngine::Pde { mesh, opts: cfg.solver },
                    &StreamFactory::new(0, 0),
                )?
                .values;
            if cfg.opt_mode == OptMode::Adjoint {
                (
                    Box::new(AdjointObjective::new(problem.clone(), mesh, cfg.solver)?),
                    unit,
                )
            } else {
                (
                    Box::new(HybridObjective::new(
                        problem.clone(),
                        mesh,
                        cfg.solver,
                        mc_sim(cfg),
                        o.n_mc,
                        cfg.raw.tally.energy_bins,
                        o.n_scenarios,
                        cfg.scenario,
                        cfg.seed,
                    )?),
                    unit,
                )
            }
        }
    };

    let u = uniform_weight(&unit_dose, &problem.prescription);
    let g_max = o.g_max.unwrap_or(o.g_max_factor * u);
    problem.g_max = g_max;
    let start = vec![u.min(g_max); n];
    let result = optimize(objective.as_mut(), &start, g_max, &cfg.opt)?;
    if cfg.opt_mode == OptMode::Hybrid {
        particles = (result.iterations + 1) * o.n_scenarios * o.n_mc;
    }

    let dose = match cfg.opt_mode {
        OptMode::Influence => stored_influence.expect("influence mode").dose_map(&result.weights),
        OptMode::Adjoint => {
            let mesh = mesh.expect("mesh");
            problem.plan_dose(
                &result.weights,
                &problem.phantom,
                &DoseEngine::Pde { mesh, opts: cfg.solver },
                &StreamFactory::new(0, 0),
            )?
        }
        OptMode::Hybrid => {
            particles += o.n_mc;
            problem.plan_dose(
                &result.weights,
                &problem.phantom,
                &mc_engine,
                &StreamFactory::new(cfg.seed, tag::TRANSPORT).derive(u64::MAX),
            )?
        }
    };
    let metrics = sobp_metrics(&dose.values, &problem.prescription);
    Ok(PlanOutcome {
        problem,
        result,
        dose,
        g_max,
        initial_weight: u.min(g_max),
        metrics,
        particles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualityStatus {
    Pass,
    Fail,
    Inconclusive,
}

impl DualityStatus {
    pub fn label(self) -> &'static str {
        match self {
            DualityStatus::Pass => "pass",
            DualityStatus::Fail => "fail",
            DualityStatus::Inconclusive => "inconclusive: MC error exceeds bar",
        }
    }
}

/// Monte Carlo versus deterministic comparison on one instance.
#[derive(Debug, Clone)]
pub struct DualityReport {
    pub status: DualityStatus,
    pub tolerance: f64,
    pub particles: usize,
    pub mesh: Mesh1D,
    /// ‖φ_MC − φ_PDE‖/‖φ_PDE‖ over the (depth, energy) bins.
    pub fluence_l2: f64,
    /// ‖σ_MC‖/‖φ_PDE‖: the statistical part of `fluence_l2`.
    pub fluence_noise: f64,
    pub dose_l2: f64,
    /// Relative L2 gap between the fluence-route and direct MC doses.
    pub route_gap: f64,
    /// Relative L2 of their combined standard errors.
    pub route_noise: f64,
    pub energy_imbalance: f64,
    pub mc_dose: DoseMap,
    pub direct_dose: DoseMap,
    pub pde_dose: DoseMap,
}

impl DualityReport {
    pub fn render(&self) -> String {
        let mut m = Manifest::default();
        m.put("status", format!("\"{}\"", self.status.label()));
        m.put("tolerance", self.tolerance);
        m.put("particles", self.particles);
        m.put("pde_n_z", self.mesh.n_z);
        m.put("pde_n_e", self.mesh.n_e);
        m.put("fluence_rel_l2", num(self.fluence_l2));
        m.put("fluence_mc_rel_stderr", num(self.fluence_noise));
        m.put("dose_rel_l2", num(self.dose_l2));
        m.put("dose_route_rel_gap", num(self.route_gap));
        m.put("dose_route_rel_stderr", num(self.route_noise));
        m.put("energy_rel_imbalance", num(self.energy_imbalance));
        m.render()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs both solvers with collisions and angular diffusion off.
pub fn verify_duality(cfg: &RunConfig) -> Result<DualityReport, CliError> {
    let length = slab_length(cfg, "verify-duality")?;
    let model = TransportModel::csda(cfg.model.domain, cfg.window(), cfg.phantom().clone());
    let sim = SimConfig {
        mu: 0.0,
        mode: TransportMode::OneD,
        ..cfg.sim
    };
    let grid = Grid::new(cfg.grid.depth, cfg.grid.energy, None)?;
    let tally = run_batch(&cfg.source(), sim.n_particles, &model, &sim, &grid)?;

    let pde_phantom = match &cfg.raw.duality.pde_medium {
        Some(name) => Phantom::uniform(cfg.media[name].clone()),
        None => cfg.phantom().clone(),
    };
    let mesh = pde_mesh(cfg, length, &pde_phantom)?;
    let g = source_spectrum(cfg, &mesh)?;
    let sol = solve_projected(&g, &mesh, &pde_phantom, &cfg.solver, grid.depth, Some(grid.energy))?;
    let pde_fluence = sol.fluence.expect("energy bins requested");

    let mc_fluence = tally.fluence.binned();
    let fluence_l2 = mc_fluence.relative_l2(&pde_fluence);
    let fluence_noise = norm(&mc_fluence.stderr) / norm(&pde_fluence.values);
    let mc_dose = tally.dose();
    let direct = tally.direct_dose();
    let dose_l2 = relative_l2(&mc_dose.values, &sol.dose.values);
    let route_gap = relative_l2(&mc_dose.values, &direct.values);
    let combined: Vec<f64> = mc_dose
        .stderr
        .iter()
        .zip(&direct.stderr)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();
    let route_noise = norm(&combined) / norm(&direct.values);

    let tol = cfg.raw.duality.tolerance;
    // A gap beyond the bar plus three standard errors fails however noisy
    // the run; otherwise a noise level above the bar cannot decide.
    let status = if fluence_l2 > tol + 3.0 * fluence_noise {
        DualityStatus::Fail
    } else if !(3.0 * fluence_noise <= tol) {
        DualityStatus::Inconclusive
    } else if fluence_l2 <= tol && route_gap <= 3.0 * route_noise {
        DualityStatus::Pass
    } else {
        DualityStatus::Fail
    };
    Ok(DualityReport {
        status,
        tolerance: tol,
        particles: sim.n_particles,
        mesh,
        fluence_l2,
        fluence_noise,
        dose_l2,
        route_gap,
        route_noise,
        energy_imbalance: tally.ledger.relative_imbalance(),
        mc_dose,
        direct_dose: direct,
        pde_dose: sol.dose,
    })
}

fn write_plan_files(dir: &Path, out: &PlanOutcome) -> Result<(), CliError> {
    write_with(dir, "weights.csv", |w| {
        writeln!(w, "# energy and sigma in MeV, weight in source particles")?;
        writeln!(w, "beam,energy,sigma,weight")?;
        for (i, (b, g)) in out.problem.bank.beams.iter().zip(&out.result.weights).enumerate() {
            writeln!(w, "{i},{},{},{}", num(b.energy), num(b.sigma), num(*g))?;
        }
        Ok(())
    })?;
    write_with(dir, "trace.csv", |w| {
        writeln!(w, "# vi_residual = |g - P(g - grad J)|, gradient_norm = |grad J|")?;
        writeln!(w, "iteration,cost,vi_residual,gradient_norm")?;
        for k in 0..out.result.cost_trace.len() {
            writeln!(
                w,
                "{k},{},{},{}",
                num(out.result.cost_trace[k]),
                num(out.result.residual_trace[k]),
                num(out.result.gradient_norm_trace[k])
            )?;
        }
        Ok(())
    })?;
    write_with(dir, "dose.csv", |w| write_dose_csv(w, &out.dose))?;
    Ok(())
}

/// Runs `command` and writes its outputs under the configured directory.
/// Returns the manifest text.
pub fn run_command(command: Command, cfg: &RunConfig) -> Result<String, CliError> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    let started = Instant::now();
    let mut m = Manifest::default();
    m.put("protonplan_version", format!("\"{}\"", env!("CARGO_PKG_VERSION")));
    m.put("command", format!("\"{}\"", command.name()));
    m.put("seed", cfg.seed);
    m.put("config_sha256", format!("\"{}\"", config_hash(cfg)));
    m.put("threads", rayon::current_num_threads());

    let mut verdict = Ok(());
    match command {
        Command::Simulate => {
            let tally = simulate(cfg)?;
            write_with(&dir, "fluence.csv", |w| write_fluence_csv(w, &tally.fluence.binned()))?;
            write_with(&dir, "dose.csv", |w| write_dose_csv(w, &tally.dose()))?;
            let dose = tally.dose();
            m.put("particles", cfg.sim.n_particles);
            m.put("dose_peak_depth_cm", num(dose.peak_depth()));
            m.put("energy_rel_imbalance", num(tally.ledger.relative_imbalance()));
        }
        Command::SolvePde => {
            let (mesh, sol) = solve_pde(cfg)?;
            write_with(&dir, "psi.csv", |w| {
                write_fluence_csv(w, sol.fluence.as_ref().expect("energy bins requested"))
            })?;
            write_with(&dir, "dose.csv", |w| write_dose_csv(w, &sol.dose))?;
            m.put("particles", 0);
            m.put("pde_n_z", mesh.n_z);
            m.put("pde_n_e", mesh.n_e);
            m.put("dose_peak_depth_cm", num(sol.dose.peak_depth()));
        }
        Command::Optimize => {
            let out = optimize_plan(cfg)?;
            write_plan_files(&dir, &out)?;
            m.put("particles", out.particles);
            m.put("iterations", out.result.iterations);
            m.put("converged", out.result.converged);
            if out.result.projected_start {
                m.put("projected_start", true);
            }
            m.put("g_max", num(out.g_max));
            m.put(
                "final_cost",
                num(*out.result.cost_trace.last().expect("at least one iterate")),
            );
            m.put(
                "final_vi_residual",
                num(*out.result.residual_trace.last().expect("at least one iterate")),
            );
            if let Some(s) = out.metrics {
                m.put("target_ripple", num(s.ripple));
                m.put("target_mean_dose", num(s.target_mean));
                m.put("entrance_dose", num(s.entrance));
            }
        }
        Command::VerifyDuality => {
            let report = verify_duality(cfg)?;
            write_with(&dir, "duality_report.txt", |w| w.write_all(report.render().as_bytes()))?;
            write_with(&dir, "dose_mc.csv", |w| write_dose_csv(w, &report.mc_dose))?;
            write_with(&dir, "dose_pde.csv", |w| write_dose_csv(w, &report.pde_dose))?;
            m.put("particles", report.particles);
            m.put("status", format!("\"{}\"", report.status.label()));
            if report.status == DualityStatus::Fail {
                verdict = Err(CliError::Verification(format!(
                    "fluence relative L2 {:.4} (bar {}), dose route gap {:.4} vs 3 x stderr {:.4}",
                    report.fluence_l2,
                    report.tolerance,
                    report.route_gap,
                    3.0 * report.route_noise
                )));
            }
        }
    }
    m.put("wall_time_s", format!("{:.3}", started.elapsed().as_secs_f64()));
    let text = m.render();
    write_with(&dir, "manifest.txt", |w| w.write_all(text.as_bytes()))?;
    write_with(&dir, "config.toml", |w| w.write_all(cfg.effective_toml().as_bytes()))?;
    verdict.map(|_| text)
}
