use nalgebra::{DMatrix, DVector};
use protonplan::optimizer::*;
use protonplan::pde::{Mesh1D, SolverOptions};
use protonplan::rng::StreamFactory;
use protonplan::tally::{relative_l2, Edges};
use protonplan::{EnergyWindow, Medium, Phantom, ScenarioParams, SimConfig, SpatialDomain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 5 cm water slab, 40×40 mesh over [40, 120] MeV, three beams.
fn slab_problem(energies: &[f64]) -> (PlanProblem, Mesh1D) {
    let window = EnergyWindow::new(40.0, 120.0).unwrap();
    let beams = energies
        .iter()
        .map(|&energy| Beam {
            energy,
            sigma: 3.0,
            weight: 1.0,
        })
        .collect();
    let bins = Edges::new(0.0, 5.0, 10).unwrap();
    let problem = PlanProblem {
        bank: BeamBank::new(beams, &window).unwrap(),
        prescription: Prescription::target_box(bins, (2.0, 4.0), 20.0, 1.0, 0.1).unwrap(),
        phantom: Phantom::uniform(Medium::water()),
        domain: SpatialDomain::slab(5.0).unwrap(),
        window,
        alpha_reg: 1e-3,
        g_max: 10.0,
        q_factor: 1.0,
    };
    let mesh = Mesh1D::new(5.0, 40, &window, 40).unwrap();
    (problem, mesh)
}

/// Room for perturbed stopping powers under the CFL guard.
fn coarse_energy(mesh: &Mesh1D) -> Mesh1D {
    Mesh1D::new(
        mesh.length,
        mesh.n_z,
        &EnergyWindow::new(mesh.e_min, mesh.e_max).unwrap(),
        30,
    )
    .unwrap()
}

fn pde_engine(mesh: Mesh1D) -> DoseEngine {
    DoseEngine::Pde {
        mesh,
        opts: SolverOptions::default(),
    }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

#[test]
fn adjoint_gradient_matches_finite_differences() {
    let (problem, mesh) = slab_problem(&[60.0, 85.0, 110.0]);
    let mut obj = AdjointObjective::new(problem, mesh, SolverOptions::default()).unwrap();
    let g = [0.4, 0.9, 0.3];
    let (_, grad) = obj.cost_and_gradient(&g, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let v: Vec<f64> = (0..3).map(|_| rng.random::<f64>() - 0.5).collect();
        let h = 1e-4;
        let plus: Vec<f64> = g.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = g.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let fd = (obj.cost(&plus, 0).unwrap() - obj.cost(&minus, 0).unwrap()) / (2.0 * h);
        let an: f64 = grad.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() < 1e-5 * an.abs(), "fd {fd} vs adjoint {an}");
    }
}

#[test]
fn influence_and_adjoint_gradients_agree() {
    let (problem, mesh) = slab_problem(&[60.0, 85.0, 110.0]);
    let influence = influence_matrix(&problem, &pde_engine(mesh), 0).unwrap();
    let inf_obj = InfluenceObjective {
        influence,
        prescription: problem.prescription.clone(),
        alpha_reg: problem.alpha_reg,
    };
    let mut adj = AdjointObjective::new(problem, mesh, SolverOptions::default()).unwrap();
    for g in [[0.4, 0.9, 0.3], [0.0, 2.0, 0.1], [1.0, 1.0, 1.0]] {
        let a = inf_obj.gradient(&g);
        let (_, b) = adj.cost_and_gradient(&g, 0).unwrap();
        assert!(rel_diff(&a, &b) < 1e-10, "{a:?} vs {b:?}");
    }
}

#[test]
fn empty_bank_gives_empty_matrix() {
    let (mut problem, mesh) = slab_problem(&[]);
    problem.bank = BeamBank { beams: vec![] };
    let m = influence_matrix(&problem, &pde_engine(mesh), 0).unwrap();
    assert_eq!(m.matrix.shape(), (10, 0));
}

/// Enumerate every (lower, upper, free) assignment, solve the free block,
/// keep the feasible stationary points and return the cheapest cost.
fn active_set_oracle(obj: &InfluenceObjective, g_max: f64) -> f64 {
    let n = obj.influence.n_beams();
    let hess = obj.hessian();
    let lin = obj.gradient(&vec![0.0; n]);
    let mut best = f64::INFINITY;
    for code in 0..3usize.pow(n as u32) {
        let state: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        let mut g = vec![0.0; n];
        for i in 0..n {
            if state[i] == 1 {
                g[i] = g_max;
            }
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                -lin[free[a]]
                    - (0..n)
                        .filter(|&j| state[j] == 1)
                        .map(|j| hess[(free[a], j)] * g_max)
                        .sum::<f64>()
            });
            let Some(sol) = hff.lu().solve(&rhs) else { continue };
            for (a, &i) in free.iter().enumerate() {
                g[i] = sol[a];
            }
        }
        if g.iter().any(|&x| x < -1e-12 || x > g_max + 1e-12) {
            continue;
        }
        let g = project(&g, g_max);
        let mut o = obj.clone();
        best = best.min(o.cost(&g, 0).unwrap());
    }
    best
}

#[test]
fn optimizer_matches_active_set_oracle() {
    for (energies, g_max, alpha) in [
        (vec![60.0, 85.0, 110.0], 10.0, 1e-3),
        (vec![55.0, 70.0, 90.0, 115.0], 0.5, 1e-2),
        (vec![50.0, 75.0, 100.0, 118.0], 3.0, 0.0),
    ] {
        let (problem, mesh) = slab_problem(&energies);
        let influence = influence_matrix(&problem, &pde_engine(mesh), 0).unwrap();
        let mut obj = InfluenceObjective {
            influence,
            prescription: problem.prescription.clone(),
            alpha_reg: alpha,
        };
        let cfg = OptConfig {
            tol_eps: 1e-9,
            max_iters: 5000,
            ..OptConfig::default()
        };
        let r = optimize(&mut obj, &vec![1.0; energies.len()], g_max, &cfg).unwrap();
        let oracle = active_set_oracle(&obj, g_max);
        let got = *r.cost_trace.last().unwrap();
        assert!(
            (got - oracle).abs() <= 1e-8 * oracle.abs().max(1.0),
            "{got} vs {oracle}"
        );
        for w in r.cost_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}

#[test]
fn planted_solution_is_recovered() {
    let (mut problem, mesh) = slab_problem(&[60.0, 85.0, 110.0]);
    let influence = influence_matrix(&problem, &pde_engine(mesh), 0).unwrap();
    let planted = [0.7, 1.3, 0.4];
    problem.prescription.dose = influence.dose(&planted);
    let alpha = 1e-6;
    let mut obj = InfluenceObjective {
        influence,
        prescription: problem.prescription.clone(),
        alpha_reg: alpha,
    };
    let r = optimize(&mut obj, &[0.0; 3], 10.0, &OptConfig::default()).unwrap();
    assert!(r.converged);
    let bound = alpha * planted.iter().map(|x| x * x).sum::<f64>() * 1.01;
    assert!(*r.cost_trace.last().unwrap() <= bound);
    let dose = obj.influence.dose(&r.weights);
    assert!(rel_diff(&dose, &problem.prescription.dose) < 1e-3);
}

#[test]
fn adjoint_mode_optimization_tracks_influence_mode() {
    let (problem, mesh) = slab_problem(&[60.0, 85.0, 110.0]);
    let influence = influence_matrix(&problem, &pde_engine(mesh), 0).unwrap();
    let mut inf = InfluenceObjective {
        influence,
        prescription: problem.prescription.clone(),
        alpha_reg: problem.alpha_reg,
    };
    let mut adj = AdjointObjective::new(problem, mesh, SolverOptions::default()).unwrap();
    let cfg = OptConfig {
        tol_eps: 1e-6,
        ..OptConfig::default()
    };
    let a = optimize(&mut inf, &[1.0; 3], 10.0, &cfg).unwrap();
    let b = optimize(&mut adj, &[1.0; 3], 10.0, &cfg).unwrap();
    assert!(
        a.converged && b.converged,
        "{:?} / {:?} / {:?}",
        a.residual_trace.last(),
        b.residual_trace.last(),
        b.iterations
    );
    assert!(rel_diff(&a.weights, &b.weights) < 1e-5);
}

#[test]
fn zero_sigma_expected_cost_equals_cost() {
    let (problem, mesh) = slab_problem(&[60.0, 85.0, 110.0]);
    let g = [0.5, 1.0, 0.2];
    let engine = pde_engine(mesh);
    let none = ScenarioParams {
        density_rel_sigma: 0.0,
        alpha_rel_sigma: 0.0,
        truncation: 0.2,
    };
    let (e, _) = expected_cost(&problem, &g, &engine, &none, 5, 3).unwrap();
    let dose = problem
        .plan_dose(&g, &problem.phantom, &engine, &StreamFactory::new(0, 0))
        .unwrap();
    assert_eq!(e.mean, problem.cost(&dose.values, &g));
    assert_eq!(e.stderr, 0.0);
}

#[test]
fn jensen_gap_is_nonnegative() {
    let (problem, mesh) = slab_problem(&[60.0, 85.0, 110.0]);
    let g = [0.5, 1.0, 0.2];
    let scenario = ScenarioParams {
        density_rel_sigma: 0.05,
        alpha_rel_sigma: 0.05,
        truncation: 0.2,
    };
    let (e, doses) = expected_cost(&problem, &g, &pde_engine(coarse_energy(&mesh)), &scenario, 64, 11).unwrap();
    let n = doses.len() as f64;
    let mean: Vec<f64> = (0..problem.prescription.bins.n)
        .map(|i| doses.iter().map(|d| d.values[i]).sum::<f64>() / n)
        .collect();
    let at_mean = problem.cost(&mean, &g);
    assert!(
        e.mean - at_mean >= -3.0 * e.stderr,
        "E[J] {} vs J(E[D]) {at_mean}",
        e.mean
    );
    assert!(e.mean > at_mean);
}

#[test]
fn scenario_stderr_scales_inverse_sqrt() {
    let (problem, mesh) = slab_problem(&[60.0, 85.0, 110.0]);
    let g = [0.5, 1.0, 0.2];
    let scenario = ScenarioParams::default();
    let engine = pde_engine(coarse_energy(&mesh));
    // Spread of the mean across independent seeds at 16 and 64 scenarios.
    let spread = |n: usize| {
        let means: Vec<f64> = (0..20)
            .map(|s| {
                expected_cost(&problem, &g, &engine, &scenario, n, 1000 + s)
                    .unwrap()
                    .0
                    .mean
            })
            .collect();
        let m = means.iter().sum::<f64>() / 20.0;
        (means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 19.0).sqrt()
    };
    let ratio = spread(16) / spread(64);
    // Ideal ratio 2; 20 repetitions leave roughly ±30% on each spread.
    assert!(ratio > 1.2 && ratio < 3.4, "ratio {ratio}");
}

#[test]
fn pde_and_mc_influence_columns_agree() {
    let (problem, mesh) = slab_problem(&[85.0]);
    let fine = Mesh1D::new(5.0, 2000, &problem.window, 2000).unwrap();
    let pde = influence_matrix(&problem, &pde_engine(fine), 0).unwrap();
    let mc = influence_matrix(
        &problem,
        &DoseEngine::MonteCarlo {
            sim: SimConfig::default(),
            n_particles: 100_000,
            energy_bins: 80,
        },
        5,
    )
    .unwrap();
    let d = relative_l2(&mc.column(0), &pde.column(0));
    assert!(d < 0.05, "relative L2 {d}");
    let _ = mesh;
}

#[test]
fn hybrid_gradient_is_unbiased_without_perturbations() {
    let (problem, _) = slab_problem(&[60.0, 85.0, 110.0]);
    let mesh = Mesh1D::new(5.0, 800, &problem.window, 800).unwrap();
    let g = [0.5, 1.0, 0.2];
    let none = ScenarioParams {
        density_rel_sigma: 0.0,
        alpha_rel_sigma: 0.0,
        truncation: 0.2,
    };
    let sim = SimConfig {
        step_len: 0.01,
        ..SimConfig::default()
    };
    let hybrid = |n_particles: usize, seed: u64| {
        HybridObjective::new(
            problem.clone(),
            mesh,
            SolverOptions::default(),
            sim,
            n_particles,
            80,
            1,
            none,
            seed,
        )
        .unwrap()
    };
    // Reference: the same estimator with 25× the particles.
    let reference = hybrid(100_000, 99).sample(&g, 0, true).unwrap().mean_gradient();
    let reps = 50;
    let samples: Vec<Vec<f64>> = (0..reps)
        .map(|it| hybrid(2_000, 7).sample(&g, it, true).unwrap().mean_gradient())
        .collect();
    for j in 0..3 {
        let xs: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        let m = xs.iter().sum::<f64>() / reps as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (reps - 1) as f64;
        let se_mean = (var / reps as f64).sqrt();
        // The reference carries 1/50 of the single-run variance.
        let se = (se_mean * se_mean + var / 50.0).sqrt();
        assert!(
            (m - reference[j]).abs() <= 3.0 * se,
            "component {j}: {m} vs {} (se {se})",
            reference[j]
        );
    }
    // And the large-sample estimate sits near the deterministic adjoint gradient.
    let mut adj = AdjointObjective::new(problem, mesh, SolverOptions::default()).unwrap();
    let (_, det) = adj.cost_and_gradient(&g, 0).unwrap();
    assert!(rel_diff(&reference, &det) < 0.05, "{reference:?} vs {det:?}");
}
