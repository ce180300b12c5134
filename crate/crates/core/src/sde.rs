//! Track-length stochastic transport.
//!
//! A proton state evolves in track length ℓ by
//!
//! ```text
//! dE = −S(x, E) dℓ − (jump losses)
//! dx = ω dℓ
//! dω = −μ² ω dℓ + μ ω ∧ dB + (jump deflections)
//! ```
//!
//! integrated with explicit Euler–Maruyama and post-step renormalization of
//! `ω`. Collisions arrive on an exponential clock with a majorant rate and are
//! thinned to the local rate `σ_n(x, E)`. A track ends when the energy reaches
//! `e_min`, the proton leaves the domain, or the configured track length runs
//! out; the particle is then in the cemetery and scores nothing further.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::materials::{Medium, Phantom};
use crate::phase_space::{classify, exit_test, BoundaryClass, EnergyWindow, ExitCause, PhaseState, SpatialDomain};
use crate::rng::{tag, StreamFactory, StreamRng};
use crate::scattering::{sample_transition, total_rate, CrossSections, KernelParams};
use crate::tally::{Grid, Tally};
use crate::vec3::{self, Vec3};

/// Particles per work unit. Fixed so the reduction order never depends on
/// the number of worker threads.
pub const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    /// Straight tracks along ±z; angular diffusion and deflections disabled.
    OneD,
    ThreeD,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Track-length step Δℓ (cm).
    pub step_len: f64,
    /// Angular diffusion coefficient μ (cm^-1/2).
    pub mu: f64,
    pub max_track_len: f64,
    pub seed: u64,
    pub n_particles: usize,
    pub mode: TransportMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            step_len: 0.01,
            mu: 0.0,
            max_track_len: 100.0,
            seed: 1,
            n_particles: 10_000,
            mode: TransportMode::OneD,
        }
    }
}

impl SimConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.step_len > 0.0 && self.step_len.is_finite()) {
            out.push(format!("step_len must be > 0 (got {})", self.step_len));
        }
        if !(self.max_track_len >= self.step_len) {
            out.push("max_track_len must be >= step_len".to_string());
        }
        if self.n_particles < 1 {
            out.push("n_particles must be >= 1".to_string());
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            out.push(format!("mu must be >= 0 (got {})", self.mu));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Problem data shared read-only by every track.
#[derive(Debug, Clone)]
pub struct TransportModel {
    pub domain: SpatialDomain,
    pub window: EnergyWindow,
    pub phantom: Phantom,
    pub xs: CrossSections,
    pub kernel: KernelParams,
}

impl TransportModel {
    /// Continuous slowing down only: no collisions.
    pub fn csda(domain: SpatialDomain, window: EnergyWindow, phantom: Phantom) -> Self {
        TransportModel {
            domain,
            window,
            phantom,
            xs: CrossSections::none(),
            kernel: KernelParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalCause {
    RangeOut,
    SpatialExit,
    MaxLength,
}

/// One straight segment of a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackEvent {
    pub start: PhaseState,
    pub end: PhaseState,
    pub seg_len: f64,
    /// Energy lost continuously along the segment (MeV).
    pub deposited_energy: f64,
    pub terminal: Option<TerminalCause>,
}

/// Per-track bookkeeping returned alongside the events.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrackSummary {
    pub steps: usize,
    pub jumps: usize,
    pub track_length: f64,
    pub initial_energy: f64,
    pub deposited: f64,
    /// Energy carried out through the spatial boundary.
    pub escaped: f64,
    /// Energy left when the track stopped inside the domain.
    pub residual: f64,
    /// Energy removed by non-elastic collisions.
    pub nonelastic_loss: f64,
    pub cause: Option<TerminalCause>,
}

/// One Euler–Maruyama step of length `dt` for the continuous dynamics.
pub fn drift_diffuse_step<R: Rng + ?Sized>(
    state: &PhaseState,
    dt: f64,
    medium: &Medium,
    config: &SimConfig,
    rng: &mut R,
) -> PhaseState {
    let energy = state.energy - medium.stopping_power(state.energy) * dt;
    let position = vec3::axpy(state.position, dt, state.direction);
    let direction = if config.mode == TransportMode::ThreeD && config.mu > 0.0 {
        let sd = dt.sqrt();
        let db: Vec3 = [
            sd * rng.sample::<f64, _>(StandardNormal),
            sd * rng.sample::<f64, _>(StandardNormal),
            sd * rng.sample::<f64, _>(StandardNormal),
        ];
        let w = state.direction;
        let mu = config.mu;
        let stepped = vec3::axpy(vec3::scale(w, 1.0 - mu * mu * dt), mu, vec3::cross(w, db));
        vec3::normalize(stepped)
    } else {
        state.direction
    };
    PhaseState {
        position,
        direction,
        energy,
        alive: true,
    }
}

/// Distance to the next candidate collision on a clock of rate `rate_bound`.
pub fn next_jump<R: Rng + ?Sized>(rate_bound: f64, rng: &mut R) -> Result<f64> {
    if !(rate_bound >= 0.0) {
        return Err(Error::Domain(format!("negative jump rate {rate_bound}")));
    }
    if rate_bound == 0.0 {
        return Ok(f64::INFINITY);
    }
    let u = 1.0 - rng.random::<f64>();
    Ok(-u.ln() / rate_bound)
}

/// Thinning: keeps a candidate collision with probability `rate / rate_bound`.
#[inline]
pub fn accept_jump<R: Rng + ?Sized>(rate: f64, rate_bound: f64, rng: &mut R) -> bool {
    rate >= rate_bound || rng.random::<f64>() * rate_bound < rate
}

/// Follows one track from `start` until termination, handing each segment to
/// `visit` in order.
pub fn trace_track<R, F>(
    start: &PhaseState,
    model: &TransportModel,
    config: &SimConfig,
    rng: &mut R,
    mut visit: F,
) -> Result<TrackSummary>
where
    R: Rng + ?Sized,
    F: FnMut(TrackEvent),
{
    if !start.alive {
        return Err(Error::Contract("cannot launch a track from the cemetery".into()));
    }
    if classify(start, &model.domain, &model.window)? == BoundaryClass::GammaPlus {
        return Err(Error::Contract("track start lies on the outflow boundary".into()));
    }

    let bound = model.xs.rate_bound(&model.window);
    let mut summary = TrackSummary {
        initial_energy: start.energy,
        ..Default::default()
    };
    let mut state = *start;
    let mut to_jump = next_jump(bound, rng)?;
    let step_cap = (config.max_track_len / config.step_len).ceil() as usize + 2;

    loop {
        let remaining = config.max_track_len - summary.track_length;
        let h = config.step_len.min(to_jump).min(remaining);
        let jump_now = to_jump <= config.step_len && to_jump <= remaining;

        let medium = model.phantom.medium_at(state.depth());
        let mut next = drift_diffuse_step(&state, h, medium, config, rng);
        summary.steps += 1;

        if let Some(crossing) = exit_test(&state, &next, &model.domain, &model.window) {
            let seg_len = crossing.fraction * h;
            let deposited = (state.energy - crossing.state.energy).max(0.0);
            let cause = match crossing.cause {
                ExitCause::RangeOut => TerminalCause::RangeOut,
                ExitCause::SpatialExit => TerminalCause::SpatialExit,
            };
            summary.track_length += seg_len;
            summary.deposited += deposited;
            match cause {
                TerminalCause::SpatialExit => summary.escaped = crossing.state.energy,
                _ => summary.residual = crossing.state.energy,
            }
            summary.cause = Some(cause);
            visit(TrackEvent {
                start: state,
                end: crossing.state,
                seg_len,
                deposited_energy: deposited,
                terminal: Some(cause),
            });
            return Ok(summary);
        }

        let deposited = state.energy - next.energy;
        summary.track_length += h;
        summary.deposited += deposited;
        let segment_end = next;
        let mut terminal = None;

        if jump_now {
            to_jump = 0.0;
            let rate = total_rate(&next, &model.xs);
            if rate > 0.0 && accept_jump(rate, bound, rng) {
                let t = sample_transition(&next, &model.xs, &model.kernel, rng)?;
                summary.jumps += 1;
                summary.nonelastic_loss += next.energy - t.energy;
                next.energy = t.energy;
                if config.mode == TransportMode::ThreeD {
                    next.direction = t.direction;
                }
                if next.energy <= model.window.e_min {
                    terminal = Some(TerminalCause::RangeOut);
                    summary.residual = next.energy;
                }
            }
        } else {
            to_jump -= h;
        }

        if terminal.is_none() && summary.track_length >= config.max_track_len * (1.0 - 1e-12) {
            terminal = Some(TerminalCause::MaxLength);
            summary.residual = next.energy;
        }

        visit(TrackEvent {
            start: state,
            end: segment_end,
            seg_len: h,
            deposited_energy: deposited,
            terminal,
        });

        if terminal.is_some() {
            summary.cause = terminal;
            return Ok(summary);
        }

        if to_jump <= 0.0 {
            to_jump = next_jump(bound, rng)?;
        }
        state = next;

        if summary.steps > step_cap + 2 * summary.jumps {
            return Err(Error::Contract(format!(
                "track exceeded its iteration bound ({} steps)",
                summary.steps
            )));
        }
    }
}

/// Collects the events of one track.
pub fn simulate_track<R: Rng + ?Sized>(
    start: &PhaseState,
    model: &TransportModel,
    config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<TrackEvent>> {
    let mut events = Vec::new();
    trace_track(start, model, config, rng, |e| events.push(e))?;
    Ok(events)
}

/// A pencil beam with a Gaussian energy spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PencilBeam {
    pub position: Vec3,
    pub direction: Vec3,
    pub energy: f64,
    pub energy_sigma: f64,
}

impl PencilBeam {
    /// A beam entering the phantom at the origin along +z.
    pub fn axial(energy: f64, energy_sigma: f64) -> Self {
        PencilBeam {
            position: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            energy,
            energy_sigma,
        }
    }
}

/// A weighted mixture of pencil beams on the inflow boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    beams: Vec<PencilBeam>,
    cumulative: Vec<f64>,
}

impl Source {
    pub fn single(beam: PencilBeam) -> Self {
        Source {
            beams: vec![beam],
            cumulative: vec![1.0],
        }
    }

    /// A mixture; beams are drawn with probability proportional to weight.
    pub fn bank(beams: Vec<(PencilBeam, f64)>) -> Result<Self> {
        if beams.is_empty() {
            return Err(Error::Config("source has no beams".into()));
        }
        if beams.iter().any(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("source weights must be finite and >= 0".into()));
        }
        let total: f64 = beams.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(Error::Config("source weights sum to zero".into()));
        }
        let mut acc = 0.0;
        let cumulative = beams
            .iter()
            .map(|(_, w)| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(Source {
            beams: beams.into_iter().map(|(b, _)| b).collect(),
            cumulative,
        })
    }

    pub fn beams(&self) -> &[PencilBeam] {
        &self.beams
    }

    /// Mean source energy, accounting for truncation to the window.
    pub fn sample<R: Rng + ?Sized>(&self, window: &EnergyWindow, rng: &mut R) -> PhaseState {
        let beam = if self.beams.len() == 1 {
            &self.beams[0]
        } else {
            let u = rng.random::<f64>();
            let k = self.cumulative.partition_point(|&c| c <= u).min(self.beams.len() - 1);
            &self.beams[k]
        };
        let energy = if beam.energy_sigma > 0.0 {
            // Rejection onto (e_min, e_max]; give up and clamp after many misses.
            let mut e = beam.energy;
            for _ in 0..1000 {
                e = beam.energy + beam.energy_sigma * rng.sample::<f64, _>(StandardNormal);
                if e > window.e_min && e <= window.e_max {
                    break;
                }
            }
            e.clamp(window.e_min.next_up(), window.e_max)
        } else {
            beam.energy
        };
        PhaseState::new(beam.position, beam.direction, energy)
    }
}

/// Runs `n` independent tracks and merges their tallies.
///
/// Particle `i` uses stream `i` of the transport stream family derived from
/// `config.seed`; chunks of [`CHUNK`] particles are scored in parallel on the
/// ambient rayon pool and merged in chunk order.
pub fn run_batch(source: &Source, n: usize, model: &TransportModel, config: &SimConfig, grid: &Grid) -> Result<Tally> {
    run_batch_with_streams(
        source,
        n,
        model,
        config,
        grid,
        &StreamFactory::new(config.seed, tag::TRANSPORT),
    )
}

pub fn run_batch_with_streams(
    source: &Source,
    n: usize,
    model: &TransportModel,
    config: &SimConfig,
    grid: &Grid,
    streams: &StreamFactory,
) -> Result<Tally> {
    if n == 0 {
        return Err(Error::Config("run_batch needs at least one particle".into()));
    }
    config.validate()?;
    for beam in source.beams() {
        if !(beam.energy > model.window.e_min && beam.energy <= model.window.e_max) {
            return Err(Error::Config(format!(
                "beam energy {} MeV outside window ({}, {}]",
                beam.energy, model.window.e_min, model.window.e_max
            )));
        }
    }

    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Result<Tally>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut tally = Tally::new(grid.clone(), &model.phantom);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let mut rng: StreamRng = streams.stream(i as u64);
                let start = source.sample(&model.window, &mut rng);
                let summary = trace_track(&start, model, config, &mut rng, |e| tally.score_event(&e))?;
                tally.end_history(&summary);
            }
            Ok(tally)
        })
        .collect();

    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one chunk")?;
    for part in iter {
        total.merge(&part?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::Medium;
    use crate::scattering::RateLaw;

    fn csda_model(length: f64) -> TransportModel {
        TransportModel::csda(
            SpatialDomain::slab(length).unwrap(),
            EnergyWindow::new(1.0, 250.0).unwrap(),
            Phantom::uniform(Medium::water()),
        )
    }

    fn rng(i: u64) -> StreamRng {
        StreamFactory::new(99, tag::TRANSPORT).stream(i)
    }

    #[test]
    fn deterministic_limit_step() {
        let w = Medium::water();
        let cfg = SimConfig::default();
        let mut s = PhaseState::on_axis(0.0, 100.0);
        let mut r = rng(0);
        let mut e = 100.0;
        for k in 1..=10 {
            s = drift_diffuse_step(&s, 0.01, &w, &cfg, &mut r);
            e -= w.stopping_power(e) * 0.01;
            assert!((s.depth() - 0.01 * k as f64).abs() < 1e-12);
            assert_eq!(s.energy, e);
        }
    }

    #[test]
    fn sphere_step_keeps_unit_norm_and_matches_small_angle_moment() {
        let w = Medium::water();
        let cfg = SimConfig {
            mu: 0.3,
            mode: TransportMode::ThreeD,
            ..SimConfig::default()
        };
        let dt = 0.01;
        let start = PhaseState::new([0.0; 3], [0.3, -0.2, 0.9], 100.0);
        let mut r = rng(1);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let s = drift_diffuse_step(&start, dt, &w, &cfg, &mut r);
                assert!((vec3::norm(s.direction) - 1.0).abs() < 1e-12);
                1.0 - vec3::dot(s.direction, start.direction)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let expected = cfg.mu * cfg.mu * dt;
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "mean {mean}, expected {expected}, se {se}"
        );
    }

    #[test]
    fn jump_clock() {
        let mut r = rng(2);
        assert_eq!(next_jump(0.0, &mut r).unwrap(), f64::INFINITY);
        assert!(next_jump(-1.0, &mut r).is_err());
        let rate = 0.25;
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| next_jump(rate, &mut r).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = (1.0 / rate) / (n as f64).sqrt();
        assert!((mean - 1.0 / rate).abs() < 3.0 * se);
        assert!((0..1000).all(|_| accept_jump(0.7, 0.7, &mut r)));
    }

    #[test]
    fn csda_track_exits_thin_slab() {
        let model = csda_model(8.5);
        let cfg = SimConfig::default();
        let ev = simulate_track(&PhaseState::on_axis(0.0, 150.0), &model, &cfg, &mut rng(3)).unwrap();
        let last = ev.last().unwrap();
        assert_eq!(last.terminal, Some(TerminalCause::SpatialExit));
        assert!((last.end.depth() - 8.5).abs() < 1e-12);
        assert!(ev[..ev.len() - 1].iter().all(|e| e.terminal.is_none()));
    }

    #[test]
    fn csda_track_ranges_out_and_conserves_energy() {
        let w = Medium::water();
        let e0 = (3.37 / w.alpha).powf(1.0 / w.p);
        let model = csda_model(8.5);
        let cfg = SimConfig::default();
        let ev = simulate_track(&PhaseState::on_axis(0.0, e0), &model, &cfg, &mut rng(4)).unwrap();
        let last = ev.last().unwrap();
        assert_eq!(last.terminal, Some(TerminalCause::RangeOut));
        let dep: f64 = ev.iter().map(|e| e.deposited_energy).sum();
        assert!((dep - (e0 - model.window.e_min)).abs() < 1e-9);
        let length: f64 = ev.iter().map(|e| e.seg_len).sum();
        let exact = w.range(e0).unwrap() - w.range(1.0).unwrap();
        assert!((length - exact).abs() / exact < 0.01);
        assert!(ev.iter().all(|e| e.seg_len > 0.0 && e.seg_len <= cfg.step_len + 1e-15));
    }

    #[test]
    fn csda_depth_energy_curve_matches_closed_form() {
        let w = Medium::water();
        let model = csda_model(20.0);
        let cfg = SimConfig::default();
        let ev = simulate_track(&PhaseState::on_axis(0.0, 150.0), &model, &cfg, &mut rng(5)).unwrap();
        for e in ev.iter().filter(|e| e.end.energy > 20.0) {
            let exact = w.energy_at_depth(150.0, e.end.depth());
            assert!((e.end.energy - exact).abs() / exact < 0.01);
        }
    }

    #[test]
    fn max_length_single_step() {
        let model = csda_model(8.5);
        let cfg = SimConfig {
            max_track_len: 0.01,
            ..SimConfig::default()
        };
        let ev = simulate_track(&PhaseState::on_axis(0.0, 100.0), &model, &cfg, &mut rng(6)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].terminal, Some(TerminalCause::MaxLength));
    }

    #[test]
    fn launch_from_outflow_is_rejected() {
        let model = csda_model(8.5);
        let cfg = SimConfig::default();
        let s = PhaseState::on_axis(8.5, 100.0);
        assert!(matches!(
            simulate_track(&s, &model, &cfg, &mut rng(7)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scattered_tracks_respect_invariants() {
        let w = Medium::water();
        let window = EnergyWindow::new(1.0, 250.0).unwrap();
        let model = TransportModel {
            domain: SpatialDomain::cuboid([6.0, 6.0, 20.0]).unwrap(),
            window,
            phantom: Phantom::uniform(w.clone()),
            xs: CrossSections::uniform(RateLaw::constant(0.3), RateLaw::constant(0.05)),
            kernel: KernelParams::default(),
        };
        let cfg = SimConfig {
            mu: 0.2,
            mode: TransportMode::ThreeD,
            ..SimConfig::default()
        };
        let e_max = 150.0;
        // Energy loss per unit length is at least S(e_max).
        let bound_steps = ((e_max - window.e_min) / (w.stopping_power(e_max) * cfg.step_len)).ceil() as usize + 1;
        for i in 0..200 {
            let mut r = rng(100 + i);
            let mut events = Vec::new();
            let summary = trace_track(&PhaseState::on_axis(0.0, e_max), &model, &cfg, &mut r, |e| {
                events.push(e)
            })
            .unwrap();
            assert!(summary.steps <= bound_steps + 2 * summary.jumps);
            let mut last_e = e_max;
            for e in &events {
                assert!(e.end.energy <= last_e + 1e-12);
                assert!(e.start.energy <= last_e + 1e-12);
                last_e = e.end.energy;
                assert!((vec3::norm(e.start.direction) - 1.0).abs() < 1e-12);
                assert!((vec3::norm(e.end.direction) - 1.0).abs() < 1e-12);
                assert!(e.deposited_energy >= 0.0);
            }
            let dep: f64 = events.iter().map(|e| e.deposited_energy).sum();
            assert!(dep <= e_max);
            let balance = summary.deposited + summary.escaped + summary.residual + summary.nonelastic_loss;
            assert!((balance - e_max).abs() < 1e-9, "balance {balance}");
        }
    }

    #[test]
    fn source_sampling_stays_in_window() {
        let window = EnergyWindow::new(50.0, 120.0).unwrap();
        let src = Source::single(PencilBeam::axial(118.0, 5.0));
        let mut r = rng(8);
        for _ in 0..10_000 {
            let s = src.sample(&window, &mut r);
            assert!(s.energy > 50.0 && s.energy <= 120.0);
        }
        assert!(Source::bank(vec![]).is_err());
        assert!(Source::bank(vec![(PencilBeam::axial(60.0, 0.0), 0.0)]).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::materials::Medium;
    use crate::scattering::RateLaw;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn tracks_lose_energy_keep_unit_directions_and_terminate(
            seed in any::<u64>(), e0 in 5.0f64..200.0, mu in 0.0f64..0.3,
            se in 0.0f64..0.5, sne in 0.0f64..0.05, three_d in any::<bool>(),
        ) {
            let window = EnergyWindow::new(1.0, 250.0).unwrap();
            let model = TransportModel {
                domain: SpatialDomain::cuboid([20.0, 20.0, 30.0]).unwrap(),
                window,
                phantom: Phantom::uniform(Medium::water()),
                xs: CrossSections::uniform(RateLaw::constant(se), RateLaw::constant(sne)),
                kernel: KernelParams::default(),
            };
            let config = SimConfig {
                mu,
                mode: if three_d { TransportMode::ThreeD } else { TransportMode::OneD },
                ..SimConfig::default()
            };
            let mut rng = StreamFactory::new(seed, tag::TRANSPORT).stream(0);
            let start = PhaseState::on_axis(0.0, e0);
            let mut last_energy = e0;
            let mut full_steps = 0usize;
            let summary = trace_track(&start, &model, &config, &mut rng, |ev| {
                assert!(ev.start.energy <= last_energy && ev.end.energy <= ev.start.energy);
                last_energy = ev.end.energy;
                for d in [ev.start.direction, ev.end.direction] {
                    assert!((vec3::norm(d) - 1.0).abs() < 1e-12);
                }
                if ev.seg_len == config.step_len {
                    full_steps += 1;
                }
            })
            .unwrap();
            prop_assert!(summary.cause.is_some());
            let bound = Medium::water().range(window.e_max).unwrap() / config.step_len + 1.0;
            prop_assert!((full_steps as f64) <= bound, "{} full steps, bound {}", full_steps, bound);
        }
    }
}
