//! Track-length fluence and dose estimators.
//!
//! Fluence in a bin is the expected track length spent in it divided by the
//! bin's phase-space volume (cm per cm·MeV·sr, per source particle and per
//! unit lateral area in the slab geometry). Segments are binned by midpoint.
//! Every estimator keeps per-history sums and sums of squares so standard
//! errors account for correlations within a track.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::materials::Phantom;
use crate::phase_space::PhaseState;
use crate::rng::{tag, StreamFactory, StreamRng};
use crate::sde::{trace_track, SimConfig, Source, TrackEvent, TrackSummary, TransportModel, CHUNK};
use crate::vec3;

/// Uniform bin edges on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edges {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Edges {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid bin edges [{lo}, {hi}] with {n} bins")));
        }
        Ok(Edges { lo, hi, n })
    }

    #[inline]
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    #[inline]
    pub fn edge(&self, i: usize) -> f64 {
        if i == self.n {
            self.hi
        } else {
            self.lo + i as f64 * self.width()
        }
    }

    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }

    /// Bin containing `x`; the upper edge belongs to the last bin.
    #[inline]
    pub fn index(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let i = ((x - self.lo) / self.width()) as usize;
        Some(i.min(self.n - 1))
    }

    /// Length of `[a, b] ∩ bin i`.
    pub fn overlap(&self, i: usize, a: f64, b: f64) -> f64 {
        (b.min(self.edge(i + 1)) - a.max(self.edge(i))).max(0.0)
    }
}

/// Scoring grid over depth × energy, optionally × cos(polar angle).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub depth: Edges,
    pub energy: Edges,
    /// Number of uniform bins in ω_z ∈ [−1, 1]; `None` integrates over angle.
    pub angle_bins: Option<usize>,
}

impl Grid {
    pub fn new(depth: Edges, energy: Edges, angle_bins: Option<usize>) -> Result<Self> {
        if angle_bins == Some(0) {
            return Err(Error::Config("angle_bins must be >= 1".into()));
        }
        Ok(Grid {
            depth,
            energy,
            angle_bins,
        })
    }

    pub fn n_angle(&self) -> usize {
        self.angle_bins.unwrap_or(1)
    }

    pub fn n_bins(&self) -> usize {
        self.depth.n * self.energy.n * self.n_angle()
    }

    /// Solid angle of one angular bin (1 when angle-integrated).
    pub fn angle_measure(&self) -> f64 {
        match self.angle_bins {
            Some(n) => 4.0 * std::f64::consts::PI / n as f64,
            None => 1.0,
        }
    }

    pub fn bin_volume(&self) -> f64 {
        self.depth.width() * self.energy.width() * self.angle_measure()
    }

    /// Depth-major flat index: ((iz · n_E) + iE) · n_angle + ia.
    #[inline]
    pub fn bin_index(&self, z: f64, e: f64, cos: f64) -> Option<usize> {
        let iz = self.depth.index(z)?;
        let ie = self.energy.index(e)?;
        let ia = match self.angle_bins {
            Some(n) => Edges { lo: -1.0, hi: 1.0, n }.index(cos)?,
            None => 0,
        };
        Some((iz * self.energy.n + ie) * self.n_angle() + ia)
    }
}

/// Sums and sums of squares of per-history scores.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    current: Vec<f64>,
    touched: Vec<usize>,
    histories: u64,
}

impl HistoryAccumulator {
    pub fn new(n: usize) -> Self {
        HistoryAccumulator {
            sum: vec![0.0; n],
            sum_sq: vec![0.0; n],
            current: vec![0.0; n],
            touched: Vec::new(),
            histories: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    #[inline]
    pub fn add(&mut self, i: usize, v: f64) {
        if self.current[i] == 0.0 {
            self.touched.push(i);
        }
        self.current[i] += v;
    }

    /// Closes the running history; bins are flushed in index order.
    pub fn end_history(&mut self) {
        self.touched.sort_unstable();
        self.touched.dedup();
        for &i in &self.touched {
            let v = self.current[i];
            self.sum[i] += v;
            self.sum_sq[i] += v * v;
            self.current[i] = 0.0;
        }
        self.touched.clear();
        self.histories += 1;
    }

    pub fn histories(&self) -> u64 {
        self.histories
    }

    pub fn merge(&mut self, other: &HistoryAccumulator) {
        assert_eq!(self.len(), other.len(), "accumulator sizes differ");
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self.histories += other.histories;
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.histories == 0 {
            0.0
        } else {
            self.sum[i] / self.histories as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self, i: usize) -> f64 {
        let n = self.histories as f64;
        if self.histories < 2 {
            return 0.0;
        }
        let m = self.sum[i] / n;
        let var = ((self.sum_sq[i] - n * m * m) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.mean(i)).collect()
    }

    pub fn stderrs(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.stderr(i)).collect()
    }
}

/// Track-length fluence estimate on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct FluenceMap {
    pub grid: Grid,
    acc: HistoryAccumulator,
    /// Track length of segments whose midpoint fell outside the grid.
    pub overflow_length: f64,
}

impl FluenceMap {
    pub fn new(grid: Grid) -> Self {
        let n = grid.n_bins();
        FluenceMap {
            grid,
            acc: HistoryAccumulator::new(n),
            overflow_length: 0.0,
        }
    }

    pub fn histories(&self) -> u64 {
        self.acc.histories()
    }

    pub fn value(&self, bin: usize) -> f64 {
        self.acc.mean(bin)
    }

    pub fn stderr(&self, bin: usize) -> f64 {
        self.acc.stderr(bin)
    }

    pub fn values(&self) -> Vec<f64> {
        self.acc.means()
    }

    pub fn merge(&mut self, other: &FluenceMap) {
        assert_eq!(self.grid, other.grid, "fluence grids differ");
        self.acc.merge(&other.acc);
        self.overflow_length += other.overflow_length;
    }

    /// Angle-integrated fluence per (depth, energy) bin.
    pub fn binned(&self) -> BinnedFluence {
        let g = &self.grid;
        let na = g.n_angle();
        let omega = g.angle_measure();
        let n = g.depth.n * g.energy.n;
        let mut values = vec![0.0; n];
        let mut stderr = vec![0.0; n];
        for b in 0..n {
            let mut v = 0.0;
            let mut s2 = 0.0;
            for a in 0..na {
                v += self.acc.mean(b * na + a) * omega;
                s2 += (self.acc.stderr(b * na + a) * omega).powi(2);
            }
            values[b] = v;
            stderr[b] = s2.sqrt();
        }
        BinnedFluence {
            depth: g.depth,
            energy: g.energy,
            values,
            stderr,
        }
    }
}

/// Adds one history's segments to `fluence`.
pub fn deposit(events: &[TrackEvent], fluence: &mut FluenceMap) {
    let vol = fluence.grid.bin_volume();
    for ev in events {
        if !ev.start.alive || ev.seg_len <= 0.0 {
            continue;
        }
        let (z, e, c) = midpoint(ev);
        match fluence.grid.bin_index(z, e, c) {
            Some(b) => fluence.acc.add(b, ev.seg_len / vol),
            None => fluence.overflow_length += ev.seg_len,
        }
    }
    fluence.acc.end_history();
}

#[inline]
fn midpoint(ev: &TrackEvent) -> (f64, f64, f64) {
    (
        0.5 * (ev.start.position[2] + ev.end.position[2]),
        0.5 * (ev.start.energy + ev.end.energy),
        ev.start.direction[2],
    )
}

/// Angle-integrated fluence on a depth × energy grid, in CSV-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedFluence {
    pub depth: Edges,
    pub energy: Edges,
    /// Depth-major values.
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl BinnedFluence {
    pub fn at(&self, iz: usize, ie: usize) -> f64 {
        self.values[iz * self.energy.n + ie]
    }

    /// ‖a − b‖₂ / ‖b‖₂ over all bins.
    pub fn relative_l2(&self, reference: &BinnedFluence) -> f64 {
        relative_l2(&self.values, &reference.values)
    }
}

pub fn relative_l2(a: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(a.len(), reference.len());
    let num: f64 = a.iter().zip(reference).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = reference.iter().map(|y| y * y).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

/// Dose per depth bin (MeV/g per source particle per cm²).
#[derive(Debug, Clone, PartialEq)]
pub struct DoseMap {
    pub depth: Edges,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl DoseMap {
    pub fn zeros(depth: Edges) -> Self {
        DoseMap {
            depth,
            values: vec![0.0; depth.n],
            stderr: vec![0.0; depth.n],
        }
    }

    /// Index of the maximum dose (first one on ties).
    pub fn peak_bin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn peak_depth(&self) -> f64 {
        self.depth.center(self.peak_bin())
    }
}

/// Σ over energy (and angle) of fluence · S(E_center)/ρ · bin measure.
///
/// Standard errors are propagated as if bins were independent, which
/// understates them for correlated track-length scores; [`Tally::dose`]
/// carries the per-history error instead.
pub fn dose_from_fluence(fluence: &FluenceMap, phantom: &Phantom) -> DoseMap {
    let b = fluence.binned();
    binned_dose(&b, phantom)
}

/// The fluence → dose map applied to angle-integrated fluence.
pub fn binned_dose(fluence: &BinnedFluence, phantom: &Phantom) -> DoseMap {
    let de = fluence.energy.width();
    let mut dose = DoseMap::zeros(fluence.depth);
    for iz in 0..fluence.depth.n {
        let medium = phantom.medium_at(fluence.depth.center(iz));
        let mut v = 0.0;
        let mut s2 = 0.0;
        for ie in 0..fluence.energy.n {
            let k = medium.mass_stopping_power(fluence.energy.center(ie)) * de;
            v += fluence.values[iz * fluence.energy.n + ie] * k;
            s2 += (fluence.stderr[iz * fluence.energy.n + ie] * k).powi(2);
        }
        dose.values[iz] = v;
        dose.stderr[iz] = s2.sqrt();
    }
    dose
}

/// Energy bookkeeping over all histories (MeV, summed, not averaged).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyLedger {
    pub injected: f64,
    /// Continuous loss deposited inside the depth grid.
    pub deposited: f64,
    /// Continuous loss at depths outside the scoring grid.
    pub deposited_outside: f64,
    pub escaped: f64,
    pub residual: f64,
    pub nonelastic: f64,
}

impl EnergyLedger {
    pub fn merge(&mut self, o: &EnergyLedger) {
        self.injected += o.injected;
        self.deposited += o.deposited;
        self.deposited_outside += o.deposited_outside;
        self.escaped += o.escaped;
        self.residual += o.residual;
        self.nonelastic += o.nonelastic;
    }

    /// (accounted − injected) / injected.
    pub fn relative_imbalance(&self) -> f64 {
        let accounted = self.deposited + self.deposited_outside + self.escaped + self.residual + self.nonelastic;
        (accounted - self.injected) / self.injected
    }
}

/// All estimators filled by one batch of tracks.
#[derive(Debug, Clone)]
pub struct Tally {
    pub grid: Grid,
    phantom: Phantom,
    pub fluence: FluenceMap,
    dose_fluence: HistoryAccumulator,
    dose_direct: HistoryAccumulator,
    /// S(E_center)/ρ per (depth, energy) bin, depth-major.
    mass_stopping: Vec<f64>,
    fast: FastGrid,
    pub ledger: EnergyLedger,
}

/// Bin lookup with precomputed reciprocal widths.
#[derive(Debug, Clone, Copy)]
struct FastEdges {
    lo: f64,
    hi: f64,
    inv_width: f64,
    last: usize,
}

impl FastEdges {
    fn new(e: &Edges) -> Self {
        FastEdges {
            lo: e.lo,
            hi: e.hi,
            inv_width: 1.0 / e.width(),
            last: e.n - 1,
        }
    }

    #[inline]
    fn index(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        Some((((x - self.lo) * self.inv_width) as usize).min(self.last))
    }
}

#[derive(Debug, Clone, Copy)]
struct FastGrid {
    depth: FastEdges,
    energy: FastEdges,
    angle: Option<FastEdges>,
    n_angle: usize,
    inv_volume: f64,
}

impl Tally {
    pub fn new(grid: Grid, phantom: &Phantom) -> Self {
        let mut mass_stopping = Vec::with_capacity(grid.depth.n * grid.energy.n);
        for iz in 0..grid.depth.n {
            let m = phantom.medium_at(grid.depth.center(iz));
            for ie in 0..grid.energy.n {
                mass_stopping.push(m.mass_stopping_power(grid.energy.center(ie)));
            }
        }
        let fast_depth = FastEdges::new(&grid.depth);
        let fast_energy = FastEdges::new(&grid.energy);
        let fast_angle = grid.angle_bins.map(|n| FastEdges::new(&Edges { lo: -1.0, hi: 1.0, n }));
        let n_angle = grid.n_angle();
        let inv_volume = 1.0 / grid.bin_volume();
        Tally {
            fluence: FluenceMap::new(grid.clone()),
            dose_fluence: HistoryAccumulator::new(grid.depth.n),
            dose_direct: HistoryAccumulator::new(grid.depth.n),
            grid,
            phantom: phantom.clone(),
            mass_stopping,
            fast: FastGrid {
                depth: fast_depth,
                energy: fast_energy,
                angle: fast_angle,
                n_angle,
                inv_volume,
            },
            ledger: EnergyLedger::default(),
        }
    }

    pub fn histories(&self) -> u64 {
        self.fluence.histories()
    }

    /// Scores one complete history.
    pub fn score_history(&mut self, events: &[TrackEvent], summary: &TrackSummary) {
        for ev in events {
            self.score_event(ev);
        }
        self.end_history(summary);
    }

    /// Scores one segment of the running history.
    #[inline]
    pub fn score_event(&mut self, ev: &TrackEvent) {
        if !ev.start.alive || ev.seg_len <= 0.0 {
            return;
        }
        let f = &self.fast;
        let (z, e, c) = midpoint(ev);
        let iz = f.depth.index(z);
        let ie = f.energy.index(e);
        match (iz, ie) {
            (Some(iz), Some(ie)) => {
                let ia = match &f.angle {
                    Some(a) => a.index(c),
                    None => Some(0),
                };
                if let Some(ia) = ia {
                    let cell = iz * self.grid.energy.n + ie;
                    self.fluence.acc.add(cell * f.n_angle + ia, ev.seg_len * f.inv_volume);
                    self.dose_fluence
                        .add(iz, ev.seg_len * self.mass_stopping[cell] * f.depth.inv_width);
                } else {
                    self.fluence.overflow_length += ev.seg_len;
                }
            }
            _ => self.fluence.overflow_length += ev.seg_len,
        }
        match iz {
            Some(iz) => {
                let rho = self.phantom.medium_at(z).rho;
                self.dose_direct.add(iz, ev.deposited_energy * f.depth.inv_width / rho);
                self.ledger.deposited += ev.deposited_energy;
            }
            None => self.ledger.deposited_outside += ev.deposited_energy,
        }
    }

    /// Closes the running history.
    pub fn end_history(&mut self, summary: &TrackSummary) {
        self.fluence.acc.end_history();
        self.dose_fluence.end_history();
        self.dose_direct.end_history();
        self.ledger.injected += summary.initial_energy;
        self.ledger.escaped += summary.escaped;
        self.ledger.residual += summary.residual;
        self.ledger.nonelastic += summary.nonelastic_loss;
    }

    pub fn merge(&mut self, other: &Tally) {
        assert_eq!(self.grid, other.grid, "tally grids differ");
        self.fluence.merge(&other.fluence);
        self.dose_fluence.merge(&other.dose_fluence);
        self.dose_direct.merge(&other.dose_direct);
        self.ledger.merge(&other.ledger);
    }

    /// Dose through the fluence × S/ρ identity, with per-history errors.
    pub fn dose(&self) -> DoseMap {
        DoseMap {
            depth: self.grid.depth,
            values: self.dose_fluence.means(),
            stderr: self.dose_fluence.stderrs(),
        }
    }

    /// Dose from direct accumulation of continuous energy loss.
    pub fn direct_dose(&self) -> DoseMap {
        DoseMap {
            depth: self.grid.depth,
            values: self.dose_direct.means(),
            stderr: self.dose_direct.stderrs(),
        }
    }
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// λ-discounted occupation functional E[∫ e^{−λℓ} v(Y_ℓ) dℓ] over tracks
/// launched from `source`, by midpoint quadrature on each segment.
pub fn estimate_resolvent<V>(
    v: V,
    lambda: f64,
    source: &Source,
    model: &TransportModel,
    config: &SimConfig,
    n: usize,
) -> Result<Estimate>
where
    V: Fn(&PhaseState) -> f64 + Sync,
{
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("discount rate must be >= 0 (got {lambda})")));
    }
    if n == 0 {
        return Err(Error::Config("resolvent estimate needs at least one track".into()));
    }
    config.validate()?;
    let streams = StreamFactory::new(config.seed, tag::RESOLVENT);
    let chunks = n.div_ceil(CHUNK);
    let per_chunk: Vec<Result<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(n);
            let mut out = Vec::with_capacity(range.len());
            for i in range {
                let mut rng: StreamRng = streams.stream(i as u64);
                let start = source.sample(&model.window, &mut rng);
                let mut ell = 0.0;
                let mut acc = 0.0;
                trace_track(&start, model, config, &mut rng, |ev| {
                    let mid = PhaseState {
                        position: vec3::lerp(ev.start.position, ev.end.position, 0.5),
                        direction: vec3::normalize(vec3::lerp(ev.start.direction, ev.end.direction, 0.5)),
                        energy: 0.5 * (ev.start.energy + ev.end.energy),
                        alive: true,
                    };
                    let l_mid = ell + 0.5 * ev.seg_len;
                    acc += (-lambda * l_mid).exp() * v(&mid) * ev.seg_len;
                    ell += ev.seg_len;
                })?;
                out.push(acc);
            }
            Ok(out)
        })
        .collect();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for part in per_chunk {
        for x in part? {
            sum += x;
            sum_sq += x * x;
        }
    }
    let nf = n as f64;
    let mean = sum / nf;
    let stderr = if n > 1 {
        ((sum_sq - nf * mean * mean).max(0.0) / (nf - 1.0) / nf).sqrt()
    } else {
        0.0
    };
    Ok(Estimate { mean, stderr })
}

#[inline]
fn num(x: f64) -> String {
    format!("{x:.10e}")
}

/// Fluence CSV: one row per (depth, energy) bin, depth-major.
pub fn write_fluence_csv<W: Write>(out: &mut W, fluence: &BinnedFluence) -> io::Result<()> {
    writeln!(out, "# z in cm, E in MeV, fluence in 1/(cm^2 MeV) per source particle")?;
    writeln!(out, "z_lo,z_hi,E_lo,E_hi,fluence,fluence_stderr")?;
    for iz in 0..fluence.depth.n {
        for ie in 0..fluence.energy.n {
            let k = iz * fluence.energy.n + ie;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                num(fluence.depth.edge(iz)),
                num(fluence.depth.edge(iz + 1)),
                num(fluence.energy.edge(ie)),
                num(fluence.energy.edge(ie + 1)),
                num(fluence.values[k]),
                num(fluence.stderr[k])
            )?;
        }
    }
    Ok(())
}

/// Dose CSV: one row per depth bin.
pub fn write_dose_csv<W: Write>(out: &mut W, dose: &DoseMap) -> io::Result<()> {
    writeln!(out, "# z in cm, dose in MeV/g per source particle per cm^2")?;
    writeln!(out, "z_lo,z_hi,dose,dose_stderr")?;
    for i in 0..dose.depth.n {
        writeln!(
            out,
            "{},{},{},{}",
            num(dose.depth.edge(i)),
            num(dose.depth.edge(i + 1)),
            num(dose.values[i]),
            num(dose.stderr[i])
        )?;
    }
    Ok(())
}
