//! Run configuration: a TOML document with defaults for every key,
//! `--set path=value` overrides, and validation that reports every problem
//! with its field path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use protonplan::materials::{Medium, Phantom, ScenarioParams};
use protonplan::optimizer::{Beam, BeamBank, OptConfig, Prescription, StepRule};
use protonplan::pde::SolverOptions;
use protonplan::phase_space::{EnergyWindow, SpatialDomain};
use protonplan::scattering::{CrossSections, KernelParams, RateLaw};
use protonplan::sde::{PencilBeam, SimConfig, Source, TransportMode, TransportModel};
use protonplan::tally::{Edges, Grid};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawConfig {
    pub seed: u64,
    /// Scale factor of the adjoint source.
    pub q_factor: f64,
    pub output_dir: String,
    /// Overrides of the built-in media, or new media.
    pub media: BTreeMap<String, MediumSection>,
    pub domain: DomainSection,
    pub phantom: PhantomSection,
    pub window: WindowSection,
    pub source: SourceSection,
    pub bank: BankSection,
    pub scattering: ScatteringSection,
    pub sim: SimSection,
    pub tally: TallySection,
    pub mesh: MeshSection,
    pub prescription: PrescriptionSection,
    pub optimizer: OptimizerSection,
    pub duality: DualitySection,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            seed: 1,
            q_factor: 1.0,
            output_dir: "out".into(),
            media: BTreeMap::new(),
            domain: DomainSection::default(),
            phantom: PhantomSection::default(),
            window: WindowSection::default(),
            source: SourceSection::default(),
            bank: BankSection::default(),
            scattering: ScatteringSection::default(),
            sim: SimSection::default(),
            tally: TallySection::default(),
            mesh: MeshSection::default(),
            prescription: PrescriptionSection::default(),
            optimizer: OptimizerSection::default(),
            duality: DualitySection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediumSection {
    pub alpha: Option<f64>,
    pub p: Option<f64>,
    pub rho: Option<f64>,
    pub e_screen: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSection {
    /// "slab" or "box".
    pub kind: String,
    /// Slab depth (cm).
    pub length: f64,
    /// Box extents (cm), used when kind = "box".
    pub extent: [f64; 3],
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection {
            kind: "slab".into(),
            length: 10.0,
            extent: [10.0, 10.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// Medium filling the domain when no layers are given.
    pub medium: String,
    pub layers: Vec<LayerSpec>,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            medium: "water".into(),
            layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub medium: String,
    pub thickness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub e_min: f64,
    pub e_max: f64,
}

impl Default for WindowSection {
    fn default() -> Self {
        WindowSection {
            e_min: 1.0,
            e_max: 250.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BeamSpec {
    pub energy: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub beams: Vec<BeamSpec>,
}

impl Default for SourceSection {
    fn default() -> Self {
        SourceSection {
            beams: vec![BeamSpec {
                energy: 100.0,
                sigma: 0.0,
                weight: 1.0,
            }],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BankSection {
    /// Explicit beams; takes precedence over `spread`.
    pub beams: Vec<BeamSpec>,
    pub spread: Option<SpreadSpec>,
}

/// Beams whose ranges in `medium` are evenly spaced over [range_lo, range_hi].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpreadSpec {
    pub count: usize,
    pub range_lo: f64,
    pub range_hi: f64,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "water_name")]
    pub medium: String,
}

fn water_name() -> String {
    "water".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScatteringSection {
    /// Elastic rate at `e_ref` (1/cm).
    pub elastic_rate: f64,
    pub nonelastic_rate: f64,
    pub e_ref: f64,
    pub elastic_exponent: f64,
    pub nonelastic_exponent: f64,
    pub kappa_e: f64,
    pub ne_frac_min: f64,
    pub ne_frac_max: f64,
    pub kappa_ne: f64,
}

impl Default for ScatteringSection {
    fn default() -> Self {
        let k = KernelParams::default();
        ScatteringSection {
            elastic_rate: 0.0,
            nonelastic_rate: 0.0,
            e_ref: 100.0,
            elastic_exponent: 0.0,
            nonelastic_exponent: 0.0,
            kappa_e: k.kappa_e,
            ne_frac_min: k.ne_frac_min,
            ne_frac_max: k.ne_frac_max,
            kappa_ne: k.kappa_ne,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub step_len: f64,
    pub mu: f64,
    pub max_track_len: f64,
    pub n_particles: usize,
    /// "1d" or "3d".
    pub mode: String,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        SimSection {
            step_len: s.step_len,
            mu: s.mu,
            max_track_len: s.max_track_len,
            n_particles: s.n_particles,
            mode: "1d".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TallySection {
    pub depth_bins: usize,
    pub energy_bins: usize,
    /// Polar-angle bins; 0 leaves angle unresolved.
    pub angle_bins: usize,
}

impl Default for TallySection {
    fn default() -> Self {
        TallySection {
            depth_bins: 100,
            energy_bins: 100,
            angle_bins: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub n_e: usize,
    /// Depth nodes; when absent, the coarsest count meeting `cfl_max`.
    pub n_z: Option<usize>,
    pub cfl_max: f64,
}

impl Default for MeshSection {
    fn default() -> Self {
        MeshSection {
            n_e: 400,
            n_z: None,
            cfl_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PrescriptionSection {
    /// Target depth interval (cm).
    pub target: [f64; 2],
    /// Prescribed dose in the target (MeV/g per unit weight).
    pub level: f64,
    pub w_in: f64,
    pub w_out: f64,
    pub depth_bins: usize,
}

impl Default for PrescriptionSection {
    fn default() -> Self {
        PrescriptionSection {
            target: [3.0, 6.0],
            level: 1.0,
            w_in: 1.0,
            w_out: 0.1,
            depth_bins: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    /// "influence", "adjoint" or "hybrid".
    pub mode: String,
    /// Influence-matrix columns from "mc" or "pde".
    pub engine: String,
    pub alpha_reg: f64,
    /// "backtracking", "fixed" or "exact".
    pub step: String,
    pub c: f64,
    pub shrink: f64,
    pub tau0: f64,
    pub k0: f64,
    pub tol_eps: f64,
    pub max_iters: usize,
    pub n_mc: usize,
    pub n_scenarios: usize,
    pub density_rel_sigma: f64,
    pub alpha_rel_sigma: f64,
    pub truncation: f64,
    pub g_max: Option<f64>,
    /// g_max as a multiple of the least-squares uniform weight.
    pub g_max_factor: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            mode: "influence".into(),
            engine: "mc".into(),
            alpha_reg: 1e-6,
            step: "backtracking".into(),
            c: 1e-4,
            shrink: 0.5,
            tau0: 1e-3,
            k0: 50.0,
            tol_eps: 1e-6,
            max_iters: 500,
            n_mc: 10_000,
            n_scenarios: 1,
            density_rel_sigma: 0.0,
            alpha_rel_sigma: 0.0,
            truncation: 0.2,
            g_max: None,
            g_max_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DualitySection {
    /// Pass bar on the relative L2 fluence distance.
    pub tolerance: f64,
    /// Replaces the medium of the deterministic solve (sensitivity check).
    pub pde_medium: Option<String>,
}

impl Default for DualitySection {
    fn default() -> Self {
        DualitySection {
            tolerance: 0.05,
            pde_medium: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptMode {
    Influence,
    Adjoint,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    MonteCarlo,
    Pde,
}

/// A validated configuration with every engine type built.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// The effective document after defaults and overrides.
    pub raw: RawConfig,
    pub seed: u64,
    pub q_factor: f64,
    pub output_dir: PathBuf,
    pub media: BTreeMap<String, Medium>,
    pub model: TransportModel,
    pub sim: SimConfig,
    pub source_beams: Vec<Beam>,
    pub grid: Grid,
    pub solver: SolverOptions,
    pub bank: BeamBank,
    pub prescription: Prescription,
    pub opt: OptConfig,
    pub opt_mode: OptMode,
    pub engine: Engine,
    pub scenario: ScenarioParams,
}

impl RunConfig {
    pub fn phantom(&self) -> &Phantom {
        &self.model.phantom
    }

    pub fn window(&self) -> EnergyWindow {
        self.model.window
    }

    pub fn source(&self) -> Source {
        let beams = self
            .source_beams
            .iter()
            .map(|b| (PencilBeam::axial(b.energy, b.sigma), b.weight))
            .collect();
        Source::bank(beams).expect("source validated at load time")
    }

    /// The effective document as TOML.
    /// The resolved configuration as TOML. The output location is left out:
    /// it does not affect results, so runs written elsewhere hash the same.
    pub fn effective_toml(&self) -> String {
        let mut table = toml::Table::try_from(&self.raw).expect("config serializes");
        table.remove("output_dir");
        toml::to_string(&table).expect("config serializes")
    }
}

/// Applies one `path=value` override. The value is read as a TOML value,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), String> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not of the form path=value"))?;
    let path = path.trim();
    let value = value.trim();
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("override path `{path}` has an empty component"));
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(format!("override path `{path}`: `{k}` is not a table")),
        };
    }
    node.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

/// Reads, overrides and validates a configuration file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, overrides).map_err(|e| match e {
        CliError::Validation(v) => {
            CliError::Validation(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
        }
        other => other,
    })
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let raw: RawConfig = if overrides.is_empty() {
        // Deserializing straight from the text keeps line numbers in errors.
        toml::from_str(text).map_err(|e| CliError::Validation(vec![e.to_string()]))?
    } else {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
        let errors: Vec<String> = overrides
            .iter()
            .filter_map(|o| apply_override(&mut table, o).err())
            .collect();
        if !errors.is_empty() {
            return Err(CliError::Validation(errors));
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(vec![format!("after overrides: {e}")]))?
    };
    validate(raw)
}

fn prefixed(prefix: &str, messages: Vec<String>) -> impl Iterator<Item = String> + '_ {
    messages.into_iter().map(move |m| format!("{prefix}.{m}"))
}

fn beam_list(path: &str, beams: &[BeamSpec], window: Option<&EnergyWindow>, errors: &mut Vec<String>) -> Vec<Beam> {
    let mut out = Vec::new();
    for (i, b) in beams.iter().enumerate() {
        let at = format!("{path}[{i}]");
        if let Some(w) = window {
            if !(b.energy > w.e_min && b.energy <= w.e_max) {
                errors.push(format!(
                    "{at}.energy {} MeV lies outside the energy window ({}, {}]",
                    b.energy, w.e_min, w.e_max
                ));
            }
        }
        if !(b.sigma >= 0.0 && b.sigma.is_finite()) {
            errors.push(format!("{at}.sigma must be >= 0 (got {})", b.sigma));
        }
        if !(b.weight >= 0.0 && b.weight.is_finite()) {
            errors.push(format!("{at}.weight must be >= 0 (got {})", b.weight));
        }
        out.push(Beam {
            energy: b.energy,
            sigma: b.sigma,
            weight: b.weight,
        });
    }
    out
}

fn validate(raw: RawConfig) -> Result<RunConfig, CliError> {
    let mut errors = Vec::new();

    // Media: built-ins, then overrides and additions.
    let mut media: BTreeMap<String, Medium> = Medium::builtins().into_iter().map(|m| (m.name.clone(), m)).collect();
    for (name, spec) in &raw.media {
        let base = media.get(name).cloned();
        let pick = |v: Option<f64>, b: Option<f64>, field: &str, errors: &mut Vec<String>| match v.or(b) {
            Some(x) => x,
            None => {
                errors.push(format!("media.{name}.{field} is required for a new medium"));
                f64::NAN
            }
        };
        let m = Medium {
            name: name.clone(),
            alpha: pick(spec.alpha, base.as_ref().map(|b| b.alpha), "alpha", &mut errors),
            p: pick(spec.p, base.as_ref().map(|b| b.p), "p", &mut errors),
            rho: pick(spec.rho, base.as_ref().map(|b| b.rho), "rho", &mut errors),
            e_screen: spec.e_screen.or(base.as_ref().map(|b| b.e_screen)).unwrap_or(1.0),
        };
        let problems: Vec<String> = m.violations().into_iter().filter(|v| !v.contains("NaN")).collect();
        errors.extend(prefixed(&format!("media.{name}"), problems));
        media.insert(name.clone(), m);
    }
    let lookup = |name: &str, path: &str, errors: &mut Vec<String>| -> Option<Medium> {
        match media.get(name) {
            Some(m) => Some(m.clone()),
            None => {
                errors.push(format!("{path} refers to unknown medium `{name}`"));
                None
            }
        }
    };

    let domain = match raw.domain.kind.as_str() {
        "slab" => SpatialDomain::slab(raw.domain.length)
            .map_err(|_| format!("domain.length must be > 0 (got {})", raw.domain.length)),
        "box" => SpatialDomain::cuboid(raw.domain.extent)
            .map_err(|_| format!("domain.extent entries must be > 0 (got {:?})", raw.domain.extent)),
        other => Err(format!("domain.kind must be \"slab\" or \"box\" (got \"{other}\")")),
    };
    let domain = domain.map_err(|e| errors.push(e)).ok();

    let window = EnergyWindow::new(raw.window.e_min, raw.window.e_max)
        .map_err(|_| {
            errors.push(format!(
                "window: need 0 <= e_min < e_max (got e_min = {}, e_max = {})",
                raw.window.e_min, raw.window.e_max
            ))
        })
        .ok();

    let phantom = if raw.phantom.layers.is_empty() {
        lookup(&raw.phantom.medium, "phantom.medium", &mut errors).map(Phantom::uniform)
    } else {
        let mut stack = Vec::new();
        for (i, l) in raw.phantom.layers.iter().enumerate() {
            if !(l.thickness > 0.0) {
                errors.push(format!(
                    "phantom.layers[{i}].thickness must be > 0 (got {})",
                    l.thickness
                ));
            }
            if let Some(m) = lookup(&l.medium, &format!("phantom.layers[{i}].medium"), &mut errors) {
                stack.push((m, l.thickness));
            }
        }
        Phantom::layered(stack).ok()
    };

    let s = &raw.scattering;
    for (field, v) in [("elastic_rate", s.elastic_rate), ("nonelastic_rate", s.nonelastic_rate)] {
        if !(v >= 0.0 && v.is_finite()) {
            errors.push(format!("scattering.{field} must be >= 0 (got {v})"));
        }
    }
    if !(s.e_ref > 0.0) {
        errors.push(format!("scattering.e_ref must be > 0 (got {})", s.e_ref));
    }
    let kernel = KernelParams {
        kappa_e: s.kappa_e,
        ne_frac_min: s.ne_frac_min,
        ne_frac_max: s.ne_frac_max,
        kappa_ne: s.kappa_ne,
    };
    errors.extend(prefixed("scattering", kernel.violations()));
    let law = |sigma_ref, exponent| RateLaw {
        sigma_ref,
        e_ref: s.e_ref,
        exponent,
    };
    let xs = if s.elastic_rate == 0.0 && s.nonelastic_rate == 0.0 {
        CrossSections::none()
    } else {
        CrossSections::uniform(
            law(s.elastic_rate, s.elastic_exponent),
            law(s.nonelastic_rate, s.nonelastic_exponent),
        )
    };

    let mode = match raw.sim.mode.as_str() {
        "1d" => TransportMode::OneD,
        "3d" => TransportMode::ThreeD,
        other => {
            errors.push(format!("sim.mode must be \"1d\" or \"3d\" (got \"{other}\")"));
            TransportMode::OneD
        }
    };
    let sim = SimConfig {
        step_len: raw.sim.step_len,
        mu: raw.sim.mu,
        max_track_len: raw.sim.max_track_len,
        seed: raw.seed,
        n_particles: raw.sim.n_particles,
        mode,
    };
    errors.extend(prefixed("sim", sim.violations()));

    if raw.source.beams.is_empty() {
        errors.push("source.beams must list at least one beam".into());
    }
    let source_beams = beam_list("source.beams", &raw.source.beams, window.as_ref(), &mut errors);
    if !source_beams.is_empty() && source_beams.iter().all(|b| b.weight == 0.0) {
        errors.push("source.beams: at least one weight must be > 0".into());
    }

    let bank_beams = if !raw.bank.beams.is_empty() {
        beam_list("bank.beams", &raw.bank.beams, window.as_ref(), &mut errors)
    } else if let Some(sp) = &raw.bank.spread {
        if sp.count == 0 {
            errors.push("bank.spread.count must be >= 1".into());
        }
        if !(sp.range_lo > 0.0 && sp.range_hi >= sp.range_lo) {
            errors.push(format!(
                "bank.spread: need 0 < range_lo <= range_hi (got {}, {})",
                sp.range_lo, sp.range_hi
            ));
        }
        match lookup(&sp.medium, "bank.spread.medium", &mut errors) {
            Some(m) if sp.count > 0 => {
                let beams = BeamBank::range_spread(sp.count, sp.range_lo, sp.range_hi, sp.sigma, &m).beams;
                let specs: Vec<BeamSpec> = beams
                    .iter()
                    .map(|b| BeamSpec {
                        energy: b.energy,
                        sigma: b.sigma,
                        weight: b.weight,
                    })
                    .collect();
                beam_list("bank.spread", &specs, window.as_ref(), &mut errors)
            }
            _ => Vec::new(),
        }
    } else {
        source_beams.clone()
    };

    let depth_len = domain.map(|d| d.depth_length()).unwrap_or(1.0);
    let t = &raw.tally;
    if t.depth_bins == 0 {
        errors.push("tally.depth_bins must be >= 1".into());
    }
    if t.energy_bins == 0 {
        errors.push("tally.energy_bins must be >= 1".into());
    }
    let grid = match (window, t.depth_bins > 0 && t.energy_bins > 0) {
        (Some(w), true) => Grid::new(
            Edges::new(0.0, depth_len, t.depth_bins).expect("positive bins"),
            Edges::new(w.e_min, w.e_max, t.energy_bins).expect("positive bins"),
            if t.angle_bins > 0 { Some(t.angle_bins) } else { None },
        )
        .map_err(|e| errors.push(format!("tally: {e}")))
        .ok(),
        _ => None,
    };

    let m = &raw.mesh;
    if m.n_e < 2 {
        errors.push(format!("mesh.n_e must be >= 2 (got {})", m.n_e));
    }
    if let Some(nz) = m.n_z {
        if nz < 2 {
            errors.push(format!("mesh.n_z must be >= 2 (got {nz})"));
        }
    }
    if !(m.cfl_max > 0.0) {
        errors.push(format!("mesh.cfl_max must be > 0 (got {})", m.cfl_max));
    }

    let p = &raw.prescription;
    if p.depth_bins == 0 {
        errors.push("prescription.depth_bins must be >= 1".into());
    }
    if !(p.target[1] > p.target[0]) {
        errors.push(format!(
            "prescription.target must be an interval [lo, hi] with lo < hi (got {:?})",
            p.target
        ));
    }
    for (field, v) in [("level", p.level), ("w_in", p.w_in), ("w_out", p.w_out)] {
        if !(v >= 0.0 && v.is_finite()) {
            errors.push(format!("prescription.{field} must be >= 0 (got {v})"));
        }
    }
    let prescription = if p.depth_bins > 0 && p.target[1] > p.target[0] {
        Prescription::target_box(
            Edges::new(0.0, depth_len, p.depth_bins).expect("positive bins"),
            (p.target[0], p.target[1]),
            p.level,
            p.w_in,
            p.w_out,
        )
        .ok()
    } else {
        None
    };

    let o = &raw.optimizer;
    let opt_mode = match o.mode.as_str() {
        "influence" => OptMode::Influence,
        "adjoint" => OptMode::Adjoint,
        "hybrid" => OptMode::Hybrid,
        other => {
            errors.push(format!(
                "optimizer.mode must be \"influence\", \"adjoint\" or \"hybrid\" (got \"{other}\")"
            ));
            OptMode::Influence
        }
    };
    let engine = match o.engine.as_str() {
        "mc" => Engine::MonteCarlo,
        "pde" => Engine::Pde,
        other => {
            errors.push(format!("optimizer.engine must be \"mc\" or \"pde\" (got \"{other}\")"));
            Engine::MonteCarlo
        }
    };
    let step = match o.step.as_str() {
        "backtracking" => StepRule::Backtracking {
            c: o.c,
            shrink: o.shrink,
        },
        "fixed" => StepRule::Fixed { tau0: o.tau0, k0: o.k0 },
        "exact" => StepRule::Exact,
        other => {
            errors.push(format!(
                "optimizer.step must be \"backtracking\", \"fixed\" or \"exact\" (got \"{other}\")"
            ));
            StepRule::Backtracking {
                c: o.c,
                shrink: o.shrink,
            }
        }
    };
    let opt = OptConfig {
        step,
        tol_eps: o.tol_eps,
        max_iters: o.max_iters,
    };
    errors.extend(prefixed("optimizer", opt.violations()));
    if !(o.alpha_reg >= 0.0 && o.alpha_reg.is_finite()) {
        errors.push(format!("optimizer.alpha_reg must be >= 0 (got {})", o.alpha_reg));
    }
    if step == StepRule::Exact && !(o.alpha_reg > 0.0) {
        errors.push("optimizer.alpha_reg must be > 0 for the exact step rule".into());
    }
    if o.n_mc == 0 {
        errors.push("optimizer.n_mc must be >= 1".into());
    }
    if o.n_scenarios == 0 {
        errors.push("optimizer.n_scenarios must be >= 1".into());
    }
    if let Some(g) = o.g_max {
        if !(g > 0.0) {
            errors.push(format!("optimizer.g_max must be > 0 (got {g})"));
        }
    }
    if !(o.g_max_factor > 0.0) {
        errors.push(format!("optimizer.g_max_factor must be > 0 (got {})", o.g_max_factor));
    }
    let scenario = ScenarioParams {
        density_rel_sigma: o.density_rel_sigma,
        alpha_rel_sigma: o.alpha_rel_sigma,
        truncation: o.truncation,
    };
    errors.extend(prefixed("optimizer", scenario.violations()));

    if !(raw.duality.tolerance > 0.0) {
        errors.push(format!("duality.tolerance must be > 0 (got {})", raw.duality.tolerance));
    }
    if let Some(name) = &raw.duality.pde_medium {
        lookup(name, "duality.pde_medium", &mut errors);
    }
    if !(raw.q_factor.is_finite()) {
        errors.push("q_factor must be finite".into());
    }

    if !errors.is_empty() {
        return Err(CliError::Validation(errors));
    }
    let (domain, window, phantom, grid, prescription) = match (domain, window, phantom, grid, prescription) {
        (Some(a), Some(b), Some(c), Some(d), Some(e)) => (a, b, c, d, e),
        _ => return Err(CliError::Validation(vec!["configuration is incomplete".into()])),
    };
    Ok(RunConfig {
        seed: raw.seed,
        q_factor: raw.q_factor,
        output_dir: PathBuf::from(&raw.output_dir),
        media,
        model: TransportModel {
            domain,
            window,
            phantom,
            xs,
            kernel,
        },
        sim,
        source_beams,
        grid,
        solver: SolverOptions {
            cfl_max: raw.mesh.cfl_max,
        },
        bank: BeamBank { beams: bank_beams },
        prescription,
        opt,
        opt_mode,
        engine,
        scenario,
        raw,
    })
}
