//! Experiment configuration, the end-to-end run, its manifest and the
//! exported reports.
//!
//! A run directory holds:
//!
//! | file | content |
//! |------|---------|
//! | `config.toml` | resolved configuration |
//! | `data.bin` | initial velocity (field container) |
//! | `force/f_XXX.bin` | synthesized force tensor at sample times |
//! | `final.bin` | velocity at the last node |
//! | `report.json` | every computed report |
//! | `decay.csv`, `decay_unforced.csv` | `t,l2,weighted_l2` series |
//! | `summary.json` | headline numbers (see `schema/summary.schema.json`) |
//! | `manifest.json` | hashes of all of the above |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{Calibration, Constants};
use crate::container::{self, FieldKind};
use crate::data::{generate_data, DataSpec};
use crate::diagnostics::{self, DecayReport, DissipationReport, EnvelopeReport, HeatBoundReport, MsReport, ProfileResidualReport};
use crate::error::{Error, Result};
use crate::field::{FieldLike, ScalarField, TensorField, VectorField};
use crate::grid::GridSpec;
use crate::norms::Exponent;
use crate::rescale::lambda_rescale;
use crate::solver::{self, Checkpoints, KatoNormReport, PicardConfig, SnapshotPolicy, SolverOptions, Trajectory};
use crate::spectral::Spectral;
use crate::sweep;
use crate::synthesis::{self, BumpComponent, ForceProfile, Functionals, MomentMatrix, ProfileShape, SmallnessReport, SynthesisConfig};
use crate::timegrid::TimeGrid;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Replaces the seed of random data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub grid: GridSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub scaling: Scaling,
    #[serde(default)]
    pub profile: ProfileConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default)]
    pub synthesis: SynthesisSettings,
    #[serde(default)]
    pub diagnostics: DiagnosticsSelection,
    /// Calibration file; the shipped one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Write per-node checkpoints of solver-only runs.
    #[serde(default)]
    pub checkpoints: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaling {
    /// Rescale the amplitude so that `‖a‖_n` is this multiple of the calibrated `δ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_fraction: Option<f64>,
    /// Apply `a ↦ λa(λ·)` after generation.
    #[serde(default = "one")]
    pub lambda: f64,
}

impl Default for Scaling {
    fn default() -> Self {
        Scaling {
            threshold_fraction: None,
            lambda: 1.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSource {
    /// Smooth bump on `[−1, 1]^n × [0, 1/4]`.
    #[default]
    Builtin,
    /// TOML file with `[[component]]` bump entries.
    File { path: PathBuf },
    Inline { component: Vec<BumpComponent> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ProfileConfig {
    #[serde(flatten)]
    pub source: ProfileSource,
    /// Fixed radius; chosen by doubling when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Proceed when some smallness condition fails.
    #[serde(default)]
    pub acknowledge_smallness: bool,
}

/// Contents of a profile file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub component: Vec<BumpComponent>,
}

impl ProfileConfig {
    pub fn shape(&self, dim: usize, base_dir: &Path) -> Result<ProfileShape> {
        match &self.source {
            ProfileSource::Builtin => Ok(ProfileShape::default_bump(dim)),
            ProfileSource::Inline { component } => Ok(ProfileShape::Bumps(component.clone())),
            ProfileSource::File { path } => {
                let path = base_dir.join(path);
                let text = fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("profile file {}: {e}", path.display())))?;
                let f: ProfileFile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
                Ok(ProfileShape::Bumps(f.component))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "spacing", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeConfig {
    Uniform { t_end: f64, steps: usize },
    Geometric { t_end: f64, t_min: f64, ratio: f64 },
}

impl TimeConfig {
    /// `t_end = L²/64` with `t_min = 10⁻³`, ratio 1.2.
    pub fn window_default(grid: &GridSpec) -> Self {
        TimeConfig::Geometric {
            t_end: grid.validity_time(),
            t_min: 1e-3,
            ratio: 1.2,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        match *self {
            TimeConfig::Uniform { t_end, steps } => TimeGrid::uniform(t_end, steps),
            TimeConfig::Geometric { t_end, t_min, ratio } => TimeGrid::geometric(t_end, t_min, ratio),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Etd2rk,
    Picard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSettings {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(flatten)]
    pub config: SynthesisConfig,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        SynthesisSettings {
            enabled: true,
            config: SynthesisConfig::default(),
        }
    }
}

fn yes() -> bool {
    true
}

fn two() -> Exponent {
    Exponent::Finite(2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSelection {
    #[serde(default = "yes")]
    pub decay: bool,
    /// Fit window; the last valid decade when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_window: Option<(f64, f64)>,
    #[serde(default = "yes")]
    pub ms: bool,
    #[serde(default = "yes")]
    pub profile_residual: bool,
    #[serde(default = "two")]
    pub residual_q: Exponent,
    #[serde(default = "yes")]
    pub lemma_heat2: bool,
    #[serde(default = "yes")]
    pub wiegner: bool,
    /// Also run the unforced flow and compare.
    #[serde(default = "yes")]
    pub dissipation: bool,
    /// Number of force samples exported.
    #[serde(default = "eight")]
    pub force_samples: usize,
}

fn eight() -> usize {
    8
}

impl Default for DiagnosticsSelection {
    fn default() -> Self {
        DiagnosticsSelection {
            decay: true,
            decay_window: None,
            ms: true,
            profile_residual: true,
            residual_q: two(),
            lemma_heat2: true,
            wiegner: true,
            dissipation: true,
            force_samples: 8,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.time.grid()?;
        self.picard.validate()?;
        let data_seed = match self.data {
            DataSpec::RandomSolenoidal { seed, .. } => Some(seed),
            _ => None,
        };
        for seed in self.seed.into_iter().chain(data_seed) {
            if seed > i64::MAX as u64 {
                return Err(Error::Config(format!("seed {seed} does not fit a TOML integer (max 2^63 - 1)")));
            }
        }
        if !(self.scaling.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.scaling.lambda)));
        }
        if let Some(f) = self.scaling.threshold_fraction {
            if !(f >= 0.0) {
                return Err(Error::Config(format!("threshold_fraction must be >= 0, got {f}")));
            }
        }
        if let Some(r) = self.profile.radius {
            if !(r > 0.0) {
                return Err(Error::Config(format!("radius must be positive, got {r}")));
            }
        }
        if self.synthesis.enabled && self.integrator == Integrator::Picard {
            return Err(Error::Config("synthesis runs use the etd2rk integrator".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn resolved_data(&self) -> DataSpec {
        match (&self.data, self.seed) {
            (DataSpec::RandomSolenoidal { amplitude, width, band, .. }, Some(seed)) => DataSpec::RandomSolenoidal {
                amplitude: *amplitude,
                width: *width,
                band: *band,
                seed,
            },
            (d, _) => d.clone(),
        }
    }
}

/// Sets `key` (dotted path) in a TOML document to `value`, parsed as a TOML
/// value when possible and as a string otherwise.
pub fn apply_override(doc: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a table")))?;
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{key}' does not address a table entry")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parses a config after applying `KEY=VALUE` overrides.
pub fn load_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not KEY=VALUE")))?;
        apply_override(&mut doc, k.trim(), v.trim())?;
    }
    let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCounts {
    pub solves: usize,
    pub nodes: usize,
    pub outer_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub config_hash: String,
    pub software_version: String,
    pub calibration_version: u32,
    pub artifacts: Vec<Artifact>,
    pub steps: StepCounts,
    pub wall_clock_seconds: f64,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rechecks every artifact hash against the files in `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let got = hash_file(&dir.join(&a.path))?;
            if got.sha256 != a.sha256 {
                return Err(Error::Format(format!("hash mismatch for {}", a.path)));
            }
        }
        Ok(())
    }

    /// The manifest with its timing fields cleared.
    pub fn without_timing(&self) -> Self {
        RunManifest {
            wall_clock_seconds: 0.0,
            created_unix: 0,
            ..self.clone()
        }
    }
}

fn hash_file(path: &Path) -> Result<Artifact> {
    let bytes = fs::read(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    Ok(Artifact {
        path: String::new(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub converged: bool,
    pub iterations: usize,
    pub c_history: Vec<MomentMatrix>,
    pub deltas: Vec<f64>,
    pub ratios: Vec<f64>,
    pub consistency: f64,
    pub final_moments: MomentMatrix,
    pub force_coefficients: Vec<Vec<f64>>,
    pub force_integrals: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusSummary {
    pub radius: f64,
    pub automatic: bool,
    pub tried: Vec<f64>,
    pub binding: Option<String>,
    pub support_half_width: f64,
}

/// A diagnostic that ran, or the reason it did not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome<T> {
    Done(T),
    Refused(String),
    Skipped,
}

impl<T> Outcome<T> {
    fn from_result(r: Result<T>) -> Self {
        match r {
            Ok(v) => Outcome::Done(v),
            Err(e) => Outcome::Refused(e.to_string()),
        }
    }

    pub fn done(&self) -> Option<&T> {
        match self {
            Outcome::Done(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub validity_time: f64,
    pub decay: Outcome<DecayReport>,
    pub ms: Outcome<MsReport>,
    pub profile_residual: Outcome<ProfileResidualReport>,
    pub lemma_heat2: Outcome<HeatBoundReport>,
    pub wiegner: Outcome<EnvelopeReport>,
    pub dissipation: Outcome<DissipationReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub calibration: Constants,
    pub data: DataSpec,
    pub lambda: f64,
    pub first_moments: Vec<Vec<f64>>,
    pub functionals: Functionals,
    pub radius: Option<RadiusSummary>,
    pub smallness: Option<SmallnessReport>,
    pub synthesis: Option<SynthesisSummary>,
    pub kato: KatoNormReport,
    /// `(t, ‖u(t)‖₂)` of the reported flow (forced when synthesized).
    pub l2_series: Vec<(f64, f64)>,
    pub unforced_l2_series: Option<Vec<(f64, f64)>>,
    pub diagnostics: DiagnosticsReport,
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Resolved data spec (seed, threshold scaling) and the generated field after
/// the optional λ-rescaling.
pub fn prepare_data(cfg: &ExperimentConfig, sp: &Spectral, constants: &Constants) -> Result<(DataSpec, VectorField)> {
    let mut spec = cfg.resolved_data();
    if let Some(f) = cfg.scaling.threshold_fraction {
        spec = if f == 0.0 {
            spec.with_amplitude(0.0)
        } else {
            sweep::scale_to_ln(sp, &spec, f * constants.delta)?
        };
    }
    let mut a = generate_data(sp, &spec)?;
    if cfg.scaling.lambda != 1.0 {
        a = lambda_rescale(sp, &a, cfg.scaling.lambda)?;
    }
    Ok((spec, a))
}

fn load_calibration(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Calibration> {
    match &cfg.calibration {
        Some(p) => Calibration::load(&base_dir.join(p)),
        None => Ok(Calibration::shipped()),
    }
}

/// Runs generate → smallness → (radius choice) → synthesize or simulate →
/// diagnostics, writing everything under `out` (or `cfg.output_dir`).
/// Relative paths in the config resolve against `base_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, base_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let start = Instant::now();
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory".into()))?;
    fs::create_dir_all(&dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml())?;
    written.push(cfg_path);

    let calibration = load_calibration(cfg, base_dir)?;
    let constants = calibration.constants(cfg.grid.dim)?;
    let sp = Spectral::new(&cfg.grid)?;
    let n = cfg.grid.dim;
    let timegrid = cfg.time.grid()?;
    let quad = synthesis::default_quadrature(n);

    let (spec, a) = prepare_data(cfg, &sp, &constants)?;
    let hash = cfg.hash();
    let meta = |t: &str| {
        let mut m = BTreeMap::new();
        m.insert("config_hash".to_string(), serde_json::Value::from(hash.clone()));
        m.insert("role".to_string(), serde_json::Value::from(t));
        m
    };
    let data_path = dir.join("data.bin");
    container::write_field_with(&data_path, &a.to_physical(&sp).into_components(), FieldKind::Vector, Some(0.0), meta("initial data"))?;
    written.extend([data_path.clone(), container::sidecar_path(&data_path)]);

    let fun = synthesis::functionals(&sp, &a, constants.gamma, quad)?;
    let first_moments = crate::norms::first_moments(&cfg.grid, &a.values(&sp));
    let mut counts = StepCounts {
        solves: 0,
        nodes: timegrid.nodes().len(),
        outer_iterations: 0,
    };

    let mut radius = None;
    let mut smallness = None;
    let mut synthesis_summary = None;
    let mut forcing = None;
    let trajectory: Trajectory;
    if cfg.synthesis.enabled {
        let base = ForceProfile::normalize(&sp, cfg.profile.shape(n, base_dir)?)?;
        let (profile, report, tried, automatic) = match cfg.profile.radius {
            Some(r) => {
                let p = base.with_radius(&sp, r)?;
                if p.support_half_width() > synthesis::box_capacity(&sp) {
                    return Err(Error::BoxTooSmall {
                        needed: p.support_half_width(),
                        available: synthesis::box_capacity(&sp),
                        needed_box_length: 16.0 / 7.0 * p.support_half_width(),
                    });
                }
                let rep = synthesis::check_smallness(&sp, &fun, &p, &constants)?;
                (p, rep, vec![r], false)
            }
            None => {
                let c = synthesis::choose_r(&sp, &fun, &base, &constants)?;
                (c.profile, c.report, c.tried, true)
            }
        };
        if !report.all_pass() && !cfg.profile.acknowledge_smallness {
            return Err(Error::SmallnessNotMet {
                failing: report.conditions.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect(),
            });
        }
        radius = Some(RadiusSummary {
            radius: profile.radius,
            automatic,
            tried,
            binding: report.binding(),
            support_half_width: profile.support_half_width(),
        });
        smallness = Some(report);
        let state = synthesis::synthesize(&sp, &a, &profile, &timegrid, &cfg.solver, &cfg.synthesis.config)?;
        counts.solves += state.c_history.len() + 1;
        counts.outer_iterations = state.m;
        synthesis_summary = Some(SynthesisSummary {
            converged: state.converged,
            iterations: state.m,
            c_history: state.c_history.clone(),
            deltas: state.deltas.clone(),
            ratios: state.ratios(),
            consistency: state.consistency(),
            final_moments: state.final_moments.clone(),
            force_coefficients: state.forcing.coeffs.clone(),
            force_integrals: state.forcing.integrals(),
            beta: state.beta(),
        });
        let duration = profile.duration();
        let samples = cfg.diagnostics.force_samples;
        for i in 0..samples {
            let t = duration * (i as f64 + 0.5) / samples as f64;
            let phi_t = ScalarField::from_physical(&cfg.grid, state.forcing.profile.value_at(t))?;
            let f = TensorField::from_scalar_profile(&state.forcing.coeffs, &phi_t)?;
            let p = dir.join("force").join(format!("f_{i:03}.bin"));
            container::write_field_with(&p, f.components(), FieldKind::Tensor, Some(t), meta("synthesized force"))?;
            written.extend([p.clone(), container::sidecar_path(&p)]);
        }
        trajectory = state.trajectory;
        forcing = Some(state.forcing);
    } else {
        trajectory = match cfg.integrator {
            Integrator::Etd2rk => {
                let ck = cfg.checkpoints.then(|| Checkpoints {
                    dir: dir.join("checkpoints"),
                    resume: true,
                });
                solver::integrate_with(&sp, &a, None, &timegrid, &cfg.solver, ck.as_ref())?
            }
            Integrator::Picard => solver::picard_iterate(&sp, &a, None, &timegrid, &cfg.picard, &cfg.solver)?.0,
        };
        counts.solves += 1;
        if cfg.checkpoints && cfg.integrator == Integrator::Etd2rk {
            let mut files: Vec<PathBuf> = fs::read_dir(dir.join("checkpoints"))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            files.sort();
            written.extend(files);
        }
    }
    if let Some(last) = trajectory.snapshots.last() {
        let p = dir.join("final.bin");
        container::write_field_with(
            &p,
            &last.components().to_physical(&sp),
            FieldKind::Vector,
            trajectory.records.last().map(|r| r.t),
            meta("velocity at the last node"),
        )?;
        written.extend([p.clone(), container::sidecar_path(&p)]);
    }

    let d = &cfg.diagnostics;
    let unforced = if d.dissipation && forcing.is_some() {
        let opts = SolverOptions {
            snapshots: SnapshotPolicy::NormsOnly,
            ..cfg.solver.clone()
        };
        counts.solves += 1;
        Some(solver::integrate(&sp, &a, None, &timegrid, &opts)?)
    } else {
        None
    };
    let times = trajectory.times();
    let decade = diagnostics::last_valid_decade(&cfg.grid, &times);
    let decay = if d.decay {
        Outcome::from_result(match d.decay_window.or(decade) {
            Some(w) => diagnostics::decay_slope("l2", &trajectory.l2_series(), w, &cfg.grid),
            None => Err(Error::InvalidArgument("no valid nodes".into())),
        })
    } else {
        Outcome::Skipped
    };
    let ms = match (&synthesis_summary, d.ms) {
        (Some(s), true) => Outcome::Done(diagnostics::ms_residual(
            &s.final_moments,
            &s.force_integrals,
            10.0 * cfg.synthesis.config.tol,
        )),
        _ => Outcome::Skipped,
    };
    let profile_residual = if d.profile_residual {
        let nonlinear = if cfg.solver.nonlinear {
            synthesis_summary.as_ref().map_or_else(|| trajectory.gram(), |s| s.final_moments.entries.clone())
        } else {
            vec![vec![0.0; n]; n]
        };
        let nodes: Vec<usize> = match decade {
            Some((t0, t1)) => times
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= t0 * (1.0 - 1e-12) && t <= t1)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        };
        Outcome::from_result(diagnostics::fm_profile_residual(
            &sp,
            &trajectory,
            &a,
            forcing.as_ref(),
            &nonlinear,
            d.residual_q,
            &nodes,
        ))
    } else {
        Outcome::Skipped
    };
    let lemma_heat2 = if d.lemma_heat2 {
        Outcome::from_result(diagnostics::lemma_heat2_check(&sp, &a, &times))
    } else {
        Outcome::Skipped
    };
    let wiegner = if d.wiegner {
        Outcome::Done(diagnostics::wiegner_check(&trajectory, fun.k, fun.norms.l2))
    } else {
        Outcome::Skipped
    };
    let dissipation = match &unforced {
        Some(u) => Outcome::from_result(diagnostics::dissipation_check(&trajectory, u)),
        None => Outcome::Skipped,
    };

    let report = RunReport {
        config: cfg.clone(),
        calibration: constants,
        data: spec,
        lambda: cfg.scaling.lambda,
        first_moments,
        functionals: fun,
        radius,
        smallness,
        synthesis: synthesis_summary,
        kato: solver::kato_norms(&trajectory),
        l2_series: trajectory.l2_series(),
        unforced_l2_series: unforced.as_ref().map(Trajectory::l2_series),
        diagnostics: DiagnosticsReport {
            validity_time: cfg.grid.validity_time(),
            decay,
            ms,
            profile_residual,
            lemma_heat2,
            wiegner,
            dissipation,
        },
    };
    let report_path = dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    written.push(report_path);
    written.extend(export_report(&dir)?);

    let mut artifacts = Vec::with_capacity(written.len());
    for p in &written {
        let mut a = hash_file(p)?;
        a.path = rel(&dir, p);
        artifacts.push(a);
    }
    let manifest = RunManifest {
        format: "nsforce-manifest".into(),
        version: MANIFEST_VERSION,
        name: cfg.name.clone(),
        config_hash: hash,
        software_version: env!("CARGO_PKG_VERSION").into(),
        calibration_version: calibration.version,
        artifacts,
        steps: counts,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatSample {
    pub t: f64,
    pub solver: f64,
    /// `‖e^{tΔ}a‖₂` from the exact multiplier.
    pub exact: f64,
    /// Closed form for the 2D Gaussian vortex, `√π ε w² / (w² + 4t)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_form: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub picard_iterations: usize,
    pub picard_history: Vec<f64>,
    /// `‖u_picard(t) − u_integrator(t)‖₂ / ‖u_integrator(t)‖₂` at each node.
    pub relative_l2: Vec<(f64, f64)>,
    pub max_relative_l2: f64,
    pub heat: Vec<HeatSample>,
    /// Largest relative deviation of the heat-only solver from the exact
    /// multiplier (and from the closed form when available).
    pub heat_max_relative: f64,
}

fn relative_l2(u: &VectorField, v: &VectorField) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in u.data().iter().zip(v.data()) {
        for (x, y) in a.iter().zip(b) {
            num += (x - y).norm_sqr();
            den += y.norm_sqr();
        }
    }
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

/// Cross-checks Picard against the exponential integrator on the configured
/// data and time grid, and the heat-only solver against the exact multiplier.
pub fn oracle_check(cfg: &ExperimentConfig, base_dir: &Path) -> Result<OracleReport> {
    cfg.validate()?;
    let constants = load_calibration(cfg, base_dir)?.constants(cfg.grid.dim)?;
    let sp = Spectral::new(&cfg.grid)?;
    let (spec, a) = prepare_data(cfg, &sp, &constants)?;
    let tg = cfg.time.grid()?;
    let opts = SolverOptions {
        snapshots: SnapshotPolicy::All,
        ..cfg.solver.clone()
    };
    let direct = solver::integrate(&sp, &a, None, &tg, &opts)?;
    let (picard, history) = solver::picard_iterate(&sp, &a, None, &tg, &cfg.picard, &opts)?;
    let rel: Vec<(f64, f64)> = direct
        .records
        .iter()
        .zip(direct.snapshots.iter().zip(&picard.snapshots))
        .map(|(r, (d, p))| (r.t, relative_l2(p, d)))
        .collect();
    let max_rel = rel.iter().map(|r| r.1).fold(0.0, f64::max);

    let heat_opts = SolverOptions {
        nonlinear: false,
        snapshots: SnapshotPolicy::NormsOnly,
        ..cfg.solver.clone()
    };
    let heat = solver::integrate(&sp, &a, None, &tg, &heat_opts)?;
    let w = cfg.grid.cell_volume() / cfg.grid.len() as f64;
    let closed = match (&spec, cfg.grid.dim, cfg.scaling.lambda == 1.0) {
        (DataSpec::GaussianVortex { amplitude, width }, 2, true) => Some((*amplitude, *width)),
        _ => None,
    };
    let a_hat = a.components().to_spectral(&sp).into_data();
    let mut samples = Vec::new();
    let mut heat_max = 0.0f64;
    for (t, v) in heat.l2_series() {
        let e = sp.heat_factor(t);
        let exact = (a_hat
            .iter()
            .flat_map(|c| c.iter().zip(&e).map(|(z, f)| z.norm_sqr() * f * f))
            .sum::<f64>()
            * w)
            .sqrt();
        let closed_form = closed.map(|(eps, wd)| std::f64::consts::PI.sqrt() * eps * wd * wd / (wd * wd + 4.0 * t));
        for reference in std::iter::once(exact).chain(closed_form) {
            if reference > 0.0 {
                heat_max = heat_max.max((v - reference).abs() / reference);
            } else if v != 0.0 {
                heat_max = f64::INFINITY;
            }
        }
        samples.push(HeatSample {
            t,
            solver: v,
            exact,
            closed_form,
        });
    }
    Ok(OracleReport {
        picard_iterations: history.len(),
        picard_history: history,
        relative_l2: rel,
        max_relative_l2: max_rel,
        heat: samples,
        heat_max_relative: heat_max,
    })
}

pub const DECAY_CSV_HEADER: &str = "t,l2,weighted_l2";

fn decay_csv(dim: usize, series: &[(f64, f64)]) -> String {
    let w = (dim as f64 + 2.0) / 4.0;
    let mut s = String::from(DECAY_CSV_HEADER);
    s.push('\n');
    for &(t, v) in series {
        s.push_str(&format!("{t:e},{v:e},{:e}\n", t.powf(w) * v));
    }
    s
}

/// Headline numbers of a run; the shipped schema describes this shape.
pub fn summary(report: &RunReport) -> serde_json::Value {
    use serde_json::json;
    let cfg = &report.config;
    let diag = &report.diagnostics;
    json!({
        "format": "nsforce-summary",
        "version": 1,
        "name": cfg.name,
        "grid": {
            "dim": cfg.grid.dim,
            "points_per_axis": cfg.grid.points_per_axis,
            "box_length": cfg.grid.box_length,
            "validity_time": diag.validity_time,
        },
        "data": {
            "kind": report.data.name(),
            "amplitude": report.data.amplitude(),
            "lambda": report.lambda,
            "ln_norm": report.functionals.norms.ln,
            "l2_norm": report.functionals.norms.l2,
        },
        "functionals": {
            "j": report.functionals.j,
            "k": report.functionals.k,
            "l": report.functionals.l,
        },
        "smallness": report.smallness.as_ref().map(|s| json!({
            "all_pass": s.all_pass(),
            "failing": s.conditions.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect::<Vec<_>>(),
        })),
        "radius": report.radius.as_ref().map(|r| json!({
            "value": r.radius,
            "automatic": r.automatic,
            "binding": r.binding,
        })),
        "synthesis": report.synthesis.as_ref().map(|s| json!({
            "converged": s.converged,
            "iterations": s.iterations,
            "max_ratio": s.ratios.iter().copied().fold(0.0, f64::max),
            "consistency": s.consistency,
            "beta": s.beta,
        })),
        "diagnostics": {
            "decay_exponent": diag.decay.done().map(|d| d.exponent),
            "ms_deviation": diag.ms.done().map(|m| m.deviation),
            "residual_decade_ratio": diag.profile_residual.done().and_then(|r| r.decade_ratio()),
            "lemma_heat2_max_ratio": diag.lemma_heat2.done().map(|h| h.max_ratio),
            "wiegner_c_emp": diag.wiegner.done().map(|w| w.c_emp),
            "dissipation_final_ratio": diag.dissipation.done().and_then(|d| d.final_ratio),
            "dissipation_pass": diag.dissipation.done().map(|d| d.pass),
        },
    })
}

/// Writes the CSV series and `summary.json` from `report.json` in `dir`.
/// Re-exporting the same report gives byte-identical files.
pub fn export_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let report_path = dir.join("report.json");
    let text = fs::read_to_string(&report_path).map_err(|_| Error::MissingArtifact(report_path.display().to_string()))?;
    let report: RunReport = serde_json::from_str(&text)?;
    let n = report.config.grid.dim;
    let mut out = Vec::new();
    let p = dir.join("decay.csv");
    fs::write(&p, decay_csv(n, &report.l2_series))?;
    out.push(p);
    if let Some(u) = &report.unforced_l2_series {
        let p = dir.join("decay_unforced.csv");
        fs::write(&p, decay_csv(n, u))?;
        out.push(p);
    }
    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary(&report))? + "\n")?;
    out.push(p);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
[grid]
dim = 2
points_per_axis = 32
box_length = 16.0
[data]
kind = "gaussian_vortex"
amplitude = 0.5
width = 2.0
[time]
spacing = "uniform"
t_end = 1.0
steps = 4
"#;

    #[test]
    fn config_round_trips() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(cfg.synthesis.enabled);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load_with_overrides(
            MINIMAL,
            &["data.amplitude=0.25".into(), "synthesis.enabled=false".into(), "name=other".into()],
        )
        .unwrap();
        assert_eq!(cfg.data.amplitude(), 0.25);
        assert!(!cfg.synthesis.enabled);
        assert_eq!(cfg.name, "other");
        assert!(load_with_overrides(MINIMAL, &["grid.points_per_axis=31".into()]).is_err());
        assert!(load_with_overrides(MINIMAL, &["nonsense".into()]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn csv_header_is_fixed() {
        let s = decay_csv(2, &[(1.0, 0.5)]);
        assert_eq!(s.lines().next(), Some(DECAY_CSV_HEADER));
        assert_eq!(s.lines().nth(1), Some("1e0,5e-1,5e-1"));
    }
}
