//! Amplitude sweeps and the measurement of the empirical smallness constants.

use serde::{Deserialize, Serialize};

use crate::calibration::Constants;
use crate::data::{generate_data, DataSpec};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::norms::Exponent;
use crate::solver::{self, PicardConfig, SnapshotPolicy, SolverOptions, StepRule};
use crate::spectral::Spectral;
use crate::synthesis::{self, ForceProfile, ProfileShape, SynthesisConfig};
use crate::timegrid::TimeGrid;

/// Differences below this fraction of the first one are treated as converged
/// noise when computing contraction ratios.
const RATIO_FLOOR: f64 = 1e-8;

/// Largest successive-difference ratio before the differences reach the
/// noise floor.
pub fn contraction_ratio(history: &[f64]) -> f64 {
    let Some(&first) = history.first() else {
        return 0.0;
    };
    history
        .windows(2)
        .filter(|w| w[1] > RATIO_FLOOR * first)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { f64::INFINITY })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionProbe {
    pub amplitude: f64,
    /// `‖a‖_n` of the generated data.
    pub ln_norm: f64,
    pub history: Vec<f64>,
    pub ratio: f64,
    pub converged: bool,
}

impl ContractionProbe {
    /// Converged with every ratio at most 1/2.
    pub fn contracts(&self) -> bool {
        self.converged && self.ratio <= 0.5
    }
}

/// Runs Picard at one amplitude and records the difference history; a
/// smallness violation is an outcome here, not an error.
pub fn probe_contraction(
    sp: &Spectral,
    spec: &DataSpec,
    timegrid: &TimeGrid,
    cfg: &PicardConfig,
    opts: &SolverOptions,
) -> Result<ContractionProbe> {
    let a = generate_data(sp, spec)?;
    let ln_norm = synthesis::data_norms(sp, &a, synthesis::default_quadrature(sp.grid().dim))?.ln;
    let opts = SolverOptions {
        snapshots: SnapshotPolicy::NormsOnly,
        ..opts.clone()
    };
    let (history, converged) = match solver::picard_iterate(sp, &a, None, timegrid, cfg, &opts) {
        Ok((_, h)) => (h, true),
        Err(Error::SmallnessViolation { history, .. }) => (history, false),
        Err(e) => return Err(e),
    };
    Ok(ContractionProbe {
        amplitude: spec.amplitude(),
        ln_norm,
        ratio: if converged { contraction_ratio(&history) } else { f64::INFINITY },
        history,
        converged,
    })
}

/// Worker count from `NSFORCE_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("NSFORCE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on up to `threads` scoped workers, keeping order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("sweep worker panicked")).collect()
    })
}

/// Contraction probes over a list of amplitudes, run concurrently.
pub fn amplitude_sweep(
    sp: &Spectral,
    spec: &DataSpec,
    amplitudes: &[f64],
    timegrid: &TimeGrid,
    cfg: &PicardConfig,
    opts: &SolverOptions,
    threads: usize,
) -> Vec<Result<ContractionProbe>> {
    parallel_map(amplitudes, threads, |&amp| {
        probe_contraction(sp, &spec.with_amplitude(amp), timegrid, cfg, opts)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSetup {
    pub grid: GridSpec,
    /// Data whose Picard contraction defines the threshold.
    pub probe_data: DataSpec,
    pub probe_time: TimeGrid,
    pub picard: PicardConfig,
    pub probe_step: StepRule,
    /// First amplitude tried; doubled until contraction fails.
    pub start_amplitude: f64,
    pub bisections: usize,
    /// Families scaled to the threshold for the energy constant.
    pub families: Vec<DataSpec>,
    /// Fractions of the threshold `‖a‖_n` at which the energy ratio is taken.
    pub energy_fractions: Vec<f64>,
    pub energy_time: TimeGrid,
    /// Data scaled to the threshold for the outer-loop constant.
    pub synthesis_data: DataSpec,
    pub synthesis: SynthesisConfig,
    /// Force radius for the outer-loop constant; the profile must span four cells.
    pub synthesis_radius: f64,
    /// Kernel time for `c₁`, as a multiple of the squared spacing.
    pub kernel_time_cells: f64,
}

impl CalibrationSetup {
    pub fn default_for(dim: usize) -> Result<Self> {
        let (grid, width, probe_steps) = match dim {
            2 => (GridSpec::new(2, 128, 32.0)?, 1.5, 64),
            3 => (GridSpec::new(3, 64, 32.0)?, 2.0, 32),
            _ => return Err(Error::InvalidArgument(format!("no calibration setup for n = {dim}"))),
        };
        let t_valid = grid.validity_time();
        Ok(CalibrationSetup {
            probe_data: DataSpec::RandomSolenoidal {
                amplitude: 1.0,
                width,
                band: 1.0,
                seed: 3,
            },
            probe_time: TimeGrid::uniform(1.0, probe_steps)?,
            picard: PicardConfig::default(),
            probe_step: StepRule {
                fraction: 1.0,
                h_min: 1.0 / probe_steps as f64,
                h_max: 1.0,
                force_substeps: 1,
            },
            start_amplitude: 0.25,
            bisections: 6,
            families: vec![
                DataSpec::GaussianVortex { amplitude: 1.0, width },
                DataSpec::MomentFree {
                    amplitude: 1.0,
                    width,
                    order: 2,
                    anisotropy: 2.0,
                },
                DataSpec::RandomSolenoidal {
                    amplitude: 1.0,
                    width,
                    band: 1.0,
                    seed: 3,
                },
            ],
            energy_fractions: vec![1.0, 1.0 / 8.0, 1.0 / 64.0, 1.0 / 512.0, 1.0 / 4096.0],
            energy_time: TimeGrid::geometric(t_valid, 1e-3, 1.2)?,
            synthesis_data: DataSpec::MomentFree {
                amplitude: 1.0,
                width,
                order: 2,
                anisotropy: 2.0,
            },
            synthesis: SynthesisConfig {
                tol: 1e-6,
                max_iterations: 12,
                t_cut: None,
                horizon_tolerance: 5e-2,
            },
            kernel_time_cells: 64.0,
            synthesis_radius: if dim == 3 { 2.0 } else { 1.0 },
            grid,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatio {
    pub data: String,
    pub ln_norm: f64,
    pub energy_integral: f64,
    pub tail_bound: f64,
    pub scale: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub dim: usize,
    pub constants: Constants,
    pub threshold_amplitude: f64,
    pub probes: Vec<ContractionProbe>,
    pub energy: Vec<EnergyRatio>,
    /// Amplitude and largest outer-loop ratio of the synthesis defining `δ″`.
    pub synthesis_amplitude: f64,
    pub synthesis_ratio: f64,
    pub kernel_time: f64,
}

/// Rescales `spec` so that the generated data has `‖a‖_n = target`.
pub fn scale_to_ln(sp: &Spectral, spec: &DataSpec, target: f64) -> Result<DataSpec> {
    let unit = spec.with_amplitude(1.0);
    let a = generate_data(sp, &unit)?;
    let ln = synthesis::data_norms(sp, &a, synthesis::default_quadrature(sp.grid().dim))?.ln;
    if !(ln > 0.0) {
        return Err(Error::InvalidArgument(format!("{} data has zero L^n norm", spec.name())));
    }
    Ok(spec.with_amplitude(target / ln))
}

/// Measures `δ, δ′, δ″, γ, c₁` for one dimension.
///
/// * `δ`: largest `‖a‖_n` of the probe data whose Picard ratios stay ≤ 1/2,
///   located by doubling and bisection in amplitude.
/// * `δ′`: left side of (S′) at that data.
/// * `γ`: largest `∫_0^∞‖u‖₂² / (J^{4/(n+1)}‖a‖₂^{2(n−1)/(n+1)})` over the
///   families scaled to the listed fractions of `‖a‖_n = δ`.
/// * `δ″`: left side of (A6) at `synthesis_radius` for the synthesis data at the largest
///   amplitude (halving from `‖a‖_n = δ`) whose outer loop runs and contracts
///   by 1/2.
/// * `c₁`: `t^{1/2}‖F(t)‖₁` of the whole-space kernel estimate.
pub fn calibrate(setup: &CalibrationSetup, threads: usize) -> Result<CalibrationRecord> {
    let sp = Spectral::new(&setup.grid)?;
    let n = setup.grid.dim;
    let h = setup.grid.spacing();
    let kernel_time = setup.kernel_time_cells * h * h;
    let (_, cont) = diagnostics::kernel_norms(&setup.grid, kernel_time, &[Exponent::Finite(1.0)])?;
    let c1 = kernel_time.sqrt() * cont[0];
    log::info!("c1 = {c1:.6e}");
    let opts = SolverOptions {
        step: setup.probe_step.clone(),
        ..SolverOptions::default()
    };
    let probe = |amp: f64| {
        probe_contraction(&sp, &setup.probe_data.with_amplitude(amp), &setup.probe_time, &setup.picard, &opts)
    };

    let mut probes = Vec::new();
    let mut lo: Option<ContractionProbe> = None;
    let mut hi: Option<f64> = None;
    let mut amp = setup.start_amplitude;
    for _ in 0..16 {
        let p = probe(amp)?;
        log::info!("probe amplitude {amp:.4e}: ratio {:.3}, converged {}", p.ratio, p.converged);
        let ok = p.contracts();
        probes.push(p.clone());
        if ok {
            lo = Some(p);
            amp *= 2.0;
        } else {
            hi = Some(amp);
            if lo.is_some() {
                break;
            }
            amp /= 2.0;
        }
    }
    let (mut lo, mut hi) = match (lo, hi) {
        (Some(l), Some(h)) => (l, h),
        _ => return Err(Error::Resolution("contraction threshold not bracketed".into())),
    };
    for _ in 0..setup.bisections {
        let mid = (lo.amplitude * hi).sqrt();
        let p = probe(mid)?;
        log::info!("probe amplitude {mid:.4e}: ratio {:.3}, converged {}", p.ratio, p.converged);
        probes.push(p.clone());
        if p.contracts() {
            lo = p;
        } else {
            hi = mid;
        }
    }
    let delta = lo.ln_norm;
    let a_star = generate_data(&sp, &setup.probe_data.with_amplitude(lo.amplitude))?;
    let fun = synthesis::functionals(&sp, &a_star, 1.0, synthesis::default_quadrature(n))?;
    let nn = n as f64;
    let delta_prime =
        fun.norms.ln.powf(1.0 / nn) * (fun.j.powf(1.0 - 1.0 / nn) + fun.norms.l2.powf(1.0 - 1.0 / nn));

    let energy_opts = SolverOptions {
        snapshots: SnapshotPolicy::NormsOnly,
        ..SolverOptions::default()
    };
    let cases: Vec<(DataSpec, f64)> = setup
        .families
        .iter()
        .flat_map(|s| setup.energy_fractions.iter().map(move |&f| (s.clone(), f * delta)))
        .collect();
    let energy: Vec<Result<EnergyRatio>> = parallel_map(&cases, threads, |(spec, target)| {
        let spec = scale_to_ln(&sp, spec, *target)?;
        let a = generate_data(&sp, &spec)?;
        let tr = solver::integrate(&sp, &a, None, &setup.energy_time, &energy_opts)?;
        let f = synthesis::functionals(&sp, &a, 1.0, synthesis::default_quadrature(n))?;
        let (_, tail) = solver::energy_tail_bound(&tr);
        let scale = f.energy_scale(n);
        Ok(EnergyRatio {
            data: spec.name().to_string(),
            ln_norm: *target,
            energy_integral: tr.energy_integral(),
            tail_bound: tail,
            scale,
            ratio: (tr.energy_integral() + tail) / scale,
        })
    });
    let energy: Vec<EnergyRatio> = energy.into_iter().collect::<Result<_>>()?;
    let gamma = energy.iter().map(|e| e.ratio).fold(0.0, f64::max);

    let base = ForceProfile::normalize(&sp, ProfileShape::default_bump(n))?;
    let profile = base.with_radius(&sp, setup.synthesis_radius)?;
    let mut target = delta;
    let mut outcome = None;
    for _ in 0..8 {
        let spec = scale_to_ln(&sp, &setup.synthesis_data, target)?;
        let a = generate_data(&sp, &spec)?;
        let state = synthesis::synthesize(&sp, &a, &profile, &setup.energy_time, &energy_opts, &setup.synthesis);
        match state {
            Ok(s) => {
                let ratio = s.ratios().into_iter().fold(0.0, f64::max);
                log::info!("synthesis at |a|_n = {target:.4e}: ratios {:?}", s.ratios());
                if s.converged && ratio <= 0.5 {
                    outcome = Some((spec.amplitude(), ratio, a));
                    break;
                }
            }
            Err(e @ (Error::SynthesisDivergence { .. } | Error::Resolution(_) | Error::InsufficientHorizon { .. })) => {
                log::info!("synthesis at |a|_n = {target:.4e} failed: {e}");
            }
            Err(e) => return Err(e),
        }
        target /= 2.0;
    }
    let (synthesis_amplitude, synthesis_ratio, a_syn) =
        outcome.ok_or_else(|| Error::Resolution("no contracting synthesis below the threshold".into()))?;
    let cal_free = Constants {
        delta,
        delta_prime,
        delta_double_prime: f64::INFINITY,
        gamma,
        c1: 1.0,
    };
    let fun_syn = synthesis::functionals(&sp, &a_syn, gamma, synthesis::default_quadrature(n))?;
    let report = synthesis::check_smallness(&sp, &fun_syn, &profile, &cal_free)?;
    let delta_double_prime = report.get("A6").map(|c| c.left).unwrap_or(f64::NAN);


    Ok(CalibrationRecord {
        dim: n,
        constants: Constants {
            delta,
            delta_prime,
            delta_double_prime,
            gamma,
            c1,
        },
        threshold_amplitude: lo.amplitude,
        probes,
        energy,
        synthesis_amplitude,
        synthesis_ratio,
        kernel_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_ignores_the_noise_floor() {
        let h = [1.0, 0.3, 0.09, 0.027, 1e-9, 2e-9];
        assert!((contraction_ratio(&h) - 0.3).abs() < 1e-12);
        assert_eq!(contraction_ratio(&[]), 0.0);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<u32> = (0..17).collect();
        assert_eq!(parallel_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
