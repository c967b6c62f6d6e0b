//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the lines always reach the terminal.
//!
//! `cargo test -p nsforce-core --test acceptance -- 4 7` runs a subset.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nsforce::calibration::Calibration;
use nsforce::data::{generate_data, DataSpec};
use nsforce::diagnostics::{self, decay_slope, grad_heat_kernel_l2, kernel_norm_law, last_valid_decade};
use nsforce::error::Error;
use nsforce::experiment::{self, ExperimentConfig, RunReport};
use nsforce::norms::{Exponent, Quadrature};
use nsforce::rescale::lambda_rescale;
use nsforce::solver::{self, SnapshotPolicy, SolverOptions};
use nsforce::sweep::{self, CalibrationSetup};
use nsforce::synthesis::{self, BumpComponent, ForceProfile, ProfileShape};
use nsforce::timegrid::TimeGrid;
use nsforce::{FieldLike, GridSpec, ScalarField, Spectral, TensorField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

/// One measured quantity against its bound.
struct Check {
    label: String,
    value: f64,
    bound: String,
    pass: bool,
}

fn le(label: &str, value: f64, bound: f64) -> Check {
    Check {
        label: label.into(),
        value,
        bound: format!("<= {bound:.3e}"),
        pass: value <= bound,
    }
}

fn within(label: &str, value: f64, target: f64, tol: f64) -> Check {
    Check {
        label: label.into(),
        value,
        bound: format!("{target} ± {tol}"),
        pass: (value - target).abs() <= tol,
    }
}

fn holds(label: &str, ok: bool) -> Check {
    Check {
        label: label.into(),
        value: f64::from(u8::from(ok)),
        bound: "holds".into(),
        pass: ok,
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn max_diff<T: FieldLike + Clone>(a: &T, b: &T) -> Res<f64> {
    let mut d = a.components().clone();
    d.axpy(-1.0, b.components())?;
    Ok(d.max_abs())
}

fn rel_diff<T: FieldLike + Clone>(a: &T, b: &T) -> Res<f64> {
    Ok(max_diff(a, b)? / b.components().max_abs())
}

fn random_tensor(g: &GridSpec, seed: u64) -> Res<TensorField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.dim;
    let env = ScalarField::from_fn(g, |x| (-x.iter().map(|v| v * v).sum::<f64>() / 4.0).exp());
    let sp = Spectral::new(g)?;
    let env = env.values(&sp);
    let comps = (0..n * n)
        .map(|_| env.iter().map(|e| e * rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
        .collect();
    // Smooth the noise so the field is resolved.
    let raw = TensorField::from_physical(g, comps)?;
    Ok(sp.heat_propagate(&raw, 0.05)?)
}

fn c1_operator_identities() -> Res<Vec<Check>> {
    let g = GridSpec::new(2, 128, 32.0)?;
    let sp = Spectral::new(&g)?;
    let f = random_tensor(&g, 11)?;
    let u = sp.tensor_divergence(&f)?;
    let pu = sp.leray_project(&u)?;
    let ppu = sp.leray_project(&pu)?;
    let phi = ScalarField::from_fn(&g, |x| (-(x[0] - 0.5).powi(2) - 2.0 * x[1] * x[1]).exp() * (1.0 + x[0]));
    let grad = sp.gradient(&phi)?;
    let p_grad = sp.leray_project(&grad)?;
    let (s, t) = (0.3, 0.7);
    let st = sp.heat_propagate(&sp.heat_propagate(&u, s)?, t)?;
    let direct = sp.heat_propagate(&u, s + t)?;
    let f_t = sp.apply_f(&f, t)?;
    let f_st = sp.apply_f(&f, s + t)?;
    let composed = sp.heat_propagate(&f_t, s)?;
    let div_f = sp.divergence(&f_st)?.components().max_abs() / f_st.components().max_abs();
    Ok(vec![
        le("Leray idempotence", rel_diff(&ppu, &pu)?, 1e-12),
        le("Leray annihilates gradients", p_grad.components().max_abs() / grad.components().max_abs(), 1e-12),
        le("heat semigroup law", rel_diff(&st, &direct)?, 1e-12),
        le("e^{sΔ} F(t) = F(s+t)", rel_diff(&composed, &f_st)?, 1e-12),
        le("div F(t)f", div_f, 1e-12),
    ])
}

fn c2_kernel_norm_law() -> Res<Vec<Check>> {
    let g = GridSpec::new(2, 128, 32.0)?;
    let h = g.spacing();
    let t0 = (4.0 * h).powi(2);
    let t1 = g.validity_time();
    let times: Vec<f64> = (0..=4).map(|i| t0 * (t1 / t0).powf(i as f64 / 4.0)).collect();
    let mut out = Vec::new();
    for p in [1.0, 2.0] {
        let law = kernel_norm_law(&g, &times, Exponent::Finite(p))?;
        let rel = (law.exponent - law.expected).abs() / law.expected.abs();
        out.push(le(
            &format!("L{p} exponent {:.4} vs {:.2}, t in [{t0}, {t1}], rel dev", law.exponent, law.expected),
            rel,
            0.01,
        ));
    }
    Ok(out)
}

fn c3_heat_lemma() -> Res<Vec<Check>> {
    let mut out = vec![le(
        "‖∇E₁‖₂ (n=2) − 1/(4√π)",
        (grad_heat_kernel_l2(2) - 1.0 / (4.0 * std::f64::consts::PI.sqrt())).abs(),
        1e-6,
    )];
    let g = GridSpec::new(2, 256, 64.0)?;
    let sp = Spectral::new(&g)?;
    let times = TimeGrid::geometric(g.validity_time(), 1e-3, 1.2)?.nodes();
    let families = [
        DataSpec::GaussianVortex { amplitude: 1.0, width: 1.5 },
        DataSpec::MomentFree {
            amplitude: 1.0,
            width: 1.5,
            order: 2,
            anisotropy: 2.0,
        },
        DataSpec::RandomSolenoidal {
            amplitude: 1.0,
            width: 1.5,
            band: 1.0,
            seed: 5,
        },
    ];
    for spec in &families {
        let a = generate_data(&sp, spec)?;
        let r = diagnostics::lemma_heat2_check(&sp, &a, &times)?;
        out.push(Check {
            label: format!("{} bound at {} nodes, max left/right", spec.name(), r.times.len()),
            value: r.max_ratio,
            bound: "<= 1 at every node".into(),
            pass: r.pass && r.times.len() > 10,
        });
    }
    Ok(out)
}

fn oracle_config(data: DataSpec) -> ExperimentConfig {
    let text = r#"
name = "oracle"
[grid]
dim = 2
points_per_axis = 128
box_length = 32.0
[data]
kind = "gaussian_vortex"
[time]
spacing = "uniform"
t_end = 1.0
steps = 64
[synthesis]
enabled = false
"#;
    let mut cfg = ExperimentConfig::from_toml(text).expect("oracle config");
    cfg.data = data;
    cfg
}

fn c4_oracle_equivalence() -> Res<Vec<Check>> {
    let mut out = Vec::new();
    for data in [
        DataSpec::GaussianVortex { amplitude: 0.1, width: 1.5 },
        DataSpec::RandomSolenoidal {
            amplitude: 0.3,
            width: 1.5,
            band: 1.0,
            seed: 3,
        },
    ] {
        let name = data.name();
        let r = experiment::oracle_check(&oracle_config(data), &workspace_root())?;
        out.push(le(&format!("{name}: Picard vs integrator, max rel L2"), r.max_relative_l2, 1e-6));
    }
    Ok(out)
}

fn heat_slope(sp: &Spectral, spec: &DataSpec) -> Res<(f64, Vec<f64>, (f64, f64))> {
    let g = sp.grid();
    let tg = TimeGrid::geometric(g.validity_time(), 1e-3, 1.2)?;
    let opts = SolverOptions {
        nonlinear: false,
        snapshots: SnapshotPolicy::NormsOnly,
        ..SolverOptions::default()
    };
    let a = generate_data(sp, spec)?;
    let tr = solver::integrate(sp, &a, None, &tg, &opts)?;
    let window = last_valid_decade(g, &tr.times()).ok_or("no valid decade")?;
    let solver_fit = decay_slope("l2", &tr.l2_series(), window, g)?;
    Ok((solver_fit.exponent, tr.times(), window))
}

/// Fits the closed form at the solver's own nodes, so both fits see the same sampling.
fn analytic_slope(times: &[f64], window: (f64, f64), f: impl Fn(f64) -> f64, g: &GridSpec) -> Res<f64> {
    let pts: Vec<(f64, f64)> = times.iter().filter(|&&t| t > 0.0).map(|&t| (t, f(t))).collect();
    Ok(decay_slope("analytic", &pts, window, g)?.exponent)
}

fn c5_heat_decay() -> Res<Vec<Check>> {
    let g = GridSpec::new(2, 256, 64.0)?;
    let sp = Spectral::new(&g)?;
    let w = 1.0;
    let (generic, times, win) = heat_slope(&sp, &DataSpec::GaussianVortex { amplitude: 1.0, width: w })?;
    let generic_exact = analytic_slope(&times, win, |t| w * w / (w * w + 4.0 * t), &g)?;
    let (free, times2, win2) = heat_slope(
        &sp,
        &DataSpec::MomentFree {
            amplitude: 1.0,
            width: w,
            order: 1,
            anisotropy: 1.0,
        },
    )?;
    let free_exact = analytic_slope(&times2, win2, |t| (w * w / 4.0 + t).powf(-1.5), &g)?;
    // Periodic images perturb ‖u‖₂² at the window end by about e^{-L²/(8t)} = e^{-8}.
    let image_tol = 10.0 * (-(g.box_length * g.box_length) / (8.0 * win.1)).exp();
    Ok(vec![
        within(&format!("generic (vortex) solver slope over [{:.2}, {:.0}]", win.0, win.1), generic, -1.0, 0.03),
        within("generic analytic slope", generic_exact, -1.0, 0.03),
        within("moment-free (x₁e^{-q}) solver slope", free, -1.5, 0.05),
        within("moment-free analytic slope", free_exact, -1.5, 0.05),
        le("solver vs analytic slope, generic", (generic - generic_exact).abs(), image_tol),
        le("solver vs analytic slope, moment-free", (free - free_exact).abs(), image_tol),
    ])
}

fn c6_contraction() -> Res<Vec<Check>> {
    let setup = CalibrationSetup::default_for(2)?;
    let sp = Spectral::new(&setup.grid)?;
    let delta = Calibration::shipped().constants(2)?.delta;
    let opts = SolverOptions {
        step: setup.probe_step.clone(),
        ..SolverOptions::default()
    };
    let at = sweep::scale_to_ln(&sp, &setup.probe_data, delta)?;
    let p = sweep::probe_contraction(&sp, &at, &setup.probe_time, &setup.picard, &opts)?;
    let big = at.with_amplitude(100.0 * at.amplitude());
    let a_big = generate_data(&sp, &big)?;
    let ln_big = synthesis::data_norms(&sp, &a_big, synthesis::default_quadrature(2))?.ln;
    let q = sweep::probe_contraction(&sp, &big, &setup.probe_time, &setup.picard, &opts)?;
    let direct = solver::picard_iterate(&sp, &a_big, None, &setup.probe_time, &setup.picard, &opts);
    let flagged = matches!(direct, Err(Error::SmallnessViolation { .. }));
    Ok(vec![
        le(&format!("ratio at ‖a‖_n = δ = {delta:.3}"), p.ratio, 0.5),
        holds("converged at δ", p.converged),
        holds(&format!("(S) fails at 100×: ‖a‖_n = {ln_big:.1} > δ"), ln_big > delta),
        holds(&format!("Picard non-contraction at 100× (ratio {:.3})", q.ratio), !q.contracts()),
        holds("flagged as a smallness violation", flagged),
    ])
}

fn run_config(name: &str, overrides: &[String]) -> Res<RunReport> {
    let root = workspace_root();
    let text = std::fs::read_to_string(root.join("configs").join(name))?;
    let cfg = experiment::load_with_overrides(&text, overrides)?;
    let dir = tempfile::tempdir()?;
    experiment::run_experiment(&cfg, Some(dir.path()), &root.join("configs"))?;
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json"))?)?;
    Ok(report)
}

fn synthesis_checks(tag: &str, r: &RunReport) -> Res<Vec<Check>> {
    let s = r.synthesis.as_ref().ok_or("no synthesis")?;
    let tol = r.config.synthesis.config.tol;
    let max_ratio = s.ratios.iter().copied().fold(0.0, f64::max);
    let decreasing = s.deltas.windows(2).all(|w| w[1] < w[0]);
    Ok(vec![
        holds(&format!("{tag}: converged in {} ≤ 25 iterations", s.iterations), s.converged && s.iterations <= 25),
        le(&format!("{tag}: max outer ratio"), max_ratio, 0.9),
        holds(&format!("{tag}: ‖Δc‖ strictly decreasing"), decreasing),
        le(&format!("{tag}: fixed-point consistency"), s.consistency, 3.0 * tol),
    ])
}

struct SynthesisRuns {
    reference: RunReport,
    moment_free: RunReport,
}

fn c7_synthesis(runs: &SynthesisRuns) -> Res<Vec<Check>> {
    let mut out = synthesis_checks("reference (vortex)", &runs.reference)?;
    out.extend(synthesis_checks("moment-free", &runs.moment_free)?);
    Ok(out)
}

fn c8_ms(runs: &SynthesisRuns) -> Res<Vec<Check>> {
    let mut out = Vec::new();
    for (tag, r) in [("reference", &runs.reference), ("moment-free", &runs.moment_free)] {
        let ms = r.diagnostics.ms.done().ok_or("no MS report")?;
        let bound = 10.0 * r.config.synthesis.config.tol;
        out.push(le(&format!("{tag}: β deviation from scalar"), ms.deviation, bound));
        out.push(le(&format!("{tag}: diagonal β spread"), ms.diagonal_spread, bound));
    }
    Ok(out)
}

fn c9_dissipation(runs: &SynthesisRuns) -> Res<Vec<Check>> {
    let d = runs.moment_free.diagnostics.dissipation.done().ok_or("no dissipation report")?;
    Ok(vec![
        holds(
            &format!("forced t‖v‖₂ strictly decreasing on [{:.1}, {:.0}]", d.window.0, d.window.1),
            d.forced_decreasing,
        ),
        Check {
            label: "unforced t‖u‖₂ plateau (min/max over the decade)".into(),
            value: d.unforced_flatness,
            bound: format!(">= {}", diagnostics::PLATEAU_FLATNESS),
            pass: d.unforced_plateau,
        },
        le("forced/unforced L2 at the final node", d.final_ratio.unwrap_or(f64::NAN), 0.5),
    ])
}

fn c10_scaling() -> Res<Vec<Check>> {
    let g = GridSpec::new(2, 256, 64.0)?;
    let sp = Spectral::new(&g)?;
    let n = 2.0;
    let lambda = 2.0;
    let mut out = Vec::new();
    for spec in [
        DataSpec::GaussianVortex { amplitude: 0.2, width: 3.0 },
        DataSpec::RandomSolenoidal {
            amplitude: 0.2,
            width: 3.0,
            band: 0.5,
            seed: 9,
        },
    ] {
        let name = spec.name();
        let a = generate_data(&sp, &spec)?;
        let al = lambda_rescale(&sp, &a, lambda)?;
        // Co-scaled quadrature: the upsampled nodes of a_λ map onto those of a under x ↦ λx.
        let factor = 4;
        let fa = synthesis::functionals(&sp, &a, 1.0, Quadrature::upsampled(factor))?;
        let fl = synthesis::functionals(&sp, &al, 1.0, Quadrature::upsampled(factor * lambda as usize))?;
        let j_rel = (fl.j - lambda.powf((1.0 - 2.0 * n) / 2.0) * fa.j).abs() / fl.j;
        let k_rel = (fl.k - lambda.powf(-n) * fa.k).abs() / fl.k;
        out.push(le(&format!("{name}: J(a_λ) = λ^(1/2−n) J(a), rel"), j_rel, 1e-6));
        out.push(le(&format!("{name}: K(a_λ) = λ^(−n) K(a), rel"), k_rel, 1e-6));
        out.push(le(
            &format!("{name}: ‖a_λ‖_n = ‖a‖_n, rel"),
            (fl.norms.ln - fa.norms.ln).abs() / fa.norms.ln,
            1e-8,
        ));
        out.push(le(
            &format!("{name}: ‖a_λ‖₂ = λ^(1−n/2)‖a‖₂, rel"),
            (fl.norms.l2 - lambda.powf(1.0 - n / 2.0) * fa.norms.l2).abs() / fa.norms.l2,
            1e-8,
        ));
        let opts = SolverOptions {
            snapshots: SnapshotPolicy::NormsOnly,
            ..SolverOptions::default()
        };
        let (t_end, t_min, ratio) = (g.validity_time(), 1e-2, 1.2);
        let tr = solver::integrate(&sp, &a, None, &TimeGrid::geometric(t_end, t_min, ratio)?, &opts)?;
        let s = lambda * lambda;
        let trl = solver::integrate(&sp, &al, None, &TimeGrid::geometric(t_end / s, t_min / s, ratio)?, &opts)?;
        let ca = diagnostics::wiegner_check(&tr, fa.k, fa.norms.l2).c_emp;
        let cl = diagnostics::wiegner_check(&trl, fl.k, fl.norms.l2).c_emp;
        out.push(le(&format!("{name}: C_emp {ca:.4} vs {cl:.4} under λ, rel"), (ca - cl).abs() / ca, 0.05));
    }
    Ok(out)
}

fn c11_prescribed_profile() -> Res<Vec<Check>> {
    let root = workspace_root();
    let text = std::fs::read_to_string(root.join("configs/short_profile_2d.toml"))?;
    let cfg = experiment::load_with_overrides(&text, &[])?;
    let dir = tempfile::tempdir()?;
    experiment::run_experiment(&cfg, Some(dir.path()), &root.join("configs"))?;
    let r: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json"))?)?;
    let radius = r.radius.as_ref().ok_or("no radius")?;
    let s = r.synthesis.as_ref().ok_or("no synthesis")?;
    let small = r.smallness.as_ref().ok_or("no smallness report")?;

    let ProfileShape::Bumps(components) = cfg.profile.shape(2, &root.join("configs"))? else {
        return Err("expected a bump profile".into());
    };
    let sp = Spectral::new(&cfg.grid)?;
    let bump = |w: f64| BumpComponent {
        center: vec![0.5, 0.0],
        half_widths: vec![1.0, 1.0],
        weight: w,
        start: 0.0,
        end: 0.1,
    };
    let degenerate = ForceProfile::normalize(&sp, ProfileShape::Bumps(vec![bump(1.0), bump(-1.0)]));
    Ok(vec![
        holds(
            &format!(
                "automatic R = {}, binding {}, all smallness conditions hold",
                radius.radius,
                radius.binding.as_deref().unwrap_or("none")
            ),
            radius.automatic && small.all_pass(),
        ),
        holds(&format!("synthesis converged in {} iterations", s.iterations), s.converged),
        holds(
            &format!("Ψ active only on t in [0, 0.1] ({} components)", components.len()),
            components.iter().all(|b| b.start >= 0.0 && b.end <= 0.1),
        ),
        holds("∫∫Ψ = 0 rejected", matches!(degenerate, Err(Error::DegenerateProfile { .. }))),
    ])
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
}

const CRITERIA: [Criterion; 11] = [
    Criterion { id: 1, name: "operator identities", budget: Duration::from_secs(5) },
    Criterion { id: 2, name: "F-kernel norm law", budget: Duration::from_secs(30) },
    Criterion { id: 3, name: "moment-weighted heat bound", budget: Duration::from_secs(60) },
    Criterion { id: 4, name: "Picard/integrator equivalence", budget: Duration::from_secs(300) },
    Criterion { id: 5, name: "heat decay rates", budget: Duration::from_secs(300) },
    Criterion { id: 6, name: "Picard contraction at calibrated amplitude", budget: Duration::from_secs(600) },
    Criterion { id: 7, name: "synthesis convergence", budget: Duration::from_secs(3600) },
    Criterion { id: 8, name: "scalar β by construction", budget: Duration::from_secs(3600) },
    Criterion { id: 9, name: "rapid dissipation", budget: Duration::from_secs(3600) },
    Criterion { id: 10, name: "scale invariances", budget: Duration::from_secs(600) },
    Criterion { id: 11, name: "short prescribed profile", budget: Duration::from_secs(600) },
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut selected: Vec<usize> = Vec::new();
    for a in &args {
        match a.parse::<usize>() {
            Ok(i) => selected.push(i),
            // A name filter meant for other test targets.
            Err(_) if a != "acceptance" => return ExitCode::SUCCESS,
            Err(_) => {}
        }
    }
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);

    let mut runs: Option<Result<SynthesisRuns, String>> = None;
    let mut synthesis_time = Duration::ZERO;
    let mut failures = 0;
    for c in CRITERIA.iter().filter(|c| wanted(c.id)) {
        let start = Instant::now();
        let result = match c.id {
            1 => c1_operator_identities(),
            2 => c2_kernel_norm_law(),
            3 => c3_heat_lemma(),
            4 => c4_oracle_equivalence(),
            5 => c5_heat_decay(),
            6 => c6_contraction(),
            7..=9 => {
                if runs.is_none() {
                    let t = Instant::now();
                    runs = Some(
                        (|| -> Res<SynthesisRuns> {
                            Ok(SynthesisRuns {
                                reference: run_config("reference_2d.toml", &[])?,
                                moment_free: run_config("moment_free_2d.toml", &[])?,
                            })
                        })()
                        .map_err(|e| e.to_string()),
                    );
                    synthesis_time = t.elapsed();
                }
                match runs.as_ref().expect("runs computed") {
                    Err(e) => Err(e.clone().into()),
                    Ok(r) => match c.id {
                        7 => c7_synthesis(r),
                        8 => c8_ms(r),
                        _ => c9_dissipation(r),
                    },
                }
            }
            10 => c10_scaling(),
            _ => c11_prescribed_profile(),
        };
        // Criteria 7–9 share the synthesized runs; each is charged their cost.
        let elapsed = start.elapsed().max(if (7..=9).contains(&c.id) { synthesis_time } else { Duration::ZERO });
        let in_time = elapsed <= c.budget;
        let (pass, details) = match result {
            Ok(checks) => {
                let pass = checks.iter().all(|k| k.pass) && in_time;
                let lines: Vec<String> = checks
                    .iter()
                    .map(|k| {
                        format!(
                            "      {} {}: {:.4e} ({})",
                            if k.pass { "ok  " } else { "FAIL" },
                            k.label,
                            k.value,
                            k.bound
                        )
                    })
                    .collect();
                (pass, lines)
            }
            Err(e) => (false, vec![format!("      error: {e}")]),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {:>2} {} {} ({:.1} s of {} s)",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
        for l in details {
            println!("{l}");
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
