use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nsforce::calibration::Calibration;
use nsforce::experiment::{self, ExperimentConfig, RunManifest};
use nsforce::sweep::{self, CalibrationSetup};

/// Force synthesis and decay diagnostics for small Navier-Stokes flows in a
/// periodic box. Set NSFORCE_THREADS to bound the worker count.
#[derive(Parser)]
#[command(name = "nsforce", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random data.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted config key and TOML value, e.g. `data.amplitude=0.5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solver only, no force.
    Simulate(RunArgs),
    /// Full outer loop: smallness, radius, synthesis and diagnostics.
    Synthesize(RunArgs),
    /// Verify a stored run and re-export its CSV and JSON reports.
    Diagnose {
        /// Run directory containing manifest.json.
        #[arg(long)]
        run: PathBuf,
    },
    /// Runs over a grid of config values, or measures the calibration constants.
    Sweep {
        /// Experiment configuration (TOML); not needed with --calibrate.
        #[arg(long, required_unless_present = "calibrate")]
        config: Option<PathBuf>,
        /// Root directory of the runs, or the calibration file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// `KEY=v1,v2,...`; several flags span their product.
        #[arg(long, value_name = "KEY=VALUES")]
        vary: Vec<String>,
        /// Measure the calibration constants instead and write them to `--out`.
        #[arg(long, conflicts_with = "vary")]
        calibrate: bool,
        /// Dimension to calibrate.
        #[arg(long, default_value_t = 2, requires = "calibrate")]
        dim: usize,
    },
    /// Picard against the integrator and the heat solver against the exact multiplier.
    Oracle {
        #[command(flatten)]
        run: RunArgs,
        /// Tolerance on the relative L2 differences.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

fn load(args: &RunArgs, extra: &[String]) -> Result<(ExperimentConfig, PathBuf)> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = experiment::load_with_overrides(&text, &overrides)
        .with_context(|| format!("loading {}", args.config.display()))?;
    let base = args.config.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((cfg, base))
}

fn out_dir(args: &RunArgs, cfg: &ExperimentConfig) -> Result<PathBuf> {
    args.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory; pass --out or set output_dir")
}

fn run(args: &RunArgs, synthesis: bool) -> Result<()> {
    let flag = format!("synthesis.enabled={synthesis}");
    let (cfg, base) = load(args, &[flag])?;
    let dir = out_dir(args, &cfg)?;
    let manifest = experiment::run_experiment(&cfg, Some(&dir), &base)?;
    print_summary(&dir)?;
    eprintln!(
        "{} artifacts in {} ({:.1} s)",
        manifest.artifacts.len(),
        dir.display(),
        manifest.wall_clock_seconds
    );
    Ok(())
}

fn print_summary(dir: &Path) -> Result<()> {
    let text = fs::read_to_string(dir.join("summary.json"))?;
    println!("{text}");
    Ok(())
}

fn diagnose(dir: &Path) -> Result<()> {
    let manifest = RunManifest::load(dir)?;
    manifest.verify(dir).context("stored run does not match its manifest")?;
    experiment::export_report(dir)?;
    print_summary(dir)
}

fn expand(vary: &[String]) -> Result<Vec<Vec<String>>> {
    let mut grid: Vec<Vec<String>> = vec![Vec::new()];
    for v in vary {
        let (key, values) = v.split_once('=').with_context(|| format!("'{v}' is not KEY=VALUES"))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            bail!("no values for {key}");
        }
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |val| {
                    let mut p = prefix.clone();
                    p.push(format!("{}={val}", key.trim()));
                    p
                })
            })
            .collect();
    }
    Ok(grid)
}

fn sweep_runs(args: &RunArgs, vary: &[String]) -> Result<()> {
    let grid = expand(vary)?;
    let (cfg0, _) = load(args, &[])?;
    let root = out_dir(args, &cfg0)?;
    fs::create_dir_all(&root)?;
    let threads = sweep::thread_count();
    let jobs: Vec<(usize, Vec<String>)> = grid.into_iter().enumerate().collect();
    let results = sweep::parallel_map(&jobs, threads, |(i, extra)| -> Result<PathBuf> {
        let (cfg, base) = load(args, extra)?;
        let dir = root.join(format!("run_{i:03}"));
        experiment::run_experiment(&cfg, Some(&dir), &base)?;
        Ok(dir)
    });
    let mut index = Vec::new();
    let mut failures = 0;
    for ((i, extra), r) in jobs.iter().zip(results) {
        let entry = match r {
            Ok(dir) => json!({"run": i, "overrides": extra, "dir": dir.file_name().map(|d| d.to_string_lossy().to_string()), "status": "ok"}),
            Err(e) => {
                failures += 1;
                eprintln!("run {i} {extra:?}: {e:#}");
                json!({"run": i, "overrides": extra, "status": "failed", "error": format!("{e:#}")})
            }
        };
        index.push(entry);
    }
    fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&index)? + "\n")?;
    println!("{} runs, {failures} failed; index at {}", index.len(), root.join("sweep.json").display());
    Ok(())
}

fn calibrate(dim: usize, out: Option<&Path>) -> Result<()> {
    let out = out.context("--calibrate needs --out FILE")?;
    let setup = CalibrationSetup::default_for(dim)?;
    let record = sweep::calibrate(&setup, sweep::thread_count())?;
    let mut cal = if out.exists() {
        Calibration::load(out)?
    } else {
        Calibration::shipped()
    };
    cal.version = cal.version.max(1);
    cal.set(dim, record.constants);
    fs::write(out, cal.to_toml())?;
    let record_path = out.with_extension(format!("dim{dim}.json"));
    fs::write(&record_path, serde_json::to_string_pretty(&record)? + "\n")?;
    println!("{}", toml::to_string_pretty(&record.constants)?);
    eprintln!("wrote {} and {}", out.display(), record_path.display());
    Ok(())
}

fn oracle(args: &RunArgs, tol: f64) -> Result<()> {
    let (cfg, base) = load(args, &[])?;
    let report = experiment::oracle_check(&cfg, &base)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(dir) = args.out.clone().or(cfg.output_dir.clone()) {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("oracle.json"), &text)?;
    }
    let pass = |v: f64| if v <= tol { "pass" } else { "FAIL" };
    println!(
        "picard vs integrator: max relative L2 {:.3e} after {} iterations [{}]",
        report.max_relative_l2,
        report.picard_iterations,
        pass(report.max_relative_l2)
    );
    println!(
        "heat solver vs exact: max relative {:.3e} [{}]",
        report.heat_max_relative,
        pass(report.heat_max_relative)
    );
    if report.max_relative_l2 > tol || report.heat_max_relative > tol {
        bail!("oracle mismatch above {tol:e}");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(a) => run(a, false),
        Command::Synthesize(a) => run(a, true),
        Command::Diagnose { run } => diagnose(run),
        Command::Sweep {
            calibrate: true,
            dim,
            out,
            ..
        } => calibrate(*dim, out.as_deref()),
        Command::Sweep {
            config,
            out,
            seed,
            overrides,
            vary,
            ..
        } => {
            let args = RunArgs {
                config: config.clone().context("sweep needs --config")?,
                out: out.clone(),
                seed: *seed,
                overrides: overrides.clone(),
            };
            sweep_runs(&args, vary)
        }
        Command::Oracle { run, tol } => oracle(run, *tol),
    }
}
