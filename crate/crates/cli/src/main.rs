//! `pnsaf` — filter-bank design and echo-cancellation experiments from the
//! command line.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pnsaf::filterbank::{bank_quality_report, design_bank};
use pnsaf::harness::{
    self, export_csv, rank, run_ensemble_with, sweep_with, EnsembleResult, ExperimentSpec, RunOptions, SweepParameter,
};

use config::ConfigDocument;

/// Level used for the convergence column of the summary table.
const SUMMARY_LEVEL_DB: f64 = -20.0;
const EXIT_DIVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "pnsaf", version, about = "Proportionate subband adaptive filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Design a cosine-modulated analysis bank and report its quality.
    Design(DesignArgs),
    /// Run one experiment ensemble and export its curves.
    Run(RunArgs),
    /// Run one ensemble per value of a parameter.
    Sweep(SweepArgs),
    /// List the bundled experiment configs, or print one.
    Configs {
        /// Name of a bundled config to print.
        name: Option<String>,
    },
}

#[derive(Debug, Args)]
struct DesignArgs {
    /// Number of subbands N.
    #[arg(long, short = 'n')]
    subbands: usize,
    /// Prototype length L (default 8N).
    #[arg(long, short = 'l')]
    length: Option<usize>,
    /// Target stopband attenuation in dB.
    #[arg(long, default_value_t = 60.0)]
    attenuation: f64,
    /// FFT size of the quality measurement (power of two, at least 8L).
    #[arg(long)]
    fft_size: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, short = 'o', env = "PNSAF_OUT_DIR", default_value = "pnsaf-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Config file, or the name of a bundled config (see `pnsaf configs`).
    #[arg(long, short = 'c')]
    config: String,
    /// Override a config key, e.g. `ensemble_size=5` or `algorithms.0.step_control.mu=0.5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed; trial t uses seed + t.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the ensemble (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Parameter to sweep: lambda, subbands, mu or snr_db.
    #[arg(long)]
    param: SweepParameter,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<f64>,
}

enum Outcome {
    Done,
    Diverged,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Design(args) => design(args).map(|()| Outcome::Done),
        Command::Run(args) => run(args),
        Command::Sweep(args) => sweep(args),
        Command::Configs { name } => configs(name.as_deref()).map(|()| Outcome::Done),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(EXIT_DIVERGED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn design(args: DesignArgs) -> Result<()> {
    let n = args.subbands;
    let length = args.length.unwrap_or(8 * n);
    let bank = design_bank(n, length, args.attenuation)?;
    let taps = bank.prototype().taps();
    let fft_size = args
        .fft_size
        .unwrap_or_else(|| (8 * taps.len()).next_power_of_two().max(4096));
    let quality = bank_quality_report(&bank, fft_size)?;

    let mut csv = String::from("index,coefficient\n");
    for (i, t) in taps.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}", harness::format_sci(*t));
    }
    let report = format!(
        "num_subbands = {n}\nprototype_length = {}\ntarget_attenuation_db = {}\nfft_size = {fft_size}\n{quality}\n",
        taps.len(),
        args.attenuation
    );
    let stem = format!("prototype_n{n}_l{}", taps.len());
    write_all(
        &args.out.out,
        &[
            (format!("{stem}.csv"), csv),
            (format!("{stem}_quality.txt"), report.clone()),
        ],
    )?;
    print!("{report}");
    log::info!("wrote {}/{stem}.csv", args.out.out.display());
    Ok(())
}

fn load_experiment(args: &ExperimentArgs) -> Result<ExperimentSpec> {
    let mut doc = ConfigDocument::load(&args.config)?;
    for o in &args.overrides {
        doc.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        doc.set_seed(seed)?;
    }
    for notice in doc.notices() {
        log::info!("{}: {notice}", doc.source);
    }
    let spec = doc.to_spec()?;
    if spec.effective_run_length() != spec.run_length {
        log::info!(
            "run_length {} truncated to {} (multiple of the block grid {})",
            spec.run_length,
            spec.effective_run_length(),
            spec.block_grid()
        );
    }
    if let (Some(asked), Some(used)) = (spec.path_flip_sample, spec.aligned_flip_sample()) {
        if asked != used {
            log::info!("path flip moved from sample {asked} to block boundary {used}");
        }
    }
    Ok(spec)
}

fn options(args: &ExperimentArgs) -> Result<RunOptions> {
    if args.threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    Ok(RunOptions { threads: args.threads })
}

fn run(args: RunArgs) -> Result<Outcome> {
    let exp = &args.experiment;
    let spec = load_experiment(exp)?;
    let opts = options(exp)?;
    log::info!(
        "running {} algorithm(s) × {} trial(s) × {} samples",
        spec.algorithms.len(),
        spec.ensemble_size,
        spec.effective_run_length()
    );
    let result = run_ensemble_with(&spec, opts)?;
    let files = export_csv(&result, &exp.out.out)?;
    print!("{}", summary(&result));
    log::info!("wrote {} file(s) to {}", files.len(), exp.out.out.display());
    Ok(divergence_outcome(&result))
}

fn sweep(args: SweepArgs) -> Result<Outcome> {
    let exp = &args.experiment;
    let spec = load_experiment(exp)?;
    let opts = options(exp)?;
    let key = args.param.key();
    let dirs: Vec<PathBuf> = args
        .values
        .iter()
        .map(|v| exp.out.out.join(format!("{key}-{v}")))
        .collect();
    for d in &dirs {
        if d.exists() {
            bail!("sweep output {} already exists", d.display());
        }
    }
    let points = sweep_with(&spec, args.param, &args.values, opts)?;

    let mut written: Vec<&Path> = Vec::new();
    for (point, dir) in points.iter().zip(&dirs) {
        if let Err(e) = export_csv(&point.result, dir) {
            for d in written {
                let _ = std::fs::remove_dir_all(d);
            }
            return Err(e.into());
        }
        written.push(dir);
    }
    let mut outcome = Outcome::Done;
    for (point, dir) in points.iter().zip(&dirs) {
        println!("== {key} = {} ({})", point.value, dir.display());
        print!("{}", summary(&point.result));
        if let Outcome::Diverged = divergence_outcome(&point.result) {
            outcome = Outcome::Diverged;
        }
    }
    Ok(outcome)
}

fn configs(name: Option<&str>) -> Result<()> {
    match name {
        None => {
            for (n, text) in config::BUNDLED {
                let title = text
                    .lines()
                    .next()
                    .and_then(|l| l.strip_prefix('#'))
                    .map_or("", str::trim);
                println!("{n:<16} {title}");
            }
        }
        Some(n) => match config::bundled(n) {
            Some(text) => print!("{text}"),
            None => bail!("no bundled config `{n}` (bundled: {})", config::bundled_names()),
        },
    }
    Ok(())
}

fn summary(result: &EnsembleResult) -> String {
    let mut out = format!(
        "{:<24} {:>3} {:>14} {:>18} {:>22}\n",
        "algorithm",
        "N",
        "steady NMSD",
        format!("samples to {SUMMARY_LEVEL_DB} dB"),
        "step range"
    );
    for (row, alg) in rank(result, SUMMARY_LEVEL_DB).iter().zip(&result.algorithms) {
        let t = row
            .time_to_level
            .map_or_else(|| "never".to_string(), |c| c.sample.to_string());
        let _ = writeln!(
            out,
            "{:<24} {:>3} {:>11.2} dB {:>18} {:>10.4} – {:.4}",
            row.name, alg.num_subbands, row.steady_state_db, t, alg.step_range.0, alg.step_range.1
        );
    }
    out
}

fn divergence_outcome(result: &EnsembleResult) -> Outcome {
    let mut diverged = false;
    for a in &result.algorithms {
        for (trial, iteration) in &a.diverged {
            log::error!("{}: trial {trial} diverged at iteration {iteration}", a.name);
            diverged = true;
        }
    }
    if diverged {
        Outcome::Diverged
    } else {
        Outcome::Done
    }
}

/// Writes every file under a temporary name first so a failure leaves none behind.
fn write_all(dir: &Path, files: &[(String, String)]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut staged = Vec::new();
    for (name, text) in files {
        let tmp = dir.join(format!("{name}.partial"));
        if let Err(e) = std::fs::write(&tmp, text) {
            for t in &staged {
                let _ = std::fs::remove_file(t);
            }
            return Err(e).with_context(|| format!("cannot write {}", tmp.display()));
        }
        staged.push(tmp);
    }
    for ((name, _), tmp) in files.iter().zip(&staged) {
        let path = dir.join(name);
        std::fs::rename(tmp, &path).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}
