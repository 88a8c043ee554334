//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::calibration::{
    find_info, parse_configs, run_studies, study_information, study_truth, write_outputs, StudyConfig,
};
use crate::error::{HwnError, Result};
use crate::estimator::{fit, FitOptions};
use crate::fisher::InfoMatrices;
use crate::model::{sample, HwnParams, Sample};
use crate::par::{with_threads, Execution};
use crate::profile::location_from_nu;
use crate::rng::SimRng;
use crate::spd::{matrix_from_rows, Shell, SpdMatrix};

#[derive(Debug, Parser)]
#[command(
    name = "hwn",
    version,
    about = "Hyperbolic wrapped normal estimation and calibration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a sample and write it as CSV.
    Sample(SampleArgs),
    /// Fit the profile MLE to a sample CSV and print the result as JSON.
    Fit(FitArgs),
    /// Estimate the Fisher information at a study truth and print it as JSON.
    Fisher(FisherArgs),
    /// Run a calibration study from a JSON config.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    d: usize,
    /// Location as `Log_o(mu)`, comma separated (default: the origin).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    nu: Option<Vec<f64>>,
    /// Diagonal covariance, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "sigma")]
    sigma_diag: Option<Vec<f64>>,
    /// Full covariance in row-major order, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    sigma: Option<Vec<f64>>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    lambda_minus: Option<f64>,
    #[arg(long)]
    lambda_plus: Option<f64>,
    #[arg(long, default_value_t = 1)]
    n_starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FisherArgs {
    /// Dimension, using the default study design.
    #[arg(long, required_unless_present = "config")]
    d: Option<usize>,
    /// Take the truth and draw count from a study config instead.
    #[arg(long, conflicts_with = "d")]
    config: Option<PathBuf>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Information JSON to reuse when it matches the study truth; written if absent.
    #[arg(long)]
    fisher_cache: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Overrides `threads` in the config.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `base_seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

/// Runs the CLI on `args` (including the program name) with the process's
/// standard streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn emit(text: &str, path: Option<&PathBuf>, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Sample(a) => cmd_sample(a, out),
        Command::Fit(a) => cmd_fit(a, out),
        Command::Fisher(a) => cmd_fisher(a, out, err),
        Command::Calibrate(a) => cmd_calibrate(a, err),
    }
}

fn cmd_sample(a: SampleArgs, out: &mut dyn Write) -> Result<()> {
    let d = a.d;
    if d < 1 {
        return Err(HwnError::arg("--d must be at least 1"));
    }
    let nu = a.nu.unwrap_or_else(|| vec![0.0; d]);
    if nu.len() != d {
        return Err(HwnError::arg(format!("--nu has {} entries, expected {d}", nu.len())));
    }
    let sigma = match (a.sigma_diag, a.sigma) {
        (Some(diag), None) => {
            if diag.len() != d {
                return Err(HwnError::arg(format!(
                    "--sigma-diag has {} entries, expected {d}",
                    diag.len()
                )));
            }
            SpdMatrix::from_diagonal(&diag).map_err(|e| HwnError::arg(format!("--sigma-diag: {e}")))?
        }
        (None, Some(full)) => {
            if full.len() != d * d {
                return Err(HwnError::arg(format!(
                    "--sigma has {} entries, expected {}",
                    full.len(),
                    d * d
                )));
            }
            let rows: Vec<Vec<f64>> = full.chunks(d).map(|c| c.to_vec()).collect();
            SpdMatrix::new(matrix_from_rows(&rows)?).map_err(|e| HwnError::arg(format!("--sigma: {e}")))?
        }
        _ => SpdMatrix::identity(d),
    };
    if a.n < 1 {
        return Err(HwnError::arg("--n must be at least 1"));
    }
    let params = HwnParams::new(location_from_nu(&nu), sigma)?;
    let mut rng = SimRng::seed_from_u64(a.seed);
    let s = sample(&params, a.n, &mut rng)?;
    match a.out {
        Some(p) => s.save_csv(p),
        None => s.write_csv(out),
    }
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write) -> Result<()> {
    let data = Sample::load_csv(&a.input)?;
    let default = Shell::default();
    let shell = Shell::new(
        a.lambda_minus.unwrap_or(default.lambda_minus),
        a.lambda_plus.unwrap_or(default.lambda_plus),
    )?;
    let opts = FitOptions {
        shell,
        n_starts: a.n_starts,
        seed: a.seed,
        execution: Execution::from_threads(a.threads),
        ..FitOptions::default()
    };
    let result = with_threads(a.threads, || fit(&data, &opts))?;
    let mut text = result.to_json()?;
    text.push('\n');
    emit(&text, a.out.as_ref(), out)
}

fn read_config_file(path: &PathBuf) -> Result<Vec<StudyConfig>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| HwnError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_configs(&text)
}

fn cmd_fisher(a: FisherArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut config = match (&a.config, a.d) {
        (Some(p), _) => read_config_file(p)?.remove(0),
        (None, Some(d)) => StudyConfig::new(d, 100, 1, 0),
        (None, None) => return Err(HwnError::arg("one of --d or --config is required")),
    };
    if let Some(draws) = a.draws {
        config.fisher_draws = draws;
    }
    if let Some(seed) = a.seed {
        config.base_seed = seed;
    }
    config.threads = a.threads;
    config.validate()?;
    let (_, chart) = study_truth(&config)?;
    let info = with_threads(config.threads, || study_information(&config, &chart))?;
    let _ = writeln!(err, "target tr(I_eff^-1) = {:.6}", info.target()?);
    let mut text = info.to_json()?;
    text.push('\n');
    emit(&text, a.out.as_ref(), out)
}

fn cmd_calibrate(a: CalibrateArgs, err: &mut dyn Write) -> Result<()> {
    let mut configs = read_config_file(&a.config)?;
    for c in &mut configs {
        if let Some(t) = a.threads {
            c.threads = t;
        }
        if let Some(s) = a.seed {
            c.base_seed = s;
        }
    }
    let mut cache = Vec::new();
    if let Some(p) = &a.fisher_cache {
        if p.exists() {
            let text = std::fs::read_to_string(p)?;
            cache.push(InfoMatrices::from_json(&text)?);
        }
    }
    let studies = run_studies(&configs, &mut cache)?;
    write_outputs(&studies, &a.out_dir)?;
    if let Some(p) = &a.fisher_cache {
        if !p.exists() {
            let (_, chart) = study_truth(&configs[0])?;
            if let Some(info) = find_info(&cache, &chart, configs[0].fisher_draws) {
                std::fs::write(p, info.to_json()?)?;
            }
        }
    }
    for s in &studies {
        let r = &s.row;
        let _ = writeln!(
            err,
            "d={} n={} n_risk={:.4} target={:.4} ratio={:.4} loc_cov={:.3} full_cov={:.3} failures={}",
            r.d, r.n, r.n_risk_mean, r.target, r.ratio, r.loc_coverage, r.full_coverage, r.failures
        );
    }
    Ok(())
}
