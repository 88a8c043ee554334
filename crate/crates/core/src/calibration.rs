//! Monte Carlo calibration of the profile MLE: scaled location risk against
//! the efficient-information target, Wald coverage, covariance calibration
//! and shell activity.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HwnError, Result};
use crate::estimator::{fit, FitOptions, FitResult};
use crate::fisher::{
    local_alpha, mc_fisher_information, wald_full_covered, wald_location_covered, Chart, InfoMatrices, MIN_DRAWS,
};
use crate::lorentz::{distance, raw, HyperPoint};
use crate::model::{sample, HwnParams, Sample};
use crate::par::{map_indexed, with_threads, Execution};
use crate::profile::tangent_scatter;
use crate::rng::{derive_seed, stream, SimRng};
use crate::spd::{make_test_covariance_with, random_rotation, Shell, Spectrum};

pub const CONFIG_SCHEMA: u32 = 1;

fn default_schema() -> u32 {
    CONFIG_SCHEMA
}
fn default_cond() -> f64 {
    10.0
}
fn default_scale() -> f64 {
    0.18
}
fn default_spectrum() -> Spectrum {
    Spectrum::LinearSd
}
fn default_rho() -> f64 {
    3.0
}
fn default_draws() -> usize {
    20_000
}
fn default_level() -> f64 {
    0.95
}
fn default_true() -> bool {
    true
}

/// One `(d, n)` cell of a calibration study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    pub d: usize,
    pub n: usize,
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_cond")]
    pub cond_number: f64,
    /// Smallest eigenvalue of the true covariance.
    #[serde(default = "default_scale")]
    pub sigma_scale: f64,
    #[serde(default = "default_spectrum")]
    pub spectrum: Spectrum,
    /// Geodesic distance of the true location from the origin.
    #[serde(default = "default_rho")]
    pub rho_origin_mu0: f64,
    #[serde(default)]
    pub shell: Shell,
    #[serde(default = "default_draws")]
    pub fisher_draws: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Optimizer settings; `fit.shell` is replaced by `shell`.
    #[serde(default)]
    pub fit: FitOptions,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[serde(default)]
    pub threads: usize,
    /// When false, runtimes are written as 0 so that outputs are byte-reproducible.
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

impl StudyConfig {
    pub fn new(d: usize, n: usize, replications: usize, base_seed: u64) -> Self {
        StudyConfig {
            schema: CONFIG_SCHEMA,
            d,
            n,
            replications,
            base_seed,
            cond_number: default_cond(),
            sigma_scale: default_scale(),
            spectrum: default_spectrum(),
            rho_origin_mu0: default_rho(),
            shell: Shell::default(),
            fisher_draws: default_draws(),
            level: default_level(),
            fit: FitOptions::default(),
            threads: 0,
            record_timing: true,
        }
    }

    /// Checks every field; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(HwnError::Config(format!("{key}: {msg}")));
        if self.schema != CONFIG_SCHEMA {
            return bad(
                "schema",
                format!("unsupported version {} (expected {CONFIG_SCHEMA})", self.schema),
            );
        }
        if self.d < 2 {
            return bad("d", format!("must be at least 2, got {}", self.d));
        }
        if self.n < 2 {
            return bad("n", format!("must be at least 2, got {}", self.n));
        }
        if self.replications < 1 {
            return bad("replications", "must be at least 1".into());
        }
        if !(self.cond_number >= 1.0 && self.cond_number.is_finite()) {
            return bad(
                "cond_number",
                format!("must be a finite value >= 1, got {}", self.cond_number),
            );
        }
        if !(self.sigma_scale > 0.0 && self.sigma_scale.is_finite()) {
            return bad("sigma_scale", format!("must be positive, got {}", self.sigma_scale));
        }
        if !(self.rho_origin_mu0 >= 0.0 && self.rho_origin_mu0.is_finite()) {
            return bad(
                "rho_origin_mu0",
                format!("must be non-negative, got {}", self.rho_origin_mu0),
            );
        }
        if let Err(e) = self.shell.validate() {
            return bad("shell", e.to_string());
        }
        if self.fisher_draws < MIN_DRAWS {
            return bad(
                "fisher_draws",
                format!("must be at least {MIN_DRAWS}, got {}", self.fisher_draws),
            );
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level", format!("must lie in (0, 1), got {}", self.level));
        }
        if let Err(e) = self.fit_options(0).validate() {
            return bad("fit", e.to_string());
        }
        Ok(())
    }

    /// Optimizer options for replication `rep`.
    fn fit_options(&self, rep: usize) -> FitOptions {
        FitOptions {
            shell: self.shell,
            seed: derive_seed(derive_seed(self.base_seed, stream::MULTISTART), rep as u64),
            execution: Execution::Sequential,
            ..self.fit.clone()
        }
    }

    fn execution(&self) -> Execution {
        Execution::from_threads(self.threads)
    }
}

/// Parses a single config object or an array of them.
pub fn parse_configs(text: &str) -> Result<Vec<StudyConfig>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| HwnError::Config(format!("malformed JSON: {e}")))?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    if items.is_empty() {
        return Err(HwnError::Config("config array is empty".into()));
    }
    items
        .into_iter()
        .map(|v| {
            let cfg: StudyConfig = serde_json::from_value(v).map_err(|e| HwnError::Config(e.to_string()))?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// The true model and the chart centred at it. `Sigma0` has the configured
/// spectrum under a random rotation; `mu0 = Exp_o(rho Q e_1)` for another
/// random rotation `Q`.
pub fn make_truth(config: &StudyConfig, rng: &mut SimRng) -> Result<(HwnParams, Chart)> {
    let d = config.d;
    let sigma = make_test_covariance_with(d, config.cond_number, config.sigma_scale, config.spectrum, rng)?;
    let q = random_rotation(d, rng);
    let nu: Vec<f64> = (0..d).map(|i| config.rho_origin_mu0 * q[(i, 0)]).collect();
    let mut mu = vec![0.0; d + 1];
    raw::exp_origin(&nu, &mut mu);
    let params = HwnParams::new(HyperPoint::new(mu)?, sigma)?;
    let chart = Chart::at(&params)?;
    Ok((params, chart))
}

/// The truth used by a study: drawn once from the truth stream of `base_seed`.
pub fn study_truth(config: &StudyConfig) -> Result<(HwnParams, Chart)> {
    let mut rng = SimRng::seed_from_u64(derive_seed(config.base_seed, stream::TRUTH));
    make_truth(config, &mut rng)
}

/// Fisher information at the study truth.
pub fn study_information(config: &StudyConfig, chart: &Chart) -> Result<InfoMatrices> {
    mc_fisher_information(chart, config.fisher_draws, config.base_seed, config.execution())
}

#[derive(Debug, Clone)]
pub struct Replication {
    pub rep: usize,
    /// `n rho(mu_hat, mu0)^2`.
    pub risk: f64,
    pub loc_covered: bool,
    pub full_covered: bool,
    pub shell_active: bool,
    pub runtime_s: f64,
    pub iters: usize,
    /// `sqrt(n) alpha_hat`.
    pub alpha_hat_scaled: Vec<f64>,
    /// `Sigma_hat` equals the symmetrized tangent scatter at `mu_hat` bit for bit.
    pub sigma_equals_scatter: bool,
    pub failed: bool,
}

/// Floats compare by bit pattern so failed rows (NaN risk) equal themselves.
impl PartialEq for Replication {
    fn eq(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.rep == other.rep
            && self.risk.to_bits() == other.risk.to_bits()
            && self.loc_covered == other.loc_covered
            && self.full_covered == other.full_covered
            && self.shell_active == other.shell_active
            && self.runtime_s.to_bits() == other.runtime_s.to_bits()
            && self.iters == other.iters
            && bits(&self.alpha_hat_scaled) == bits(&other.alpha_hat_scaled)
            && self.sigma_equals_scatter == other.sigma_equals_scatter
            && self.failed == other.failed
    }
}

impl Replication {
    fn failure(rep: usize, d: usize, runtime_s: f64) -> Self {
        Replication {
            rep,
            risk: f64::NAN,
            loc_covered: false,
            full_covered: false,
            shell_active: false,
            runtime_s,
            iters: 0,
            alpha_hat_scaled: vec![f64::NAN; d],
            sigma_equals_scatter: false,
            failed: true,
        }
    }
}

/// Generator for the data of replication `rep`.
pub fn replication_rng(base_seed: u64, rep: usize) -> SimRng {
    SimRng::seed_from_u64(derive_seed(derive_seed(base_seed, stream::REPLICATION), rep as u64))
}

/// Metrics of a fit against the truth.
pub fn score_fit(
    truth: &HwnParams,
    info: &InfoMatrices,
    data: &Sample,
    result: &FitResult,
    level: f64,
) -> Result<(f64, bool, bool, Vec<f64>, bool)> {
    let n = data.len();
    let rho = distance(&result.mu_hat, truth.mu())?;
    let risk = n as f64 * rho * rho;
    let loc = wald_location_covered(info, &result.mu_hat, n, level)?;
    let full = wald_full_covered(info, &result.mu_hat, &result.sigma_hat, n, level)?;
    let alpha = local_alpha(&info.chart, &result.mu_hat)?;
    let scaled = alpha.iter().map(|a| (n as f64).sqrt() * a).collect();
    let scatter = tangent_scatter(&result.mu_hat, data)?;
    let same = result
        .sigma_hat
        .matrix()
        .iter()
        .zip(scatter.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((risk, loc, full, scaled, same))
}

pub fn run_replication(
    truth: &HwnParams,
    info: &InfoMatrices,
    config: &StudyConfig,
    rep: usize,
) -> Result<Replication> {
    let mut rng = replication_rng(config.base_seed, rep);
    let data = sample(truth, config.n, &mut rng)?;
    let opts = config.fit_options(rep);
    let start = Instant::now();
    let outcome = fit(&data, &opts);
    let elapsed = if config.record_timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let result = match outcome {
        Ok(r) => r,
        Err(e) if e.is_numeric() => return Ok(Replication::failure(rep, config.d, elapsed)),
        Err(e) => return Err(e),
    };
    let (risk, loc_covered, full_covered, alpha_hat_scaled, sigma_equals_scatter) =
        score_fit(truth, info, &data, &result, config.level)?;
    Ok(Replication {
        rep,
        risk,
        loc_covered,
        full_covered,
        shell_active: result.shell_active,
        runtime_s: elapsed,
        iters: result.iterations,
        alpha_hat_scaled,
        sigma_equals_scatter,
        failed: false,
    })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub d: usize,
    pub n: usize,
    pub n_risk_mean: f64,
    pub target: f64,
    pub ratio: f64,
    pub loc_coverage: f64,
    pub full_coverage: f64,
    pub rel_cov_err: f64,
    pub shell_active_frac: f64,
    pub failures: usize,
    pub median_runtime_s: f64,
    pub median_iters: f64,
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub config: StudyConfig,
    pub truth: HwnParams,
    pub info: InfoMatrices,
    pub row: StudyRow,
    pub replications: Vec<Replication>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

/// `|Cov(v) - target|_F / |target|_F` with the mean-centred covariance
/// (divisor `R - 1`) of the vectors `v`.
pub fn relative_covariance_error(vectors: &[Vec<f64>], target: &DMatrix<f64>) -> f64 {
    let r = vectors.len();
    let d = target.nrows();
    if r < 2 {
        return f64::NAN;
    }
    let mut mean_v = DVector::zeros(d);
    for v in vectors {
        mean_v += DVector::from_column_slice(v);
    }
    mean_v /= r as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in vectors {
        let c = DVector::from_column_slice(v) - &mean_v;
        cov += &c * c.transpose();
    }
    cov /= (r - 1) as f64;
    (cov - target).norm() / target.norm()
}

pub fn summarize(config: &StudyConfig, info: &InfoMatrices, reps: &[Replication]) -> Result<StudyRow> {
    let ok: Vec<&Replication> = reps.iter().filter(|r| !r.failed).collect();
    let frac = |f: fn(&Replication) -> bool| mean(ok.iter().map(|r| if f(r) { 1.0 } else { 0.0 }));
    let target = info.target()?;
    let n_risk_mean = mean(ok.iter().map(|r| r.risk));
    let scaled: Vec<Vec<f64>> = ok.iter().map(|r| r.alpha_hat_scaled.clone()).collect();
    Ok(StudyRow {
        d: config.d,
        n: config.n,
        n_risk_mean,
        target,
        ratio: n_risk_mean / target,
        loc_coverage: frac(|r| r.loc_covered),
        full_coverage: frac(|r| r.full_covered),
        rel_cov_err: relative_covariance_error(&scaled, &info.efficient_inverse()?),
        shell_active_frac: frac(|r| r.shell_active),
        failures: reps.len() - ok.len(),
        median_runtime_s: median(reps.iter().map(|r| r.runtime_s).collect()),
        median_iters: median(ok.iter().map(|r| r.iters as f64).collect()),
    })
}

/// Runs all replications of `config` against precomputed information.
pub fn run_study_with_info(config: &StudyConfig, truth: &HwnParams, info: &InfoMatrices) -> Result<StudyOutput> {
    config.validate()?;
    let exec = config.execution();
    let reps = with_threads(config.threads, || {
        map_indexed(exec, config.replications, |rep| {
            run_replication(truth, info, config, rep)
        })
    });
    let reps = reps.into_iter().collect::<Result<Vec<_>>>()?;
    let row = summarize(config, info, &reps)?;
    Ok(StudyOutput {
        config: config.clone(),
        truth: truth.clone(),
        info: info.clone(),
        row,
        replications: reps,
    })
}

pub fn run_study(config: &StudyConfig) -> Result<StudyOutput> {
    config.validate()?;
    let (truth, chart) = study_truth(config)?;
    let info = with_threads(config.threads, || study_information(config, &chart))?;
    run_study_with_info(config, &truth, &info)
}

/// Runs several cells, reusing information between cells that share a
/// truth. `cached` is consulted first.
pub fn run_studies(configs: &[StudyConfig], cached: &mut Vec<InfoMatrices>) -> Result<Vec<StudyOutput>> {
    let mut out = Vec::with_capacity(configs.len());
    for config in configs {
        config.validate()?;
        let (truth, chart) = study_truth(config)?;
        let info = match find_info(cached, &chart, config.fisher_draws) {
            Some(info) => info.clone(),
            None => {
                let info = with_threads(config.threads, || study_information(config, &chart))?;
                cached.push(info.clone());
                info
            }
        };
        out.push(run_study_with_info(config, &truth, &info)?);
    }
    Ok(out)
}

/// An information record for `chart` computed from `draws` draws, if any.
pub fn find_info<'a>(cache: &'a [InfoMatrices], chart: &Chart, draws: usize) -> Option<&'a InfoMatrices> {
    cache
        .iter()
        .find(|info| info.mc_draws == draws && charts_match(&info.chart, chart))
}

fn charts_match(a: &Chart, b: &Chart) -> bool {
    let close = |x: &[f64], y: &[f64]| {
        x.len() == y.len() && x.iter().zip(y).all(|(u, v)| (u - v).abs() <= 1e-12 * u.abs().max(1.0))
    };
    close(a.mu0().coords(), b.mu0().coords()) && close(a.beta0().values(), b.beta0().values())
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub const STUDY_ROWS_HEADER: [&str; 12] = [
    "d",
    "n",
    "n_risk_mean",
    "target",
    "ratio",
    "loc_coverage",
    "full_coverage",
    "rel_cov_err",
    "shell_active_frac",
    "failures",
    "median_runtime_s",
    "median_iters",
];

pub fn write_study_rows<W: Write>(rows: &[StudyRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(STUDY_ROWS_HEADER)?;
    for r in rows {
        out.write_record([
            r.d.to_string(),
            r.n.to_string(),
            fmt(r.n_risk_mean),
            fmt(r.target),
            fmt(r.ratio),
            fmt(r.loc_coverage),
            fmt(r.full_coverage),
            fmt(r.rel_cov_err),
            fmt(r.shell_active_frac),
            r.failures.to_string(),
            fmt(r.median_runtime_s),
            fmt(r.median_iters),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Per-replication records of every study. Location columns are padded to
/// the largest `d`; `d`, `n` and `failed` trail the fixed columns.
pub fn write_replications<W: Write>(studies: &[StudyOutput], w: W) -> Result<()> {
    let max_d = studies.iter().map(|s| s.config.d).max().unwrap_or(0);
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = [
        "rep",
        "risk",
        "loc_covered",
        "full_covered",
        "shell_active",
        "runtime_s",
        "iters",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..max_d).map(|j| format!("alpha_hat_scaled_{j}")));
    header.extend(["d", "n", "failed"].iter().map(|s| s.to_string()));
    out.write_record(&header)?;
    for study in studies {
        for r in &study.replications {
            let mut rec = vec![
                r.rep.to_string(),
                fmt(r.risk),
                flag(r.loc_covered).into(),
                flag(r.full_covered).into(),
                flag(r.shell_active).into(),
                fmt(r.runtime_s),
                r.iters.to_string(),
            ];
            rec.extend(r.alpha_hat_scaled.iter().map(|&a| fmt(a)));
            rec.extend((r.alpha_hat_scaled.len()..max_d).map(|_| String::new()));
            rec.extend([
                study.config.d.to_string(),
                study.config.n.to_string(),
                flag(r.failed).into(),
            ]);
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_risk_target<W: Write>(rows: &[StudyRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["d", "n", "n_risk_mean", "target"])?;
    for r in rows {
        out.write_record([r.d.to_string(), r.n.to_string(), fmt(r.n_risk_mean), fmt(r.target)])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_coverage<W: Write>(studies: &[StudyOutput], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["d", "n", "loc_coverage", "full_coverage", "nominal"])?;
    for s in studies {
        let r = &s.row;
        out.write_record([
            r.d.to_string(),
            r.n.to_string(),
            fmt(r.loc_coverage),
            fmt(r.full_coverage),
            fmt(s.config.level),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `study_rows.csv`, `replications.csv`, `risk_target.csv` and
/// `coverage.csv` into `dir`.
pub fn write_outputs(studies: &[StudyOutput], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let rows: Vec<StudyRow> = studies.iter().map(|s| s.row.clone()).collect();
    let create = |name: &str| std::fs::File::create(dir.join(name)).map(std::io::BufWriter::new);
    write_study_rows(&rows, create("study_rows.csv")?)?;
    write_replications(studies, create("replications.csv")?)?;
    write_risk_target(&rows, create("risk_target.csv")?)?;
    write_coverage(studies, create("coverage.csv")?)?;
    Ok(())
}
