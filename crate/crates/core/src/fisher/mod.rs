//! Fisher information in the local chart `theta = (alpha, beta)` around a
//! reference point `(mu0, Sigma0)`, its Schur complement for the location,
//! and Wald confidence regions.
//!
//! `alpha` lives in `R^d`, identified with `T_{mu0} H^d` by transport from
//! the origin, so that `alpha = T_{mu0}(mu)`. `beta = vech(log Sigma)`.

mod chisq;

pub use chisq::{chi_square_cdf, chi_square_quantile, gamma_p, ln_gamma};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HwnError, Result};
use crate::lorentz::{raw, HyperPoint};
use crate::model::{sample, HwnParams, LogDensity, Sample};
use crate::par::{map_indexed, Execution};
use crate::rng::{derive_seed, stream, SimRng};
use crate::spd::{mat_slice, matrix_from_rows, matrix_rows, spd_exp, spd_log, symmetrize, vech, SpdMatrix, VechVector};

/// Relative finite-difference step for scores.
pub const SCORE_FD_STEP: f64 = 1e-5;
/// Relative finite-difference step for the Hessian cross-check.
pub const HESSIAN_FD_STEP: f64 = 1e-4;
/// Minimum number of Monte Carlo draws for an information estimate.
pub const MIN_DRAWS: usize = 1000;
const MAX_CONDITION: f64 = 1e12;
/// Draws per independently seeded partition.
const CHUNK: usize = 1000;
const SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    mu0: HyperPoint,
    beta0: VechVector,
}

impl Chart {
    pub fn new(mu0: HyperPoint, beta0: VechVector) -> Result<Self> {
        if beta0.matrix_dim() != mu0.dim() {
            return Err(HwnError::arg(format!(
                "chart: beta0 has matrix dimension {} but mu0 lives in H^{}",
                beta0.matrix_dim(),
                mu0.dim()
            )));
        }
        Ok(Chart { mu0, beta0 })
    }

    /// Chart centred at `params`.
    pub fn at(params: &HwnParams) -> Result<Self> {
        let beta0 = vech(&spd_log(params.sigma())?)?;
        Chart::new(params.mu().clone(), beta0)
    }

    pub fn mu0(&self) -> &HyperPoint {
        &self.mu0
    }

    pub fn beta0(&self) -> &VechVector {
        &self.beta0
    }

    pub fn d(&self) -> usize {
        self.mu0.dim()
    }

    /// Number of covariance coordinates `d(d+1)/2`.
    pub fn m(&self) -> usize {
        self.beta0.len()
    }

    /// Total parameter dimension `d + m`.
    pub fn p(&self) -> usize {
        self.d() + self.m()
    }

    /// `theta0 = (0, beta0)`.
    pub fn theta0(&self) -> DVector<f64> {
        let mut t = DVector::zeros(self.p());
        t.rows_mut(self.d(), self.m()).copy_from_slice(self.beta0.values());
        t
    }

    /// The model at the chart centre.
    pub fn center(&self) -> Result<HwnParams> {
        params_from_chart(self, &vec![0.0; self.d()], &self.beta0)
    }

    fn params_at(&self, theta: &[f64]) -> Result<HwnParams> {
        let d = self.d();
        let sigma = spd_exp(&mat_slice(&theta[d..])?)?;
        let mut v = vec![0.0; d + 1];
        let mut mu = vec![0.0; d + 1];
        raw::wrap_from_origin(self.mu0.coords(), &theta[..d], &mut v, &mut mu);
        if mu.iter().any(|c| !c.is_finite()) {
            return Err(HwnError::numeric("chart location is not finite"));
        }
        HwnParams::new(HyperPoint::from_raw(mu), sigma)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.p() {
            return Err(HwnError::arg(format!(
                "theta has length {} but the chart has p = {}",
                theta.len(),
                self.p()
            )));
        }
        Ok(())
    }
}

/// `mu = Exp_{mu0}(PT_{o->mu0}(0, alpha))`, `Sigma = exp(mat(beta))`.
pub fn params_from_chart(chart: &Chart, alpha: &[f64], beta: &VechVector) -> Result<HwnParams> {
    if alpha.len() != chart.d() || beta.len() != chart.m() {
        return Err(HwnError::arg(format!(
            "chart coordinates have lengths ({}, {}), expected ({}, {})",
            alpha.len(),
            beta.len(),
            chart.d(),
            chart.m()
        )));
    }
    let mut theta = alpha.to_vec();
    theta.extend_from_slice(beta.values());
    chart.params_at(&theta)
}

/// Constant-free log-density of each point under the model at `theta`.
fn m_values(chart: &Chart, theta: &[f64], points: &[HyperPoint], out: &mut [f64]) -> Result<()> {
    let params = chart.params_at(theta)?;
    let dens = LogDensity::new(&params)?;
    let d = chart.d();
    let mu = params.mu().coords();
    let mut t = vec![0.0; d];
    for (x, o) in points.iter().zip(out.iter_mut()) {
        raw::tangent_coords(mu, x.coords(), &mut t);
        *o = dens.m_from_tangent(&t);
    }
    Ok(())
}

fn fd_steps(theta: &[f64], rel: f64) -> Vec<f64> {
    theta.iter().map(|t| rel * t.abs().max(1.0)).collect()
}

/// Scores of every point at `theta`, one row per point (`n x p`), by
/// central differences.
pub fn score_matrix(chart: &Chart, theta: &[f64], points: &[HyperPoint], fd_step: f64) -> Result<DMatrix<f64>> {
    chart.check_theta(theta)?;
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(HwnError::arg("score: fd_step must be positive"));
    }
    let p = chart.p();
    let n = points.len();
    let h = fd_steps(theta, fd_step);
    let mut scores = DMatrix::zeros(n, p);
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    let mut probe = theta.to_vec();
    for k in 0..p {
        probe[k] = theta[k] + h[k];
        m_values(chart, &probe, points, &mut plus)?;
        probe[k] = theta[k] - h[k];
        m_values(chart, &probe, points, &mut minus)?;
        probe[k] = theta[k];
        let denom = 2.0 * h[k];
        for i in 0..n {
            let s = (plus[i] - minus[i]) / denom;
            if !s.is_finite() {
                return Err(HwnError::numeric("score: non-finite finite-difference probe"));
            }
            scores[(i, k)] = s;
        }
    }
    Ok(scores)
}

/// Score `d/dtheta m_theta(x)` of a single point.
pub fn score(chart: &Chart, theta: &[f64], x: &HyperPoint, fd_step: f64) -> Result<DVector<f64>> {
    if x.dim() != chart.d() {
        return Err(HwnError::arg("score: point dimension does not match the chart"));
    }
    let s = score_matrix(chart, theta, std::slice::from_ref(x), fd_step)?;
    Ok(s.row(0).transpose())
}

/// Central-difference Hessian of `theta -> m_theta(x)` for each point,
/// returned as the negated mean over points.
fn neg_mean_hessian(chart: &Chart, theta: &[f64], points: &[HyperPoint], fd_step: f64) -> Result<DMatrix<f64>> {
    let p = chart.p();
    let n = points.len();
    let h = fd_steps(theta, fd_step);
    let mut center = vec![0.0; n];
    m_values(chart, theta, points, &mut center)?;
    let mut buf = vec![0.0; n];
    let mut probe = theta.to_vec();
    let mut eval = |shifts: &[(usize, f64)], probe: &mut Vec<f64>| -> Result<f64> {
        for &(k, s) in shifts {
            probe[k] += s;
        }
        let r = m_values(chart, probe, points, &mut buf);
        for &(k, _) in shifts {
            probe[k] = theta[k];
        }
        r?;
        Ok(buf.iter().sum::<f64>())
    };
    let c: f64 = center.iter().sum();
    let mut hess = DMatrix::zeros(p, p);
    for k in 0..p {
        let fp = eval(&[(k, h[k])], &mut probe)?;
        let fm = eval(&[(k, -h[k])], &mut probe)?;
        hess[(k, k)] = (fp - 2.0 * c + fm) / (h[k] * h[k]);
        for l in 0..k {
            let fpp = eval(&[(k, h[k]), (l, h[l])], &mut probe)?;
            let fpm = eval(&[(k, h[k]), (l, -h[l])], &mut probe)?;
            let fmp = eval(&[(k, -h[k]), (l, h[l])], &mut probe)?;
            let fmm = eval(&[(k, -h[k]), (l, -h[l])], &mut probe)?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[k] * h[l]);
            hess[(k, l)] = v;
            hess[(l, k)] = v;
        }
    }
    let out = hess / -(n as f64);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(HwnError::numeric("hessian information is not finite"));
    }
    Ok(out)
}

/// Running sums of scores over a set of draws.
#[derive(Debug, Clone)]
struct ScoreSums {
    count: usize,
    sum: DVector<f64>,
    sum_sq: DVector<f64>,
    outer: DMatrix<f64>,
}

impl ScoreSums {
    fn zeros(p: usize) -> Self {
        ScoreSums {
            count: 0,
            sum: DVector::zeros(p),
            sum_sq: DVector::zeros(p),
            outer: DMatrix::zeros(p, p),
        }
    }

    fn add_matrix(&mut self, scores: &DMatrix<f64>) {
        self.count += scores.nrows();
        for i in 0..scores.nrows() {
            let row = scores.row(i).transpose();
            self.sum += &row;
            self.sum_sq += row.component_mul(&row);
        }
        self.outer += scores.transpose() * scores;
    }

    fn merge(&mut self, other: &ScoreSums) {
        self.count += other.count;
        self.sum += &other.sum;
        self.sum_sq += &other.sum_sq;
        self.outer += &other.outer;
    }
}

fn chunk_sizes(draws: usize) -> Vec<usize> {
    let full = draws / CHUNK;
    let mut sizes = vec![CHUNK; full];
    if !draws.is_multiple_of(CHUNK) {
        sizes.push(draws % CHUNK);
    }
    sizes
}

/// Model draws at the chart centre for partition `k`.
fn chunk_draws(center: &HwnParams, seed: u64, k: usize, size: usize) -> Result<Sample> {
    let mut rng = SimRng::seed_from_u64(derive_seed(derive_seed(seed, stream::FISHER), k as u64));
    sample(center, size, &mut rng)
}

fn check_draws(draws: usize) -> Result<()> {
    if draws < MIN_DRAWS {
        return Err(HwnError::arg(format!(
            "Fisher information needs at least {MIN_DRAWS} draws, got {draws}"
        )));
    }
    Ok(())
}

fn score_sums(chart: &Chart, draws: usize, seed: u64, exec: Execution) -> Result<ScoreSums> {
    check_draws(draws)?;
    let center = chart.center()?;
    let theta0 = chart.theta0();
    let sizes = chunk_sizes(draws);
    let parts = map_indexed(exec, sizes.len(), |k| -> Result<ScoreSums> {
        let xs = chunk_draws(&center, seed, k, sizes[k])?;
        let s = score_matrix(chart, theta0.as_slice(), xs.points(), SCORE_FD_STEP)?;
        let mut acc = ScoreSums::zeros(chart.p());
        acc.add_matrix(&s);
        Ok(acc)
    });
    let mut total = ScoreSums::zeros(chart.p());
    for part in parts {
        total.merge(&part?);
    }
    Ok(total)
}

/// Monte Carlo mean of the score at `theta0` and the standard error of
/// each component.
#[derive(Debug, Clone)]
pub struct ScoreMean {
    pub mean: DVector<f64>,
    pub std_error: DVector<f64>,
    pub draws: usize,
}

pub fn score_mean(chart: &Chart, draws: usize, seed: u64, exec: Execution) -> Result<ScoreMean> {
    let sums = score_sums(chart, draws, seed, exec)?;
    let m = sums.count as f64;
    let mean = &sums.sum / m;
    let std_error = DVector::from_iterator(
        mean.len(),
        sums.sum_sq.iter().zip(mean.iter()).map(|(sq, mu)| {
            let var = (sq / m - mu * mu) * m / (m - 1.0);
            (var.max(0.0) / m).sqrt()
        }),
    );
    Ok(ScoreMean { mean, std_error, draws })
}

/// `I_aa - I_ab I_bb^{-1} I_ba`, with the `bb` block entering only through a
/// Cholesky solve.
pub fn schur_complement(full: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let p = full.nrows();
    if !full.is_square() || d == 0 || d >= p {
        return Err(HwnError::arg("schur_complement: bad block partition"));
    }
    let m = p - d;
    let i_aa = full.view((0, 0), (d, d));
    let i_ab = full.view((0, d), (d, m));
    let i_bb = full.view((d, d), (m, m)).into_owned();
    let i_bb = SpdMatrix::new(symmetrize(&i_bb))
        .map_err(|_| HwnError::numeric("information bb block is not positive definite"))?;
    check_condition(&i_bb, "information bb block")?;
    let chol = i_bb
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| HwnError::numeric("information bb block is not positive definite"))?;
    let solved = chol.solve(&i_ab.transpose());
    Ok(symmetrize(&(i_aa - i_ab * solved)))
}

fn check_condition(s: &SpdMatrix, what: &str) -> Result<()> {
    let cond = s.condition_number()?;
    if !(cond.is_finite() && cond <= MAX_CONDITION) {
        return Err(HwnError::numeric(format!(
            "{what} is numerically singular (condition number {cond:.3e})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrices {
    pub chart: Chart,
    pub full: SpdMatrix,
    pub efficient_location: SpdMatrix,
    pub mc_draws: usize,
    pub seed: u64,
}

impl InfoMatrices {
    /// Assembles and validates an information record from the full matrix.
    pub fn from_full(chart: Chart, full: DMatrix<f64>, mc_draws: usize, seed: u64) -> Result<Self> {
        if full.nrows() != chart.p() || full.ncols() != chart.p() {
            return Err(HwnError::arg(format!(
                "information matrix is {}x{}, expected {p}x{p}",
                full.nrows(),
                full.ncols(),
                p = chart.p()
            )));
        }
        let full = SpdMatrix::new(symmetrize(&full))
            .map_err(|_| HwnError::numeric("Fisher information is not positive definite"))?;
        check_condition(&full, "Fisher information")?;
        let eff = SpdMatrix::new(schur_complement(full.matrix(), chart.d())?)
            .map_err(|_| HwnError::numeric("efficient information is not positive definite"))?;
        Ok(InfoMatrices {
            chart,
            full,
            efficient_location: eff,
            mc_draws,
            seed,
        })
    }

    /// `tr(I_{aa.b}^{-1})`, the asymptotic scaled location risk.
    pub fn target(&self) -> Result<f64> {
        let chol = self
            .efficient_location
            .matrix()
            .clone()
            .cholesky()
            .ok_or_else(|| HwnError::numeric("efficient information is not positive definite"))?;
        Ok(chol.inverse().trace())
    }

    /// `I_{aa.b}^{-1}`.
    pub fn efficient_inverse(&self) -> Result<DMatrix<f64>> {
        let chol = self
            .efficient_location
            .matrix()
            .clone()
            .cholesky()
            .ok_or_else(|| HwnError::numeric("efficient information is not positive definite"))?;
        Ok(symmetrize(&chol.inverse()))
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = InfoRecord {
            schema: SCHEMA,
            d: self.chart.d(),
            p: self.chart.p(),
            mc_draws: self.mc_draws,
            seed: self.seed,
            estimator: "score_outer_product".into(),
            score_fd: format!("central differences, relative step {SCORE_FD_STEP:e}"),
            vech_order: "lower_triangle_column_major".into(),
            mu0: self.chart.mu0.coords().to_vec(),
            beta0: self.chart.beta0.values().to_vec(),
            target: self.target()?,
            full: matrix_rows(self.full.matrix()),
            efficient_location: matrix_rows(self.efficient_location.matrix()),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    /// Parses a record written by [`InfoMatrices::to_json`]; the stored
    /// efficient block must agree with the one re-derived from `full`.
    pub fn from_json(text: &str) -> Result<Self> {
        let rec: InfoRecord = serde_json::from_str(text)?;
        if rec.schema != SCHEMA {
            return Err(HwnError::Config(format!(
                "schema: unsupported information schema {}",
                rec.schema
            )));
        }
        let mu0 = HyperPoint::new(rec.mu0)?;
        let chart = Chart::new(mu0, VechVector::new(rec.beta0)?)?;
        if chart.d() != rec.d || chart.p() != rec.p {
            return Err(HwnError::Config("d: dimensions disagree with the chart".into()));
        }
        let info = InfoMatrices::from_full(chart, matrix_from_rows(&rec.full)?, rec.mc_draws, rec.seed)?;
        let stored = matrix_from_rows(&rec.efficient_location)?;
        let derived = info.efficient_location.matrix();
        if stored.shape() != derived.shape() {
            return Err(HwnError::Config("efficient_location: wrong shape".into()));
        }
        let scale = derived.amax().max(1.0);
        if (&stored - derived).amax() > 1e-10 * scale {
            return Err(HwnError::Config(
                "efficient_location: does not match the Schur complement of full".into(),
            ));
        }
        Ok(info)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InfoRecord {
    schema: u32,
    d: usize,
    p: usize,
    mc_draws: usize,
    seed: u64,
    estimator: String,
    score_fd: String,
    vech_order: String,
    mu0: Vec<f64>,
    beta0: Vec<f64>,
    target: f64,
    full: Vec<Vec<f64>>,
    efficient_location: Vec<Vec<f64>>,
}

/// `I = E[s s^T]` at `theta0`, estimated from `draws` model draws.
pub fn mc_fisher_information(chart: &Chart, draws: usize, seed: u64, exec: Execution) -> Result<InfoMatrices> {
    let sums = score_sums(chart, draws, seed, exec)?;
    let full = sums.outer / sums.count as f64;
    InfoMatrices::from_full(chart.clone(), full, draws, seed)
}

/// `-E[d^2 m]` at `theta0` from the same draws as
/// [`mc_fisher_information`] with equal `seed`.
pub fn hessian_information(chart: &Chart, draws: usize, seed: u64, exec: Execution) -> Result<DMatrix<f64>> {
    check_draws(draws)?;
    let center = chart.center()?;
    let theta0 = chart.theta0();
    let sizes = chunk_sizes(draws);
    let parts = map_indexed(exec, sizes.len(), |k| -> Result<DMatrix<f64>> {
        let xs = chunk_draws(&center, seed, k, sizes[k])?;
        Ok(neg_mean_hessian(chart, theta0.as_slice(), xs.points(), HESSIAN_FD_STEP)? * sizes[k] as f64)
    });
    let mut total = DMatrix::zeros(chart.p(), chart.p());
    for part in parts {
        total += part?;
    }
    Ok(symmetrize(&(total / draws as f64)))
}

/// Cross-moment `E[s~_a s_b^T]` between the efficient location score
/// `s~_a = s_a - I_ab I_bb^{-1} s_b` (using `info`) and the covariance score,
/// estimated on draws independent of the ones behind `info`.
#[derive(Debug, Clone)]
pub struct Orthogonality {
    pub cross: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
}

impl Orthogonality {
    pub fn frobenius(&self) -> f64 {
        self.cross.norm()
    }

    /// Standard error scale of the Frobenius norm under orthogonality.
    pub fn frobenius_std_error(&self) -> f64 {
        self.std_error.norm()
    }
}

pub fn efficient_score_orthogonality(
    info: &InfoMatrices,
    draws: usize,
    seed: u64,
    exec: Execution,
) -> Result<Orthogonality> {
    check_draws(draws)?;
    let chart = &info.chart;
    let (d, m) = (chart.d(), chart.m());
    let full = info.full.matrix();
    let i_bb = full.view((d, d), (m, m)).into_owned();
    let i_ab = full.view((0, d), (d, m)).into_owned();
    let chol = i_bb
        .cholesky()
        .ok_or_else(|| HwnError::numeric("information bb block is not positive definite"))?;
    // s~_a = s_a - K s_b with K = I_ab I_bb^{-1}.
    let k_mat = chol.solve(&i_ab.transpose()).transpose();
    let center = chart.center()?;
    let theta0 = chart.theta0();
    let sizes = chunk_sizes(draws);
    let parts = map_indexed(exec, sizes.len(), |c| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let xs = chunk_draws(&center, seed, c, sizes[c])?;
        let s = score_matrix(chart, theta0.as_slice(), xs.points(), SCORE_FD_STEP)?;
        let mut sum = DMatrix::zeros(d, m);
        let mut sum_sq = DMatrix::zeros(d, m);
        for i in 0..s.nrows() {
            let row = s.row(i);
            let s_a = row.columns(0, d).transpose();
            let s_b = row.columns(d, m).transpose();
            let eff = s_a - &k_mat * &s_b;
            let prod = &eff * s_b.transpose();
            sum_sq += prod.component_mul(&prod);
            sum += prod;
        }
        Ok((sum, sum_sq))
    });
    let mut sum = DMatrix::zeros(d, m);
    let mut sum_sq = DMatrix::zeros(d, m);
    for part in parts {
        let (a, b) = part?;
        sum += a;
        sum_sq += b;
    }
    let n = draws as f64;
    let cross = &sum / n;
    let std_error = DMatrix::from_fn(d, m, |i, j| {
        let var = (sum_sq[(i, j)] / n - cross[(i, j)].powi(2)) * n / (n - 1.0);
        (var.max(0.0) / n).sqrt()
    });
    Ok(Orthogonality { cross, std_error })
}

/// `n alpha^T I_{aa.b} alpha` with `alpha = T_{mu0}(mu_hat)`.
pub fn wald_location_statistic(info: &InfoMatrices, mu_hat: &HyperPoint, n: usize) -> Result<f64> {
    let alpha = local_alpha(&info.chart, mu_hat)?;
    Ok(n as f64 * alpha.dot(&(info.efficient_location.matrix() * &alpha)))
}

pub fn wald_location_covered(info: &InfoMatrices, mu_hat: &HyperPoint, n: usize, level: f64) -> Result<bool> {
    let stat = wald_location_statistic(info, mu_hat, n)?;
    Ok(stat <= chi_square_quantile(info.chart.d(), level)?)
}

/// `n delta^T I delta` with `delta = (alpha_hat, beta_hat - beta0)`.
pub fn wald_full_statistic(info: &InfoMatrices, mu_hat: &HyperPoint, sigma_hat: &SpdMatrix, n: usize) -> Result<f64> {
    let chart = &info.chart;
    if sigma_hat.dim() != chart.d() {
        return Err(HwnError::arg("wald: covariance dimension does not match the chart"));
    }
    let alpha = local_alpha(chart, mu_hat)?;
    let beta = vech(&spd_log(sigma_hat)?)?;
    let d = chart.d();
    let mut delta = DVector::zeros(chart.p());
    delta.rows_mut(0, d).copy_from(&alpha);
    for (k, (b, b0)) in beta.values().iter().zip(chart.beta0.values()).enumerate() {
        delta[d + k] = b - b0;
    }
    Ok(n as f64 * delta.dot(&(info.full.matrix() * &delta)))
}

pub fn wald_full_covered(
    info: &InfoMatrices,
    mu_hat: &HyperPoint,
    sigma_hat: &SpdMatrix,
    n: usize,
    level: f64,
) -> Result<bool> {
    let stat = wald_full_statistic(info, mu_hat, sigma_hat, n)?;
    Ok(stat <= chi_square_quantile(info.chart.p(), level)?)
}

/// `alpha_hat = T_{mu0}(mu_hat)`.
pub fn local_alpha(chart: &Chart, mu_hat: &HyperPoint) -> Result<DVector<f64>> {
    if mu_hat.dim() != chart.d() {
        return Err(HwnError::arg("wald: location dimension does not match the chart"));
    }
    let d = chart.d();
    let mut t = vec![0.0; d];
    raw::tangent_coords(chart.mu0.coords(), mu_hat.coords(), &mut t);
    Ok(DVector::from_vec(t))
}
