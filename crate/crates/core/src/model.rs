//! The anisotropic hyperbolic wrapped normal distribution `HWN_d(mu, Sigma)`:
//! `X = Exp_mu(PT_{o->mu} Z)` with `Z ~ N_d(0, Sigma)` in `T_o H^d ~ R^d`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{HwnError, Result};
use crate::lorentz::{raw, HyperPoint};
use crate::rng::SimRng;
use crate::spd::{cholesky, SpdMatrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Hyperboloid tolerance applied when reading points from CSV.
const CSV_POINT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct HwnParams {
    mu: HyperPoint,
    sigma: SpdMatrix,
}

impl HwnParams {
    pub fn new(mu: HyperPoint, sigma: SpdMatrix) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(HwnError::arg(format!(
                "location lives in H^{} but covariance is {}x{}",
                mu.dim(),
                sigma.dim(),
                sigma.dim()
            )));
        }
        Ok(HwnParams { mu, sigma })
    }

    pub fn mu(&self) -> &HyperPoint {
        &self.mu
    }

    pub fn sigma(&self) -> &SpdMatrix {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

/// A nonempty collection of points of a common `H^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    points: Vec<HyperPoint>,
}

impl Sample {
    pub fn new(points: Vec<HyperPoint>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| HwnError::arg("sample must contain at least one point"))?;
        let d = first.dim();
        if points.iter().any(|p| p.dim() != d) {
            return Err(HwnError::arg("sample points have mixed dimensions"));
        }
        Ok(Sample { points })
    }

    pub fn points(&self) -> &[HyperPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HyperPoint> {
        self.points.iter()
    }

    /// Header `x0,x1,...,xd`, one row per point.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..=self.dim()).map(|j| format!("x{j}")).collect();
        w.write_record(&header)?;
        for p in &self.points {
            w.write_record(p.coords().iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV layout of [`Sample::write_csv`]; each row must lie on the
    /// hyperboloid within `1e-8` and is re-projected.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let width = headers.len();
        if width < 3 {
            return Err(HwnError::arg("sample CSV needs at least 3 columns (x0,x1,x2)"));
        }
        for (j, h) in headers.iter().enumerate() {
            if h.trim() != format!("x{j}") {
                return Err(HwnError::arg(format!(
                    "unexpected sample CSV header `{h}` in column {j}"
                )));
            }
        }
        let mut points = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != width {
                return Err(HwnError::arg(format!("row {row}: expected {width} fields")));
            }
            let coords = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| HwnError::arg(format!("row {row}: bad number `{f}`: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if coords.iter().any(|c| !c.is_finite()) || coords[0] <= 0.0 {
                return Err(HwnError::arg(format!("row {row}: not a point of the upper sheet")));
            }
            let q = raw::inner(&coords, &coords);
            if (q + 1.0).abs() > CSV_POINT_TOL * coords[0] * coords[0] {
                return Err(HwnError::arg(format!("row {row}: off the hyperboloid (<x,x>_L = {q})")));
            }
            let mut c = coords;
            raw::project(&mut c);
            points.push(HyperPoint::from_raw(c));
        }
        Sample::new(points)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Draws `n` points; the tangent-space Gaussians `Z_i` used to build them are
/// returned alongside.
pub fn sample_with_tangents(params: &HwnParams, n: usize, rng: &mut SimRng) -> Result<(Sample, Vec<DVector<f64>>)> {
    if n == 0 {
        return Err(HwnError::arg("sample size must be at least 1"));
    }
    let d = params.dim();
    let l = cholesky(&params.sigma)?;
    let mu = params.mu.coords();
    let mut points = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    let mut v = vec![0.0; d + 1];
    for _ in 0..n {
        let xi = DVector::from_fn(d, |_, _| rng.standard_normal());
        let z = &l * xi;
        let mut out = vec![0.0; d + 1];
        raw::wrap_from_origin(mu, z.as_slice(), &mut v, &mut out);
        points.push(HyperPoint::from_raw(out));
        tangents.push(z);
    }
    Ok((Sample { points }, tangents))
}

pub fn sample(params: &HwnParams, n: usize, rng: &mut SimRng) -> Result<Sample> {
    Ok(sample_with_tangents(params, n, rng)?.0)
}

/// Cholesky-backed evaluator of the log-density, shared across many points.
#[derive(Debug, Clone)]
pub struct LogDensity {
    mu: Vec<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
    d: usize,
}

impl LogDensity {
    pub fn new(params: &HwnParams) -> Result<Self> {
        let chol = cholesky(&params.sigma)?;
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(LogDensity {
            mu: params.mu.coords().to_vec(),
            chol,
            log_det,
            d: params.dim(),
        })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `t^T Sigma^{-1} t` by a forward solve against the Cholesky factor.
    pub fn quad_form(&self, t: &[f64]) -> f64 {
        let d = self.d;
        let mut y = [0.0f64; 32];
        let mut heap;
        let y: &mut [f64] = if d <= 32 {
            &mut y[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut q = 0.0;
        for i in 0..d {
            let mut s = t[i];
            for (k, yk) in y.iter().enumerate().take(i) {
                s -= self.chol[(i, k)] * yk;
            }
            y[i] = s / self.chol[(i, i)];
            q += y[i] * y[i];
        }
        q
    }

    /// Constant-free log-density `m(x)`, from tangent coordinates `t = T_mu(x)`.
    pub fn m_from_tangent(&self, t: &[f64]) -> f64 {
        let r = raw::euclid_norm(t);
        -0.5 * self.log_det - 0.5 * self.quad_form(t) - (self.d as f64 - 1.0) * raw::phi(r)
    }

    /// Constant-free log-density `m(x)`.
    pub fn m(&self, x: &HyperPoint) -> f64 {
        let mut t = vec![0.0; self.d];
        raw::tangent_coords(&self.mu, x.coords(), &mut t);
        self.m_from_tangent(&t)
    }

    /// Full log-density with the `-(d/2) log(2 pi)` constant.
    pub fn eval(&self, x: &HyperPoint) -> f64 {
        self.m(x) - 0.5 * self.d as f64 * LN_2PI
    }
}

fn check_point(params: &HwnParams, x: &HyperPoint) -> Result<()> {
    if x.dim() != params.dim() {
        return Err(HwnError::arg(format!(
            "point lives in H^{} but the model in H^{}",
            x.dim(),
            params.dim()
        )));
    }
    Ok(())
}

/// Log-density with respect to the hyperbolic volume measure.
pub fn log_density(params: &HwnParams, x: &HyperPoint) -> Result<f64> {
    check_point(params, x)?;
    Ok(LogDensity::new(params)?.eval(x))
}

pub fn density(params: &HwnParams, x: &HyperPoint) -> Result<f64> {
    Ok(log_density(params, x)?.exp())
}

/// Sum of [`log_density`] over the sample.
pub fn log_likelihood(params: &HwnParams, data: &Sample) -> Result<f64> {
    if data.dim() != params.dim() {
        return Err(HwnError::arg("sample and model dimensions differ"));
    }
    let ld = LogDensity::new(params)?;
    Ok(data.iter().map(|x| ld.eval(x)).sum())
}

/// The trace form of the log-likelihood,
/// `-(n/2) log det Sigma - (n/2) tr(S_n(mu) Sigma^{-1}) - (d-1) sum phi - (nd/2) log 2pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodTerms {
    pub log_det: f64,
    pub trace: f64,
    pub jacobian: f64,
    pub constant: f64,
}

impl LikelihoodTerms {
    pub fn total(&self) -> f64 {
        self.log_det + self.trace + self.jacobian + self.constant
    }
}

pub fn log_likelihood_terms(params: &HwnParams, data: &Sample) -> Result<LikelihoodTerms> {
    if data.dim() != params.dim() {
        return Err(HwnError::arg("sample and model dimensions differ"));
    }
    let d = params.dim();
    let n = data.len() as f64;
    let scatter = crate::profile::tangent_scatter(params.mu(), data)?;
    let sigma_inv = params
        .sigma
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| HwnError::domain("covariance is not positive definite"))?
        .inverse();
    let trace = (scatter * sigma_inv).trace();
    let jacobian: f64 = crate::profile::tangent_radii(params.mu(), data)
        .iter()
        .map(|&r| raw::phi(r))
        .sum();
    Ok(LikelihoodTerms {
        log_det: -0.5 * n * params.sigma.log_det()?,
        trace: -0.5 * n * trace,
        jacobian: -(d as f64 - 1.0) * jacobian,
        constant: -0.5 * n * d as f64 * LN_2PI,
    })
}
