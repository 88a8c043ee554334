//! Symmetric positive definite matrices: half-vectorization, spectral
//! functions, Cholesky, and eigenvalue clipping onto a covariance shell.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HwnError, Result};
use crate::rng::SimRng;

const SYM_TOL: f64 = 1e-12;
/// Eigenvalues down to `-PSD_FLOOR * max(1, |S|)` are treated as round-off zeros.
const PSD_FLOOR: f64 = 1e-10;

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn check_symmetric(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(HwnError::arg(format!("{what}: matrix is not square")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(HwnError::numeric(format!("{what}: non-finite entries")));
    }
    let asym = asymmetry(a);
    if asym > SYM_TOL * max_abs(a).max(1.0) {
        return Err(HwnError::arg(format!(
            "{what}: matrix is not symmetric (max |A - A^T| = {asym:e})"
        )));
    }
    Ok(())
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// A symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
}

impl SpdMatrix {
    /// Validates symmetry and positive definiteness; the stored matrix is the
    /// exact symmetrization of the input.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&a, "SpdMatrix")?;
        let a = symmetrize(&a);
        if a.clone().cholesky().is_none() {
            return Err(HwnError::domain("matrix is not positive definite"));
        }
        Ok(SpdMatrix { entries: a })
    }

    pub fn identity(d: usize) -> Self {
        SpdMatrix {
            entries: DMatrix::identity(d, d),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub(crate) fn from_trusted(entries: DMatrix<f64>) -> Self {
        SpdMatrix { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    /// Ascending eigenvalues and matching orthonormal eigenvectors.
    pub fn eigen(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        sym_eig(&self.entries)
    }

    pub fn eigenvalues(&self) -> Result<DVector<f64>> {
        Ok(self.eigen()?.0)
    }

    pub fn condition_number(&self) -> Result<f64> {
        let s = self.eigenvalues()?;
        Ok(s[s.len() - 1] / s[0])
    }

    pub fn log_det(&self) -> Result<f64> {
        let l = cholesky(self)?;
        Ok(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }

    /// Row-major nested vectors, for serialization.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.entries)
    }
}

pub(crate) fn matrix_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(HwnError::arg("ragged or empty matrix rows"));
    }
    let m = rows[0].len();
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Covariance shell `{Sigma : lambda_minus I <= Sigma <= lambda_plus I}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shell {
    pub lambda_minus: f64,
    pub lambda_plus: f64,
}

impl Shell {
    pub fn new(lambda_minus: f64, lambda_plus: f64) -> Result<Self> {
        let s = Shell {
            lambda_minus,
            lambda_plus,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_minus > 0.0 && self.lambda_plus > self.lambda_minus && self.lambda_plus.is_finite()) {
            return Err(HwnError::arg(format!(
                "invalid shell: need 0 < lambda_minus < lambda_plus, got ({}, {})",
                self.lambda_minus, self.lambda_plus
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn clip(&self, s: f64) -> f64 {
        s.max(self.lambda_minus).min(self.lambda_plus)
    }

    /// True when `s` is not strictly inside `(lambda_minus, lambda_plus)`.
    #[inline]
    pub fn binds(&self, s: f64) -> bool {
        s <= self.lambda_minus || s >= self.lambda_plus
    }
}

impl Default for Shell {
    fn default() -> Self {
        Shell {
            lambda_minus: 0.03,
            lambda_plus: 20.0,
        }
    }
}

/// Half-vectorization `vech(A)`: lower triangle including the diagonal,
/// stacked column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct VechVector {
    values: Vec<f64>,
}

/// `d` such that `d(d+1)/2 = m`, if any.
pub fn triangular_root(m: usize) -> Option<usize> {
    let d = (((8 * m + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (d..=d + 1).find(|&k| k * (k + 1) / 2 == m)
}

impl VechVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        match triangular_root(values.len()) {
            Some(d) if d >= 1 => Ok(VechVector { values }),
            _ => Err(HwnError::arg(format!(
                "vech length {} is not a triangular number",
                values.len()
            ))),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Matrix dimension `d`.
    pub fn matrix_dim(&self) -> usize {
        triangular_root(self.values.len()).unwrap_or(0)
    }
}

pub fn vech(a: &DMatrix<f64>) -> Result<VechVector> {
    check_symmetric(a, "vech")?;
    let d = a.nrows();
    let mut values = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for i in j..d {
            values.push(a[(i, j)]);
        }
    }
    Ok(VechVector { values })
}

pub fn mat(b: &VechVector) -> Result<DMatrix<f64>> {
    mat_slice(b.values())
}

pub(crate) fn mat_slice(b: &[f64]) -> Result<DMatrix<f64>> {
    let d = triangular_root(b.len())
        .filter(|&d| d >= 1)
        .ok_or_else(|| HwnError::arg(format!("vech length {} is not a triangular number", b.len())))?;
    let mut a = DMatrix::zeros(d, d);
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            a[(i, j)] = b[k];
            a[(j, i)] = b[k];
            k += 1;
        }
    }
    Ok(a)
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_symmetric(a, "sym_eig")?;
    let eig = nalgebra::SymmetricEigen::try_new(symmetrize(a), f64::EPSILON, 10_000)
        .ok_or_else(|| HwnError::numeric("symmetric eigensolver did not converge"))?;
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// `U diag(f(s)) U^T`.
pub fn spectral_apply(values: &DVector<f64>, vectors: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, &s) in values.iter().enumerate() {
        let fs = f(s);
        scaled.column_mut(j).scale_mut(fs);
    }
    symmetrize(&(scaled * vectors.transpose()))
}

pub fn spd_log(s: &SpdMatrix) -> Result<DMatrix<f64>> {
    let (values, vectors) = s.eigen()?;
    if values[0] <= 0.0 {
        return Err(HwnError::domain("spd_log: matrix is not positive definite"));
    }
    Ok(spectral_apply(&values, &vectors, f64::ln))
}

pub fn spd_exp(b: &DMatrix<f64>) -> Result<SpdMatrix> {
    let (values, vectors) = sym_eig(b)?;
    Ok(SpdMatrix::from_trusted(spectral_apply(&values, &vectors, f64::exp)))
}

/// Lower-triangular `L` with `L L^T = S`.
pub fn cholesky(s: &SpdMatrix) -> Result<DMatrix<f64>> {
    s.entries
        .clone()
        .cholesky()
        .map(|c| c.unpack())
        .ok_or_else(|| HwnError::domain("cholesky: matrix is not positive definite"))
}

/// Outcome of clipping a scatter matrix onto the shell, with the spectral
/// pieces the profiled objective needs.
#[derive(Debug, Clone)]
pub struct ClippedSpectrum {
    pub sigma: SpdMatrix,
    /// Eigenvalues of the input, floored at zero.
    pub eigenvalues: DVector<f64>,
    pub clipped: DVector<f64>,
    /// Whether any input eigenvalue lies outside the open shell interval.
    pub active: bool,
}

/// Spectral clipping, exposing the eigen data. When no eigenvalue binds,
/// the returned covariance is the (symmetrized) input itself.
pub fn clip_spectrum_detailed(s: &DMatrix<f64>, shell: &Shell) -> Result<ClippedSpectrum> {
    shell.validate()?;
    let (mut values, vectors) = sym_eig(s)?;
    let floor = -PSD_FLOOR * max_abs(s).max(1.0);
    if values[0] < floor {
        return Err(HwnError::domain(format!(
            "clip_spectrum: input is not positive semidefinite (eigenvalue {:e})",
            values[0]
        )));
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    let active = values.iter().any(|&v| shell.binds(v));
    let clipped = values.map(|v| shell.clip(v));
    let sigma = if active {
        spectral_apply(&values, &vectors, |v| shell.clip(v))
    } else {
        symmetrize(s)
    };
    Ok(ClippedSpectrum {
        sigma: SpdMatrix::from_trusted(sigma),
        eigenvalues: values,
        clipped,
        active,
    })
}

/// Minimizer of `log det Sigma + tr(S Sigma^{-1})` over the shell: eigenvalues
/// of `S` clipped to `[lambda_minus, lambda_plus]`, eigenvectors kept.
pub fn clip_spectrum(s: &DMatrix<f64>, shell: &Shell) -> Result<SpdMatrix> {
    Ok(clip_spectrum_detailed(s, shell)?.sigma)
}

/// How eigenvalues of a test covariance fill `[scale, scale * condition_number]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    /// Eigenvalues in geometric progression.
    #[default]
    Geometric,
    /// Square roots of the eigenvalues (the principal standard deviations)
    /// in arithmetic progression.
    LinearSd,
}

impl Spectrum {
    pub fn eigenvalues(&self, d: usize, condition_number: f64, scale: f64) -> Vec<f64> {
        if d == 1 {
            return vec![scale];
        }
        let last = (d - 1) as f64;
        (0..d)
            .map(|k| {
                let t = k as f64 / last;
                match self {
                    Spectrum::Geometric => scale * condition_number.powf(t),
                    Spectrum::LinearSd => {
                        let lo = scale.sqrt();
                        let hi = (scale * condition_number).sqrt();
                        let sd = lo + t * (hi - lo);
                        sd * sd
                    }
                }
            })
            .map(|v: f64| v.clamp(scale, scale * condition_number))
            .collect()
    }
}

/// Haar-distributed rotation: QR of a Gaussian matrix with the signs of
/// `R`'s diagonal absorbed into `Q`.
pub fn random_rotation(d: usize, rng: &mut SimRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `Q diag(s) Q^T` with `Q` a random rotation and geometrically spaced
/// eigenvalues from `scale` to `scale * condition_number`.
pub fn make_test_covariance(d: usize, condition_number: f64, scale: f64, rng: &mut SimRng) -> Result<SpdMatrix> {
    make_test_covariance_with(d, condition_number, scale, Spectrum::Geometric, rng)
}

pub fn make_test_covariance_with(
    d: usize,
    condition_number: f64,
    scale: f64,
    spectrum: Spectrum,
    rng: &mut SimRng,
) -> Result<SpdMatrix> {
    if d < 2 {
        return Err(HwnError::arg("make_test_covariance: d must be at least 2"));
    }
    if !(condition_number >= 1.0 && condition_number.is_finite()) {
        return Err(HwnError::arg("make_test_covariance: condition number must be >= 1"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(HwnError::arg("make_test_covariance: scale must be positive"));
    }
    let s = DVector::from_vec(spectrum.eigenvalues(d, condition_number, scale));
    if condition_number == 1.0 {
        return Ok(SpdMatrix::from_trusted(DMatrix::identity(d, d) * scale));
    }
    let q = random_rotation(d, rng);
    SpdMatrix::new(spectral_apply(&s, &q, |v| v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_spd(d: usize, cond: f64, seed: u64) -> SpdMatrix {
        let mut rng = SimRng::seed_from_u64(seed);
        make_test_covariance(d, cond, 0.5, &mut rng).unwrap()
    }

    #[test]
    fn vech_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(vech(&i2).unwrap().values(), &[1.0, 0.0, 1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 5.0, 5.0, 7.0]);
        assert_eq!(vech(&a).unwrap().values(), &[2.0, 5.0, 7.0]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        assert_eq!(vech(&b).unwrap().values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(mat(&vech(&b).unwrap()).unwrap(), b);
        assert_eq!(mat(&vech(&a).unwrap()).unwrap(), a);
        assert_eq!(mat(&vech(&i2).unwrap()).unwrap(), i2);
    }

    #[test]
    fn vech_errors() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(vech(&asym).is_err());
        assert!(VechVector::new(vec![1.0, 2.0]).is_err());
        assert!(mat_slice(&[1.0; 4]).is_err());
        assert_eq!(triangular_root(55), Some(10));
        assert_eq!(triangular_root(3), Some(2));
        assert_eq!(triangular_root(7), None);
    }

    #[test]
    fn eig_examples() {
        let (s, _) = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 1.0, 1.0]);
        let (s, u) = sym_eig(&DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]))).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 3.0]);
        assert_abs_diff_eq!(u[(1, 0)].abs(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(u[(0, 1)].abs(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn log_exp_examples() {
        let l = spd_log(&SpdMatrix::identity(3)).unwrap();
        assert!(l.iter().all(|v| v.abs() < 1e-15));
        let e = spd_exp(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(e.matrix(), &DMatrix::identity(2, 2));
        let e1 = std::f64::consts::E;
        let l = spd_log(&SpdMatrix::from_diagonal(&[e1, e1 * e1]).unwrap()).unwrap();
        assert_abs_diff_eq!(l[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l[(1, 1)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(cholesky(&SpdMatrix::identity(2)).unwrap(), DMatrix::identity(2, 2));
        let l = cholesky(&SpdMatrix::from_diagonal(&[4.0, 9.0]).unwrap()).unwrap();
        assert_eq!(l, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])));
        let s = random_spd(4, 50.0, 9);
        let l = cholesky(&s).unwrap();
        let r = &l * l.transpose() - s.matrix();
        assert!(max_abs(&r) < 1e-10 * max_abs(s.matrix()));
        assert!(SpdMatrix::from_diagonal(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn clip_examples() {
        let shell = Shell::new(0.03, 20.0).unwrap();
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 1.0, 50.0]));
        let c = clip_spectrum_detailed(&s, &shell).unwrap();
        assert!(c.active);
        let expect = [0.03, 1.0, 20.0];
        for (i, &diag) in expect.iter().enumerate() {
            for j in 0..3 {
                let e = if i == j { diag } else { 0.0 };
                assert_abs_diff_eq!(c.sigma.matrix()[(i, j)], e, epsilon = 1e-14);
            }
        }
        let singular = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        let c = clip_spectrum(&singular, &shell).unwrap();
        assert_abs_diff_eq!(c.matrix()[(0, 0)], 0.03, epsilon = 1e-15);
        assert_abs_diff_eq!(c.matrix()[(1, 1)], 1.0, epsilon = 1e-15);

        let interior = random_spd(3, 10.0, 1);
        let c = clip_spectrum_detailed(interior.matrix(), &shell).unwrap();
        assert!(!c.active);
        assert_eq!(c.sigma.matrix(), interior.matrix());
    }

    #[test]
    fn clip_rejects_bad_input() {
        let shell = Shell::default();
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(clip_spectrum(&asym, &shell).is_err());
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![-0.5, 1.0]));
        assert!(clip_spectrum(&neg, &shell).is_err());
        let tiny_neg = DMatrix::from_diagonal(&DVector::from_vec(vec![-1e-16, 1.0]));
        assert!(clip_spectrum(&tiny_neg, &shell).is_ok());
        assert!(Shell::new(1.0, 0.5).is_err());
        assert!(Shell::new(0.0, 0.5).is_err());
    }

    #[test]
    fn test_covariance_examples() {
        let mut rng = SimRng::seed_from_u64(5);
        let s = make_test_covariance(3, 1.0, 0.7, &mut rng).unwrap();
        assert_eq!(s.matrix(), &(DMatrix::identity(3, 3) * 0.7));

        let s = make_test_covariance(2, 10.0, 0.1, &mut rng).unwrap();
        let ev = s.eigenvalues().unwrap();
        assert_abs_diff_eq!(ev[0], 0.1, epsilon = 1e-14);
        assert_abs_diff_eq!(ev[1], 1.0, epsilon = 1e-14);

        for seed in 0..20 {
            let mut rng = SimRng::seed_from_u64(seed);
            for spectrum in [Spectrum::Geometric, Spectrum::LinearSd] {
                let s = make_test_covariance_with(5, 10.0, 0.18, spectrum, &mut rng).unwrap();
                assert!((s.condition_number().unwrap() - 10.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_sd_spacing() {
        let ev = Spectrum::LinearSd.eigenvalues(3, 9.0, 1.0);
        assert_abs_diff_eq!(ev[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ev[1], 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ev[2], 9.0, epsilon = 1e-15);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = SimRng::seed_from_u64(11);
        let q = random_rotation(6, &mut rng);
        let e = q.transpose() * &q - DMatrix::identity(6, 6);
        assert!(max_abs(&e) < 1e-13);
    }

    fn f_s(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
        let chol = sigma.clone().cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        logdet + (chol.inverse() * s).trace()
    }

    /// Brute force in the eigenbasis of S: the objective separates into
    /// scalar problems `log t + s/t` over `t in [lambda_minus, lambda_plus]`.
    #[test]
    fn clip_matches_scalar_grid_oracle() {
        let shell = Shell::new(0.03, 20.0).unwrap();
        let mut rng = SimRng::seed_from_u64(77);
        for trial in 0..30 {
            let d = 2 + trial % 2;
            let q = random_rotation(d, &mut rng);
            let raw: Vec<f64> = (0..d).map(|_| (rng.standard_normal() * 3.0).exp() * 0.5).collect();
            let s = spectral_apply(&DVector::from_vec(raw.clone()), &q, |v| v);
            let clipped = clip_spectrum(&s, &shell).unwrap();
            let best_clip = f_s(&s, clipped.matrix());

            let grid: Vec<f64> = (0..=2000)
                .map(|k| shell.lambda_minus * (shell.lambda_plus / shell.lambda_minus).powf(k as f64 / 2000.0))
                .collect();
            let (sv, _) = sym_eig(&s).unwrap();
            let mut oracle = 0.0;
            for &sj in sv.iter() {
                oracle += grid.iter().map(|&t| t.ln() + sj / t).fold(f64::INFINITY, f64::min);
            }
            assert!(best_clip <= oracle + 1e-12, "trial {trial}: {best_clip} > {oracle}");
            assert!(oracle - best_clip < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn vech_mat_round_trip_exact(vals in proptest::collection::vec(-1e6f64..1e6, 10)) {
            let b = VechVector::new(vals).unwrap();
            let a = mat(&b).unwrap();
            prop_assert_eq!(vech(&a).unwrap(), b);
        }

        #[test]
        fn clip_is_idempotent(seed in 0u64..10_000, lo in 0.01f64..0.5, width in 0.5f64..10.0) {
            let shell = Shell::new(lo, lo + width).unwrap();
            let mut rng = SimRng::seed_from_u64(seed);
            let q = random_rotation(3, &mut rng);
            let s: Vec<f64> = (0..3).map(|_| (rng.standard_normal() * 2.0).exp()).collect();
            let a = spectral_apply(&DVector::from_vec(s), &q, |v| v);
            let once = clip_spectrum(&a, &shell).unwrap();
            let twice = clip_spectrum(once.matrix(), &shell).unwrap();
            prop_assert!(max_abs(&(once.matrix() - twice.matrix())) <= 1e-12 * max_abs(once.matrix()).max(1.0));
            let ev = once.eigenvalues().unwrap();
            prop_assert!(ev[0] >= lo * (1.0 - 1e-12) && ev[2] <= (lo + width) * (1.0 + 1e-12));
        }

        #[test]
        fn log_exp_inverse(seed in 0u64..10_000, log_cond in 0.0f64..6.0) {
            let mut rng = SimRng::seed_from_u64(seed);
            let s = make_test_covariance(4, 10f64.powf(log_cond), 0.3, &mut rng).unwrap();
            let back = spd_exp(&spd_log(&s).unwrap()).unwrap();
            let err = max_abs(&(back.matrix() - s.matrix())) / max_abs(s.matrix());
            prop_assert!(err < 1e-9, "relative error {err}");
        }

        #[test]
        fn eig_reconstructs(vals in proptest::collection::vec(-10.0f64..10.0, 15)) {
            let a = mat_slice(&vals).unwrap();
            let (s, u) = sym_eig(&a).unwrap();
            for k in 1..s.len() {
                prop_assert!(s[k - 1] <= s[k]);
            }
            let r = spectral_apply(&s, &u, |v| v) - &a;
            prop_assert!(max_abs(&r) < 1e-10 * max_abs(&a).max(1.0));
            let o = u.transpose() * &u - DMatrix::identity(5, 5);
            prop_assert!(max_abs(&o) < 1e-10);
        }
    }
}
