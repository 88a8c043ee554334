//! Covariance-profiled negative log-likelihood.
//!
//! For a candidate location `mu`, the covariance is profiled out exactly by
//! clipping the spectrum of the tangent scatter `S_n(mu)` onto the shell.
//! What remains is a function of `mu` alone, minimized by the estimator in
//! the global coordinate `nu = Log_o(mu)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{HwnError, Result};
use crate::lorentz::{raw, HyperPoint};
use crate::model::Sample;
use crate::spd::{clip_spectrum_detailed, symmetrize, Shell, SpdMatrix};

/// Value of the shell-constrained profile at one location.
#[derive(Debug, Clone)]
pub struct ProfiledValue {
    /// `Q_n^K(mu)`, to be minimized.
    pub objective: f64,
    pub sigma_profile: SpdMatrix,
    /// `S_n(mu)`, symmetrized.
    pub scatter: DMatrix<f64>,
    pub shell_active: bool,
}

fn check_dims(mu: &HyperPoint, data: &Sample) -> Result<()> {
    if mu.dim() != data.dim() {
        return Err(HwnError::arg(format!(
            "location lives in H^{} but the sample in H^{}",
            mu.dim(),
            data.dim()
        )));
    }
    Ok(())
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Scatter and the Jacobian sum `sum_i phi(|T_mu(X_i)|)` in one pass. Both
/// are accumulated with compensation so that the objective stays smooth at
/// the scale of the finite-difference steps.
fn scatter_and_phi(mu: &[f64], data: &Sample) -> (DMatrix<f64>, f64) {
    let d = mu.len() - 1;
    let mut acc = vec![Compensated::default(); d * d];
    let mut t = vec![0.0; d];
    let mut phi_sum = Compensated::default();
    for x in data.iter() {
        raw::tangent_coords(mu, x.coords(), &mut t);
        for j in 0..d {
            let tj = t[j];
            for i in j..d {
                acc[i + j * d].add(t[i] * tj);
            }
        }
        phi_sum.add(raw::phi(raw::euclid_norm(&t)));
    }
    let n = data.len() as f64;
    let mut s = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        for i in j..d {
            let v = acc[i + j * d].value() / n;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    (s, phi_sum.value())
}

/// `S_n(mu) = (1/n) sum_i T_mu(X_i) T_mu(X_i)^T`.
pub fn tangent_scatter(mu: &HyperPoint, data: &Sample) -> Result<DMatrix<f64>> {
    check_dims(mu, data)?;
    Ok(symmetrize(&scatter_and_phi(mu.coords(), data).0))
}

/// `|T_mu(X_i)| = rho(mu, X_i)` for every point.
pub fn tangent_radii(mu: &HyperPoint, data: &Sample) -> Vec<f64> {
    let d = mu.dim();
    let mut t = vec![0.0; d];
    data.iter()
        .map(|x| {
            raw::tangent_coords(mu.coords(), x.coords(), &mut t);
            raw::euclid_norm(&t)
        })
        .collect()
}

fn profile_from_parts(scatter: DMatrix<f64>, phi_sum: f64, n: usize, shell: &Shell) -> Result<ProfiledValue> {
    let d = scatter.nrows();
    let clipped = clip_spectrum_detailed(&scatter, shell)?;
    let half_n = 0.5 * n as f64;
    let mut log_det = 0.0;
    let mut trace = 0.0;
    for (s, c) in clipped.eigenvalues.iter().zip(clipped.clipped.iter()) {
        log_det += c.ln();
        trace += s / c;
    }
    if !clipped.active {
        // Unclipped spectrum: tr(S S^{-1}) = d exactly.
        trace = d as f64;
    }
    let objective = half_n * log_det + half_n * trace + (d as f64 - 1.0) * phi_sum;
    if !objective.is_finite() {
        return Err(HwnError::numeric("profiled objective is not finite"));
    }
    Ok(ProfiledValue {
        objective,
        sigma_profile: clipped.sigma,
        scatter,
        shell_active: clipped.active,
    })
}

/// Shell-constrained covariance profile at `mu` (the objective is filled in too).
pub fn covariance_profile(mu: &HyperPoint, data: &Sample, shell: &Shell) -> Result<ProfiledValue> {
    profiled_objective(mu, data, shell)
}

/// `Q_n^K(mu) = (n/2) log det Sigma~ + (n/2) tr(S_n Sigma~^{-1}) + (d-1) sum_i phi(|T_mu(X_i)|)`,
/// evaluated in the eigenbasis of `S_n(mu)`.
pub fn profiled_objective(mu: &HyperPoint, data: &Sample, shell: &Shell) -> Result<ProfiledValue> {
    check_dims(mu, data)?;
    let (scatter, phi_sum) = scatter_and_phi(mu.coords(), data);
    profile_from_parts(scatter, phi_sum, data.len(), shell)
}

/// Unconstrained practical criterion `(n/2) log det S_n(mu) + (d-1) sum phi`;
/// requires a positive definite scatter.
pub fn practical_objective(mu: &HyperPoint, data: &Sample) -> Result<f64> {
    check_dims(mu, data)?;
    let (scatter, phi_sum) = scatter_and_phi(mu.coords(), data);
    let chol = scatter
        .cholesky()
        .ok_or_else(|| HwnError::domain("tangent scatter is singular"))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * data.len() as f64 * log_det + (mu.dim() as f64 - 1.0) * phi_sum)
}

/// `mu(nu) = Exp_o((0, nu))`.
pub fn location_from_nu(nu: &[f64]) -> HyperPoint {
    let mut c = vec![0.0; nu.len() + 1];
    raw::exp_origin(nu, &mut c);
    HyperPoint::from_raw(c)
}

/// `nu = Log_o(mu)` as a plain vector.
pub fn nu_from_location(mu: &HyperPoint) -> DVector<f64> {
    let o = HyperPoint::origin(mu.dim());
    let mut v = vec![0.0; mu.dim() + 1];
    raw::log(o.coords(), mu.coords(), &mut v);
    DVector::from_column_slice(&v[1..])
}

/// Objective in the global coordinate.
pub fn objective_at_nu(nu: &[f64], data: &Sample, shell: &Shell) -> Result<f64> {
    if nu.len() != data.dim() {
        return Err(HwnError::arg("coordinate dimension does not match the sample"));
    }
    let mu = location_from_nu(nu);
    let (scatter, phi_sum) = scatter_and_phi(mu.coords(), data);
    Ok(profile_from_parts(scatter, phi_sum, data.len(), shell)?.objective)
}

/// Central-difference gradient of `nu -> Q_n^K(Exp_o((0, nu)))` with
/// per-coordinate step `step * max(1, |nu_j|)`.
pub fn objective_gradient(nu: &[f64], data: &Sample, shell: &Shell, step: f64) -> Result<DVector<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(HwnError::arg("finite-difference step must be positive"));
    }
    let mut probe = nu.to_vec();
    let mut grad = DVector::zeros(nu.len());
    for j in 0..nu.len() {
        let h = step * nu[j].abs().max(1.0);
        probe[j] = nu[j] + h;
        let fp = objective_at_nu(&probe, data, shell)?;
        probe[j] = nu[j] - h;
        let fm = objective_at_nu(&probe, data, shell)?;
        probe[j] = nu[j];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(HwnError::numeric("non-finite objective at a gradient probe"));
        }
        grad[j] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorentz::wrap_from_origin;
    use crate::model::{sample, HwnParams};
    use crate::rng::SimRng;
    use crate::spd::{make_test_covariance, random_rotation, spectral_apply};
    use approx::assert_abs_diff_eq;

    fn data(d: usize, n: usize, seed: u64) -> (HwnParams, Sample) {
        let mut rng = SimRng::seed_from_u64(seed);
        let sigma = make_test_covariance(d, 10.0, 0.18, &mut rng).unwrap();
        let nu: Vec<f64> = (0..d).map(|j| 0.5 + 0.25 * j as f64).collect();
        let p = HwnParams::new(location_from_nu(&nu), sigma).unwrap();
        let s = sample(&p, n, &mut rng).unwrap();
        (p, s)
    }

    #[test]
    fn scatter_examples() {
        let mu = location_from_nu(&[0.3, 0.4]);
        let same = Sample::new(vec![mu.clone(); 4]).unwrap();
        assert!(tangent_scatter(&mu, &same).unwrap().iter().all(|&v| v == 0.0));

        let x = wrap_from_origin(&mu, &[1.0, 0.0]).unwrap();
        let one = Sample::new(vec![x]).unwrap();
        let s = tangent_scatter(&mu, &one).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[(0, 1)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn scatter_converges_to_sigma() {
        let (p, s) = data(2, 50_000, 1);
        let sc = tangent_scatter(p.mu(), &s).unwrap();
        let err = (sc - p.sigma().matrix()).norm() / p.sigma().matrix().norm();
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn profile_examples() {
        let shell = Shell::new(0.03, 20.0).unwrap();
        let (p, s) = data(3, 400, 2);
        let v = covariance_profile(p.mu(), &s, &shell).unwrap();
        assert!(!v.shell_active);
        assert_eq!(v.sigma_profile.matrix(), &v.scatter);

        // Data whose scatter at mu is diag(0.01, 50).
        let mu = location_from_nu(&[0.2, -0.1]);
        let a = 0.02f64.sqrt();
        let pts = vec![
            wrap_from_origin(&mu, &[a, 0.0]).unwrap(),
            wrap_from_origin(&mu, &[-a, 0.0]).unwrap(),
            wrap_from_origin(&mu, &[0.0, 10.0]).unwrap(),
            wrap_from_origin(&mu, &[0.0, -10.0]).unwrap(),
        ];
        let sample = Sample::new(pts).unwrap();
        let v = covariance_profile(&mu, &sample, &shell).unwrap();
        assert!(v.shell_active);
        assert_abs_diff_eq!(v.scatter[(0, 0)], 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(v.scatter[(1, 1)], 50.0, epsilon = 1e-7);
        let sig = v.sigma_profile.matrix();
        assert_abs_diff_eq!(sig[(0, 0)], 0.03, epsilon = 1e-9);
        assert_abs_diff_eq!(sig[(1, 1)], 20.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sig[(0, 1)], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn singular_scatter_is_floored() {
        let shell = Shell::new(0.03, 20.0).unwrap();
        let mu = location_from_nu(&[0.0, 0.0]);
        let pts = vec![
            wrap_from_origin(&mu, &[0.5, 0.5]).unwrap(),
            wrap_from_origin(&mu, &[-0.5, -0.5]).unwrap(),
        ];
        let v = covariance_profile(&mu, &Sample::new(pts).unwrap(), &shell).unwrap();
        assert!(v.shell_active);
        let ev = v.sigma_profile.eigenvalues().unwrap();
        assert_abs_diff_eq!(ev[0], 0.03, epsilon = 1e-12);
    }

    #[test]
    fn single_point_at_mu() {
        let shell = Shell::new(0.03, 20.0).unwrap();
        for d in [2usize, 4] {
            let mu = location_from_nu(&vec![0.3; d]);
            let v = profiled_objective(&mu, &Sample::new(vec![mu.clone()]).unwrap(), &shell).unwrap();
            assert_abs_diff_eq!(v.objective, 0.5 * d as f64 * 0.03f64.ln(), epsilon = 1e-13);
        }
    }

    #[test]
    fn interior_matches_practical_objective() {
        let shell = Shell::new(0.03, 20.0).unwrap();
        let (p, s) = data(3, 300, 3);
        for k in 0..10 {
            let mu = wrap_from_origin(p.mu(), &[0.02 * k as f64, -0.01 * k as f64, 0.0]).unwrap();
            let v = profiled_objective(&mu, &s, &shell).unwrap();
            assert!(!v.shell_active);
            let q = practical_objective(&mu, &s).unwrap();
            let nd2 = 0.5 * (s.len() * 3) as f64;
            assert!((v.objective - (q + nd2)).abs() <= 1e-9 * v.objective.abs());
        }
    }

    fn f_profile(mu: &HyperPoint, s: &Sample, sigma: &DMatrix<f64>) -> f64 {
        let n = s.len() as f64;
        let d = mu.dim() as f64;
        let sc = tangent_scatter(mu, s).unwrap();
        let chol = sigma.clone().cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let phi: f64 = tangent_radii(mu, s).iter().map(|&r| raw::phi(r)).sum();
        0.5 * n * logdet + 0.5 * n * (chol.inverse() * sc).trace() + (d - 1.0) * phi
    }

    /// Random-search oracle for the inner minimization over the shell.
    #[test]
    fn profile_beats_random_shell_covariances() {
        let shell = Shell::new(0.03, 20.0).unwrap();
        let (_, s) = data(2, 10, 4);
        let mut rng = SimRng::seed_from_u64(40);
        for _ in 0..20 {
            let nu = [rng.standard_normal(), rng.standard_normal()];
            let mu = location_from_nu(&nu);
            let q = profiled_objective(&mu, &s, &shell).unwrap().objective;
            for _ in 0..200 {
                let rot = random_rotation(2, &mut rng);
                let lo = shell.lambda_minus.ln();
                let hi = shell.lambda_plus.ln();
                let ev: Vec<f64> = (0..2).map(|_| (lo + (hi - lo) * rng.uniform_open0()).exp()).collect();
                let cand = spectral_apply(&DVector::from_vec(ev), &rot, |v| v);
                assert!(q <= f_profile(&mu, &s, &cand) + 1e-9);
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let shell = Shell::default();
        let (p, s) = data(2, 50, 5);
        let mut pts = s.points().to_vec();
        pts.reverse();
        let rev = Sample::new(pts).unwrap();
        let mu = wrap_from_origin(p.mu(), &[0.1, 0.1]).unwrap();
        let a = profiled_objective(&mu, &s, &shell).unwrap().objective;
        let b = profiled_objective(&mu, &rev, &shell).unwrap().objective;
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    /// Five-point stencil with a larger step as an independent gradient oracle.
    #[test]
    fn gradient_matches_five_point_stencil() {
        let shell = Shell::default();
        let (p, s) = data(3, 200, 6);
        let base = nu_from_location(p.mu());
        let mut rng = SimRng::seed_from_u64(60);
        for _ in 0..5 {
            let nu: Vec<f64> = base.iter().map(|b| b + 0.2 * rng.standard_normal()).collect();
            let g = objective_gradient(&nu, &s, &shell, 1e-6).unwrap();
            for j in 0..3 {
                let h = 1e-3;
                let f = |t: f64| {
                    let mut v = nu.clone();
                    v[j] += t;
                    objective_at_nu(&v, &s, &shell).unwrap()
                };
                let oracle = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
                assert!(
                    (g[j] - oracle).abs() <= 1e-5 * oracle.abs().max(1.0),
                    "{} vs {}",
                    g[j],
                    oracle
                );
            }
        }
    }

    #[test]
    fn symmetric_data_has_zero_gradient_component() {
        let shell = Shell::default();
        let mu = location_from_nu(&[0.0, 0.0]);
        let pts: Vec<HyperPoint> = [[0.5, 0.2], [-0.5, 0.2], [0.3, -0.4], [-0.3, -0.4]]
            .iter()
            .map(|u| wrap_from_origin(&mu, u).unwrap())
            .collect();
        let s = Sample::new(pts).unwrap();
        let g = objective_gradient(&[0.0, 0.0], &s, &shell, 1e-6).unwrap();
        assert!(g[0].abs() < 1e-8, "{}", g[0]);
        assert!(objective_gradient(&[0.0, 0.0], &s, &shell, 0.0).is_err());
    }
}
