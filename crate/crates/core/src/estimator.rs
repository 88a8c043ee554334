//! Shell-constrained profile maximum likelihood.
//!
//! The location is optimized in the global coordinate `nu = Log_o(mu)` by a
//! BFGS quasi-Newton iteration on finite-difference gradients of the profiled
//! objective, started from the sample Frechet mean. The covariance estimate is
//! the clipped tangent scatter at the optimum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HwnError, Result};
use crate::lorentz::{raw, HyperPoint};
use crate::model::Sample;
use crate::par::{map_indexed, Execution};
use crate::profile::{location_from_nu, nu_from_location, objective_at_nu, objective_gradient, profiled_objective};
use crate::rng::{derive_seed, stream, SimRng};
use crate::spd::{clip_spectrum, matrix_rows, Shell, SpdMatrix};

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK_FACTOR: f64 = 0.5;
const MAX_BACKTRACKS: usize = 50;
/// Largest step (in `nu` units) tried by a line search.
const MAX_STEP: f64 = 1.0;
/// Multi-start objectives closer than this are treated as tied.
const TIE_TOL: f64 = 1e-12;
/// Relative rounding floor of the objective. Once the decrease demanded by
/// the Armijo test drops below it, a step is accepted if it does not raise
/// the objective by more than the floor.
const NOISE_FLOOR_REL: f64 = 2e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub shell: Shell,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iters: usize,
    pub n_starts: usize,
    pub perturb_sd: f64,
    pub fd_step: f64,
    pub seed: u64,
    /// How multiple starts are scheduled.
    pub execution: Execution,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            shell: Shell::default(),
            grad_tol: 1e-6,
            step_tol: 1e-10,
            max_iters: 500,
            n_starts: 1,
            perturb_sd: 0.1,
            fd_step: 1e-6,
            seed: 0,
            execution: Execution::Sequential,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        self.shell.validate()?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(HwnError::arg(format!("fit option `{name}` must be positive, got {v}")))
            }
        };
        positive("grad_tol", self.grad_tol)?;
        positive("step_tol", self.step_tol)?;
        positive("fd_step", self.fd_step)?;
        if !(self.perturb_sd >= 0.0 && self.perturb_sd.is_finite()) {
            return Err(HwnError::arg("fit option `perturb_sd` must be non-negative"));
        }
        if self.n_starts == 0 {
            return Err(HwnError::arg("fit option `n_starts` must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(HwnError::arg("fit option `max_iters` must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub mu_hat: HyperPoint,
    pub sigma_hat: SpdMatrix,
    pub nu_hat: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub shell_active: bool,
    pub n_starts_used: usize,
    /// Inf-norm of the finite-difference gradient at `nu_hat`.
    pub grad_norm: f64,
}

#[derive(Serialize)]
struct FitResultJson<'a> {
    mu_hat: &'a [f64],
    sigma_hat: Vec<Vec<f64>>,
    nu_hat: &'a [f64],
    objective: f64,
    iterations: usize,
    converged: bool,
    shell_active: bool,
    n_starts_used: usize,
    grad_norm: f64,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        let j = FitResultJson {
            mu_hat: self.mu_hat.coords(),
            sigma_hat: matrix_rows(self.sigma_hat.matrix()),
            nu_hat: self.nu_hat.as_slice(),
            objective: self.objective,
            iterations: self.iterations,
            converged: self.converged,
            shell_active: self.shell_active,
            n_starts_used: self.n_starts_used,
            grad_norm: self.grad_norm,
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }
}

/// Sample Frechet mean by the fixed-point iteration
/// `mu <- Exp_mu(mean_i Log_mu(X_i))`, started at the projected ambient mean.
pub fn frechet_mean(data: &Sample, tol: f64, max_iters: usize) -> Result<HyperPoint> {
    let d = data.dim();
    let n = data.len() as f64;
    let mut mu = vec![0.0; d + 1];
    for x in data.iter() {
        for (m, c) in mu.iter_mut().zip(x.coords()) {
            *m += c / n;
        }
    }
    raw::project(&mut mu);

    let mut step = vec![0.0; d + 1];
    let mut log = vec![0.0; d + 1];
    let mut next = vec![0.0; d + 1];
    for _ in 0..max_iters.max(1) {
        step.iter_mut().for_each(|s| *s = 0.0);
        for x in data.iter() {
            raw::log(&mu, x.coords(), &mut log);
            for (s, l) in step.iter_mut().zip(&log) {
                *s += l / n;
            }
        }
        // Remove the normal component accumulated by round-off.
        let ip = raw::inner(&mu, &step);
        for (s, m) in step.iter_mut().zip(&mu) {
            *s += ip * m;
        }
        if raw::tangent_norm(&step) <= tol {
            return Ok(HyperPoint::from_raw(mu));
        }
        raw::exp(&mu, &step, &mut next);
        std::mem::swap(&mut mu, &mut next);
    }
    Err(HwnError::FrechetNonConvergence {
        iters: max_iters,
        last: Box::new(HyperPoint::from_raw(mu)),
    })
}

/// Frechet mean and the clipped tangent scatter there. A Frechet iteration
/// that stalls above tolerance still yields a usable starting point, so its
/// last iterate is kept.
pub fn two_step_init(data: &Sample, shell: &Shell) -> Result<(HyperPoint, SpdMatrix)> {
    let mu = match frechet_mean(data, 1e-9, 200) {
        Ok(m) => m,
        Err(HwnError::FrechetNonConvergence { last, .. }) => *last,
        Err(e) => return Err(e),
    };
    let scatter = crate::profile::tangent_scatter(&mu, data)?;
    let sigma = clip_spectrum(&scatter, shell)?;
    Ok((mu, sigma))
}

/// Result of one quasi-Newton run.
#[derive(Debug, Clone)]
struct LocalMin {
    nu: DVector<f64>,
    objective: f64,
    grad_inf: f64,
    iterations: usize,
    converged: bool,
}

/// BFGS with inverse-Hessian updates and Armijo backtracking.
fn quasi_newton(start: DVector<f64>, data: &Sample, opts: &FitOptions) -> Result<LocalMin> {
    let d = start.len();
    let f = |nu: &DVector<f64>| objective_at_nu(nu.as_slice(), data, &opts.shell);
    let grad = |nu: &DVector<f64>| objective_gradient(nu.as_slice(), data, &opts.shell, opts.fd_step);

    let mut x = start;
    let mut fx = f(&x)?;
    let mut g = grad(&x)?;
    let mut h_inv = DMatrix::<f64>::identity(d, d);
    let mut first_update = true;
    let mut iterations = 0;
    let mut step_converged = false;

    loop {
        let g_inf = g.amax();
        if g_inf <= opts.grad_tol {
            return Ok(LocalMin {
                nu: x,
                objective: fx,
                grad_inf: g_inf,
                iterations,
                converged: true,
            });
        }
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;

        let mut p = -(&h_inv * &g);
        let mut slope = g.dot(&p);
        if slope.is_nan() || slope >= 0.0 {
            h_inv = DMatrix::identity(d, d);
            first_update = true;
            p = -g.clone();
            slope = g.dot(&p);
        }
        let p_norm = p.norm();
        if p_norm > MAX_STEP {
            p *= MAX_STEP / p_norm;
            slope *= MAX_STEP / p_norm;
        }

        let floor = NOISE_FLOOR_REL * fx.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let trial = &x + &p * t;
            if let Ok(ft) = f(&trial) {
                let armijo = ft <= fx + ARMIJO_C * t * slope;
                let within_noise = -t * slope < floor && ft <= fx + floor;
                if armijo || within_noise {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            t *= BACKTRACK_FACTOR;
        }
        let Some((x_new, f_new)) = accepted else {
            break;
        };
        debug_assert!(f_new <= fx + floor, "line search accepted an ascent step");

        let s = &x_new - &x;
        let rel_step = s.amax() / x.amax().max(1.0);
        let g_new = grad(&x_new)?;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        x = x_new;
        fx = f_new;
        g = g_new;

        if rel_step <= opts.step_tol {
            step_converged = true;
            break;
        }
        if sy > 1e-12 * s.norm() * y.norm() {
            if first_update {
                // Rescale the initial inverse Hessian to the observed curvature.
                h_inv *= sy / y.dot(&y);
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
    }

    let g_inf = g.amax();
    Ok(LocalMin {
        nu: x,
        objective: fx,
        grad_inf: g_inf,
        iterations,
        converged: step_converged || g_inf <= opts.grad_tol,
    })
}

/// Shell-constrained profile MLE.
pub fn fit(data: &Sample, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    if data.dim() < 2 {
        return Err(HwnError::arg("fit requires d >= 2"));
    }
    let (mu_f, _) = two_step_init(data, &opts.shell)?;
    let nu0 = nu_from_location(&mu_f);
    let d = nu0.len();

    let starts: Vec<DVector<f64>> = (0..opts.n_starts)
        .map(|k| {
            if k == 0 {
                nu0.clone()
            } else {
                let mut rng = SimRng::seed_from_u64(derive_seed(derive_seed(opts.seed, stream::MULTISTART), k as u64));
                DVector::from_fn(d, |j, _| nu0[j] + opts.perturb_sd * rng.standard_normal())
            }
        })
        .collect();

    let runs = map_indexed(opts.execution, starts.len(), |k| {
        quasi_newton(starts[k].clone(), data, opts)
    });

    let mut best: Option<LocalMin> = None;
    let mut any_converged = false;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(r) => {
                any_converged |= r.converged;
                let better = match &best {
                    None => true,
                    // Converged runs beat unconverged ones; then smallest objective, first index on ties.
                    Some(b) => {
                        (r.converged && !b.converged)
                            || (r.converged == b.converged && r.objective < b.objective - TIE_TOL)
                    }
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let best = match (best, first_err) {
        (Some(b), _) => b,
        (None, Some(e)) => return Err(e),
        (None, None) => return Err(HwnError::numeric("no optimizer starts were run")),
    };

    let mu_hat = location_from_nu(best.nu.as_slice());
    let profile = profiled_objective(&mu_hat, data, &opts.shell)?;
    let result = FitResult {
        mu_hat,
        sigma_hat: profile.sigma_profile,
        nu_hat: best.nu,
        objective: profile.objective,
        iterations: best.iterations,
        converged: best.converged,
        shell_active: profile.shell_active,
        n_starts_used: opts.n_starts,
        grad_norm: best.grad_inf,
    };
    if any_converged {
        Ok(result)
    } else {
        Err(HwnError::FitFailed { best: Box::new(result) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorentz::distance;
    use crate::model::{sample, HwnParams};
    use crate::profile::covariance_profile;
    use crate::spd::make_test_covariance_with;
    use crate::spd::Spectrum;
    use approx::assert_abs_diff_eq;

    fn simulate(d: usize, n: usize, seed: u64) -> (HwnParams, Sample) {
        let mut rng = SimRng::seed_from_u64(seed);
        let sigma = make_test_covariance_with(d, 10.0, 0.18, Spectrum::LinearSd, &mut rng).unwrap();
        let dir: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let len = raw::euclid_norm(&dir);
        let nu: Vec<f64> = dir.iter().map(|v| 3.0 * v / len).collect();
        let p = HwnParams::new(location_from_nu(&nu), sigma).unwrap();
        let s = sample(&p, n, &mut rng).unwrap();
        (p, s)
    }

    #[test]
    fn frechet_examples() {
        let x = location_from_nu(&[0.4, 1.0]);
        let m = frechet_mean(&Sample::new(vec![x.clone()]).unwrap(), 1e-9, 100).unwrap();
        assert!(distance(&m, &x).unwrap() < 1e-12);

        let a = location_from_nu(&[0.4, 1.0]);
        let b = location_from_nu(&[-2.0, 0.3]);
        let m = frechet_mean(&Sample::new(vec![a.clone(), b.clone()]).unwrap(), 1e-12, 200).unwrap();
        let da = distance(&m, &a).unwrap();
        let db = distance(&m, &b).unwrap();
        assert!((da - db).abs() < 1e-9);
        assert_abs_diff_eq!(da + db, distance(&a, &b).unwrap(), epsilon = 1e-9);

        let p = location_from_nu(&[1.5, 0.0]);
        let q = location_from_nu(&[-1.5, 0.0]);
        let m = frechet_mean(&Sample::new(vec![p, q]).unwrap(), 1e-12, 100).unwrap();
        assert!(distance(&m, &HyperPoint::origin(2)).unwrap() < 1e-9);
    }

    #[test]
    fn frechet_reports_non_convergence() {
        let (_, s) = simulate(2, 50, 1);
        match frechet_mean(&s, 0.0, 3) {
            Err(HwnError::FrechetNonConvergence { iters, .. }) => assert_eq!(iters, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_step_examples() {
        let mu = location_from_nu(&[1.0, -0.5]);
        let p = HwnParams::new(mu.clone(), SpdMatrix::from_diagonal(&[1e-10, 1e-10]).unwrap()).unwrap();
        let s = sample(&p, 30, &mut SimRng::seed_from_u64(2)).unwrap();
        let (m, _) = two_step_init(&s, &Shell::default()).unwrap();
        assert!(distance(&m, &mu).unwrap() < 1e-3);

        let (_, s) = simulate(3, 200, 3);
        let (m1, sig1) = two_step_init(&s, &Shell::default()).unwrap();
        let (m2, sig2) = two_step_init(&s, &Shell::default()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(sig1, sig2);
        assert_eq!(sig1.matrix(), &crate::profile::tangent_scatter(&m1, &s).unwrap());
    }

    #[test]
    fn repeated_point_forces_lower_shell() {
        let x = location_from_nu(&[0.7, 0.2, -0.4]);
        let s = Sample::new(vec![x.clone(); 12]).unwrap();
        let opts = FitOptions::default();
        let r = fit(&s, &opts).unwrap();
        assert!(distance(&r.mu_hat, &x).unwrap() < 1e-9);
        let lo = opts.shell.lambda_minus;
        let expect = DMatrix::identity(3, 3) * lo;
        assert!((r.sigma_hat.matrix() - expect).amax() < 1e-12);
        assert!(r.shell_active);
    }

    #[test]
    fn recovers_truth_at_moderate_n() {
        for seed in 0..5 {
            let (p, s) = simulate(2, 1000, 100 + seed);
            let r = fit(&s, &FitOptions::default()).unwrap();
            assert!(r.converged);
            assert!(distance(&r.mu_hat, p.mu()).unwrap() <= 0.2);
            let rel = (r.sigma_hat.matrix() - p.sigma().matrix()).norm() / p.sigma().matrix().norm();
            assert!(rel <= 0.2, "relative covariance error {rel}");
        }
    }

    #[test]
    fn fit_invariants() {
        let (_, s) = simulate(3, 300, 7);
        let opts = FitOptions::default();
        let r = fit(&s, &opts).unwrap();
        // Self-consistency with the profile at the reported coordinate.
        let v = profiled_objective(&location_from_nu(r.nu_hat.as_slice()), &s, &opts.shell).unwrap();
        assert_eq!(v.objective, r.objective);
        let cp = covariance_profile(&r.mu_hat, &s, &opts.shell).unwrap();
        assert_eq!(cp.sigma_profile, r.sigma_hat);
        // First-order condition.
        let g = objective_gradient(r.nu_hat.as_slice(), &s, &opts.shell, opts.fd_step).unwrap();
        assert!(g.amax() <= opts.grad_tol);
        assert!(r.converged);
        // Improvement over the initializer.
        let (mu_f, _) = two_step_init(&s, &opts.shell).unwrap();
        let f0 = profiled_objective(&mu_f, &s, &opts.shell).unwrap().objective;
        assert!(r.objective <= f0);
    }

    #[test]
    fn multistart_is_deterministic_and_no_worse() {
        let (_, s) = simulate(2, 150, 8);
        let single = fit(&s, &FitOptions::default()).unwrap();
        let opts = FitOptions {
            n_starts: 4,
            seed: 99,
            execution: Execution::Parallel,
            ..FitOptions::default()
        };
        let a = fit(&s, &opts).unwrap();
        let b = fit(
            &s,
            &FitOptions {
                execution: Execution::Sequential,
                ..opts.clone()
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_starts_used, 4);
        assert!(a.objective <= single.objective + 1e-9);
    }

    #[test]
    fn degenerate_small_sample_is_well_posed() {
        let (_, s) = simulate(4, 3, 9);
        let r = fit(&s, &FitOptions::default()).unwrap();
        assert!(r.shell_active);
        assert!(r.objective.is_finite());
    }

    #[test]
    fn unconverged_fit_reports_best_iterate() {
        let (_, s) = simulate(2, 200, 10);
        let opts = FitOptions {
            max_iters: 1,
            grad_tol: 1e-14,
            ..FitOptions::default()
        };
        match fit(&s, &opts) {
            Err(HwnError::FitFailed { best }) => assert!(!best.converged),
            other => panic!("expected a fit failure, got {other:?}"),
        }
    }

    /// A Lorentz boost taking `o` to `p` is an isometry; the fit should commute with it.
    #[test]
    fn equivariance_under_boost() {
        let (_, s) = simulate(2, 400, 11);
        let p = location_from_nu(&[0.8, -0.6]);
        let boost = |x: &HyperPoint| -> HyperPoint {
            let pc = p.coords();
            let xs = x.coords();
            let d = xs.len() - 1;
            let sp_dot: f64 = (1..=d).map(|j| pc[j] * xs[j]).sum();
            let mut out = vec![0.0; d + 1];
            out[0] = pc[0] * xs[0] + sp_dot;
            for j in 1..=d {
                out[j] = pc[j] * xs[0] + xs[j] + pc[j] * sp_dot / (1.0 + pc[0]);
            }
            raw::project(&mut out);
            HyperPoint::from_raw(out)
        };
        assert!(distance(&boost(&HyperPoint::origin(2)), &p).unwrap() < 1e-12);
        let moved = Sample::new(s.iter().map(&boost).collect()).unwrap();
        let opts = FitOptions::default();
        let r = fit(&s, &opts).unwrap();
        let rm = fit(&moved, &opts).unwrap();
        assert!(distance(&rm.mu_hat, &boost(&r.mu_hat)).unwrap() <= 1e-4);
    }

    #[test]
    fn json_has_fields() {
        let (_, s) = simulate(2, 100, 12);
        let r = fit(&s, &FitOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in [
            "mu_hat",
            "sigma_hat",
            "nu_hat",
            "objective",
            "iterations",
            "converged",
            "shell_active",
            "n_starts_used",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
