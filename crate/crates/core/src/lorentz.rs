//! Lorentz (hyperboloid) model of hyperbolic space `H^d`.
//!
//! Points live on the upper sheet `{x in R^{d+1} : <x,x>_L = -1, x_0 > 0}`
//! with `<x,y>_L = -x_0 y_0 + sum_j x_j y_j`. The origin is `o = (1, 0, ..., 0)`
//! and `T_o H^d` is identified with `R^d` through `(0, v) <-> v`.
//!
//! The checked API works with [`HyperPoint`] / [`TangentVec`]; the hot loops of
//! the estimator use the slice-level functions in [`raw`], which skip
//! validation and allocation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{HwnError, Result};

/// Tolerance on `<x,x>_L + 1` accepted when constructing a point, relative to `x_0^2`.
const POINT_TOL: f64 = 1e-8;
/// Tolerance on `<base, v>_L` accepted when constructing a tangent vector.
const TANGENT_TOL: f64 = 1e-8;
/// Below this radius exp/log use their series branches.
const SMALL_RADIUS: f64 = 1e-8;
const PHI_SERIES_MAX: f64 = 1e-3;
const PHI_DIRECT_MAX: f64 = 20.0;

/// Lorentz bilinear form on ambient coordinates.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(HwnError::arg(format!(
            "lorentz_inner: length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(HwnError::arg("lorentz_inner: ambient length must be at least 3"));
    }
    Ok(raw::inner(x, y))
}

/// A point of `H^d` in ambient coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct HyperPoint {
    coords: DVector<f64>,
}

impl HyperPoint {
    /// Validates the hyperboloid constraint (loosely) and re-projects.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() < 3 {
            return Err(HwnError::arg("hyperbolic dimension must be at least 2"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(HwnError::numeric("non-finite point coordinates"));
        }
        if coords[0] <= 0.0 {
            return Err(HwnError::arg("point is not on the upper sheet (x0 <= 0)"));
        }
        let q = raw::inner(&coords, &coords);
        if (q + 1.0).abs() > POINT_TOL * coords[0] * coords[0] {
            return Err(HwnError::arg(format!("point is off the hyperboloid: <x,x>_L = {q}")));
        }
        project_to_hyperboloid(&coords)
    }

    /// Wraps coordinates already known to satisfy the constraint.
    pub(crate) fn from_raw(coords: Vec<f64>) -> Self {
        HyperPoint {
            coords: DVector::from_vec(coords),
        }
    }

    pub fn origin(d: usize) -> Self {
        let mut c = vec![0.0; d + 1];
        c[0] = 1.0;
        HyperPoint::from_raw(c)
    }

    /// Intrinsic dimension `d`.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn coords(&self) -> &[f64] {
        self.coords.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords.as_slice()[1..]
    }
}

impl TryFrom<Vec<f64>> for HyperPoint {
    type Error = HwnError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        HyperPoint::new(v)
    }
}

impl From<HyperPoint> for Vec<f64> {
    fn from(p: HyperPoint) -> Vec<f64> {
        p.coords.as_slice().to_vec()
    }
}

/// A tangent vector at `base`, in ambient coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVec {
    base: HyperPoint,
    vec: DVector<f64>,
}

impl TangentVec {
    /// Checks Lorentz orthogonality to `base`, then removes the residual
    /// normal component (`v <- v + <base,v>_L base`).
    pub fn new(base: HyperPoint, vec: Vec<f64>) -> Result<Self> {
        if vec.len() != base.coords.len() {
            return Err(HwnError::arg(format!(
                "tangent vector length {} does not match ambient length {}",
                vec.len(),
                base.coords.len()
            )));
        }
        if vec.iter().any(|c| !c.is_finite()) {
            return Err(HwnError::numeric("non-finite tangent vector"));
        }
        let scale = base.coords[0] * (1.0 + raw::euclid_norm(&vec));
        let ip = raw::inner(base.coords(), &vec);
        if ip.abs() > TANGENT_TOL * scale {
            return Err(HwnError::arg(format!(
                "vector is not tangent at the base point: <base,v>_L = {ip}"
            )));
        }
        let mut vec = vec;
        for (v, b) in vec.iter_mut().zip(base.coords()) {
            *v += ip * b;
        }
        Ok(TangentVec {
            base,
            vec: DVector::from_vec(vec),
        })
    }

    pub(crate) fn from_raw(base: HyperPoint, vec: Vec<f64>) -> Self {
        TangentVec {
            base,
            vec: DVector::from_vec(vec),
        }
    }

    pub fn zero(base: HyperPoint) -> Self {
        let n = base.coords.len();
        TangentVec::from_raw(base, vec![0.0; n])
    }

    pub fn base(&self) -> &HyperPoint {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        self.vec.as_slice()
    }

    /// Riemannian norm `sqrt(<v,v>_L)`.
    pub fn norm(&self) -> f64 {
        raw::tangent_norm(self.vec.as_slice())
    }
}

/// Coordinates in `T_o H^d ~ R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentCoords {
    values: DVector<f64>,
}

impl TangentCoords {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|c| !c.is_finite()) {
            return Err(HwnError::numeric("non-finite tangent coordinates"));
        }
        Ok(TangentCoords {
            values: DVector::from_vec(values),
        })
    }

    pub fn values(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// `(sqrt(1 + |y_{1:d}|^2), y_{1:d})`: the point of the upper sheet with the
/// same spatial part as `y`.
pub fn project_to_hyperboloid(y: &[f64]) -> Result<HyperPoint> {
    if y.len() < 3 {
        return Err(HwnError::arg("hyperbolic dimension must be at least 2"));
    }
    if y[1..].iter().any(|c| !c.is_finite()) {
        return Err(HwnError::numeric("non-finite spatial coordinates"));
    }
    let mut c = y.to_vec();
    raw::project(&mut c);
    Ok(HyperPoint::from_raw(c))
}

fn check_same_dim(x: &HyperPoint, y: &HyperPoint) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(HwnError::arg(format!(
            "dimension mismatch: H^{} vs H^{}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Geodesic distance `arcosh(max(1, -<x,y>_L))`.
pub fn distance(x: &HyperPoint, y: &HyperPoint) -> Result<f64> {
    check_same_dim(x, y)?;
    Ok(raw::distance(x.coords(), y.coords()))
}

/// Exponential map at `mu`.
pub fn exp_map(mu: &HyperPoint, v: &TangentVec) -> Result<HyperPoint> {
    check_same_dim(mu, &v.base)?;
    let ip = raw::inner(mu.coords(), v.vec());
    if ip.abs() > TANGENT_TOL * mu.coords[0] * (1.0 + raw::euclid_norm(v.vec())) {
        return Err(HwnError::arg("exp_map: vector is not tangent at mu"));
    }
    let mut out = vec![0.0; mu.coords.len()];
    raw::exp(mu.coords(), v.vec(), &mut out);
    Ok(HyperPoint::from_raw(out))
}

/// Logarithm map at `mu`; `Log_mu(mu) = 0`.
pub fn log_map(mu: &HyperPoint, x: &HyperPoint) -> Result<TangentVec> {
    check_same_dim(mu, x)?;
    let mut out = vec![0.0; mu.coords.len()];
    raw::log(mu.coords(), x.coords(), &mut out);
    Ok(TangentVec::from_raw(mu.clone(), out))
}

/// Parallel transport of `v` (tangent at `x`) along the geodesic to `y`.
pub fn parallel_transport(x: &HyperPoint, y: &HyperPoint, v: &TangentVec) -> Result<TangentVec> {
    check_same_dim(x, y)?;
    check_same_dim(x, &v.base)?;
    let ip = raw::inner(x.coords(), v.vec());
    if ip.abs() > TANGENT_TOL * x.coords[0] * (1.0 + raw::euclid_norm(v.vec())) {
        return Err(HwnError::arg("parallel_transport: vector is not tangent at x"));
    }
    let mut out = v.vec().to_vec();
    raw::transport(x.coords(), y.coords(), &mut out);
    Ok(TangentVec::from_raw(y.clone(), out))
}

/// `T_mu(x) = PT_{o->mu}^{-1}(Log_mu(x))`, with the zero time coordinate dropped.
pub fn tangent_coords(mu: &HyperPoint, x: &HyperPoint) -> Result<TangentCoords> {
    check_same_dim(mu, x)?;
    let mut out = vec![0.0; mu.dim()];
    raw::tangent_coords(mu.coords(), x.coords(), &mut out);
    Ok(TangentCoords {
        values: DVector::from_vec(out),
    })
}

/// `u -> (0, u)` as a tangent vector at the origin.
pub fn embed_tangent_at_origin(u: &TangentCoords) -> TangentVec {
    let d = u.dim();
    let mut v = Vec::with_capacity(d + 1);
    v.push(0.0);
    v.extend_from_slice(u.values());
    TangentVec::from_raw(HyperPoint::origin(d), v)
}

/// `Exp_mu(PT_{o->mu}(0, u))`: the inverse of [`tangent_coords`].
pub fn wrap_from_origin(mu: &HyperPoint, u: &[f64]) -> Result<HyperPoint> {
    if u.len() != mu.dim() {
        return Err(HwnError::arg("wrap_from_origin: dimension mismatch"));
    }
    let mut v = vec![0.0; mu.coords.len()];
    let mut out = vec![0.0; mu.coords.len()];
    raw::wrap_from_origin(mu.coords(), u, &mut v, &mut out);
    Ok(HyperPoint::from_raw(out))
}

/// `phi(r) = log(sinh(r) / r)` with `phi(0) = 0`.
pub fn phi(r: f64) -> Result<f64> {
    if !r.is_finite() || r < 0.0 {
        return Err(HwnError::arg(format!("phi: radius must be finite and >= 0, got {r}")));
    }
    Ok(raw::phi(r))
}

/// Minimal double-double arithmetic (value `hi + lo`, about 32 digits).
mod dd {
    #[derive(Debug, Clone, Copy)]
    pub struct Dd {
        hi: f64,
        lo: f64,
    }

    #[inline]
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let z = s - a;
        (s, (a - (s - z)) + (b - z))
    }

    #[inline]
    fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        (s, b - (s - a))
    }

    impl Dd {
        pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

        #[inline]
        pub fn prod(a: f64, b: f64) -> Dd {
            let p = a * b;
            Dd {
                hi: p,
                lo: a.mul_add(b, -p),
            }
        }

        #[inline]
        pub fn add(self, o: Dd) -> Dd {
            let (s, e) = two_sum(self.hi, o.hi);
            let (t, f) = two_sum(self.lo, o.lo);
            let (s, e) = fast_two_sum(s, e + t);
            let (hi, lo) = fast_two_sum(s, e + f);
            Dd { hi, lo }
        }

        #[inline]
        pub fn add_f(self, b: f64) -> Dd {
            let (s, e) = two_sum(self.hi, b);
            let (hi, lo) = fast_two_sum(s, e + self.lo);
            Dd { hi, lo }
        }

        #[inline]
        pub fn neg(self) -> Dd {
            Dd {
                hi: -self.hi,
                lo: -self.lo,
            }
        }

        #[inline]
        pub fn sub(self, o: Dd) -> Dd {
            self.add(o.neg())
        }

        #[inline]
        pub fn mul(self, o: Dd) -> Dd {
            let p = Dd::prod(self.hi, o.hi);
            let lo = p.lo + (self.hi * o.lo + self.lo * o.hi);
            let (hi, lo) = fast_two_sum(p.hi, lo);
            Dd { hi, lo }
        }

        #[inline]
        pub fn mul_f(self, b: f64) -> Dd {
            let p = Dd::prod(self.hi, b);
            let (hi, lo) = fast_two_sum(p.hi, p.lo + self.lo * b);
            Dd { hi, lo }
        }

        #[inline]
        pub fn div(self, o: Dd) -> Dd {
            let q1 = self.hi / o.hi;
            let r = self.sub(o.mul_f(q1));
            let q2 = r.hi / o.hi;
            let (hi, lo) = fast_two_sum(q1, q2);
            Dd { hi, lo }
        }

        /// Square root by one Newton step from the f64 root.
        #[inline]
        pub fn sqrt(self) -> Dd {
            let a = self.hi.sqrt();
            let r = self.sub(Dd::prod(a, a));
            let (hi, lo) = fast_two_sum(a, r.hi / (2.0 * a));
            Dd { hi, lo }
        }

        #[inline]
        pub fn to_f64(self) -> f64 {
            self.hi + self.lo
        }
    }

}

/// Unchecked slice-level kernels. Callers guarantee matching lengths and
/// valid points.
pub mod raw {
    use super::{PHI_DIRECT_MAX, PHI_SERIES_MAX, SMALL_RADIUS};

    /// Lorentz inner product, accumulated with error-free transformations
    /// (compensated dot product): the result is nearly as accurate as if
    /// computed in twice the working precision, which matters because the
    /// terms are of order `x_0 y_0` while the result is often close to -1.
    #[inline]
    pub fn inner(x: &[f64], y: &[f64]) -> f64 {
        let p = -x[0] * y[0];
        let mut s = p;
        let mut c = (-x[0]).mul_add(y[0], -p);
        for j in 1..x.len() {
            let p = x[j] * y[j];
            let e = x[j].mul_add(y[j], -p);
            let t = s + p;
            let z = t - s;
            c += (s - (t - z)) + (p - z) + e;
            s = t;
        }
        s + c
    }

    #[inline]
    pub fn euclid_norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[inline]
    pub fn tangent_norm(v: &[f64]) -> f64 {
        inner(v, v).max(0.0).sqrt()
    }

    /// Resets the time coordinate from the spatial part.
    #[inline]
    pub fn project(c: &mut [f64]) {
        let s: f64 = c[1..].iter().map(|v| v * v).sum();
        c[0] = (1.0 + s).sqrt();
    }

    /// Geodesic distance; for nearby points `2 asinh(|x - y|_L / 2)`, which
    /// avoids the ill-conditioned `acosh` near 1.
    #[inline]
    pub fn distance(x: &[f64], y: &[f64]) -> f64 {
        let alpha = -inner(x, y);
        if alpha > 2.0 {
            return alpha.acosh();
        }
        let mut diff = [0.0f64; 16];
        let chord = if x.len() <= 16 {
            for j in 0..x.len() {
                diff[j] = x[j] - y[j];
            }
            tangent_norm(&diff[..x.len()])
        } else {
            let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            tangent_norm(&d)
        };
        2.0 * (0.5 * chord).asinh()
    }

    /// Runs `f` on a zeroed buffer of length `len`, on the stack when small.
    fn with_buffer<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut stack = [0.0f64; 48];
        if len <= stack.len() {
            f(&mut stack[..len])
        } else {
            f(&mut vec![0.0; len])
        }
    }

    /// Spatial part of `PT_{mu->o}(v)`.
    pub fn to_origin(mu: &[f64], v: &[f64], u: &mut [f64]) {
        let k = v[0] / (1.0 + mu[0]);
        for j in 1..mu.len() {
            u[j - 1] = v[j] - k * mu[j];
        }
    }

    /// `PT_{o->mu}((0, u))`.
    pub fn from_origin(mu: &[f64], u: &[f64], v: &mut [f64]) {
        let k = mu[1..].iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / (1.0 + mu[0]);
        v[0] = k * (1.0 + mu[0]);
        for j in 1..mu.len() {
            v[j] = u[j - 1] + k * mu[j];
        }
    }

    /// `Exp_mu(v)`, evaluated through the origin chart. Far from the origin
    /// the ambient components of `v` cancel in `|v|_L`; the transported
    /// coordinates give the norm without cancellation.
    pub fn exp(mu: &[f64], v: &[f64], out: &mut [f64]) {
        let d = mu.len() - 1;
        with_buffer(2 * d + 1, |buf| {
            let (u, w) = buf.split_at_mut(d);
            to_origin(mu, v, u);
            wrap_from_origin(mu, u, w, out);
        });
    }

    /// `Exp_mu(v)` given `r = |v|_L`.
    pub fn exp_with_norm(mu: &[f64], v: &[f64], r: f64, out: &mut [f64]) {
        let (c, s) = if r < SMALL_RADIUS {
            (r.cosh(), 1.0 + r * r / 6.0)
        } else {
            (r.cosh(), r.sinh() / r)
        };
        for j in 0..mu.len() {
            out[j] = c * mu[j] + s * v[j];
        }
        project(out);
    }

    /// `Log_mu(x)` as the transport of `T_mu(x)` back to `mu`.
    pub fn log(mu: &[f64], x: &[f64], out: &mut [f64]) {
        if mu == x {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        with_buffer(mu.len() - 1, |u| {
            tangent_coords(mu, x, u);
            from_origin(mu, u, out);
        });
    }

    /// In-place `PT_{x->y}(v) = v + <y,v>_L / (1 + alpha) (x + y)`, `alpha = -<x,y>_L`.
    pub fn transport(x: &[f64], y: &[f64], v: &mut [f64]) {
        let alpha = -inner(x, y);
        let k = inner(y, v) / (1.0 + alpha);
        for j in 0..v.len() {
            v[j] += k * (x[j] + y[j]);
        }
    }

    /// `T_mu(x)`; `out` has the intrinsic length.
    ///
    /// With `w = Log_mu(x) / q` (q = r / sinh r), transport to the origin gives
    /// spatial part `u = x_s + g mu_s`, `g = <mu,x>_L - w_0 / (1 + mu_0)`, and
    /// `|u| = sinh r`. Far from the origin `u` is a small difference of large
    /// terms, so `g` and `u` are formed in double-double arithmetic with `mu_0`
    /// re-derived from the spatial part; otherwise rounding in `mu` would be
    /// amplified by `x_0` and make the objective rough on the scale of its
    /// finite-difference steps.
    pub fn tangent_coords(mu: &[f64], x: &[f64], out: &mut [f64]) {
        use super::dd::Dd;
        if mu == x {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let mut norm2 = Dd::ZERO;
        for &m in &mu[1..] {
            norm2 = norm2.add(Dd::prod(m, m));
        }
        let mu0 = norm2.add_f(1.0).sqrt();
        let mut ip = mu0.mul_f(x[0]).neg();
        for j in 1..mu.len() {
            ip = ip.add(Dd::prod(mu[j], x[j]));
        }
        let w0 = ip.mul(mu0).add_f(x[0]);
        let g = ip.sub(w0.div(mu0.add_f(1.0)));
        for j in 1..mu.len() {
            out[j - 1] = g.mul_f(mu[j]).add_f(x[j]).to_f64();
        }
        let s = euclid_norm(out);
        let q = if s < SMALL_RADIUS {
            1.0 - s * s / 6.0
        } else {
            s.asinh() / s
        };
        for o in out.iter_mut() {
            *o *= q;
        }
    }

    /// `Exp_mu(PT_{o->mu}(0, u))`.
    pub fn wrap_from_origin(mu: &[f64], u: &[f64], v: &mut [f64], out: &mut [f64]) {
        from_origin(mu, u, v);
        exp_with_norm(mu, v, euclid_norm(u), out);
    }

    /// `Exp_o((0, nu))`.
    pub fn exp_origin(nu: &[f64], out: &mut [f64]) {
        let r = euclid_norm(nu);
        let s = if r < SMALL_RADIUS {
            1.0 + r * r / 6.0
        } else {
            r.sinh() / r
        };
        for j in 0..nu.len() {
            out[j + 1] = s * nu[j];
        }
        project(out);
    }

    /// `sinh(r)/r - 1`, by its Taylor series where the quotient would cancel.
    fn sinhc_minus_one(r: f64) -> f64 {
        if r >= 1.0 {
            return r.sinh() / r - 1.0;
        }
        let r2 = r * r;
        let mut term = 1.0;
        let mut sum = 0.0;
        let mut k = 1.0;
        loop {
            term *= r2 / ((2.0 * k) * (2.0 * k + 1.0));
            sum += term;
            if term < sum * 1e-17 {
                return sum;
            }
            k += 1.0;
        }
    }

    pub fn phi(r: f64) -> f64 {
        if r < PHI_SERIES_MAX {
            let r2 = r * r;
            r2 / 6.0 - r2 * r2 / 180.0
        } else if r <= PHI_DIRECT_MAX {
            sinhc_minus_one(r).ln_1p()
        } else {
            r - (2.0 * r).ln() + (-(-2.0 * r).exp()).ln_1p()
        }
    }
}
