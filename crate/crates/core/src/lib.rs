//! Profile maximum-likelihood inference for the anisotropic hyperbolic
//! wrapped normal distribution on the Lorentz model of hyperbolic space.
//!
//! * [`lorentz`]: hyperboloid geometry (exp/log maps, transport, tangent coordinates).
//! * [`spd`]: SPD matrix calculus and spectral clipping onto a covariance shell.
//! * [`model`]: the wrapped normal sampler and density.
//! * [`profile`]: the covariance-profiled objective.
//! * [`estimator`]: Frechet-mean initialization and quasi-Newton profile MLE.
//! * [`fisher`]: Monte Carlo Fisher information, Schur complement, Wald regions.
//! * [`calibration`]: the Monte Carlo calibration study and its CSV outputs.
//! * [`cli`]: the `hwn` command-line front end.

pub mod calibration;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod fisher;
pub mod lorentz;
pub mod model;
pub mod par;
pub mod profile;
pub mod rng;
pub mod spd;

pub use error::{HwnError, Result};
pub use estimator::{fit, FitOptions, FitResult};
pub use lorentz::{HyperPoint, TangentCoords, TangentVec};
pub use model::{HwnParams, Sample};
pub use par::Execution;
pub use rng::SimRng;
pub use spd::{Shell, SpdMatrix, VechVector};
