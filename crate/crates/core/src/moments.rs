//! Moment functions for generalized linear models.
//!
//! A model with cumulant `f` and mean function `mu(z) = f'(z)` contributes
//! the score-type moment vector
//!
//! `psi_j(theta; x, y) = x_j * (y - mu(x' theta))`,
//!
//! which has expectation zero at the true parameter. The identity link
//! (`f(z) = z^2/2`) recovers least squares; the logistic link
//! (`f(z) = log(1 + e^z)`) recovers logistic regression. The associated
//! objective is `loss(theta; x, y) = -y * x' theta + f(x' theta)`, whose
//! gradient is exactly `-psi`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters are plain dense vectors; finiteness is checked at use sites.
pub type ParameterVector = DVector<f64>;

/// Link function of a GLM moment model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logistic,
}

impl Link {
    /// Cumulant `f(z)`. The logistic branch uses the overflow-safe
    /// softplus form `max(z, 0) + log(1 + e^-|z|)`.
    #[inline]
    pub fn cumulant(self, z: f64) -> f64 {
        match self {
            Link::Identity => 0.5 * z * z,
            Link::Logistic => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// Mean function `mu(z) = f'(z)`; nondecreasing since `f` is convex.
    #[inline]
    pub fn mean(self, z: f64) -> f64 {
        match self {
            Link::Identity => z,
            Link::Logistic => {
                // Evaluate the sigmoid from the side that cannot overflow.
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Derivative of the mean function, `mu'(z) = f''(z) >= 0`.
    #[inline]
    pub fn mean_deriv(self, z: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logistic => {
                let m = self.mean(z);
                m * (1.0 - m)
            }
        }
    }
}

impl std::fmt::Display for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Link::Identity => write!(f, "identity"),
            Link::Logistic => write!(f, "logistic"),
        }
    }
}

/// A family of `p` moment functions with analytic Jacobians.
///
/// The shipped GLM instances are exactly identified (`p = d`, one score
/// coordinate per parameter); the surrounding machinery only assumes
/// `p >= d`. Models are stateless value objects: all data flows through
/// arguments, so they can be shared freely across worker threads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentModel {
    /// Parameter dimension `d`.
    pub d: usize,
    pub link: Link,
}

impl MomentModel {
    pub fn new(d: usize, link: Link) -> Result<Self> {
        if d == 0 {
            return Err(Error::structure("parameter dimension d must be positive"));
        }
        Ok(Self { d, link })
    }

    /// Number of moment conditions `p` (= `d` for the GLM instances).
    #[inline]
    pub fn num_moments(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn num_params(&self) -> usize {
        self.d
    }

    fn check_inputs(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> Result<f64> {
        if theta.len() != self.d {
            return Err(Error::structure(format!(
                "parameter length {} does not match model dimension {}",
                theta.len(),
                self.d
            )));
        }
        if x.len() != self.d {
            return Err(Error::structure(format!(
                "covariate length {} does not match model dimension {}",
                x.len(),
                self.d
            )));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite parameter entry"));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite covariate entry"));
        }
        if !y.is_finite() {
            return Err(Error::domain("non-finite outcome"));
        }
        Ok(x.dot(theta))
    }
}

/// Moment vector `psi(theta; x, y) = x * (y - mu(x' theta))`.
///
/// Returns the exact zero vector when `y = mu(x' theta)`.
pub fn evaluate_psi(
    model: &MomentModel,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    y: f64,
) -> Result<DVector<f64>> {
    let z = model.check_inputs(theta, x, y)?;
    let residual = y - model.link.mean(z);
    Ok(x * residual)
}

/// Jacobian of the moments, `d psi / d theta = -mu'(x' theta) * x x'`.
///
/// Symmetric and negative semidefinite for the GLM instances.
pub fn psi_jacobian(
    model: &MomentModel,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    y: f64,
) -> Result<DMatrix<f64>> {
    let z = model.check_inputs(theta, x, y)?;
    let scale = -model.link.mean_deriv(z);
    let mut jac = DMatrix::zeros(model.d, model.d);
    for i in 0..model.d {
        for j in 0..model.d {
            jac[(i, j)] = scale * x[i] * x[j];
        }
    }
    Ok(jac)
}

/// GLM objective `loss(theta; x, y) = -y * x' theta + f(x' theta)`.
///
/// Convex in `theta`; its gradient equals `-psi`.
pub fn glm_loss(model: &MomentModel, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> Result<f64> {
    let z = model.check_inputs(theta, x, y)?;
    Ok(-y * z + model.link.cumulant(z))
}

/// Gradient of `glm_loss`: `x * (mu(x' theta) - y) = -psi`.
pub fn glm_loss_gradient(
    model: &MomentModel,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    y: f64,
) -> Result<DVector<f64>> {
    let z = model.check_inputs(theta, x, y)?;
    Ok(x * (model.link.mean(z) - y))
}
