//! Damped Newton solver for weighted sums of GLM losses.
//!
//! Minimizes `sum_k w_k * loss(theta; x_k, y_k) + c' theta` for a fixed set
//! of weighted terms and an optional linear shift. This single routine backs
//! the human-only M-estimator, the per-source fits that initialize the GMM,
//! the imputed-loss estimators (whose labeled correction terms carry
//! negative weights), and the score-regression correction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmm::SolverConfig;
use crate::moments::MomentModel;

/// One weighted observation of the objective.
#[derive(Clone, Copy, Debug)]
pub struct GlmTerm<'a> {
    pub weight: f64,
    pub x: &'a DVector<f64>,
    pub y: f64,
}

/// Outcome of a fit.
#[derive(Clone, Debug)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub objective_value: f64,
    pub gradient_norm: f64,
}

fn objective(
    model: &MomentModel,
    terms: &[GlmTerm<'_>],
    linear: Option<&DVector<f64>>,
    theta: &DVector<f64>,
) -> f64 {
    let mut value = 0.0;
    for term in terms {
        let z = term.x.dot(theta);
        value += term.weight * (-term.y * z + model.link.cumulant(z));
    }
    if let Some(c) = linear {
        value += c.dot(theta);
    }
    value
}

fn gradient_and_hessian(
    model: &MomentModel,
    terms: &[GlmTerm<'_>],
    linear: Option<&DVector<f64>>,
    theta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = model.d;
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    for term in terms {
        let z = term.x.dot(theta);
        let resid = model.link.mean(z) - term.y;
        let curve = term.weight * model.link.mean_deriv(z);
        for i in 0..d {
            grad[i] += term.weight * term.x[i] * resid;
            for j in i..d {
                hess[(i, j)] += curve * term.x[i] * term.x[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            hess[(i, j)] = hess[(j, i)];
        }
    }
    if let Some(c) = linear {
        grad += c;
    }
    (grad, hess)
}

/// Minimizes the weighted GLM objective from `init`.
///
/// `require_identified` makes a singular Hessian at the initial point an
/// identification error (rank-deficient design); otherwise the solver falls
/// back to Levenberg damping, which also handles the indefinite Hessians
/// that negative weights can produce. Non-convergence is flagged in the
/// diagnostics, never raised.
pub fn minimize_weighted_glm(
    model: &MomentModel,
    terms: &[GlmTerm<'_>],
    linear: Option<&DVector<f64>>,
    init: &DVector<f64>,
    cfg: &SolverConfig,
    require_identified: bool,
) -> Result<(DVector<f64>, FitDiagnostics)> {
    cfg.validate()?;
    if init.len() != model.d {
        return Err(Error::structure(format!(
            "initial point length {} != d = {}",
            init.len(),
            model.d
        )));
    }
    if !init.iter().all(|v| v.is_finite()) {
        return Err(Error::domain("non-finite initial point"));
    }

    let mut theta = init.clone();
    let mut value = objective(model, terms, linear, &theta);
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;

    for iter in 0..cfg.max_iterations {
        iterations = iter;
        let (grad, hess) = gradient_and_hessian(model, terms, linear, &theta);
        grad_norm = grad.amax();
        if grad_norm <= cfg.gradient_tolerance {
            converged = true;
            break;
        }

        let direction = match newton_direction(&hess, &grad) {
            Some(dir) => dir,
            None if require_identified && iter == 0 => {
                return Err(Error::identification(
                    "design is rank-deficient: the Hessian of the objective is singular",
                ));
            }
            None => damped_direction(&hess, &grad),
        };
        // Guard against ascent directions from a damped indefinite system.
        let slope = grad.dot(&direction);
        let (direction, slope) = if slope < 0.0 {
            (direction, slope)
        } else {
            let fallback = -&grad;
            let slope = grad.dot(&fallback);
            (fallback, slope)
        };

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &theta + &direction * step;
            let candidate_value = objective(model, terms, linear, &candidate);
            if candidate_value.is_finite()
                && candidate_value <= value + cfg.sufficient_decrease * step * slope
            {
                if (&candidate - &theta).amax() <= cfg.step_tolerance {
                    theta = candidate;
                    value = candidate_value;
                    accepted = false; // step too small to make progress
                    break;
                }
                theta = candidate;
                value = candidate_value;
                accepted = true;
                break;
            }
            step *= cfg.backtrack_factor;
        }
        if !accepted {
            // Near the optimum the objective improvement can fall below
            // floating-point resolution and the Armijo test stalls; accept
            // the full step when it genuinely contracts the gradient.
            let candidate = &theta + &direction;
            let (cand_grad, _) = gradient_and_hessian(model, terms, linear, &candidate);
            if cand_grad.amax() < 0.5 * grad_norm {
                value = objective(model, terms, linear, &candidate);
                theta = candidate;
                continue;
            }
            let (grad, _) = gradient_and_hessian(model, terms, linear, &theta);
            grad_norm = grad.amax();
            converged = grad_norm <= cfg.gradient_tolerance;
            break;
        }
    }
    if !converged {
        let (grad, _) = gradient_and_hessian(model, terms, linear, &theta);
        grad_norm = grad.amax();
        converged = grad_norm <= cfg.gradient_tolerance;
    }

    Ok((
        theta,
        FitDiagnostics {
            converged,
            iterations: iterations + 1,
            objective_value: value,
            gradient_norm: grad_norm,
        },
    ))
}

fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    hess.clone().cholesky().map(|chol| -chol.solve(grad))
}

/// Levenberg damping: inflate the diagonal until the system factors.
fn damped_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let d = hess.nrows();
    let mean_diag = hess.diagonal().iter().map(|v| v.abs()).sum::<f64>() / d as f64;
    let mut tau = (1e-8 * mean_diag).max(1e-12);
    for _ in 0..40 {
        let damped = hess + DMatrix::identity(d, d) * tau;
        if let Some(chol) = damped.cholesky() {
            return -chol.solve(grad);
        }
        tau *= 10.0;
    }
    -grad.clone()
}

/// Convenience: fit a GLM by equally weighting `pairs`.
pub fn fit_glm_pairs(
    model: &MomentModel,
    pairs: &[(&DVector<f64>, f64)],
    cfg: &SolverConfig,
) -> Result<(DVector<f64>, FitDiagnostics)> {
    if pairs.is_empty() {
        return Err(Error::usage("cannot fit a model to an empty sample"));
    }
    let w = 1.0 / pairs.len() as f64;
    let terms: Vec<GlmTerm<'_>> = pairs
        .iter()
        .map(|(x, y)| GlmTerm { weight: w, x, y: *y })
        .collect();
    let init = DVector::zeros(model.d);
    minimize_weighted_glm(model, &terms, None, &init, cfg, true)
}
