//! Two-step GMM estimation of the augmented moment system.
//!
//! The objective is the weighted quadratic form in the mean moments,
//!
//! `Q(theta, eta) = gbar' W gbar`,  `gbar = (1/T) sum_t g_t(theta, eta)`.
//!
//! Step 1 minimizes `Q` with `W = I`; under identity weighting the blocks
//! decouple, so the target estimate coincides with the human-only fit. The
//! empirical moment covariance at the step-1 estimate,
//!
//! `Omega = (1/T) sum_t g_t g_t'`,
//!
//! is inverted (with a diagonal ridge when near-singular; auxiliary blocks
//! duplicate the real block on labeled rows, so Omega approaches singularity
//! as the labeled fraction grows) and step 2 re-minimizes under `W =
//! Omega^-1`. The off-diagonal entries of `W` are what let auxiliary moment
//! residuals inform the target parameter.
//!
//! Minimization is Gauss-Newton on the weighted moments: the search
//! direction solves `J'WJ delta = -J'W gbar` with `J` the mean moment
//! Jacobian, backtracking on `Q`, and a steepest-descent fallback when the
//! normal equations are singular. The solver is deterministic: identical
//! data and configuration reproduce identical estimates bitwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::augmented::{
    sample_mean_jacobian, sample_mean_moments, AugmentedSystem, ObservationRecord,
    PackedParameters,
};
use crate::error::{Error, Result};
use crate::fit::fit_glm_pairs;
use crate::inference::{covariance_from_optimal_weight, sandwich_covariance};

/// Condition-number threshold beyond which the weight inversion applies the
/// diagonal ridge.
const RIDGE_CONDITION_THRESHOLD: f64 = 1e12;

/// Symmetric, positive semidefinite weight matrix for the GMM objective.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    values: DMatrix<f64>,
    ridge_applied: f64,
}

impl WeightMatrix {
    /// Wraps a matrix, requiring symmetry within `1e-12` relative.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        Self::with_ridge(values, 0.0)
    }

    fn with_ridge(mut values: DMatrix<f64>, ridge_applied: f64) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::structure(format!(
                "weight matrix is {}x{}, expected square",
                values.nrows(),
                values.ncols()
            )));
        }
        let scale = values.amax().max(1.0);
        for i in 0..values.nrows() {
            for j in (i + 1)..values.ncols() {
                if (values[(i, j)] - values[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::structure(format!(
                        "weight matrix is not symmetric at ({i}, {j})"
                    )));
                }
                let avg = 0.5 * (values[(i, j)] + values[(j, i)]);
                values[(i, j)] = avg;
                values[(j, i)] = avg;
            }
        }
        Ok(Self {
            values,
            ridge_applied,
        })
    }

    pub fn identity(side: usize) -> Self {
        Self {
            values: DMatrix::identity(side, side),
            ridge_applied: 0.0,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Ridge added to the matrix that was inverted to produce this weight;
    /// zero when the plain inversion succeeded.
    pub fn ridge_applied(&self) -> f64 {
        self.ridge_applied
    }

    pub fn side(&self) -> usize {
        self.values.nrows()
    }
}

/// Solver settings shared by the GMM and M-estimation routines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when the sup-norm of the objective gradient falls below this.
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    /// Relative diagonal ridge used when inverting near-singular moment
    /// covariances.
    pub ridge_epsilon: f64,
    /// Backtracking line-search contraction factor.
    pub backtrack_factor: f64,
    /// Armijo sufficient-decrease constant.
    pub sufficient_decrease: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-9,
            step_tolerance: 1e-12,
            ridge_epsilon: 1e-8,
            backtrack_factor: 0.5,
            sufficient_decrease: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::usage("max_iterations must be positive"));
        }
        for (name, value) in [
            ("gradient_tolerance", self.gradient_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("ridge_epsilon", self.ridge_epsilon),
            ("sufficient_decrease", self.sufficient_decrease),
        ] {
            if !(value > 0.0) {
                return Err(Error::usage(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::usage("backtrack_factor must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Diagnostics from one weighted minimization.
#[derive(Clone, Debug)]
pub struct StepDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub objective_value: f64,
    pub gradient_norm: f64,
    /// Objective at each accepted iterate, starting from the initial point.
    pub objective_trace: Vec<f64>,
}

/// Two-step GMM estimate with covariance and solver diagnostics.
#[derive(Clone, Debug)]
pub struct GmmEstimate {
    pub params: PackedParameters,
    /// Step-2 weight matrix (inverse moment covariance at the step-1 point).
    pub weight: WeightMatrix,
    pub objective_value: f64,
    /// Asymptotic covariance of the flat parameters, scaled so that
    /// standard errors are `sqrt(V_ii / T)`. Efficient form, since the
    /// optimal weight is used.
    pub covariance: DMatrix<f64>,
    pub std_errors: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub sample_size: usize,
    pub diagnostics: GmmDiagnostics,
}

#[derive(Clone, Debug)]
pub struct GmmDiagnostics {
    /// Step-1 (identity-weight) estimate; its target block matches the
    /// human-only fit because the blocks decouple.
    pub first_step: PackedParameters,
    /// Sandwich covariance under the step-2 weight, exposed alongside the
    /// efficient form used for reporting.
    pub sandwich_covariance: DMatrix<f64>,
    /// Ridge applied when inverting the step-1 moment covariance.
    pub weight_ridge: f64,
    /// Ridge applied when inverting the final moment covariance for the
    /// reported covariance.
    pub covariance_ridge: f64,
    pub step1: StepDiagnostics,
    pub step2: StepDiagnostics,
    pub warnings: Vec<String>,
}

impl GmmEstimate {
    /// Target-parameter standard errors (first `d` coordinates).
    pub fn theta_std_errors(&self) -> DVector<f64> {
        let d = self.params.theta.len();
        self.std_errors.rows(0, d).into_owned()
    }
}

/// GMM objective `gbar' W gbar` at the given parameters.
pub fn gmm_objective(
    system: &AugmentedSystem,
    dataset: &[ObservationRecord],
    params: &PackedParameters,
    weight: &WeightMatrix,
) -> Result<f64> {
    if weight.side() != system.total_moments() {
        return Err(Error::structure(format!(
            "weight side {} does not match p(1+2M) = {}",
            weight.side(),
            system.total_moments()
        )));
    }
    let gbar = sample_mean_moments(system, dataset, params)?;
    Ok(quadratic_form(&gbar, weight.values()))
}

#[inline]
fn quadratic_form(v: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (v.transpose() * w * v)[(0, 0)]
}

/// Minimizes the GMM objective at fixed weight, Gauss-Newton with
/// backtracking. Returns the iterate and diagnostics; non-convergence after
/// `max_iterations` is flagged, never raised.
pub fn solve_gmm_step(
    system: &AugmentedSystem,
    dataset: &[ObservationRecord],
    weight: &WeightMatrix,
    init: &PackedParameters,
    cfg: &SolverConfig,
) -> Result<(PackedParameters, StepDiagnostics)> {
    cfg.validate()?;
    if weight.side() != system.total_moments() {
        return Err(Error::structure(format!(
            "weight side {} does not match p(1+2M) = {}",
            weight.side(),
            system.total_moments()
        )));
    }
    if !init.flatten().iter().all(|v| v.is_finite()) {
        return Err(Error::domain("non-finite initial parameters"));
    }

    let w = weight.values();
    let mut flat = init.flatten();
    let mut params = PackedParameters::from_flat(system, &flat)?;
    let mut gbar = sample_mean_moments(system, dataset, &params)?;
    let mut value = quadratic_form(&gbar, w);
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;

    for iter in 0..cfg.max_iterations {
        iterations = iter;
        let jac = sample_mean_jacobian(system, dataset, &params)?;
        let jtw = jac.transpose() * w;
        let grad = 2.0 * &jtw * &gbar;
        grad_norm = grad.amax();
        if grad_norm <= cfg.gradient_tolerance {
            converged = true;
            break;
        }

        // Gauss-Newton direction; steepest descent if the system is singular.
        let normal = &jtw * &jac;
        let rhs = -(&jtw * &gbar);
        let direction = normal
            .clone()
            .cholesky()
            .map(|chol| chol.solve(&rhs))
            .or_else(|| normal.lu().solve(&rhs))
            .unwrap_or_else(|| -&grad);
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
            let candidate_flat = &flat + &direction * step;
            let candidate = PackedParameters::from_flat(system, &candidate_flat)?;
            let candidate_gbar = sample_mean_moments(system, dataset, &candidate)?;
            let candidate_value = quadratic_form(&candidate_gbar, w);
            if candidate_value.is_finite()
                && candidate_value <= value + cfg.sufficient_decrease * step * slope
            {
                let tiny = (&candidate_flat - &flat).amax() <= cfg.step_tolerance;
                flat = candidate_flat;
                params = candidate;
                gbar = candidate_gbar;
                value = candidate_value;
                trace.push(value);
                accepted = !tiny;
                break;
            }
            step *= cfg.backtrack_factor;
        }
        if !accepted {
            // The Armijo test stalls once improvements drop below float
            // resolution; take the full step if it contracts the gradient.
            let candidate_flat = &flat + &direction;
            let candidate = PackedParameters::from_flat(system, &candidate_flat)?;
            let candidate_gbar = sample_mean_moments(system, dataset, &candidate)?;
            let candidate_jac = sample_mean_jacobian(system, dataset, &candidate)?;
            let candidate_grad = 2.0 * candidate_jac.transpose() * w * &candidate_gbar;
            if candidate_grad.amax() < 0.5 * grad_norm {
                value = quadratic_form(&candidate_gbar, w);
                trace.push(value);
                flat = candidate_flat;
                params = candidate;
                gbar = candidate_gbar;
                continue;
            }
            break;
        }
    }
    if !converged {
        let jac = sample_mean_jacobian(system, dataset, &params)?;
        grad_norm = (2.0 * jac.transpose() * w * &gbar).amax();
        converged = grad_norm <= cfg.gradient_tolerance;
    }

    Ok((
        params,
        StepDiagnostics {
            converged,
            iterations: iterations + 1,
            objective_value: value,
            gradient_norm: grad_norm,
            objective_trace: trace,
        },
    ))
}

/// Empirical moment covariance `Omega = (1/T) sum_t g_t g_t'` at `params`.
///
/// Symmetric and positive semidefinite by construction.
pub fn estimate_weight_matrix(
    system: &AugmentedSystem,
    dataset: &[ObservationRecord],
    params: &PackedParameters,
) -> Result<DMatrix<f64>> {
    if dataset.is_empty() {
        return Err(Error::usage("cannot estimate a moment covariance from an empty dataset"));
    }
    let k = system.total_moments();
    let mut omega = DMatrix::zeros(k, k);
    for record in dataset {
        let g = crate::augmented::build_augmented_moments(system, record, params)?;
        for i in 0..k {
            // Accumulate the upper triangle only; mirror afterwards.
            for j in i..k {
                omega[(i, j)] += g[i] * g[j];
            }
        }
    }
    let scale = 1.0 / dataset.len() as f64;
    for i in 0..k {
        for j in i..k {
            omega[(i, j)] *= scale;
            omega[(j, i)] = omega[(i, j)];
        }
    }
    Ok(omega)
}

/// Inverts a symmetric moment covariance, adding the diagonal ridge
/// `ridge_epsilon * mean(diag)` only when the plain factorization fails or
/// the condition estimate exceeds `1e12`. The ridge actually applied is
/// recorded on the returned weight.
pub fn invert_weight(omega: &DMatrix<f64>, ridge_epsilon: f64) -> Result<WeightMatrix> {
    if !omega.is_square() {
        return Err(Error::structure(format!(
            "moment covariance is {}x{}, expected square",
            omega.nrows(),
            omega.ncols()
        )));
    }
    let scale = omega.amax().max(1.0);
    for i in 0..omega.nrows() {
        for j in (i + 1)..omega.ncols() {
            if (omega[(i, j)] - omega[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::structure(format!(
                    "moment covariance is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let eigs = omega.symmetric_eigenvalues();
    let max_eig = eigs.iter().fold(0.0f64, |acc, &e| acc.max(e.abs()));
    let min_eig = eigs.iter().fold(f64::INFINITY, |acc, &e| acc.min(e));
    let well_conditioned = min_eig > 0.0 && max_eig / min_eig <= RIDGE_CONDITION_THRESHOLD;

    if well_conditioned {
        if let Some(chol) = omega.clone().cholesky() {
            return WeightMatrix::with_ridge(chol.inverse(), 0.0);
        }
    }

    let mean_diag = omega.diagonal().iter().map(|v| v.abs()).sum::<f64>() / omega.nrows() as f64;
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut ridge = ridge_epsilon * base;
    for _ in 0..40 {
        let shifted = omega + DMatrix::identity(omega.nrows(), omega.ncols()) * ridge;
        if let Some(chol) = shifted.cholesky() {
            return WeightMatrix::with_ridge(chol.inverse(), ridge);
        }
        ridge *= 10.0;
    }
    Err(Error::degenerate(
        "moment covariance could not be inverted even with a large ridge",
    ))
}

fn count_labeled(dataset: &[ObservationRecord]) -> usize {
    dataset.iter().filter(|r| r.is_labeled()).count()
}

/// Initial point for step 1: the target parameter from a fit on the labeled
/// real pairs, each auxiliary parameter from a fit on its source over all
/// rows. Under identity weighting the target block decouples, so the step-1
/// target estimate stays at the human-only fit.
fn initial_parameters(
    system: &AugmentedSystem,
    dataset: &[ObservationRecord],
    cfg: &SolverConfig,
) -> Result<PackedParameters> {
    let labeled_pairs: Vec<(&DVector<f64>, f64)> = dataset
        .iter()
        .filter_map(|r| r.real.as_ref())
        .map(|pair| (&pair.x, pair.y))
        .collect();
    let (theta, _) = fit_glm_pairs(&system.model, &labeled_pairs, cfg)?;
    let mut etas = Vec::with_capacity(system.num_aux);
    for i in 0..system.num_aux {
        let pairs: Vec<(&DVector<f64>, f64)> = dataset
            .iter()
            .map(|r| (&r.aux[i].x, r.aux[i].y))
            .collect();
        let (eta, _) = fit_glm_pairs(&system.model, &pairs, cfg)
            .map_err(|e| match e {
                Error::Identification(msg) => {
                    Error::identification(format!("auxiliary source {i}: {msg}"))
                }
                other => other,
            })?;
        etas.push(eta);
    }
    Ok(PackedParameters::new(theta, etas))
}

/// The two-step estimator: identity-weight step, optimal weight from the
/// empirical moment covariance, re-minimization, and asymptotic covariance.
///
/// The reported covariance is the efficient form `(G' F^-1 G)^-1` with both
/// `G` and `F` re-estimated at the final parameters; the sandwich form under
/// the step-2 weight is exposed in the diagnostics.
pub fn two_step_estimate(
    system: &AugmentedSystem,
    dataset: &[ObservationRecord],
    cfg: &SolverConfig,
) -> Result<GmmEstimate> {
    cfg.validate()?;
    system.validate_dataset(dataset)?;
    if dataset.is_empty() {
        return Err(Error::usage("cannot estimate from an empty dataset"));
    }
    let n_labeled = count_labeled(dataset);
    if n_labeled == 0 {
        return Err(Error::usage(
            "target parameter unidentifiable: the dataset has no labeled records",
        ));
    }
    if n_labeled < system.model.d {
        return Err(Error::identification(format!(
            "only {} labeled records for {} target parameters",
            n_labeled, system.model.d
        )));
    }

    let sample_size = dataset.len();
    let init = initial_parameters(system, dataset, cfg)?;

    // Step 1: identity weighting.
    let identity = WeightMatrix::identity(system.total_moments());
    let (step1_params, step1_diag) = solve_gmm_step(system, dataset, &identity, &init, cfg)?;

    // Optimal weight from the moment covariance at the step-1 point.
    let omega = estimate_weight_matrix(system, dataset, &step1_params)?;
    let weight = invert_weight(&omega, cfg.ridge_epsilon)?;

    // Step 2: re-minimize under the optimal weight.
    let (params, step2_diag) = solve_gmm_step(system, dataset, &weight, &step1_params, cfg)?;

    // Covariance at the final estimate.
    let f_hat = estimate_weight_matrix(system, dataset, &params)?;
    let g_hat = sample_mean_jacobian(system, dataset, &params)?;
    let f_inv = invert_weight(&f_hat, cfg.ridge_epsilon)?;
    let covariance = covariance_from_optimal_weight(&g_hat, &f_inv)?;
    let sandwich = sandwich_covariance(&g_hat, weight.values(), &f_hat)?;

    let t = sample_size as f64;
    let std_errors = DVector::from_fn(covariance.nrows(), |i, _| {
        (covariance[(i, i)].max(0.0) / t).sqrt()
    });

    let mut warnings = Vec::new();
    if !step1_diag.converged {
        warnings.push(format!(
            "step 1 did not reach the gradient tolerance (sup-norm {:.3e})",
            step1_diag.gradient_norm
        ));
    }
    if !step2_diag.converged {
        warnings.push(format!(
            "step 2 did not reach the gradient tolerance (sup-norm {:.3e})",
            step2_diag.gradient_norm
        ));
    }

    let converged = step1_diag.converged && step2_diag.converged;
    let iterations = step1_diag.iterations + step2_diag.iterations;
    Ok(GmmEstimate {
        params,
        objective_value: step2_diag.objective_value,
        covariance,
        std_errors,
        converged,
        iterations,
        sample_size,
        diagnostics: GmmDiagnostics {
            first_step: step1_params,
            sandwich_covariance: sandwich,
            weight_ridge: weight.ridge_applied(),
            covariance_ridge: f_inv.ridge_applied(),
            step1: step1_diag,
            step2: step2_diag,
            warnings,
        },
        weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmented::XyPair;
    use crate::moments::{Link, MomentModel};
    use crate::rng::StreamRng;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_column_slice(&[a, b])
    }

    fn system(num_aux: usize) -> AugmentedSystem {
        AugmentedSystem::new(MomentModel::new(2, Link::Identity).unwrap(), num_aux)
    }

    /// Labeled-only linear dataset with independent auxiliary sources.
    fn linear_dataset(seed: u64, n: usize, num_aux: usize) -> Vec<ObservationRecord> {
        let mut rng = StreamRng::from_seed(seed);
        let theta = vec2(1.5, -0.5);
        (0..n)
            .map(|i| {
                let x = vec2(1.0, rng.standard_normal());
                let y = x.dot(&theta) + 0.5 * rng.standard_normal();
                let aux = (0..num_aux)
                    .map(|_| {
                        let xa = vec2(1.0, rng.standard_normal());
                        let ya = xa.dot(&theta) + 0.5 * rng.standard_normal();
                        XyPair::new(xa, ya)
                    })
                    .collect();
                ObservationRecord::labeled(format!("{i}"), XyPair::new(x, y), aux)
            })
            .collect()
    }

    fn ols_on_labeled(dataset: &[ObservationRecord]) -> DVector<f64> {
        let mut xtx = DMatrix::zeros(2, 2);
        let mut xty = DVector::zeros(2);
        for r in dataset.iter().filter_map(|r| r.real.as_ref()) {
            xtx += &r.x * r.x.transpose();
            xty += &r.x * r.y;
        }
        xtx.lu().solve(&xty).unwrap()
    }

    #[test]
    fn objective_zero_at_zero_residuals() {
        let sys = system(0);
        let theta = vec2(2.0, -1.0);
        let mut rng = StreamRng::from_seed(77);
        let dataset: Vec<ObservationRecord> = (0..10)
            .map(|i| {
                let x = vec2(1.0, rng.standard_normal());
                let y = x.dot(&theta);
                ObservationRecord::labeled(format!("{i}"), XyPair::new(x, y), vec![])
            })
            .collect();
        let params = PackedParameters::new(theta, vec![]);
        let w = WeightMatrix::identity(2);
        let q = gmm_objective(&sys, &dataset, &params, &w).unwrap();
        assert!(q.abs() <= 1e-16, "objective {q}");
    }

    #[test]
    fn objective_is_norm_under_identity_and_quadratic_otherwise() {
        // Two records engineered so the mean moments are (1, 2).
        let sys = system(0);
        let theta = vec2(0.0, 0.0);
        let dataset = vec![
            ObservationRecord::labeled("a", XyPair::new(vec2(1.0, 0.0), 2.0), vec![]),
            ObservationRecord::labeled("b", XyPair::new(vec2(0.0, 1.0), 4.0), vec![]),
        ];
        let params = PackedParameters::new(theta, vec![]);
        let gbar = sample_mean_moments(&sys, &dataset, &params).unwrap();
        assert_eq!(gbar, vec2(1.0, 2.0));

        let w_eye = WeightMatrix::identity(2);
        let q = gmm_objective(&sys, &dataset, &params, &w_eye).unwrap();
        assert!((q - 5.0).abs() < 1e-14);

        let w = WeightMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])).unwrap();
        let q = gmm_objective(&sys, &dataset, &params, &w).unwrap();
        assert!((q - 6.0).abs() < 1e-14);
    }

    #[test]
    fn solve_matches_closed_form_least_squares() {
        let sys = system(0);
        let dataset = linear_dataset(101, 60, 0);
        let init = PackedParameters::new(vec2(0.0, 0.0), vec![]);
        let w = WeightMatrix::identity(2);
        let (params, diag) =
            solve_gmm_step(&sys, &dataset, &w, &init, &SolverConfig::default()).unwrap();
        assert!(diag.converged);
        let ols = ols_on_labeled(&dataset);
        assert!((params.theta - ols).amax() < 1e-8);
    }

    #[test]
    fn identity_weight_decouples_target_block() {
        let sys = system(2);
        let dataset = linear_dataset(103, 50, 2);
        let init = PackedParameters::new(vec2(0.0, 0.0), vec![vec2(0.0, 0.0), vec2(0.0, 0.0)]);
        let w = WeightMatrix::identity(10);
        let (params, diag) =
            solve_gmm_step(&sys, &dataset, &w, &init, &SolverConfig::default()).unwrap();
        assert!(diag.converged);
        let ols = ols_on_labeled(&dataset);
        assert!(
            (params.theta.clone() - ols).amax() < 1e-8,
            "theta {:?} vs OLS",
            params.theta
        );
    }

    #[test]
    fn objective_trace_is_monotone_nonincreasing() {
        let sys = system(2);
        let dataset = linear_dataset(107, 40, 2);
        let init = PackedParameters::new(vec2(3.0, -4.0), vec![vec2(2.0, 2.0), vec2(-1.0, 1.0)]);
        let w = WeightMatrix::identity(10);
        let (_, diag) =
            solve_gmm_step(&sys, &dataset, &w, &init, &SolverConfig::default()).unwrap();
        for pair in diag.objective_trace.windows(2) {
            // Gradient-contraction fallback steps may move the objective by
            // a few ulps; anything larger is a real monotonicity violation.
            let slack = 1e-12 * pair[0].abs().max(1e-12);
            assert!(pair[1] <= pair[0] + slack, "trace not monotone: {pair:?}");
        }
    }

    #[test]
    fn weight_matrix_from_constant_moments_is_outer_product() {
        let sys = system(0);
        // One record: Omega = g g'.
        let dataset = vec![ObservationRecord::labeled(
            "a",
            XyPair::new(vec2(1.0, 2.0), 3.0),
            vec![],
        )];
        let params = PackedParameters::new(vec2(0.0, 0.0), vec![]);
        let g = sample_mean_moments(&sys, &dataset, &params).unwrap();
        let omega = estimate_weight_matrix(&sys, &dataset, &params).unwrap();
        let expected = &g * g.transpose();
        assert!((omega - expected).amax() < 1e-14);
    }

    #[test]
    fn weight_matrix_matches_hand_summed_outer_products() {
        let sys = system(0);
        let dataset = linear_dataset(109, 3, 0);
        let params = PackedParameters::new(vec2(0.2, 0.4), vec![]);
        let omega = estimate_weight_matrix(&sys, &dataset, &params).unwrap();
        let mut expected = DMatrix::zeros(2, 2);
        for r in &dataset {
            let g = crate::augmented::build_augmented_moments(&sys, r, &params).unwrap();
            expected += &g * g.transpose();
        }
        expected /= 3.0;
        assert!((omega - expected).amax() < 1e-14);
    }

    #[test]
    fn omega_is_positive_semidefinite() {
        let sys = system(2);
        let dataset = linear_dataset(113, 30, 2);
        let params = PackedParameters::new(vec2(0.1, 0.2), vec![vec2(0.3, 0.4), vec2(0.5, 0.6)]);
        let omega = estimate_weight_matrix(&sys, &dataset, &params).unwrap();
        let eigs = omega.symmetric_eigenvalues();
        let min_eig = eigs.iter().fold(f64::INFINITY, |a, &e| a.min(e));
        assert!(min_eig >= -1e-10 * omega.trace(), "min eigenvalue {min_eig}");
    }

    #[test]
    fn invert_weight_plain_and_ridged() {
        let w = invert_weight(&(DMatrix::identity(3, 3) * 2.0), 1e-8).unwrap();
        assert_eq!(w.ridge_applied(), 0.0);
        assert!((w.values() - DMatrix::identity(3, 3) * 0.5).amax() < 1e-14);

        let omega = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 1e-20]));
        let w = invert_weight(&omega, 1e-8).unwrap();
        assert!(w.ridge_applied() > 0.0);
        assert!(w.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invert_weight_multiplies_back_to_identity() {
        let mut rng = StreamRng::from_seed(21);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.standard_normal());
        let omega = &a * a.transpose() + DMatrix::identity(4, 4);
        let w = invert_weight(&omega, 1e-8).unwrap();
        assert_eq!(w.ridge_applied(), 0.0);
        let product = w.values() * &omega;
        assert!((product - DMatrix::identity(4, 4)).amax() < 1e-8);
    }

    #[test]
    fn invert_weight_rejects_asymmetry() {
        let mut omega = DMatrix::identity(2, 2);
        omega[(0, 1)] = 0.7;
        assert!(matches!(
            invert_weight(&omega, 1e-8),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn two_step_matches_ols_with_hc0_errors() {
        let sys = system(0);
        let dataset = linear_dataset(127, 50, 0);
        let estimate = two_step_estimate(&sys, &dataset, &SolverConfig::default()).unwrap();
        assert!(estimate.converged);

        let ols = ols_on_labeled(&dataset);
        assert!((estimate.params.theta.clone() - &ols).amax() < 1e-8);

        // Heteroskedasticity-robust closed form on the labeled rows.
        let n = dataset.len() as f64;
        let mut xtx = DMatrix::zeros(2, 2);
        let mut meat = DMatrix::zeros(2, 2);
        for r in dataset.iter().filter_map(|r| r.real.as_ref()) {
            let e = r.y - r.x.dot(&ols);
            xtx += &r.x * r.x.transpose();
            meat += &r.x * r.x.transpose() * (e * e);
        }
        let xtx_inv = xtx.clone().lu().try_inverse().unwrap();
        let hc0 = &xtx_inv * &meat * &xtx_inv;
        for i in 0..2 {
            let se = estimate.std_errors[i];
            let closed = hc0[(i, i)].sqrt();
            assert!(
                (se - closed).abs() < 1e-6 * closed.max(1e-12),
                "se {se} vs closed form {closed}"
            );
        }
        let _ = n;
    }

    #[test]
    fn first_step_theta_matches_labeled_only_fit() {
        let sys = system(2);
        let dataset = linear_dataset(131, 40, 2);
        let estimate = two_step_estimate(&sys, &dataset, &SolverConfig::default()).unwrap();
        let ols = ols_on_labeled(&dataset);
        assert!((estimate.diagnostics.first_step.theta.clone() - ols).amax() < 1e-8);
    }

    #[test]
    fn scale_equivariance_of_linear_estimates() {
        let sys = system(0);
        let dataset = linear_dataset(137, 45, 0);
        let scaled: Vec<ObservationRecord> = dataset
            .iter()
            .map(|r| {
                let real = r.real.as_ref().unwrap();
                ObservationRecord::labeled(
                    r.id.clone(),
                    XyPair::new(real.x.clone(), 3.0 * real.y),
                    vec![],
                )
            })
            .collect();
        let cfg = SolverConfig::default();
        let base = two_step_estimate(&sys, &dataset, &cfg).unwrap();
        let scaled_est = two_step_estimate(&sys, &scaled, &cfg).unwrap();
        assert!((scaled_est.params.theta - base.params.theta * 3.0).amax() < 1e-8);
    }

    #[test]
    fn estimates_are_bitwise_reproducible() {
        let sys = system(2);
        let dataset = linear_dataset(139, 35, 2);
        let cfg = SolverConfig::default();
        let a = two_step_estimate(&sys, &dataset, &cfg).unwrap();
        let b = two_step_estimate(&sys, &dataset, &cfg).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.std_errors, b.std_errors);
        assert_eq!(a.objective_value, b.objective_value);
    }

    #[test]
    fn labeled_count_errors() {
        let sys = system(0);
        let mut rng = StreamRng::from_seed(149);
        // No labeled records at all (M = 0 so records carry nothing else).
        let unlabeled: Vec<ObservationRecord> =
            (0..5).map(|i| ObservationRecord::unlabeled(format!("{i}"), vec![])).collect();
        let err = two_step_estimate(&sys, &unlabeled, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));

        // One labeled record for two parameters.
        let one = vec![
            ObservationRecord::labeled(
                "0",
                XyPair::new(vec2(1.0, rng.standard_normal()), 1.0),
                vec![],
            ),
            ObservationRecord::unlabeled("1", vec![]),
        ];
        let err = two_step_estimate(&sys, &one, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Identification(_)));
    }
}
