//! Debiasing baselines: the human-only M-estimator, imputed-loss estimators
//! with power tuning, cross-fitted mixture selection, and a score-regression
//! correction.
//!
//! The imputed loss blends proxy and synthetic losses through a mixture
//! weight `alpha` (proxy weight `alpha`, synthetic weight `1 - alpha`) and
//! debiases with the labeled rows:
//!
//! `L(theta) = lambda * (1/N) sum_all mix_t(theta)
//!           + (1/n) sum_labeled [loss(real_t) - lambda * mix_t(theta)]`,
//!
//! `mix_t = (1 - alpha) * loss(synth_t) + alpha * loss(proxy_t)`.
//!
//! At `lambda = 1` the imputed terms cancel in expectation, so `L` is an
//! unbiased estimate of the population loss for any `alpha`; at `alpha = 1`
//! the synthetic terms vanish entirely and the estimator uses proxy data
//! only. The power-tuning scalar `lambda` is chosen to minimize the plug-in
//! asymptotic variance of the estimating equation. Confidence intervals come
//! from the influence-function sandwich of that estimating equation.
//!
//! Auxiliary slot convention: slot 0 is the proxy source, slot 1 the
//! synthetic source.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::augmented::ObservationRecord;
use crate::error::{Error, Result};
use crate::fit::{minimize_weighted_glm, GlmTerm};
use crate::gmm::SolverConfig;
use crate::inference::{confidence_interval, ConfidenceInterval};
use crate::moments::MomentModel;
use crate::rng::StreamRng;

/// Auxiliary slot holding model-predicted pairs.
pub const PROXY_SLOT: usize = 0;
/// Auxiliary slot holding model-generated pairs.
pub const SYNTH_SLOT: usize = 1;

/// A hyperparameter that is either fixed or tuned from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperChoice {
    Fixed(f64),
    Named(NamedChoice),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedChoice {
    Tune,
}

impl HyperChoice {
    pub const TUNE: HyperChoice = HyperChoice::Named(NamedChoice::Tune);

    pub fn is_tune(&self) -> bool {
        matches!(self, HyperChoice::Named(NamedChoice::Tune))
    }

    pub fn fixed_value(&self) -> Option<f64> {
        match self {
            HyperChoice::Fixed(v) => Some(*v),
            HyperChoice::Named(_) => None,
        }
    }
}

/// Configuration for the imputed-loss estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpiConfig {
    /// Mixture weight on the proxy loss, in `[0, 1]`, or tuned by grid
    /// search against the pilot fit.
    pub alpha: HyperChoice,
    /// Number of evenly spaced grid points on `[0, 1]` used when tuning
    /// `alpha`. Ties break toward the smaller value.
    pub alpha_grid: usize,
    /// Power-tuning scalar on the imputed terms, or tuned to minimize the
    /// plug-in asymptotic variance.
    pub lambda_power: HyperChoice,
    /// Number of cross-fitting folds.
    pub folds: usize,
    /// Confidence level for reported intervals.
    pub level: f64,
    /// Seed for the deterministic fold assignment.
    pub fold_seed: u64,
}

impl Default for PpiConfig {
    fn default() -> Self {
        Self {
            alpha: HyperChoice::TUNE,
            alpha_grid: 21,
            lambda_power: HyperChoice::TUNE,
            folds: 2,
            level: 0.95,
            fold_seed: 0,
        }
    }
}

impl PpiConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(alpha) = self.alpha.fixed_value() {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::usage(format!("alpha must lie in [0, 1], got {alpha}")));
            }
        }
        if self.alpha_grid < 2 {
            return Err(Error::usage("alpha_grid needs at least the two endpoints"));
        }
        if let Some(lambda) = self.lambda_power.fixed_value() {
            if !lambda.is_finite() {
                return Err(Error::usage("lambda_power must be finite"));
            }
        }
        if self.folds < 2 {
            return Err(Error::usage("cross-fitting needs at least 2 folds"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::usage(format!(
                "confidence level must lie strictly in (0, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// Point estimate with sandwich standard errors from one baseline method.
#[derive(Clone, Debug)]
pub struct BaselineEstimate {
    pub method: String,
    pub theta: DVector<f64>,
    pub std_errors: DVector<f64>,
    pub intervals: Vec<ConfidenceInterval>,
    pub chosen_alpha: Option<f64>,
    pub chosen_lambda: Option<f64>,
    /// Per-fold mixture weights when cross-fitting.
    pub fold_alphas: Vec<f64>,
    /// Per-fold power scalars when cross-fitting.
    pub fold_lambdas: Vec<f64>,
    /// Per-fold estimates when cross-fitting; the reported estimate is
    /// exactly their arithmetic mean.
    pub fold_thetas: Vec<DVector<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

fn labeled_indices(dataset: &[ObservationRecord]) -> Vec<usize> {
    dataset
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_labeled())
        .map(|(i, _)| i)
        .collect()
}

fn check_aux_slots(dataset: &[ObservationRecord], alpha: f64) -> Result<()> {
    let need_proxy = alpha > 0.0;
    let need_synth = alpha < 1.0;
    for record in dataset {
        if need_proxy && record.aux.len() <= PROXY_SLOT {
            return Err(Error::structure(format!(
                "record {} has no proxy pair in auxiliary slot {}",
                record.id, PROXY_SLOT
            )));
        }
        if need_synth && record.aux.len() <= SYNTH_SLOT {
            return Err(Error::structure(format!(
                "record {} has no synthetic pair in auxiliary slot {}; alpha = {alpha} requires one",
                record.id, SYNTH_SLOT
            )));
        }
    }
    Ok(())
}

fn glm_loss_value(model: &MomentModel, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> f64 {
    let z = x.dot(theta);
    -y * z + model.link.cumulant(z)
}

fn glm_gradient(model: &MomentModel, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> DVector<f64> {
    let z = x.dot(theta);
    x * (model.link.mean(z) - y)
}

fn glm_hessian_into(
    model: &MomentModel,
    theta: &DVector<f64>,
    x: &DVector<f64>,
    weight: f64,
    out: &mut DMatrix<f64>,
) {
    let z = x.dot(theta);
    let curve = weight * model.link.mean_deriv(z);
    for i in 0..x.len() {
        for j in 0..x.len() {
            out[(i, j)] += curve * x[i] * x[j];
        }
    }
}

fn mix_loss(model: &MomentModel, theta: &DVector<f64>, record: &ObservationRecord, alpha: f64) -> f64 {
    let mut value = 0.0;
    if alpha > 0.0 {
        let p = &record.aux[PROXY_SLOT];
        value += alpha * glm_loss_value(model, theta, &p.x, p.y);
    }
    if alpha < 1.0 {
        let s = &record.aux[SYNTH_SLOT];
        value += (1.0 - alpha) * glm_loss_value(model, theta, &s.x, s.y);
    }
    value
}

fn mix_gradient(
    model: &MomentModel,
    theta: &DVector<f64>,
    record: &ObservationRecord,
    alpha: f64,
) -> DVector<f64> {
    let mut grad = DVector::zeros(theta.len());
    if alpha > 0.0 {
        let p = &record.aux[PROXY_SLOT];
        grad += glm_gradient(model, theta, &p.x, p.y) * alpha;
    }
    if alpha < 1.0 {
        let s = &record.aux[SYNTH_SLOT];
        grad += glm_gradient(model, theta, &s.x, s.y) * (1.0 - alpha);
    }
    grad
}

fn validate_ppi_inputs(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    theta: &DVector<f64>,
    alpha: f64,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::usage(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if theta.len() != model.d {
        return Err(Error::structure(format!(
            "parameter length {} != d = {}",
            theta.len(),
            model.d
        )));
    }
    let n = labeled_indices(dataset).len();
    if n == 0 {
        return Err(Error::usage("the imputed loss needs at least one labeled row"));
    }
    check_aux_slots(dataset, alpha)?;
    Ok(n)
}

/// The imputed loss at fixed parameters.
pub fn ppi_loss(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    theta: &DVector<f64>,
    alpha: f64,
    lambda_power: f64,
) -> Result<f64> {
    let n = validate_ppi_inputs(model, dataset, theta, alpha)?;
    let big_n = dataset.len() as f64;
    let n = n as f64;
    let mut all_rows = 0.0;
    let mut labeled = 0.0;
    for record in dataset {
        let mix = mix_loss(model, theta, record, alpha);
        all_rows += mix;
        if let Some(real) = &record.real {
            labeled += glm_loss_value(model, theta, &real.x, real.y) - lambda_power * mix;
        }
    }
    Ok(lambda_power * all_rows / big_n + labeled / n)
}

/// Gradient of [`ppi_loss`] in `theta`.
pub fn ppi_loss_gradient(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    theta: &DVector<f64>,
    alpha: f64,
    lambda_power: f64,
) -> Result<DVector<f64>> {
    let n = validate_ppi_inputs(model, dataset, theta, alpha)?;
    let big_n = dataset.len() as f64;
    let n = n as f64;
    let mut grad = DVector::zeros(model.d);
    for record in dataset {
        let mix = mix_gradient(model, theta, record, alpha);
        grad += &mix * (lambda_power / big_n);
        if let Some(real) = &record.real {
            grad += (glm_gradient(model, theta, &real.x, real.y) - &mix * lambda_power) / n;
        }
    }
    Ok(grad)
}

/// Variance-minimizing power scalar at a pilot estimate:
/// `clip( tr Cov(grad_real, grad_mix) / ((1 + n/m) tr Var(grad_mix)), 0, 1 )`,
/// computed from the labeled rows. Zero when there are no unlabeled rows
/// (the imputed terms then cancel identically) or the mix gradient is
/// degenerate.
fn tune_lambda(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    theta: &DVector<f64>,
    alpha: f64,
) -> f64 {
    let labeled = labeled_indices(dataset);
    let n = labeled.len();
    let m = dataset.len() - n;
    if m == 0 || n < 2 {
        return 0.0;
    }
    let d = model.d;
    let mut mean_a = DVector::<f64>::zeros(d);
    let mut mean_b = DVector::<f64>::zeros(d);
    let mut grads = Vec::with_capacity(n);
    for &idx in &labeled {
        let record = &dataset[idx];
        let real = record.real.as_ref().expect("labeled row");
        let a = glm_gradient(model, theta, &real.x, real.y);
        let b = mix_gradient(model, theta, record, alpha);
        mean_a += &a;
        mean_b += &b;
        grads.push((a, b));
    }
    mean_a /= n as f64;
    mean_b /= n as f64;
    let mut cross = 0.0;
    let mut var_b = 0.0;
    for (a, b) in &grads {
        let da = a - &mean_a;
        let db = b - &mean_b;
        cross += da.dot(&db);
        var_b += db.dot(&db);
    }
    if var_b <= 0.0 {
        return 0.0;
    }
    let ratio = cross / ((1.0 + n as f64 / m as f64) * var_b);
    ratio.clamp(0.0, 1.0)
}

/// Grid of `count` evenly spaced points on `[0, 1]`.
fn alpha_grid_values(count: usize) -> Vec<f64> {
    (0..count).map(|k| k as f64 / (count - 1) as f64).collect()
}

/// Pick the grid value minimizing the imputed loss at the pilot estimate;
/// ties break toward the smaller `alpha`.
fn select_alpha_on_grid(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    pilot: &DVector<f64>,
    grid: usize,
) -> Result<f64> {
    let mut best_alpha = 0.0;
    let mut best_value = f64::INFINITY;
    for alpha in alpha_grid_values(grid) {
        let value = ppi_loss(model, dataset, pilot, alpha, 1.0)?;
        if value < best_value {
            best_value = value;
            best_alpha = alpha;
        }
    }
    Ok(best_alpha)
}

fn human_only_fit(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    cfg: &SolverConfig,
) -> Result<(DVector<f64>, crate::fit::FitDiagnostics)> {
    let labeled = labeled_indices(dataset);
    let n = labeled.len();
    if n == 0 {
        return Err(Error::usage(
            "target parameter unidentifiable: the dataset has no labeled records",
        ));
    }
    if n < model.d {
        return Err(Error::identification(format!(
            "only {n} labeled records for {} parameters",
            model.d
        )));
    }
    let w = 1.0 / n as f64;
    let terms: Vec<GlmTerm<'_>> = labeled
        .iter()
        .map(|&i| {
            let real = dataset[i].real.as_ref().expect("labeled row");
            GlmTerm {
                weight: w,
                x: &real.x,
                y: real.y,
            }
        })
        .collect();
    let init = DVector::zeros(model.d);
    minimize_weighted_glm(model, &terms, None, &init, cfg, true)
}

fn invert_pd(h: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    h.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| h.clone().lu().try_inverse())
        .ok_or_else(|| Error::identification(format!("{context} is singular")))
}

/// Sandwich from per-row influence contributions `u_t` of an estimating
/// equation `(1/N) sum_t u_t(theta) = 0` with labeled-mean Hessian slope.
fn influence_sandwich(
    hessian: &DMatrix<f64>,
    contributions: &[DVector<f64>],
) -> Result<DVector<f64>> {
    let d = hessian.nrows();
    let n_total = contributions.len() as f64;
    let mut omega = DMatrix::zeros(d, d);
    for u in contributions {
        omega += u * u.transpose();
    }
    omega /= n_total;
    let h_inv = invert_pd(hessian, "estimating-equation Hessian")?;
    let v = &h_inv * omega * &h_inv;
    Ok(DVector::from_fn(d, |i, _| (v[(i, i)].max(0.0) / n_total).sqrt()))
}

/// Classical M-estimator on the labeled rows with sandwich standard errors.
pub fn human_only_estimate(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    level: f64,
    cfg: &SolverConfig,
) -> Result<BaselineEstimate> {
    let (theta, diag) = human_only_fit(model, dataset, cfg)?;
    let labeled = labeled_indices(dataset);
    let n = labeled.len();
    let d = model.d;

    let mut hessian = DMatrix::zeros(d, d);
    let mut scores = Vec::with_capacity(n);
    for &i in &labeled {
        let real = dataset[i].real.as_ref().expect("labeled row");
        glm_hessian_into(model, &theta, &real.x, 1.0 / n as f64, &mut hessian);
        scores.push(glm_gradient(model, &theta, &real.x, real.y));
    }
    let std_errors = influence_sandwich(&hessian, &scores)?;
    let intervals = (0..d)
        .map(|i| confidence_interval(theta[i], std_errors[i], level))
        .collect::<Result<Vec<_>>>()?;

    Ok(BaselineEstimate {
        method: "human-only".to_string(),
        theta,
        std_errors,
        intervals,
        chosen_alpha: None,
        chosen_lambda: None,
        fold_alphas: Vec::new(),
        fold_lambdas: Vec::new(),
        fold_thetas: Vec::new(),
        converged: diag.converged,
        iterations: diag.iterations,
        warnings: Vec::new(),
    })
}

/// Imputed-loss estimator at a fixed or tuned mixture weight, with power
/// tuning and influence-function confidence intervals.
pub fn ppi_estimate(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    cfg: &PpiConfig,
    solver: &SolverConfig,
) -> Result<BaselineEstimate> {
    cfg.validate()?;
    let (pilot, _) = human_only_fit(model, dataset, solver)?;
    let alpha = match cfg.alpha {
        HyperChoice::Fixed(a) => a,
        HyperChoice::Named(NamedChoice::Tune) => {
            check_aux_slots(dataset, 0.5)?; // tuning sweeps both sources
            select_alpha_on_grid(model, dataset, &pilot, cfg.alpha_grid)?
        }
    };
    check_aux_slots(dataset, alpha)?;
    let lambda = match cfg.lambda_power {
        HyperChoice::Fixed(l) => l,
        HyperChoice::Named(NamedChoice::Tune) => tune_lambda(model, dataset, &pilot, alpha),
    };
    ppi_estimate_fixed(model, dataset, alpha, lambda, cfg.level, solver, true)
}

/// Core imputed-loss fit at fully resolved hyperparameters.
fn ppi_estimate_fixed(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    alpha: f64,
    lambda: f64,
    level: f64,
    solver: &SolverConfig,
    record_alpha: bool,
) -> Result<BaselineEstimate> {
    let labeled = labeled_indices(dataset);
    let n = labeled.len() as f64;
    let big_n = dataset.len() as f64;
    let (pilot, _) = human_only_fit(model, dataset, solver)?;
    check_aux_slots(dataset, alpha)?;

    // Assemble the weighted objective. Zero-weight terms are skipped so that
    // alpha = 1 never touches the synthetic slot and lambda = 0 reduces to
    // the human-only objective.
    let mut terms: Vec<GlmTerm<'_>> = Vec::new();
    let proxy_all = lambda * alpha / big_n;
    let synth_all = lambda * (1.0 - alpha) / big_n;
    let proxy_lab = -lambda * alpha / n;
    let synth_lab = -lambda * (1.0 - alpha) / n;
    for record in dataset {
        if proxy_all != 0.0 {
            let p = &record.aux[PROXY_SLOT];
            terms.push(GlmTerm { weight: proxy_all, x: &p.x, y: p.y });
        }
        if synth_all != 0.0 {
            let s = &record.aux[SYNTH_SLOT];
            terms.push(GlmTerm { weight: synth_all, x: &s.x, y: s.y });
        }
        if let Some(real) = &record.real {
            terms.push(GlmTerm { weight: 1.0 / n, x: &real.x, y: real.y });
            if proxy_lab != 0.0 {
                let p = &record.aux[PROXY_SLOT];
                terms.push(GlmTerm { weight: proxy_lab, x: &p.x, y: p.y });
            }
            if synth_lab != 0.0 {
                let s = &record.aux[SYNTH_SLOT];
                terms.push(GlmTerm { weight: synth_lab, x: &s.x, y: s.y });
            }
        }
    }
    let (theta, diag) = minimize_weighted_glm(model, &terms, None, &pilot, solver, false)?;

    // Influence-function sandwich of the estimating equation.
    let d = model.d;
    let mut hessian = DMatrix::zeros(d, d);
    let mut contributions = Vec::with_capacity(dataset.len());
    let inflate = big_n / n;
    for record in dataset {
        let mix_grad = if lambda != 0.0 {
            mix_gradient(model, &theta, record, alpha)
        } else {
            DVector::zeros(d)
        };
        if lambda != 0.0 {
            if alpha > 0.0 {
                let p = &record.aux[PROXY_SLOT];
                glm_hessian_into(model, &theta, &p.x, lambda * alpha / big_n, &mut hessian);
            }
            if alpha < 1.0 {
                let s = &record.aux[SYNTH_SLOT];
                glm_hessian_into(model, &theta, &s.x, lambda * (1.0 - alpha) / big_n, &mut hessian);
            }
        }
        let mut u = &mix_grad * lambda;
        if let Some(real) = &record.real {
            let a = glm_gradient(model, &theta, &real.x, real.y);
            glm_hessian_into(model, &theta, &real.x, 1.0 / n, &mut hessian);
            if lambda != 0.0 {
                if alpha > 0.0 {
                    let p = &record.aux[PROXY_SLOT];
                    glm_hessian_into(model, &theta, &p.x, -lambda * alpha / n, &mut hessian);
                }
                if alpha < 1.0 {
                    let s = &record.aux[SYNTH_SLOT];
                    glm_hessian_into(model, &theta, &s.x, -lambda * (1.0 - alpha) / n, &mut hessian);
                }
            }
            u += (a - &mix_grad * lambda) * inflate;
        }
        contributions.push(u);
    }
    let std_errors = influence_sandwich(&hessian, &contributions)?;
    let intervals = (0..d)
        .map(|i| confidence_interval(theta[i], std_errors[i], level))
        .collect::<Result<Vec<_>>>()?;

    Ok(BaselineEstimate {
        method: "ppi".to_string(),
        theta,
        std_errors,
        intervals,
        chosen_alpha: record_alpha.then_some(alpha),
        chosen_lambda: Some(lambda),
        fold_alphas: Vec::new(),
        fold_lambdas: Vec::new(),
        fold_thetas: Vec::new(),
        converged: diag.converged,
        iterations: diag.iterations,
        warnings: Vec::new(),
    })
}

/// Deterministic stratified fold assignment: labeled and unlabeled rows are
/// each shuffled by the seed and dealt round-robin, so every fold keeps the
/// labeled fraction balanced.
pub fn assign_folds(dataset: &[ObservationRecord], folds: usize, seed: u64) -> Vec<usize> {
    let mut assignment = vec![0usize; dataset.len()];
    for (stratum, labeled) in [(0u64, true), (1u64, false)] {
        let mut indices: Vec<usize> = dataset
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_labeled() == labeled)
            .map(|(i, _)| i)
            .collect();
        let mut rng = StreamRng::from_path(&[seed, 0xF01D, stratum]);
        rng.shuffle(&mut indices);
        for (order, idx) in indices.into_iter().enumerate() {
            assignment[idx] = order % folds;
        }
    }
    assignment
}

/// Cross-fitted mixture selection: per fold, fit the pilot on the training
/// rows, pick `alpha` there by grid search, estimate on the held-out rows,
/// and average the fold estimates.
pub fn select_alpha_crossfit(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    cfg: &PpiConfig,
    solver: &SolverConfig,
) -> Result<BaselineEstimate> {
    cfg.validate()?;
    let fold_ids = assign_folds(dataset, cfg.folds, cfg.fold_seed);
    select_alpha_crossfit_with_folds(model, dataset, cfg, solver, &fold_ids)
}

/// Cross-fitting with an explicit fold assignment (one fold id per record).
pub fn select_alpha_crossfit_with_folds(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    cfg: &PpiConfig,
    solver: &SolverConfig,
    fold_ids: &[usize],
) -> Result<BaselineEstimate> {
    cfg.validate()?;
    if fold_ids.len() != dataset.len() {
        return Err(Error::structure(format!(
            "fold assignment length {} != dataset length {}",
            fold_ids.len(),
            dataset.len()
        )));
    }
    check_aux_slots(dataset, 0.5)?;
    let k = cfg.folds;
    let d = model.d;

    let mut fold_thetas = Vec::with_capacity(k);
    let mut fold_alphas = Vec::with_capacity(k);
    let mut fold_lambdas = Vec::with_capacity(k);
    let mut fold_variances: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut converged = true;
    let mut iterations = 0;
    let mut warnings = Vec::new();

    for fold in 0..k {
        let train: Vec<ObservationRecord> = dataset
            .iter()
            .zip(fold_ids)
            .filter(|(_, &f)| f != fold)
            .map(|(r, _)| r.clone())
            .collect();
        let held: Vec<ObservationRecord> = dataset
            .iter()
            .zip(fold_ids)
            .filter(|(_, &f)| f == fold)
            .map(|(r, _)| r.clone())
            .collect();
        let held_labeled = labeled_indices(&held).len();
        let train_labeled = labeled_indices(&train).len();
        if held_labeled < d || train_labeled < d {
            return Err(Error::usage(format!(
                "fold {fold} retains {held_labeled} labeled rows (train side {train_labeled}); \
                 each fold needs at least d = {d}"
            )));
        }

        let (pilot, _) = human_only_fit(model, &train, solver)?;
        let alpha = match cfg.alpha {
            HyperChoice::Fixed(a) => a,
            HyperChoice::Named(NamedChoice::Tune) => {
                select_alpha_on_grid(model, &train, &pilot, cfg.alpha_grid)?
            }
        };
        let lambda = match cfg.lambda_power {
            HyperChoice::Fixed(l) => l,
            HyperChoice::Named(NamedChoice::Tune) => {
                let (held_pilot, _) = human_only_fit(model, &held, solver)?;
                tune_lambda(model, &held, &held_pilot, alpha)
            }
        };
        let fit = ppi_estimate_fixed(model, &held, alpha, lambda, cfg.level, solver, true)?;
        converged &= fit.converged;
        iterations += fit.iterations;
        warnings.extend(fit.warnings);
        fold_variances.push(DVector::from_fn(d, |i, _| {
            fit.std_errors[i] * fit.std_errors[i]
        }));
        fold_thetas.push(fit.theta);
        fold_alphas.push(alpha);
        fold_lambdas.push(lambda);
    }

    // The cross-fit estimate is exactly the mean of the fold estimates.
    let mut theta = DVector::zeros(d);
    for t in &fold_thetas {
        theta += t;
    }
    theta /= k as f64;
    // Folds are disjoint, so fold estimates are treated as independent:
    // Var(mean) = sum of fold variances / K^2.
    let mut var = DVector::zeros(d);
    for v in &fold_variances {
        var += v;
    }
    let std_errors = DVector::from_fn(d, |i, _| (var[i] / (k * k) as f64).sqrt());
    let intervals = (0..d)
        .map(|i| confidence_interval(theta[i], std_errors[i], cfg.level))
        .collect::<Result<Vec<_>>>()?;

    Ok(BaselineEstimate {
        method: "ppi-crossfit".to_string(),
        theta,
        std_errors,
        intervals,
        chosen_alpha: None,
        chosen_lambda: None,
        fold_alphas,
        fold_lambdas,
        fold_thetas,
        converged,
        iterations,
        warnings,
    })
}

/// Score-regression estimator: fit the human-only estimate, regress its
/// per-row score on the auxiliary features `(1, x_proxy, y_proxy, x_synth,
/// y_synth)`, then solve the score equation shifted by the power-tuned
/// difference between the all-rows and labeled-rows means of the fitted map.
pub fn reppi_estimate(
    model: &MomentModel,
    dataset: &[ObservationRecord],
    level: f64,
    solver: &SolverConfig,
) -> Result<BaselineEstimate> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::usage(format!(
            "confidence level must lie strictly in (0, 1), got {level}"
        )));
    }
    let d = model.d;
    let labeled = labeled_indices(dataset);
    let n = labeled.len();
    let feature_dim = 2 * (d + 1) + 1;
    if n < d + 2 * d + 3 {
        return Err(Error::usage(format!(
            "score regression needs at least {} labeled rows (have {n})",
            d + 2 * d + 3
        )));
    }
    check_aux_slots(dataset, 0.5)?;

    let (pilot, pilot_diag) = human_only_fit(model, dataset, solver)?;

    let features = |record: &ObservationRecord| -> DVector<f64> {
        let p = &record.aux[PROXY_SLOT];
        let s = &record.aux[SYNTH_SLOT];
        let mut phi = DVector::zeros(feature_dim);
        phi[0] = 1.0;
        phi.rows_mut(1, d).copy_from(&p.x);
        phi[1 + d] = p.y;
        phi.rows_mut(2 + d, d).copy_from(&s.x);
        phi[2 + 2 * d] = s.y;
        phi
    };

    // Least squares per score coordinate on the labeled rows.
    let mut gram = DMatrix::zeros(feature_dim, feature_dim);
    let mut cross = DMatrix::zeros(feature_dim, d);
    for &i in &labeled {
        let record = &dataset[i];
        let real = record.real.as_ref().expect("labeled row");
        let phi = features(record);
        let target = glm_gradient(model, &pilot, &real.x, real.y);
        gram += &phi * phi.transpose();
        cross += &phi * target.transpose();
    }

    let mut warnings = Vec::new();
    let coefficients = match gram.clone().cholesky() {
        Some(chol) => Some(chol.solve(&cross)),
        None => None,
    };
    let (lambda, score_map): (f64, Option<DMatrix<f64>>) = match coefficients {
        Some(b) => {
            let h_all: Vec<DVector<f64>> = dataset
                .iter()
                .map(|r| b.transpose() * features(r))
                .collect();
            // Power tuning against the labeled scores at the pilot.
            let lambda = {
                let m = dataset.len() - n;
                if m == 0 || n < 2 {
                    0.0
                } else {
                    let mut mean_a = DVector::<f64>::zeros(d);
                    let mut mean_b = DVector::<f64>::zeros(d);
                    let mut rows = Vec::with_capacity(n);
                    for &i in &labeled {
                        let real = dataset[i].real.as_ref().expect("labeled row");
                        let a = glm_gradient(model, &pilot, &real.x, real.y);
                        let b_i = h_all[i].clone();
                        mean_a += &a;
                        mean_b += &b_i;
                        rows.push((a, b_i));
                    }
                    mean_a /= n as f64;
                    mean_b /= n as f64;
                    let mut cov = 0.0;
                    let mut var = 0.0;
                    for (a, b_i) in &rows {
                        let da = a - &mean_a;
                        let db = b_i - &mean_b;
                        cov += da.dot(&db);
                        var += db.dot(&db);
                    }
                    if var <= 0.0 {
                        0.0
                    } else {
                        (cov / ((1.0 + n as f64 / m as f64) * var)).clamp(0.0, 1.0)
                    }
                }
            };
            (lambda, Some(b))
        }
        None => {
            warnings.push(
                "score regression is rank-deficient; correction disabled (lambda = 0)".to_string(),
            );
            (0.0, None)
        }
    };

    // Correction vector: lambda * (all-rows mean - labeled mean) of the map.
    let mut shift = DVector::zeros(d);
    if lambda != 0.0 {
        if let Some(b) = &score_map {
            let mut mean_all = DVector::<f64>::zeros(d);
            let mut mean_lab = DVector::<f64>::zeros(d);
            for (i, record) in dataset.iter().enumerate() {
                let h = b.transpose() * features(record);
                mean_all += &h;
                if record.is_labeled() {
                    mean_lab += &h;
                }
                let _ = i;
            }
            mean_all /= dataset.len() as f64;
            mean_lab /= n as f64;
            shift = (mean_all - mean_lab) * lambda;
        }
    }

    // Solve the shifted score equation: mean labeled loss + shift' theta.
    let w = 1.0 / n as f64;
    let terms: Vec<GlmTerm<'_>> = labeled
        .iter()
        .map(|&i| {
            let real = dataset[i].real.as_ref().expect("labeled row");
            GlmTerm { weight: w, x: &real.x, y: real.y }
        })
        .collect();
    let (theta, diag) =
        minimize_weighted_glm(model, &terms, Some(&shift), &pilot, solver, true)?;

    // Influence sandwich of the shifted equation.
    let big_n = dataset.len() as f64;
    let inflate = big_n / n as f64;
    let mut hessian = DMatrix::zeros(d, d);
    let mut contributions = Vec::with_capacity(dataset.len());
    for record in dataset.iter() {
        let h = match &score_map {
            Some(b) if lambda != 0.0 => b.transpose() * features(record),
            _ => DVector::zeros(d),
        };
        let mut u = &h * lambda;
        if let Some(real) = &record.real {
            glm_hessian_into(model, &theta, &real.x, w, &mut hessian);
            let a = glm_gradient(model, &theta, &real.x, real.y);
            u += (a - &h * lambda) * inflate;
        }
        contributions.push(u);
    }
    let std_errors = influence_sandwich(&hessian, &contributions)?;
    let intervals = (0..d)
        .map(|i| confidence_interval(theta[i], std_errors[i], level))
        .collect::<Result<Vec<_>>>()?;

    Ok(BaselineEstimate {
        method: "reppi".to_string(),
        theta,
        std_errors,
        intervals,
        chosen_alpha: None,
        chosen_lambda: Some(lambda),
        fold_alphas: Vec::new(),
        fold_lambdas: Vec::new(),
        fold_thetas: Vec::new(),
        converged: pilot_diag.converged && diag.converged,
        iterations: pilot_diag.iterations + diag.iterations,
        warnings,
    })
}
