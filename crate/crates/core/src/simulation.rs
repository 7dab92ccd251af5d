//! Synthetic data-generating processes and the Monte Carlo study harness.
//!
//! The generative model behind every row mirrors the estimation setting:
//! a latent real pair `(x, y)` is drawn for each row, observed only on
//! labeled rows, and two parameterized channels stand in for the machine
//! annotator:
//!
//! - the proxy channel perturbs the row's latent pair (covariate noise plus
//!   label corruption), or draws a fresh independent pair when configured;
//! - the synthetic channel is anchored to the row: with probability
//!   `fidelity` it reproduces the row's latent pair (the calibrated case,
//!   where auxiliary residuals match real residuals exactly), otherwise it
//!   draws an independent pair from a shifted, mis-specified law.
//!
//! All randomness is derived from `(seed, trial, row, channel)` through
//! counter-based streams, so rows are i.i.d. by construction and every
//! study is reproducible bit-for-bit at any worker count.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmented::{AugmentedSystem, ObservationRecord, XyPair};
use crate::baselines::{
    human_only_estimate, ppi_estimate, reppi_estimate, select_alpha_crossfit, BaselineEstimate,
    HyperChoice, PpiConfig,
};
use crate::error::{Error, Result};
use crate::gmm::{two_step_estimate, SolverConfig};
use crate::inference::{confidence_interval, ConfidenceInterval};
use crate::moments::{Link, MomentModel};
use crate::rng::StreamRng;

/// Environment variable that caps the simulation worker count.
pub const MAX_WORKERS_ENV: &str = "AUXGMM_MAX_WORKERS";

const CHANNEL_LATENT: u64 = 0;
const CHANNEL_PROXY: u64 = 1;
const CHANNEL_SYNTH: u64 = 2;

/// Estimators the study harness can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    HumanOnly,
    GmmProxy,
    GmmSynth,
    PpiProxy,
    PpiSynth,
    PpiSynthCrossfit,
    Reppi,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::HumanOnly,
        Method::GmmProxy,
        Method::GmmSynth,
        Method::PpiProxy,
        Method::PpiSynth,
        Method::PpiSynthCrossfit,
        Method::Reppi,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::HumanOnly => "human-only",
            Method::GmmProxy => "gmm-proxy",
            Method::GmmSynth => "gmm-synth",
            Method::PpiProxy => "ppi-proxy",
            Method::PpiSynth => "ppi-synth",
            Method::PpiSynthCrossfit => "ppi-synth-crossfit",
            Method::Reppi => "reppi",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown method '{s}'; expected one of: {}",
                    Method::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

/// Proxy channel: how model-predicted pairs are derived from a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyChannel {
    /// Gaussian noise added to each non-intercept covariate coordinate.
    pub x_noise_sd: f64,
    /// Label flip probability for binary outcomes (logistic link).
    pub y_flip_prob: f64,
    /// Gaussian label noise for continuous outcomes (identity link).
    pub y_noise_sd: f64,
    /// Draw the proxy from a fresh latent pair instead of the row's own,
    /// making it independent of the real data.
    pub independent: bool,
}

impl Default for ProxyChannel {
    fn default() -> Self {
        Self {
            x_noise_sd: 0.25,
            y_flip_prob: 0.1,
            y_noise_sd: 0.25,
            independent: false,
        }
    }
}

/// Synthetic channel: anchored reproduction of the row with probability
/// `fidelity`, otherwise an independent draw from the law at
/// `theta_star + shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticChannel {
    pub fidelity: f64,
    /// Parameter shift of the mis-specified law; empty means zero shift.
    pub shift: Vec<f64>,
}

impl Default for SyntheticChannel {
    fn default() -> Self {
        Self {
            fidelity: 1.0,
            shift: Vec::new(),
        }
    }
}

/// Fully parameterized data-generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub d: usize,
    /// Ground-truth target parameter, length `d`.
    pub theta_star: Vec<f64>,
    pub link: Link,
    /// Labeled row count `n`.
    pub n_labeled: usize,
    /// Unlabeled row count `m`.
    pub n_unlabeled: usize,
    /// Fix the first covariate coordinate to 1.
    pub intercept: bool,
    /// Outcome noise for the identity link (ignored by the logistic link).
    pub noise_sd: f64,
    pub proxy: ProxyChannel,
    pub synthetic: SyntheticChannel,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            d: 2,
            theta_star: vec![-0.5, 1.0],
            link: Link::Logistic,
            n_labeled: 100,
            n_unlabeled: 900,
            intercept: true,
            noise_sd: 1.0,
            proxy: ProxyChannel::default(),
            synthetic: SyntheticChannel::default(),
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::usage("d must be positive"));
        }
        if self.theta_star.len() != self.d {
            return Err(Error::usage(format!(
                "theta_star has length {}, expected d = {}",
                self.theta_star.len(),
                self.d
            )));
        }
        if !self.theta_star.iter().all(|v| v.is_finite()) {
            return Err(Error::usage("theta_star must be finite"));
        }
        if self.n_labeled == 0 {
            return Err(Error::usage("n_labeled must be at least 1"));
        }
        if !(self.noise_sd >= 0.0) || !(self.proxy.x_noise_sd >= 0.0) || !(self.proxy.y_noise_sd >= 0.0)
        {
            return Err(Error::usage("noise standard deviations must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.proxy.y_flip_prob) {
            return Err(Error::usage("y_flip_prob must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.synthetic.fidelity) {
            return Err(Error::usage("fidelity must lie in [0, 1]"));
        }
        if !self.synthetic.shift.is_empty() && self.synthetic.shift.len() != self.d {
            return Err(Error::usage(format!(
                "synthetic shift has length {}, expected {} (or empty for zero shift)",
                self.synthetic.shift.len(),
                self.d
            )));
        }
        if !self.synthetic.shift.iter().all(|v| v.is_finite()) {
            return Err(Error::usage("synthetic shift must be finite"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<MomentModel> {
        MomentModel::new(self.d, self.link)
    }

    fn theta_star_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta_star)
    }

    fn shifted_parameter(&self) -> DVector<f64> {
        let mut shifted = self.theta_star_vector();
        for (i, s) in self.synthetic.shift.iter().enumerate() {
            shifted[i] += s;
        }
        shifted
    }
}

/// A full study: one DGP, a method list, and aggregation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub dgp: DgpConfig,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub level: f64,
    /// Labeled counts at which the human-only MSE curve is traced for
    /// effective-sample-size interpolation; empty disables the curve.
    pub ess_grid: Vec<usize>,
    pub seed: u64,
    /// Worker threads for the trial loop (capped by `AUXGMM_MAX_WORKERS`).
    pub workers: usize,
    /// Coordinate whose MSE/coverage is reported; defaults to the first
    /// non-intercept coefficient.
    pub target_coord: Option<usize>,
    pub ppi: PpiConfig,
    pub solver: SolverConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            methods: vec![Method::HumanOnly, Method::GmmSynth],
            trials: 200,
            level: 0.95,
            ess_grid: Vec::new(),
            seed: 0,
            workers: 1,
            target_coord: None,
            ppi: PpiConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.ppi.validate()?;
        self.solver.validate()?;
        if self.methods.is_empty() {
            return Err(Error::usage("the method list must not be empty"));
        }
        if self.trials == 0 {
            return Err(Error::usage("trials must be at least 1"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::usage(format!(
                "confidence level must lie strictly in (0, 1), got {}",
                self.level
            )));
        }
        if let Some(t) = self.target_coord {
            if t >= self.dgp.d {
                return Err(Error::usage(format!(
                    "target_coord {t} out of range for d = {}",
                    self.dgp.d
                )));
            }
        }
        for &n in &self.ess_grid {
            if n < self.dgp.d {
                return Err(Error::usage(format!(
                    "ess_grid entry {n} is below the parameter dimension {}",
                    self.dgp.d
                )));
            }
        }
        Ok(())
    }

    /// Reported coordinate: configured value, else the first non-intercept
    /// coefficient (coordinate 1, or 0 when d = 1).
    pub fn target_coordinate(&self) -> usize {
        self.target_coord.unwrap_or(1.min(self.dgp.d - 1))
    }
}

fn draw_covariates(rng: &mut StreamRng, d: usize, intercept: bool) -> DVector<f64> {
    DVector::from_fn(d, |i, _| {
        if intercept && i == 0 {
            1.0
        } else {
            rng.standard_normal()
        }
    })
}

fn draw_outcome(rng: &mut StreamRng, link: Link, z: f64, noise_sd: f64) -> f64 {
    match link {
        Link::Identity => z + noise_sd * rng.standard_normal(),
        Link::Logistic => {
            if rng.bernoulli(link.mean(z)) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// One i.i.d. dataset of `n + m` records with proxy and synthetic pairs
/// (two auxiliary slots). The first `n_labeled` rows are labeled; row order
/// carries no information because rows are exchangeable by construction.
pub fn generate_dgp_sample(dgp: &DgpConfig, trial_seed: u64) -> Result<Vec<ObservationRecord>> {
    dgp.validate()?;
    let theta_star = dgp.theta_star_vector();
    let shifted = dgp.shifted_parameter();
    let total = dgp.n_labeled + dgp.n_unlabeled;
    let mut records = Vec::with_capacity(total);

    for row in 0..total {
        let path = |channel: u64| StreamRng::from_path(&[dgp.seed, trial_seed, row as u64, channel]);

        let mut latent_rng = path(CHANNEL_LATENT);
        let x = draw_covariates(&mut latent_rng, dgp.d, dgp.intercept);
        let y = draw_outcome(&mut latent_rng, dgp.link, x.dot(&theta_star), dgp.noise_sd);

        let mut proxy_rng = path(CHANNEL_PROXY);
        let (base_x, base_y) = if dgp.proxy.independent {
            let fx = draw_covariates(&mut proxy_rng, dgp.d, dgp.intercept);
            let fy = draw_outcome(&mut proxy_rng, dgp.link, fx.dot(&theta_star), dgp.noise_sd);
            (fx, fy)
        } else {
            (x.clone(), y)
        };
        let mut proxy_x = base_x;
        for i in 0..dgp.d {
            if dgp.intercept && i == 0 {
                continue;
            }
            proxy_x[i] += dgp.proxy.x_noise_sd * proxy_rng.standard_normal();
        }
        let proxy_y = match dgp.link {
            Link::Identity => base_y + dgp.proxy.y_noise_sd * proxy_rng.standard_normal(),
            Link::Logistic => {
                if proxy_rng.bernoulli(dgp.proxy.y_flip_prob) {
                    1.0 - base_y
                } else {
                    base_y
                }
            }
        };

        let mut synth_rng = path(CHANNEL_SYNTH);
        let (synth_x, synth_y) = if synth_rng.bernoulli(dgp.synthetic.fidelity) {
            // Calibrated case: reproduce the anchor row's latent pair.
            (x.clone(), y)
        } else {
            let sx = draw_covariates(&mut synth_rng, dgp.d, dgp.intercept);
            let sy = draw_outcome(&mut synth_rng, dgp.link, sx.dot(&shifted), dgp.noise_sd);
            (sx, sy)
        };

        let aux = vec![XyPair::new(proxy_x, proxy_y), XyPair::new(synth_x, synth_y)];
        let record = if row < dgp.n_labeled {
            ObservationRecord::labeled(row.to_string(), XyPair::new(x, y), aux)
        } else {
            ObservationRecord::unlabeled(row.to_string(), aux)
        };
        records.push(record);
    }
    Ok(records)
}

/// Per-method estimate in the shape the study harness aggregates.
#[derive(Clone, Debug)]
pub struct MethodEstimate {
    pub method: Method,
    pub theta: DVector<f64>,
    pub std_errors: DVector<f64>,
    pub intervals: Vec<ConfidenceInterval>,
    pub converged: bool,
    pub iterations: usize,
    pub chosen_alpha: Option<f64>,
    pub chosen_lambda: Option<f64>,
    pub fold_alphas: Vec<f64>,
    /// Auxiliary sources the method actually used.
    pub num_aux: usize,
    /// Ridge applied when inverting the moment covariance (GMM methods).
    pub weight_ridge: Option<f64>,
    pub warnings: Vec<String>,
}

fn from_baseline(method: Method, est: BaselineEstimate, num_aux: usize) -> MethodEstimate {
    MethodEstimate {
        method,
        theta: est.theta,
        std_errors: est.std_errors,
        intervals: est.intervals,
        converged: est.converged,
        iterations: est.iterations,
        chosen_alpha: est.chosen_alpha,
        chosen_lambda: est.chosen_lambda,
        fold_alphas: est.fold_alphas,
        num_aux,
        weight_ridge: None,
        warnings: est.warnings,
    }
}

fn project_aux(dataset: &[ObservationRecord], keep: usize) -> Vec<ObservationRecord> {
    dataset
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.aux.truncate(keep);
            r
        })
        .collect()
}

fn min_aux(dataset: &[ObservationRecord]) -> usize {
    dataset.iter().map(|r| r.aux.len()).min().unwrap_or(0)
}

/// Runs one estimator on one dataset. This is the single dispatch point
/// shared by the study harness and the command-line `estimate` command.
pub fn estimate_with_method(
    method: Method,
    model: &MomentModel,
    dataset: &[ObservationRecord],
    level: f64,
    ppi: &PpiConfig,
    solver: &SolverConfig,
) -> Result<MethodEstimate> {
    let available = min_aux(dataset);
    match method {
        Method::HumanOnly => {
            let est = human_only_estimate(model, dataset, level, solver)?;
            Ok(from_baseline(method, est, 0))
        }
        Method::GmmProxy => {
            if available < 1 {
                return Err(Error::structure(
                    "gmm-proxy requires the proxy auxiliary source (M=1); dataset has M=0",
                ));
            }
            let projected = project_aux(dataset, 1);
            let system = AugmentedSystem::new(*model, 1);
            gmm_method_estimate(method, &system, &projected, level, solver)
        }
        Method::GmmSynth => {
            if available < 2 {
                return Err(Error::structure(format!(
                    "gmm-synth requires M=2 auxiliary sources (proxy and synthetic); dataset has M={available}"
                )));
            }
            let system = AugmentedSystem::new(*model, available);
            gmm_method_estimate(method, &system, dataset, level, solver)
        }
        Method::PpiProxy => {
            if available < 1 {
                return Err(Error::structure(
                    "ppi-proxy requires the proxy auxiliary source; dataset has M=0",
                ));
            }
            let cfg = PpiConfig {
                alpha: HyperChoice::Fixed(1.0),
                level,
                ..*ppi
            };
            let est = ppi_estimate(model, dataset, &cfg, solver)?;
            Ok(from_baseline(method, est, 1))
        }
        Method::PpiSynth => {
            if available < 2 {
                return Err(Error::structure(format!(
                    "ppi-synth requires M=2 auxiliary sources; dataset has M={available}"
                )));
            }
            let cfg = PpiConfig { level, ..*ppi };
            let est = ppi_estimate(model, dataset, &cfg, solver)?;
            Ok(from_baseline(method, est, 2))
        }
        Method::PpiSynthCrossfit => {
            if available < 2 {
                return Err(Error::structure(format!(
                    "ppi-synth-crossfit requires M=2 auxiliary sources; dataset has M={available}"
                )));
            }
            let cfg = PpiConfig { level, ..*ppi };
            let est = select_alpha_crossfit(model, dataset, &cfg, solver)?;
            Ok(from_baseline(method, est, 2))
        }
        Method::Reppi => {
            if available < 2 {
                return Err(Error::structure(format!(
                    "reppi requires M=2 auxiliary sources; dataset has M={available}"
                )));
            }
            let est = reppi_estimate(model, dataset, level, solver)?;
            Ok(from_baseline(method, est, 2))
        }
    }
}

fn gmm_method_estimate(
    method: Method,
    system: &AugmentedSystem,
    dataset: &[ObservationRecord],
    level: f64,
    solver: &SolverConfig,
) -> Result<MethodEstimate> {
    let estimate = two_step_estimate(system, dataset, solver)?;
    let theta = estimate.params.theta.clone();
    let std_errors = estimate.theta_std_errors();
    let intervals = (0..theta.len())
        .map(|i| confidence_interval(theta[i], std_errors[i], level))
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodEstimate {
        method,
        theta,
        std_errors,
        intervals,
        converged: estimate.converged,
        iterations: estimate.iterations,
        chosen_alpha: None,
        chosen_lambda: None,
        fold_alphas: Vec::new(),
        num_aux: system.num_aux,
        weight_ridge: Some(estimate.diagnostics.weight_ridge),
        warnings: estimate.diagnostics.warnings.clone(),
    })
}

/// Estimates from one trial; failures are recorded per method.
#[derive(Clone, Debug)]
pub struct TrialResult {
    pub trial: usize,
    pub estimates: Vec<(Method, Result<MethodEstimate>)>,
}

/// Generates one dataset and runs every configured method on it.
pub fn run_trial(study: &StudyConfig, trial_index: usize) -> Result<TrialResult> {
    let dataset = generate_dgp_sample(&study.dgp, trial_index as u64)?;
    let model = study.dgp.model()?;
    let fold_seed = StreamRng::from_path(&[study.seed, trial_index as u64, 0xC0F5]).next_u64();
    let ppi = PpiConfig {
        fold_seed,
        level: study.level,
        ..study.ppi
    };
    let estimates = study
        .methods
        .iter()
        .map(|&method| {
            (
                method,
                estimate_with_method(method, &model, &dataset, study.level, &ppi, &study.solver),
            )
        })
        .collect();
    Ok(TrialResult {
        trial: trial_index,
        estimates,
    })
}

/// Effective sample size from log-linear interpolation of a human-only MSE
/// curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssEstimate {
    pub n_effective: f64,
    /// The method MSE fell outside the curve's range and the result was
    /// clamped to an endpoint.
    pub clamped: bool,
    /// The curve was not monotone and isotonic regression was applied first.
    pub monotonized: bool,
}

/// Pool-adjacent-violators fit of a non-increasing sequence.
fn isotonic_nonincreasing(values: &[f64]) -> (Vec<f64>, bool) {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        let mut mean = v;
        let mut count = 1usize;
        while let Some(&(prev_mean, prev_count)) = blocks.last() {
            if prev_mean < mean {
                blocks.pop();
                let total = prev_count + count;
                mean = (prev_mean * prev_count as f64 + mean * count as f64) / total as f64;
                count = total;
            } else {
                break;
            }
        }
        blocks.push((mean, count));
    }
    let mut fitted = Vec::with_capacity(values.len());
    for (mean, count) in blocks {
        fitted.extend(std::iter::repeat(mean).take(count));
    }
    let changed = fitted.iter().zip(values).any(|(a, b)| a != b);
    (fitted, changed)
}

/// The labeled count at which the human-only MSE curve matches
/// `method_mse`, by log-linear interpolation; clamped to the curve's
/// endpoints (with a flag) outside its range.
pub fn effective_sample_size(method_mse: f64, human_curve: &[(f64, f64)]) -> Result<EssEstimate> {
    if human_curve.len() < 2 {
        return Err(Error::usage(
            "the human-only curve needs at least two points",
        ));
    }
    let mut curve = human_curve.to_vec();
    curve.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite n"));
    for &(n, mse) in &curve {
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::usage(format!("curve n values must be positive, got {n}")));
        }
        if !(mse > 0.0) || !mse.is_finite() {
            return Err(Error::usage(format!(
                "curve MSE values must be strictly positive, got {mse}"
            )));
        }
    }
    if curve.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::usage("curve n values must be distinct"));
    }

    let raw: Vec<f64> = curve.iter().map(|&(_, mse)| mse).collect();
    let (fitted, monotonized) = isotonic_nonincreasing(&raw);

    if !(method_mse > 0.0) {
        // A zero (or negative) MSE beats every point on the curve.
        return Ok(EssEstimate {
            n_effective: curve.last().expect("nonempty").0,
            clamped: true,
            monotonized,
        });
    }
    if method_mse >= fitted[0] {
        return Ok(EssEstimate {
            n_effective: curve[0].0,
            clamped: method_mse > fitted[0],
            monotonized,
        });
    }
    let last = fitted.len() - 1;
    if method_mse <= fitted[last] {
        return Ok(EssEstimate {
            n_effective: curve[last].0,
            clamped: method_mse < fitted[last],
            monotonized,
        });
    }
    for i in 0..last {
        let (n_lo, mse_lo) = (curve[i].0, fitted[i]);
        let (n_hi, mse_hi) = (curve[i + 1].0, fitted[i + 1]);
        if method_mse <= mse_lo && method_mse >= mse_hi {
            if mse_lo == mse_hi {
                // Flat segment: take its left endpoint.
                return Ok(EssEstimate {
                    n_effective: n_lo,
                    clamped: false,
                    monotonized,
                });
            }
            let t = (method_mse.ln() - mse_lo.ln()) / (mse_hi.ln() - mse_lo.ln());
            let n_eff = (n_lo.ln() + t * (n_hi.ln() - n_lo.ln())).exp();
            return Ok(EssEstimate {
                n_effective: n_eff,
                clamped: false,
                monotonized,
            });
        }
    }
    unreachable!("method_mse bracketing failed on a monotone curve");
}

/// Aggregate numbers for one method over a study.
#[derive(Clone, Debug)]
pub struct MethodMetrics {
    pub method: Method,
    /// Trials that produced an estimate, converged or flagged.
    pub successes: usize,
    /// Trials in which the method returned an error.
    pub failures: usize,
    /// Flagged non-convergences among the successes.
    pub convergence_failures: usize,
    /// Mean squared deviation from the truth, per coordinate, over successes.
    pub mse_per_coord: Vec<f64>,
    pub mse_target: f64,
    /// Empirical variance of the target-coordinate estimates.
    pub variance_target: f64,
    /// Fraction of successful trials whose interval covers the truth.
    pub coverage: f64,
    /// Mean interval width for the target coordinate, converged trials only.
    pub mean_ci_width: f64,
    pub effective_sample_size: Option<EssEstimate>,
}

/// Everything a study produces: per-method aggregates and raw per-trial
/// estimates for long-format reporting.
#[derive(Clone, Debug)]
pub struct StudyMetrics {
    pub theta_star: Vec<f64>,
    pub target_coord: usize,
    pub level: f64,
    pub total_trials: usize,
    pub per_method: Vec<MethodMetrics>,
    pub trial_results: Vec<TrialResult>,
    /// Human-only MSE curve over the ess grid, as `(n, mse)` pairs.
    pub human_curve: Vec<(f64, f64)>,
}

/// Folds per-trial estimates for one method into summary metrics.
pub fn aggregate_method_metrics(
    method: Method,
    trial_results: &[TrialResult],
    theta_star: &[f64],
    target: usize,
) -> MethodMetrics {
    let d = theta_star.len();
    let mut successes = 0usize;
    let mut failures = 0usize;
    let mut convergence_failures = 0usize;
    let mut sq_err = vec![0.0f64; d];
    let mut target_sum = 0.0f64;
    let mut target_sq_sum = 0.0f64;
    let mut covered = 0usize;
    let mut width_sum = 0.0f64;
    let mut width_count = 0usize;

    for trial in trial_results {
        let Some((_, outcome)) = trial.estimates.iter().find(|(m, _)| *m == method) else {
            continue;
        };
        match outcome {
            Err(_) => failures += 1,
            Ok(est) => {
                successes += 1;
                if !est.converged {
                    convergence_failures += 1;
                }
                for i in 0..d {
                    let err = est.theta[i] - theta_star[i];
                    sq_err[i] += err * err;
                }
                let t_hat = est.theta[target];
                target_sum += t_hat;
                target_sq_sum += t_hat * t_hat;
                if est.intervals[target].contains(theta_star[target]) {
                    covered += 1;
                }
                if est.converged {
                    width_sum += est.intervals[target].width();
                    width_count += 1;
                }
            }
        }
    }

    let denom = successes.max(1) as f64;
    let mse_per_coord: Vec<f64> = sq_err.iter().map(|s| s / denom).collect();
    let mean_target = target_sum / denom;
    MethodMetrics {
        method,
        successes,
        failures,
        convergence_failures,
        mse_target: mse_per_coord.get(target).copied().unwrap_or(f64::NAN),
        mse_per_coord,
        variance_target: (target_sq_sum / denom - mean_target * mean_target).max(0.0),
        coverage: covered as f64 / denom,
        mean_ci_width: if width_count > 0 {
            width_sum / width_count as f64
        } else {
            f64::NAN
        },
        effective_sample_size: None,
    }
}

fn effective_worker_count(requested: usize) -> usize {
    let requested = requested.max(1);
    match std::env::var(MAX_WORKERS_ENV) {
        Ok(value) => match value.trim().parse::<usize>() {
            Ok(cap) if cap >= 1 => requested.min(cap),
            _ => requested,
        },
        Err(_) => requested,
    }
}

fn run_trials(study: &StudyConfig) -> Result<Vec<TrialResult>> {
    let workers = effective_worker_count(study.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::usage(format!("failed to build the worker pool: {e}")))?;
    // Ordered collect keeps aggregation independent of the schedule.
    pool.install(|| {
        (0..study.trials)
            .into_par_iter()
            .map(|t| run_trial(study, t))
            .collect::<Result<Vec<_>>>()
    })
}

/// Runs the full study: `trials` independent datasets, every configured
/// method on each, plus the human-only curve for effective sample size when
/// an ess grid is configured. Method failures are surfaced in the metrics,
/// never raised.
pub fn monte_carlo_study(study: &StudyConfig) -> Result<StudyMetrics> {
    study.validate()?;
    let trial_results = run_trials(study)?;
    let target = study.target_coordinate();

    let mut per_method: Vec<MethodMetrics> = study
        .methods
        .iter()
        .map(|&m| aggregate_method_metrics(m, &trial_results, &study.dgp.theta_star, target))
        .collect();

    let mut human_curve = Vec::new();
    if !study.ess_grid.is_empty() {
        for (idx, &n) in study.ess_grid.iter().enumerate() {
            let sub_seed = StreamRng::from_path(&[study.seed, 0xE55, idx as u64]).next_u64();
            let sub = StudyConfig {
                dgp: DgpConfig {
                    n_labeled: n,
                    n_unlabeled: 0,
                    seed: sub_seed,
                    ..study.dgp.clone()
                },
                methods: vec![Method::HumanOnly],
                ess_grid: Vec::new(),
                ..study.clone()
            };
            let sub_results = run_trials(&sub)?;
            let metrics =
                aggregate_method_metrics(Method::HumanOnly, &sub_results, &sub.dgp.theta_star, target);
            human_curve.push((n as f64, metrics.mse_target));
        }
        for metrics in &mut per_method {
            if metrics.successes > 0 && metrics.mse_target.is_finite() {
                metrics.effective_sample_size =
                    effective_sample_size(metrics.mse_target, &human_curve).ok();
            }
        }
    }

    Ok(StudyMetrics {
        theta_star: study.dgp.theta_star.clone(),
        target_coord: target,
        level: study.level,
        total_trials: study.trials,
        per_method,
        trial_results,
        human_curve,
    })
}

/// One fidelity setting of a sweep.
#[derive(Clone, Debug)]
pub struct FidelityRow {
    pub gamma: f64,
    pub metrics: StudyMetrics,
}

/// Reruns the study at each synthetic fidelity value, all else fixed.
pub fn fidelity_sweep(study: &StudyConfig, gamma_values: &[f64]) -> Result<Vec<FidelityRow>> {
    if gamma_values.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(Error::usage("fidelity values must lie in [0, 1]"));
    }
    let mut rows = Vec::with_capacity(gamma_values.len());
    for &gamma in gamma_values {
        let mut sub = study.clone();
        sub.dgp.synthetic.fidelity = gamma;
        rows.push(FidelityRow {
            gamma,
            metrics: monte_carlo_study(&sub)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dgp() -> DgpConfig {
        DgpConfig {
            n_labeled: 20,
            n_unlabeled: 30,
            seed: 7,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn noiseless_proxy_equals_real_on_labeled_rows() {
        let dgp = DgpConfig {
            proxy: ProxyChannel {
                x_noise_sd: 0.0,
                y_flip_prob: 0.0,
                y_noise_sd: 0.0,
                independent: false,
            },
            ..small_dgp()
        };
        let data = generate_dgp_sample(&dgp, 0).unwrap();
        for record in data.iter().filter(|r| r.is_labeled()) {
            let real = record.real.as_ref().unwrap();
            assert_eq!(record.aux[0].x, real.x);
            assert_eq!(record.aux[0].y, real.y);
        }
    }

    #[test]
    fn full_fidelity_synthetic_copies_latent_pairs() {
        let data = generate_dgp_sample(&small_dgp(), 1).unwrap();
        for record in data.iter().filter(|r| r.is_labeled()) {
            let real = record.real.as_ref().unwrap();
            assert_eq!(record.aux[1].x, real.x);
            assert_eq!(record.aux[1].y, real.y);
        }
    }

    #[test]
    fn calibrated_synthetic_moments_match_real_law() {
        // At fidelity 1 the synthetic marginal equals the real marginal:
        // mean moments at theta* vanish for both, within Monte Carlo noise.
        let dgp = DgpConfig {
            n_labeled: 100_000,
            n_unlabeled: 0,
            seed: 11,
            ..DgpConfig::default()
        };
        let data = generate_dgp_sample(&dgp, 0).unwrap();
        let model = dgp.model().unwrap();
        let theta_star = DVector::from_column_slice(&dgp.theta_star);
        let mut real_sum = DVector::<f64>::zeros(2);
        let mut synth_sum = DVector::<f64>::zeros(2);
        let mut synth_sq = DVector::<f64>::zeros(2);
        for r in &data {
            let real = r.real.as_ref().unwrap();
            real_sum += crate::moments::evaluate_psi(&model, &theta_star, &real.x, real.y).unwrap();
            let s = &r.aux[1];
            let psi = crate::moments::evaluate_psi(&model, &theta_star, &s.x, s.y).unwrap();
            for j in 0..2 {
                synth_sq[j] += psi[j] * psi[j];
            }
            synth_sum += psi;
        }
        let n = data.len() as f64;
        for j in 0..2 {
            let mean = synth_sum[j] / n;
            let var = synth_sq[j] / n - mean * mean;
            let bound = 4.0 * (var / n).sqrt();
            assert!(mean.abs() <= bound, "synthetic coord {j}: {mean} vs {bound}");
            assert!((real_sum[j] / n).abs() <= bound, "real coord {j}");
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let dgp = small_dgp();
        let a = generate_dgp_sample(&dgp, 3).unwrap();
        let b = generate_dgp_sample(&dgp, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_dgp_sample(&dgp, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rows_are_serially_independent() {
        // Lag-1 sample correlation of latent outcomes across rows.
        let dgp = DgpConfig {
            d: 2,
            link: Link::Identity,
            n_labeled: 20_000,
            n_unlabeled: 0,
            seed: 13,
            ..DgpConfig::default()
        };
        let data = generate_dgp_sample(&dgp, 0).unwrap();
        let ys: Vec<f64> = data.iter().map(|r| r.real.as_ref().unwrap().y).collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let lag1 = ys
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / ((n - 1.0) * var);
        assert!(lag1.abs() < 4.0 / n.sqrt(), "lag-1 correlation {lag1}");
    }

    #[test]
    fn run_trial_respects_method_list_and_aux_counts() {
        let study = StudyConfig {
            dgp: small_dgp(),
            methods: vec![Method::HumanOnly, Method::GmmProxy, Method::GmmSynth],
            trials: 1,
            ..StudyConfig::default()
        };
        let result = run_trial(&study, 0).unwrap();
        assert_eq!(result.estimates.len(), 3);
        let by_method: std::collections::HashMap<Method, &MethodEstimate> = result
            .estimates
            .iter()
            .map(|(m, e)| (*m, e.as_ref().expect("estimate")))
            .collect();
        assert_eq!(by_method[&Method::HumanOnly].num_aux, 0);
        assert_eq!(by_method[&Method::GmmProxy].num_aux, 1);
        assert_eq!(by_method[&Method::GmmSynth].num_aux, 2);
    }

    #[test]
    fn aggregation_of_a_perfect_estimator() {
        let theta_star = vec![-0.5, 1.0];
        let trials: Vec<TrialResult> = (0..10)
            .map(|t| {
                let theta = DVector::from_column_slice(&theta_star);
                let se = DVector::from_column_slice(&[1.0, 1.0]);
                let intervals = (0..2)
                    .map(|i| confidence_interval(theta[i], 1.0, 0.95).unwrap())
                    .collect();
                TrialResult {
                    trial: t,
                    estimates: vec![(
                        Method::HumanOnly,
                        Ok(MethodEstimate {
                            method: Method::HumanOnly,
                            theta,
                            std_errors: se,
                            intervals,
                            converged: true,
                            iterations: 1,
                            chosen_alpha: None,
                            chosen_lambda: None,
                            fold_alphas: Vec::new(),
                            num_aux: 0,
                            weight_ridge: None,
                            warnings: Vec::new(),
                        }),
                    )],
                }
            })
            .collect();
        let metrics = aggregate_method_metrics(Method::HumanOnly, &trials, &theta_star, 1);
        assert_eq!(metrics.successes, 10);
        assert_eq!(metrics.failures, 0);
        assert_eq!(metrics.mse_target, 0.0);
        assert_eq!(metrics.coverage, 1.0);
    }

    #[test]
    fn ess_exact_grid_hit_and_inverse_n_curve() {
        let curve = vec![(100.0, 0.04), (400.0, 0.01)];
        let hit = effective_sample_size(0.04, &curve).unwrap();
        assert_eq!(hit.n_effective, 100.0);
        assert!(!hit.clamped);

        let mid = effective_sample_size(0.02, &curve).unwrap();
        assert!(
            (mid.n_effective - 200.0).abs() <= 2.0,
            "expected ~200, got {}",
            mid.n_effective
        );

        let below = effective_sample_size(0.001, &curve).unwrap();
        assert_eq!(below.n_effective, 400.0);
        assert!(below.clamped);

        let above = effective_sample_size(0.1, &curve).unwrap();
        assert_eq!(above.n_effective, 100.0);
        assert!(above.clamped);
    }

    #[test]
    fn ess_monotonizes_bumpy_curves() {
        let curve = vec![(100.0, 0.04), (200.0, 0.05), (400.0, 0.01)];
        let est = effective_sample_size(0.02, &curve).unwrap();
        assert!(est.monotonized);
        assert!(est.n_effective > 100.0 && est.n_effective < 400.0);
    }

    #[test]
    fn ess_rejects_degenerate_curves() {
        assert!(effective_sample_size(0.02, &[(100.0, 0.04)]).is_err());
        assert!(effective_sample_size(0.02, &[(100.0, 0.0), (200.0, 0.0)]).is_err());
        assert!(effective_sample_size(0.02, &[(100.0, 0.04), (100.0, 0.01)]).is_err());
    }

    #[test]
    fn study_is_deterministic_across_worker_counts() {
        let study = StudyConfig {
            dgp: small_dgp(),
            methods: vec![Method::HumanOnly, Method::GmmSynth],
            trials: 6,
            workers: 1,
            ..StudyConfig::default()
        };
        let a = monte_carlo_study(&study).unwrap();
        let b = monte_carlo_study(&StudyConfig {
            workers: 8,
            ..study
        })
        .unwrap();
        for (ma, mb) in a.per_method.iter().zip(&b.per_method) {
            assert_eq!(ma.mse_target.to_bits(), mb.mse_target.to_bits());
            assert_eq!(ma.coverage.to_bits(), mb.coverage.to_bits());
            assert_eq!(ma.mean_ci_width.to_bits(), mb.mean_ci_width.to_bits());
        }
    }

    #[test]
    fn fidelity_sweep_has_one_row_per_gamma() {
        let study = StudyConfig {
            dgp: small_dgp(),
            methods: vec![Method::HumanOnly],
            trials: 2,
            ..StudyConfig::default()
        };
        let rows = fidelity_sweep(&study, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].gamma, 0.0);
        assert_eq!(rows[2].gamma, 1.0);
    }

    #[test]
    fn invalid_configs_are_rejected_by_name() {
        let mut dgp = small_dgp();
        dgp.theta_star = vec![1.0];
        assert!(matches!(dgp.validate(), Err(Error::Usage(_))));

        let study = StudyConfig {
            methods: Vec::new(),
            ..StudyConfig::default()
        };
        assert!(matches!(study.validate(), Err(Error::Usage(_))));

        let study = StudyConfig {
            target_coord: Some(5),
            ..StudyConfig::default()
        };
        assert!(matches!(study.validate(), Err(Error::Usage(_))));
    }
}
