//! Monte Carlo checks of the estimators' statistical behavior against a
//! known ground truth. These are probabilistic tests with wide, seeded
//! margins; the seeds are fixed so the suite is deterministic.

use auxgmm::baselines::ppi_loss_gradient;
use auxgmm::inference::{partitioned_theta_variance, JacobianBlocks, MomentBlocks};
use auxgmm::rng::StreamRng;
use auxgmm::simulation::{
    generate_dgp_sample, monte_carlo_study, DgpConfig, Method, ProxyChannel, StudyConfig,
    SyntheticChannel,
};
use nalgebra::{DMatrix, DVector};

fn base_study(seed: u64) -> StudyConfig {
    StudyConfig {
        dgp: DgpConfig {
            seed,
            ..DgpConfig::default()
        },
        seed,
        workers: 2,
        ..StudyConfig::default()
    }
}

fn metrics_for(study: &StudyConfig, method: Method) -> auxgmm::simulation::MethodMetrics {
    let metrics = monte_carlo_study(study).unwrap();
    metrics
        .per_method
        .iter()
        .find(|m| m.method == method)
        .cloned()
        .expect("method present")
}

#[test]
fn human_only_coverage_is_nominal() {
    let mut study = base_study(2024);
    study.dgp.n_labeled = 500;
    study.dgp.n_unlabeled = 0;
    study.methods = vec![Method::HumanOnly];
    study.trials = 500;
    let m = metrics_for(&study, Method::HumanOnly);
    assert_eq!(m.failures, 0);
    assert!(
        (0.92..=0.97).contains(&m.coverage),
        "human-only coverage {}",
        m.coverage
    );
}

#[test]
fn studentized_errors_look_standard_normal() {
    let mut study = base_study(31);
    study.dgp.n_labeled = 500;
    study.dgp.n_unlabeled = 0;
    study.methods = vec![Method::HumanOnly];
    study.trials = 500;
    let metrics = monte_carlo_study(&study).unwrap();
    let truth = study.dgp.theta_star[1];
    let mut zs = Vec::new();
    for trial in &metrics.trial_results {
        let (_, est) = &trial.estimates[0];
        let est = est.as_ref().unwrap();
        zs.push((est.theta[1] - truth) / est.std_errors[1]);
    }
    let n = zs.len() as f64;
    let mean = zs.iter().sum::<f64>() / n;
    let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
    assert!(
        (0.8..=1.25).contains(&var),
        "studentized variance {var}"
    );
    assert!(mean.abs() < 4.0 / n.sqrt(), "studentized mean {mean}");
}

#[test]
fn gmm_synth_mse_shrinks_with_more_labels() {
    let mut mses = Vec::new();
    for &n in &[100usize, 300, 800] {
        let mut study = base_study(57);
        study.dgp.n_labeled = n;
        study.dgp.n_unlabeled = 500;
        study.dgp.synthetic.fidelity = 0.6;
        study.methods = vec![Method::GmmSynth];
        study.trials = 150;
        let m = metrics_for(&study, Method::GmmSynth);
        assert_eq!(m.failures, 0, "n = {n}");
        mses.push(m.mse_target);
    }
    assert!(
        mses[2] < mses[1] && mses[1] < mses[0],
        "MSE not decreasing over the n grid: {mses:?}"
    );
}

#[test]
fn informative_proxy_beats_human_only_for_ppi() {
    let mut study = base_study(71);
    study.dgp.n_labeled = 100;
    study.dgp.n_unlabeled = 900;
    study.dgp.proxy = ProxyChannel {
        x_noise_sd: 0.1,
        y_flip_prob: 0.05,
        y_noise_sd: 0.1,
        independent: false,
    };
    study.methods = vec![Method::HumanOnly, Method::PpiProxy, Method::Reppi];
    study.trials = 200;
    let human = metrics_for(&study, Method::HumanOnly);
    let ppi = metrics_for(&study, Method::PpiProxy);
    let reppi = metrics_for(&study, Method::Reppi);
    assert!(
        ppi.mse_target < human.mse_target,
        "ppi {} vs human {}",
        ppi.mse_target,
        human.mse_target
    );
    assert!(
        reppi.mse_target <= human.mse_target,
        "reppi {} vs human {}",
        reppi.mse_target,
        human.mse_target
    );
}

#[test]
fn crossfit_ppi_produces_sane_estimates() {
    let mut study = base_study(83);
    study.dgp.n_labeled = 120;
    study.dgp.n_unlabeled = 380;
    study.methods = vec![Method::PpiSynthCrossfit];
    study.trials = 60;
    let m = metrics_for(&study, Method::PpiSynthCrossfit);
    assert_eq!(m.failures, 0);
    assert!(m.mse_target < 0.2, "crossfit MSE {}", m.mse_target);
    assert!(m.coverage >= 0.85, "crossfit coverage {}", m.coverage);
}

/// Mean of the imputed-loss gradient at the truth is zero (within Monte
/// Carlo error) for any mixture weight: the small version of the
/// unbiasedness check run at scale by the acceptance suite.
#[test]
fn imputed_loss_gradient_is_unbiased_at_truth() {
    let dgp = DgpConfig {
        n_labeled: 40,
        n_unlabeled: 60,
        seed: 97,
        ..DgpConfig::default()
    };
    let model = dgp.model().unwrap();
    let truth = DVector::from_column_slice(&dgp.theta_star);
    let replications = 2_000;
    for alpha in [0.0, 0.5, 1.0] {
        let mut sums = DVector::<f64>::zeros(2);
        let mut sq_sums = DVector::<f64>::zeros(2);
        for rep in 0..replications {
            let data = generate_dgp_sample(&dgp, rep as u64).unwrap();
            let grad = ppi_loss_gradient(&model, &data, &truth, alpha, 1.0).unwrap();
            for j in 0..2 {
                sums[j] += grad[j];
                sq_sums[j] += grad[j] * grad[j];
            }
        }
        let r = replications as f64;
        for j in 0..2 {
            let mean = sums[j] / r;
            let var = sq_sums[j] / r - mean * mean;
            let bound = 4.0 * (var / r).sqrt();
            assert!(
                mean.abs() <= bound,
                "alpha {alpha} coord {j}: mean {mean} exceeds {bound}"
            );
        }
    }
}

/// Sampled version of the no-harm sweep with the over-identified auxiliary
/// structure (a correlated copy and an independent copy per auxiliary
/// parameter, as in the masked/unmasked stack): the target variance from
/// empirically estimated moment covariances tracks the analytic value
/// `(1 - rho^2/2) I`, falling with the correlation and matching the
/// target-only optimum at rho = 0.
#[test]
fn sampled_no_harm_sweep_is_monotone() {
    let samples = 60_000;
    let mut traces = Vec::new();
    for (idx, rho) in [0.0f64, 0.45, 0.9].into_iter().enumerate() {
        let mut rng = StreamRng::from_path(&[113, idx as u64]);
        let mut mm = DMatrix::<f64>::zeros(2, 2);
        let mut mh = DMatrix::<f64>::zeros(2, 4);
        let mut hh = DMatrix::<f64>::zeros(4, 4);
        for _ in 0..samples {
            let m = DVector::from_fn(2, |_, _| rng.standard_normal());
            let noise = DVector::from_fn(2, |_, _| rng.standard_normal());
            let correlated = &m * rho + noise * (1.0 - rho * rho).sqrt();
            let independent = DVector::from_fn(2, |_, _| rng.standard_normal());
            let mut h = DVector::<f64>::zeros(4);
            h.rows_mut(0, 2).copy_from(&correlated);
            h.rows_mut(2, 2).copy_from(&independent);
            mm += &m * m.transpose();
            mh += &m * h.transpose();
            hh += &h * h.transpose();
        }
        let scale = 1.0 / samples as f64;
        let mut g_h = DMatrix::zeros(4, 2);
        g_h.view_mut((0, 0), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        g_h.view_mut((2, 0), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        let blocks = MomentBlocks {
            mm: mm * scale,
            mh: mh * scale,
            hh: hh * scale,
        };
        let jac = JacobianBlocks {
            target: DMatrix::identity(2, 2),
            aux: g_h,
        };
        let v = partitioned_theta_variance(&blocks, &jac).unwrap();
        let analytic = 2.0 * (1.0 - rho * rho / 2.0);
        assert!(
            (v.trace() - analytic).abs() < 0.05,
            "rho {rho}: trace {} vs analytic {analytic}",
            v.trace()
        );
        traces.push(v.trace());
    }
    // Monotone within Monte Carlo noise.
    assert!(
        traces[1] <= traces[0] + 0.02 && traces[2] <= traces[1] + 0.02,
        "no-harm sweep traces {traces:?}"
    );
}

/// With both channels uninformative the estimator neither helps nor hurts;
/// at full fidelity it helps. The proxy must be independent here, otherwise
/// it alone produces a gain at zero synthetic fidelity.
#[test]
fn fidelity_orders_mse() {
    let mut study = base_study(131);
    study.dgp.n_labeled = 150;
    study.dgp.n_unlabeled = 600;
    study.dgp.proxy.independent = true;
    study.dgp.synthetic = SyntheticChannel {
        fidelity: 0.0,
        shift: vec![0.4, 0.4],
    };
    study.methods = vec![Method::HumanOnly, Method::GmmSynth];
    study.trials = 150;
    let rows = auxgmm::simulation::fidelity_sweep(&study, &[0.0, 1.0]).unwrap();
    let mse_at = |row: &auxgmm::simulation::FidelityRow, method: Method| {
        row.metrics
            .per_method
            .iter()
            .find(|m| m.method == method)
            .unwrap()
            .mse_target
    };
    let low = mse_at(&rows[0], Method::GmmSynth);
    let high = mse_at(&rows[1], Method::GmmSynth);
    assert!(
        high <= low * 1.1,
        "full fidelity ({high}) should not lose to zero fidelity ({low})"
    );
    let human_low = mse_at(&rows[0], Method::HumanOnly);
    let ratio = low / human_low;
    assert!(
        (0.7..=1.3).contains(&ratio),
        "zero-fidelity ratio to human-only: {ratio}"
    );
}
