use auxgmm::simulation::{monte_carlo_study, DgpConfig, Method, ProxyChannel, StudyConfig};
use std::time::Instant;

fn main() {
    let trials: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(100);

    // Criterion-6 shape: logistic, d=2, theta*=(-0.5,1), n=m=500, fidelity 1.
    let study = StudyConfig {
        dgp: DgpConfig {
            n_labeled: 500,
            n_unlabeled: 500,
            proxy: ProxyChannel {
                x_noise_sd: 0.3,
                y_flip_prob: 0.1,
                y_noise_sd: 0.3,
                independent: false,
            },
            seed: 42,
            ..DgpConfig::default()
        },
        methods: vec![
            Method::HumanOnly,
            Method::GmmProxy,
            Method::GmmSynth,
            Method::PpiProxy,
        ],
        trials,
        workers: 2,
        seed: 42,
        ..StudyConfig::default()
    };
    let start = Instant::now();
    let metrics = monte_carlo_study(&study).unwrap();
    println!("criterion-6 shape ({trials} trials) took {:?}", start.elapsed());
    for m in &metrics.per_method {
        println!(
            "{:>20}: mse={:.6} cov={:.3} width={:.4} fail={} nonconv={}",
            m.method.name(),
            m.mse_target,
            m.coverage,
            m.mean_ci_width,
            m.failures,
            m.convergence_failures
        );
    }

    // Criterion-7 shape: n=100, m=900, low proxy noise.
    let study7 = StudyConfig {
        dgp: DgpConfig {
            n_labeled: 100,
            n_unlabeled: 900,
            proxy: ProxyChannel {
                x_noise_sd: 0.1,
                y_flip_prob: 0.05,
                y_noise_sd: 0.1,
                independent: false,
            },
            seed: 7,
            ..DgpConfig::default()
        },
        methods: vec![Method::HumanOnly, Method::GmmSynth],
        trials,
        workers: 2,
        seed: 7,
        ..StudyConfig::default()
    };
    let start = Instant::now();
    let metrics = monte_carlo_study(&study7).unwrap();
    println!("criterion-7 shape ({trials} trials) took {:?}", start.elapsed());
    let human = metrics
        .per_method
        .iter()
        .find(|m| m.method == Method::HumanOnly)
        .unwrap();
    let synth = metrics
        .per_method
        .iter()
        .find(|m| m.method == Method::GmmSynth)
        .unwrap();
    println!(
        "human mse={:.6} width={:.4}; gmm-synth mse={:.6} width={:.4} cov={:.3} ratio={:.3}",
        human.mse_target,
        human.mean_ci_width,
        synth.mse_target,
        synth.mean_ci_width,
        synth.coverage,
        synth.mse_target / human.mse_target
    );

    // Criterion-8 shape: gamma=0, independent proxy, n=200.
    let mut study8 = StudyConfig {
        dgp: DgpConfig {
            n_labeled: 200,
            n_unlabeled: 800,
            proxy: ProxyChannel {
                x_noise_sd: 0.3,
                y_flip_prob: 0.1,
                y_noise_sd: 0.3,
                independent: true,
            },
            seed: 9,
            ..DgpConfig::default()
        },
        methods: vec![Method::HumanOnly, Method::GmmSynth],
        trials,
        workers: 2,
        seed: 9,
        ..StudyConfig::default()
    };
    study8.dgp.synthetic.fidelity = 0.0;
    study8.dgp.synthetic.shift = vec![0.5, 0.5];
    let start = Instant::now();
    let metrics = monte_carlo_study(&study8).unwrap();
    println!("criterion-8 shape ({trials} trials) took {:?}", start.elapsed());
    let human = metrics
        .per_method
        .iter()
        .find(|m| m.method == Method::HumanOnly)
        .unwrap();
    let synth = metrics
        .per_method
        .iter()
        .find(|m| m.method == Method::GmmSynth)
        .unwrap();
    println!(
        "human mse={:.6}; gmm-synth mse={:.6} ratio={:.3} cov={:.3}",
        human.mse_target,
        synth.mse_target,
        synth.mse_target / human.mse_target,
        synth.coverage
    );
}
