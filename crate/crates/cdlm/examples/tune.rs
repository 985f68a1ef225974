//! Scratch trajectory probe for the ablation grids (not part of the library).

use cdlm::data::{gen_synthetic_pair, DatasetSpec};
use cdlm::eval::{adaptation_accuracy, train_source_classifier};
use cdlm::model::{CdlmModel, ConvSpec, NetConfig};
use cdlm::trainer::{fit, DomainPair, FitOptions, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net() -> NetConfig {
    NetConfig {
        in_channels: 3,
        height: 16,
        width: 16,
        conv: vec![
            ConvSpec { out_channels: 16, kernel: 3, stride: 2, pad: 1 },
            ConvSpec { out_channels: 32, kernel: 3, stride: 2, pad: 1 },
        ],
        z_dim: 32,
        disc_hidden: 64,
        leaky_slope: 0.2,
        h_tap: 2,
    }
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        lambda1: 0.005,
        lambda2: 1.0,
        beta1: 2.0,
        beta2: 0.5,
        eta1: 0.02,
        eta2: 0.002,
        grl_scale: 0.02,
        batch_size: 32,
        steps,
        eval_every: u64::MAX,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn main() {
    let spec = DatasetSpec {
        classes: 8,
        train_per_domain: 2000,
        test_per_domain: 400,
        seed: 5,
        ..DatasetSpec::default()
    };
    let d = gen_synthetic_pair::<f32>(&spec).unwrap();
    let pair = DomainPair {
        source_train: d.source_train.clone(),
        source_test: d.source_test.clone(),
        target_train: d.target_train.clone(),
        target_test: d.target_test.clone(),
    };
    let clf = train_source_classifier(&d.source_train, 8, 400, 11).unwrap();

    // name, gamma1, gamma2, beta1, beta2
    let all: Vec<(&str, f64, f64, f64, f64)> = vec![
        ("weak", 0.1, 1.0, 2.0, 0.5),
        ("balanced", 0.5, 0.5, 2.0, 0.5),
        ("strong", 1.0, 0.1, 2.0, 0.5),
        ("pure", 1.0, 0.0, 2.0, 0.5),
        ("none", 1.0, 0.1, 0.0, 0.0),
        ("s_only", 1.0, 0.1, 2.0, 0.0),
    ];
    let filter = std::env::var("CELLS").unwrap_or_default();
    let max_steps: u64 = std::env::var("MAXSTEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(3600);
    for (name, g1, g2, b1, b2) in all {
        if !filter.is_empty() && !filter.split(',').any(|c| c == name) {
            continue;
        }
        let mut train = cfg(1800);
        train.gamma1 = g1;
        train.gamma2 = g2;
        train.beta1 = b1;
        train.beta2 = b2;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let model = CdlmModel::<f32>::new(net(), &mut rng).unwrap();
        let mut state = TrainState::new(model, train.clone());
        let mut snap = 1800u64;
        loop {
            state.config.steps = snap;
            fit(&mut state, &pair, FitOptions {
                trace_path: None,
                checkpoint_dir: None,
                eval_csv_path: None,
                eval_hook: None,
            })
            .unwrap();
            let mut accs = Vec::new();
            for es in 0..3u64 {
                let a = adaptation_accuracy(&state.model, &clf, &d.target_test, g1, g2, 1000 + es)
                    .unwrap();
                accs.push(a);
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            println!(
                "{name} step {snap}: mean {mean:.3} [{}]",
                accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", ")
            );
            if snap >= max_steps {
                break;
            }
            snap += 200;
        }
    }
}
