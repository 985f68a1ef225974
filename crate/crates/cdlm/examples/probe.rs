//! Scratch probe: does a given gamma cell's deep representation carry class
//! signal, and does vote-averaged evaluation recover it? (not part of the lib)

use cdlm::data::{gen_synthetic_pair, DatasetSpec};
use cdlm::eval::{adaptation_accuracy, encode_reps, train_source_classifier, translate_target};
use cdlm::model::{CdlmModel, ConvSpec, NetConfig};
use cdlm::trainer::{fit, DomainPair, FitOptions, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let g1: f64 = std::env::var("G1").unwrap().parse().unwrap();
    let g2: f64 = std::env::var("G2").unwrap().parse().unwrap();
    let steps: u64 = std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(2400);
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

    let net = NetConfig {
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
    };
    let l1: f64 = std::env::var("L1").ok().and_then(|v| v.parse().ok()).unwrap_or(0.005);
    let mut train = TrainConfig {
        lambda1: l1,
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
    };
    train.gamma1 = g1;
    train.gamma2 = g2;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let model = CdlmModel::<f32>::new(net, &mut rng).unwrap();
    let mut state = TrainState::new(model, train.clone());
    fit(&mut state, &pair, FitOptions {
        trace_path: None,
        checkpoint_dir: None,
        eval_csv_path: None,
        eval_hook: None,
    })
    .unwrap();
    let model = &state.model;

    // h spread on target test
    let z = 32usize;
    let h = encode_reps(model, &d.target_test).unwrap();
    let n = d.target_test.n;
    let mut spread = 0.0f64;
    for j in 0..z {
        let col: Vec<f64> = (0..n).map(|i| h[i * z + j]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        spread += v.sqrt();
    }
    println!("g=({g1},{g2}) steps {steps}: mean h std {:.4}", spread / z as f64);

    // multinomial logistic probe on h (train on target_train h, labels known
    // here purely as a diagnostic)
    let htr = encode_reps(model, &d.target_train).unwrap();
    let labels = d.target_train.labels.as_ref().unwrap();
    let tlabels = d.target_test.labels.as_ref().unwrap();
    let classes = 8usize;
    let ntr = d.target_train.n;
    let mut w = vec![0.0f64; z * classes];
    let mut b = vec![0.0f64; classes];
    let lr = 0.5;
    for _ in 0..400 {
        let mut gw = vec![0.0f64; z * classes];
        let mut gb = vec![0.0f64; classes];
        for i in 0..ntr {
            let row = &htr[i * z..(i + 1) * z];
            let mut logits = b.clone();
            for (c, l) in logits.iter_mut().enumerate() {
                for j in 0..z {
                    *l += row[j] * w[j * classes + c];
                }
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            for c in 0..classes {
                let p = exps[c] / s;
                let d = p - if c == labels[i] as usize { 1.0 } else { 0.0 };
                gb[c] += d;
                for j in 0..z {
                    gw[j * classes + c] += d * row[j];
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / ntr as f64;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= lr * g / ntr as f64;
        }
    }
    let mut correct = 0usize;
    for i in 0..n {
        let row = &h[i * z..(i + 1) * z];
        let mut best = 0usize;
        let mut bestv = f64::MIN;
        for c in 0..classes {
            let mut l = b[c];
            for j in 0..z {
                l += row[j] * w[j * classes + c];
            }
            if l > bestv {
                bestv = l;
                best = c;
            }
        }
        if best == tlabels[i] as usize {
            correct += 1;
        }
    }
    println!("h class probe acc: {:.3}", correct as f64 / n as f64);

    // single-draw vs majority-vote adaptation accuracy
    for es in 0..3u64 {
        let a = adaptation_accuracy(model, &clf, &d.target_test, g1, g2, 2000 + es).unwrap();
        println!("single-draw acc (seed {es}): {a:.3}");
    }
    for k in [8usize, 16] {
        let mut votes = vec![[0u32; 8]; n];
        for draw in 0..k {
            let t = translate_target(model, &d.target_test, g1, g2, 3000 + draw as u64).unwrap();
            let pred = clf.predict(&t).unwrap();
            for (i, p) in pred.iter().enumerate() {
                votes[i][*p as usize] += 1;
            }
        }
        let mut correct = 0usize;
        for i in 0..n {
            let best = (0..8).max_by_key(|&c| votes[i][c]).unwrap();
            if best == tlabels[i] as usize {
                correct += 1;
            }
        }
        println!("{k}-vote acc: {:.3}", correct as f64 / n as f64);
    }
}
