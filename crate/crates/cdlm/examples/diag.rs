//! Diagnostic: which stage of the content chain breaks?
use cdlm::data::{gen_synthetic_pair, DatasetSpec, Unlabeled};
use cdlm::eval::{encode_reps, train_source_classifier};
use cdlm::model::{modulate, CdlmModel, ConvSpec, Domain, NetConfig};
use cdlm::tensor::Graph;
use cdlm::trainer::{train_step, TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_net() -> NetConfig {
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

/// Multinomial logistic probe on fixed features (first half train, second half eval).
fn class_probe(feats_in: &[f64], labels: &[u8], dim: usize, classes: usize) -> f64 {
    let n = labels.len();
    let ntr = n / 2;
    // standardize per dimension over the training half
    let mut feats = feats_in.to_vec();
    for j in 0..dim {
        let mean: f64 = (0..ntr).map(|i| feats[i * dim + j]).sum::<f64>() / ntr as f64;
        let var: f64 = (0..ntr).map(|i| (feats[i * dim + j] - mean).powi(2)).sum::<f64>() / ntr as f64;
        let std = var.sqrt().max(1e-9);
        for i in 0..n {
            feats[i * dim + j] = (feats[i * dim + j] - mean) / std;
        }
    }
    let feats = &feats;
    let mut w = vec![0.0f64; classes * dim];
    let mut b = vec![0.0f64; classes];
    let lr = 0.5;
    for _ in 0..800 {
        let mut gw = vec![0.0f64; classes * dim];
        let mut gb = vec![0.0f64; classes];
        for i in 0..ntr {
            let x = &feats[i * dim..(i + 1) * dim];
            let logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + x.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(a, ww)| a * ww).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let zs: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..classes {
                let p = ((logits[c] - m).exp()) / zs;
                let d = p - if labels[i] as usize == c { 1.0 } else { 0.0 };
                for (g, &xv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *g += d * xv;
                }
                gb[c] += d;
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= lr * g / ntr as f64;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= lr * g / ntr as f64;
        }
    }
    let mut correct = 0usize;
    for i in ntr..n {
        let x = &feats[i * dim..(i + 1) * dim];
        let (mut best, mut bestv) = (0usize, f64::MIN);
        for c in 0..classes {
            let v = b[c] + x.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(a, ww)| a * ww).sum::<f64>();
            if v > bestv {
                bestv = v;
                best = c;
            }
        }
        if best == labels[i] as usize {
            correct += 1;
        }
    }
    correct as f64 / (n - ntr) as f64
}

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let spec = DatasetSpec {
        train_per_domain: envf("NTRAIN", 512.0) as usize,
        test_per_domain: envf("NTEST", 128.0) as usize,
        seed: envf("DSEED", 5.0) as u64,
        ..DatasetSpec::default()
    };
    let pair = gen_synthetic_pair::<f32>(&spec).unwrap();
    let clf = train_source_classifier(&pair.source_train, 8, 400, 11).unwrap();
    println!("clf source acc {:.3}  source-only-on-target {:.3}",
        clf.accuracy(&pair.source_test).unwrap(),
        clf.accuracy(&pair.target_test).unwrap());

    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let cfg = TrainConfig {
        lambda1: envf("L1", 0.001),
        lambda2: envf("L2", 1.0),
        beta1: envf("B1", 0.5),
        beta2: envf("B2", 0.5),
        eta1: envf("ETA1", 0.02),
        eta2: envf("ETA2", 0.002),
        gamma1: envf("G1", 1.0),
        gamma2: envf("G2", 0.1),
        adv_weight: envf("ADV", 1.0),
        grl_scale: envf("GRL", 1.0),
        batch_size: 32,
        steps,
        eval_every: u64::MAX,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = CdlmModel::<f32>::new(small_net(), &mut rng).unwrap();
    let mut state = TrainState::new(model, cfg.clone());
    let mut sampler = ChaCha8Rng::seed_from_u64(99);
    let target = Unlabeled::new(pair.target_train.clone());
    let mut last = None;
    for step in 0..steps {
        let si: Vec<usize> = (0..32).map(|_| sampler.gen_range(0..pair.source_train.n)).collect();
        let ti: Vec<usize> = (0..32).map(|_| sampler.gen_range(0..pair.target_train.n)).collect();
        let sb = pair.source_train.select(&si);
        let tb = Unlabeled::new(target.batch().select(&ti));
        let r = match train_step(&mut state, &sb, &tb) {
            Ok(r) => r,
            Err(e) => {
                println!("train_step failed at step {step}: {e}");
                break;
            }
        };
        if step % 300 == 0 {
            println!(
                "step {step}: rec {:.4} kl {:.2} adv {:.4} cs {:.5} ct {:.5}",
                r.rec, r.kl_st, r.adv, r.cons_s, r.cons_t
            );
            state.model.trained = true;
            let hs = encode_reps(&state.model, &pair.source_test).unwrap();
            let ht = encode_reps(&state.model, &pair.target_test).unwrap();
            let sl = pair.source_test.labels.clone().unwrap();
            let tl = pair.target_test.labels.clone().unwrap();
            let aacc = cdlm::eval::adaptation_accuracy(&state.model, &clf, &pair.target_test, cfg.gamma1, cfg.gamma2, 99).unwrap();
            let sacc = cdlm::eval::adaptation_accuracy(&state.model, &clf, &pair.source_test, cfg.gamma1, cfg.gamma2, 98).unwrap();
            // domain probe: interleave s/t rows so both halves contain both domains
            let zd = state.model.cfg.z_dim;
            let nn = sl.len();
            let mut dom_feats = Vec::with_capacity(2 * nn * zd);
            let mut dom_labels = Vec::with_capacity(2 * nn);
            for i in 0..nn {
                dom_feats.extend_from_slice(&hs[i * zd..(i + 1) * zd]);
                dom_labels.push(0u8);
                dom_feats.extend_from_slice(&ht[i * zd..(i + 1) * zd]);
                dom_labels.push(1u8);
            }
            println!("    h_s probe {:.3} h_t probe {:.3} dom-sep {:.3} src-test {:.3} adapt {:.3}",
                class_probe(&hs, &sl, zd, 8),
                class_probe(&ht, &tl, zd, 8),
                class_probe(&dom_feats, &dom_labels, zd, 2), sacc, aacc);
        }
        last = Some(r);
    }
    if let Some(r) = last {
        println!(
            "final: rec {:.4} kl {:.2} adv {:.4} cs {:.5} ct {:.5}",
            r.rec, r.kl_st, r.adv, r.cons_s, r.cons_t
        );
    }
    state.model.trained = true;

    let m = &state.model;
    let n = 128usize;
    let idx: Vec<usize> = (0..n).collect();
    let sb = pair.source_test.select(&idx);
    let tb = pair.target_test.select(&idx);
    let g = Graph::new();
    let bound = m.bind(&g).unwrap();
    let xs = g.constant(&sb.shape(), sb.images.clone()).unwrap();
    let xt = g.constant(&tb.shape(), tb.images.clone()).unwrap();
    let (info_s, rep_s) = bound.encode(&xs).unwrap();
    let (_info_t, rep_t) = bound.encode(&xt).unwrap();
    let _ = &rep_s;
    let z = m.cfg.z_dim;
    let mut erng = ChaCha8Rng::seed_from_u64(123);
    let eps: Vec<f32> = (0..n * z).map(|_| erng.sample::<f64, _>(StandardNormal) as f32).collect();
    let es = g.constant(&[n, z], eps.clone()).unwrap();
    let z_st = modulate(&info_s, Domain::Source, &rep_t, Domain::Target, &es, cfg.gamma1 as f32, cfg.gamma2 as f32, false).unwrap();
    let xhat_st = bound.decode(&z_st.z).unwrap();
    let recon = cdlm::data::DomainBatch::new(
        xhat_st.value().iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
        n, 3, 16, 16, sb.labels.clone(),
    )
    .unwrap();
    println!("stage1 recon-acc (xhat_st vs source labels): {:.3}", clf.accuracy(&recon).unwrap());
    let xmu = bound.decode(&info_s.mu).unwrap();
    let recon_mu = cdlm::data::DomainBatch::new(
        xmu.value().iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
        n, 3, 16, 16, sb.labels.clone(),
    )
    .unwrap();
    println!("stage1b mu-only decode acc: {:.3}", clf.accuracy(&recon_mu).unwrap());
    let zt = cdlm::model::rep_to_latent(&rep_t, &es, cfg.gamma1 as f32, cfg.gamma2 as f32).unwrap();
    let xtr = bound.decode(&zt).unwrap();
    let v = xtr.value();
    let per = 3 * 256;
    let mean: Vec<f64> = (0..per)
        .map(|p| (0..n).map(|i| v[i * per + p] as f64).sum::<f64>() / n as f64)
        .collect();
    let var_across: f64 = (0..per)
        .map(|p| (0..n).map(|i| (v[i * per + p] as f64 - mean[p]).powi(2)).sum::<f64>() / n as f64)
        .sum::<f64>()
        / per as f64;
    println!("translated-image across-sample pixel variance: {:.6}", var_across);

    let hs = encode_reps(m, &pair.source_test).unwrap();
    let ht = encode_reps(m, &pair.target_test).unwrap();
    let spread = |f: &[f64], d: usize| -> f64 {
        let n = f.len() / d;
        (0..d)
            .map(|j| {
                let mean = (0..n).map(|i| f[i * d + j]).sum::<f64>() / n as f64;
                ((0..n).map(|i| (f[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
            })
            .sum::<f64>()
            / d as f64
    };
    println!("h_s spread {:.4} h_t spread {:.4}", spread(&hs, z), spread(&ht, z));
    let sl = pair.source_test.labels.clone().unwrap();
    let tl = pair.target_test.labels.clone().unwrap();
    println!("h_s class probe acc: {:.3}", class_probe(&hs, &sl, z, 8));
    println!("h_t class probe acc: {:.3}", class_probe(&ht, &tl, z, 8));
    let mus = cdlm::eval::encode_means(m, &pair.source_test).unwrap();
    let mut_ = cdlm::eval::encode_means(m, &pair.target_test).unwrap();
    println!("mu_s class probe acc: {:.3}", class_probe(&mus, &sl, z, 8));
    println!("mu_t class probe acc: {:.3}", class_probe(&mut_, &tl, z, 8));
    let aacc = cdlm::eval::adaptation_accuracy(m, &clf, &pair.target_test, cfg.gamma1, cfg.gamma2, 99).unwrap();
    let sacc = cdlm::eval::adaptation_accuracy(m, &clf, &pair.source_test, cfg.gamma1, cfg.gamma2, 98).unwrap();
    println!("adapt acc: {:.3}  src-testmode acc: {:.3}", aacc, sacc);
}
