//! Evaluation: a small source-domain classifier, adaptation accuracy through
//! the test-mode translation path, a proxy domain-distance probe, Monte-Carlo
//! verification of the modulated-latent moments, image quality metrics,
//! embedding export, and the ablation grid runner.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::DomainBatch;
use crate::error::{CdlmError, Result};
use crate::model::{closed_form_moments, CdlmModel, NetConfig, Param, Role};
use crate::num::Scalar;
use crate::optim::Adam;
use crate::tensor::{conv_out_extent, Graph, Tensor};
use crate::trainer::{fit, DomainPair, FitOptions, TrainConfig, TrainState};

// ---------------------------------------------------------------------------
// source classifier
// ---------------------------------------------------------------------------

/// Small supervised conv classifier trained on source images only.
pub struct Classifier<T: Scalar> {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    params: Vec<Param<T>>,
}

const CLF_C1: usize = 16;
const CLF_C2: usize = 32;

impl<T: Scalar> Classifier<T> {
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(CdlmError::Config("classifier needs >= 2 classes".into()));
        }
        let (fh, fw) = clf_feature_extent(height, width).ok_or_else(|| {
            CdlmError::Config(format!("classifier input {height}x{width} too small"))
        })?;
        let flat = CLF_C2 * fh * fw;
        let init = |rng: &mut ChaCha8Rng, n: usize, fan: usize| -> Vec<T> {
            let bound = 1.0 / (fan as f64).sqrt();
            (0..n)
                .map(|_| T::from_f64_c(rng.gen_range(-bound..bound)))
                .collect()
        };
        let mk = |name: &str, shape: Vec<usize>, data: Vec<T>| Param {
            name: name.to_string(),
            role: Role::Encoder,
            shape,
            data,
        };
        let params = vec![
            mk(
                "c1.w",
                vec![CLF_C1, in_channels, 3, 3],
                init(rng, CLF_C1 * in_channels * 9, in_channels * 9),
            ),
            mk("c1.b", vec![1, CLF_C1, 1, 1], vec![T::zero(); CLF_C1]),
            mk(
                "c2.w",
                vec![CLF_C2, CLF_C1, 3, 3],
                init(rng, CLF_C2 * CLF_C1 * 9, CLF_C1 * 9),
            ),
            mk("c2.b", vec![1, CLF_C2, 1, 1], vec![T::zero(); CLF_C2]),
            mk("fc.w", vec![flat, classes], init(rng, flat * classes, flat)),
            mk("fc.b", vec![1, classes], vec![T::zero(); classes]),
        ];
        Ok(Classifier {
            in_channels,
            height,
            width,
            classes,
            params,
        })
    }

    fn bind(&self, g: &Graph<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut map = BTreeMap::new();
        for p in &self.params {
            map.insert(p.name.clone(), g.leaf(&p.shape, p.data.clone())?);
        }
        Ok(map)
    }

    fn logits(
        &self,
        leaves: &BTreeMap<String, Tensor<T>>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let slope = T::from_f64_c(0.2);
        let batch = x.shape()[0];
        let c1 = x.conv2d(&leaves["c1.w"], 2, 1)?;
        let c1 = c1.add(&leaves["c1.b"].broadcast_to(c1.shape())?)?.leaky_relu(slope)?;
        let c2 = c1.conv2d(&leaves["c2.w"], 2, 1)?;
        let c2 = c2.add(&leaves["c2.b"].broadcast_to(c2.shape())?)?.leaky_relu(slope)?;
        let flat = c2.reshape(&[batch, c2.numel() / batch])?;
        let y = flat.matmul(&leaves["fc.w"])?;
        let b = leaves["fc.b"].broadcast_to(y.shape())?;
        y.add(&b)
    }

    /// Numerically-stable mean softmax cross-entropy.
    fn cross_entropy(logits: &Tensor<T>, labels: &[u8], classes: usize) -> Result<Tensor<T>> {
        let b = logits.shape()[0];
        let g = logits.graph().clone();
        let shifted = logits.sub(&logits.row_max_detached()?.broadcast_to(logits.shape())?)?;
        let log_norm = shifted.exp()?.row_sum()?.log()?;
        let mut onehot = vec![T::zero(); b * classes];
        for (i, &l) in labels.iter().enumerate() {
            if (l as usize) >= classes {
                return Err(CdlmError::Usage(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            onehot[i * classes + l as usize] = T::one();
        }
        let onehot = g.constant(&[b, classes], onehot)?;
        let picked = shifted.mul(&onehot)?.row_sum()?;
        log_norm.sub(&picked)?.mean()
    }

    /// Train with Adam on labeled data; returns the final epoch's mean loss.
    pub fn train(
        &mut self,
        data: &DomainBatch<T>,
        steps: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> Result<f64> {
        let labels = data.labels.as_ref().ok_or_else(|| {
            CdlmError::Usage("classifier training requires labeled data".into())
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(
            T::from_f64_c(0.9),
            T::from_f64_c(0.999),
            T::from_f64_c(1e-8),
        );
        let mut last = f64::NAN;
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch_size.min(data.n))
                .map(|_| rng.gen_range(0..data.n))
                .collect();
            let sub = data.select(&idx);
            let sub_labels: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let g = Graph::new();
            let leaves = self.bind(&g)?;
            let x = g.constant(&sub.shape(), sub.images)?;
            let logits = self.logits(&leaves, &x)?;
            let loss = Self::cross_entropy(&logits, &sub_labels, self.classes)?;
            last = loss.scalar_value().to_f64_c();
            loss.backward()?;
            let mut grads = BTreeMap::new();
            for (name, t) in &leaves {
                if let Some(gv) = t.grad() {
                    grads.insert(name.clone(), gv);
                }
            }
            let mut refs: Vec<&mut Param<T>> = self.params.iter_mut().collect();
            adam.step(T::from_f64_c(lr), &mut refs, &grads);
        }
        Ok(last)
    }

    /// Argmax class predictions.
    pub fn predict(&self, data: &DomainBatch<T>) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(data.n);
        for chunk in chunk_ranges(data.n, 128) {
            let idx: Vec<usize> = chunk.collect();
            let sub = data.select(&idx);
            let g = Graph::new();
            let leaves = self.bind(&g)?;
            let x = g.constant(&sub.shape(), sub.images)?;
            let logits = self.logits(&leaves, &x)?;
            let v = logits.value();
            for row in v.chunks(self.classes) {
                let mut best = 0usize;
                for (j, &s) in row.iter().enumerate() {
                    if s > row[best] {
                        best = j;
                    }
                }
                out.push(best as u8);
            }
        }
        Ok(out)
    }

    /// Fraction of correct predictions on labeled data.
    pub fn accuracy(&self, data: &DomainBatch<T>) -> Result<f64> {
        let labels = data
            .labels
            .as_ref()
            .ok_or_else(|| CdlmError::Usage("accuracy requires labels".into()))?;
        let pred = self.predict(data)?;
        let correct = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(correct as f64 / data.n as f64)
    }
}

fn clf_feature_extent(h: usize, w: usize) -> Option<(usize, usize)> {
    let h1 = conv_out_extent(h, 3, 2, 1)?;
    let w1 = conv_out_extent(w, 3, 2, 1)?;
    let h2 = conv_out_extent(h1, 3, 2, 1)?;
    let w2 = conv_out_extent(w1, 3, 2, 1)?;
    (h2 >= 1 && w2 >= 1).then_some((h2, w2))
}

fn chunk_ranges(n: usize, chunk: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(chunk)).map(move |i| i * chunk..((i + 1) * chunk).min(n))
}

/// Train the standard source classifier used by every accuracy probe.
pub fn train_source_classifier<T: Scalar>(
    source_train: &DomainBatch<T>,
    classes: usize,
    steps: usize,
    seed: u64,
) -> Result<Classifier<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = Classifier::new(
        source_train.channels,
        source_train.height,
        source_train.width,
        classes,
        &mut rng,
    )?;
    clf.train(source_train, steps, 64, 1e-3, seed ^ 0xABCD)?;
    Ok(clf)
}

// ---------------------------------------------------------------------------
// adaptation accuracy
// ---------------------------------------------------------------------------

/// Translate target images through the test-mode path (encode → h-latent →
/// decode); no source data and no target labels are consulted.
pub fn translate_target<T: Scalar>(
    model: &CdlmModel<T>,
    target: &DomainBatch<T>,
    gamma1: f64,
    gamma2: f64,
    seed: u64,
) -> Result<DomainBatch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_dim = model.cfg.z_dim;
    let mut images = Vec::with_capacity(target.images.len());
    for chunk in chunk_ranges(target.n, 64) {
        let idx: Vec<usize> = chunk.collect();
        let sub = target.select(&idx);
        let eps: Vec<T> = (0..sub.n * z_dim)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                T::from_f64_c(v)
            })
            .collect();
        let out = model.test_mode_adapt(
            &sub.images,
            sub.n,
            &eps,
            T::from_f64_c(gamma1),
            T::from_f64_c(gamma2),
        )?;
        images.extend(out);
    }
    DomainBatch::new(
        images,
        target.n,
        target.channels,
        target.height,
        target.width,
        target.labels.clone(),
    )
}

/// Source-classifier accuracy on translated target test images.
pub fn adaptation_accuracy<T: Scalar>(
    model: &CdlmModel<T>,
    clf: &Classifier<T>,
    target_test: &DomainBatch<T>,
    gamma1: f64,
    gamma2: f64,
    seed: u64,
) -> Result<f64> {
    let translated = translate_target(model, target_test, gamma1, gamma2, seed)?;
    clf.accuracy(&translated)
}

// ---------------------------------------------------------------------------
// proxy domain distance
// ---------------------------------------------------------------------------

/// Deep representations h for a whole batch, evaluated in chunks.
pub fn encode_reps<T: Scalar>(model: &CdlmModel<T>, data: &DomainBatch<T>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.n * model.cfg.z_dim);
    for chunk in chunk_ranges(data.n, 64) {
        let idx: Vec<usize> = chunk.collect();
        let sub = data.select(&idx);
        let g = Graph::new();
        let bound = model.bind(&g)?;
        let x = g.constant(&sub.shape(), sub.images)?;
        let (_, rep) = bound.encode(&x)?;
        out.extend(rep.h.value().iter().map(|v| v.to_f64_c()));
    }
    Ok(out)
}

/// Variational means μ for a whole batch.
pub fn encode_means<T: Scalar>(model: &CdlmModel<T>, data: &DomainBatch<T>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.n * model.cfg.z_dim);
    for chunk in chunk_ranges(data.n, 64) {
        let idx: Vec<usize> = chunk.collect();
        let sub = data.select(&idx);
        let g = Graph::new();
        let bound = model.bind(&g)?;
        let x = g.constant(&sub.shape(), sub.images)?;
        let (info, _) = bound.encode(&x)?;
        out.extend(info.mu.value().iter().map(|v| v.to_f64_c()));
    }
    Ok(out)
}

/// Proxy domain distance d̂ = 2 (1 − 2ε): a logistic probe is trained to
/// separate source from target representations and ε is its held-out error.
/// 0 ≈ indistinguishable domains, 2 ≈ perfectly separable.
pub fn a_distance<T: Scalar>(
    model: &CdlmModel<T>,
    source: &DomainBatch<T>,
    target: &DomainBatch<T>,
    seed: u64,
) -> Result<f64> {
    let hs = encode_reps(model, source)?;
    let ht = encode_reps(model, target)?;
    a_distance_from_features(&hs, &ht, model.cfg.z_dim, seed)
}

/// Proxy domain distance over raw pixel vectors (the unadapted baseline).
pub fn pixel_a_distance<T: Scalar>(
    source: &DomainBatch<T>,
    target: &DomainBatch<T>,
    seed: u64,
) -> Result<f64> {
    if source.image_len() != target.image_len() {
        return Err(CdlmError::Usage(
            "pixel probe requires equal image shapes".into(),
        ));
    }
    let fs: Vec<f64> = source.images.iter().map(|v| v.to_f64_c()).collect();
    let ft: Vec<f64> = target.images.iter().map(|v| v.to_f64_c()).collect();
    a_distance_from_features(&fs, &ft, source.image_len(), seed)
}

/// The probe itself, over arbitrary fixed-length feature rows.
pub fn a_distance_from_features(
    feats_s: &[f64],
    feats_t: &[f64],
    z: usize,
    seed: u64,
) -> Result<f64> {
    if z == 0 || feats_s.len() % z != 0 || feats_t.len() % z != 0 {
        return Err(CdlmError::Usage(
            "feature buffers must be a whole number of rows".into(),
        ));
    }
    let n_s = feats_s.len() / z;
    let n_t = feats_t.len() / z;
    if n_s < 4 || n_t < 4 {
        return Err(CdlmError::Usage(
            "domain-distance probe needs at least 4 samples per domain".into(),
        ));
    }
    // even indices train the probe, odd indices measure its error
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut test_x = Vec::new();
    let mut test_y = Vec::new();
    for (feats, n, label) in [(&feats_s, n_s, 0.0f64), (&feats_t, n_t, 1.0f64)] {
        for i in 0..n {
            let row = &feats[i * z..(i + 1) * z];
            if i % 2 == 0 {
                train_x.extend_from_slice(row);
                train_y.push(label);
            } else {
                test_x.extend_from_slice(row);
                test_y.push(label);
            }
        }
    }
    // standardize per dimension on the training rows so the probe's
    // conditioning does not depend on the feature scale
    let n_train = train_y.len();
    let mut mean = vec![0.0f64; z];
    let mut var = vec![0.0f64; z];
    for i in 0..n_train {
        for j in 0..z {
            mean[j] += train_x[i * z + j];
        }
    }
    for m in &mut mean {
        *m /= n_train as f64;
    }
    for i in 0..n_train {
        for j in 0..z {
            let d = train_x[i * z + j] - mean[j];
            var[j] += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / n_train as f64).sqrt().max(1e-6))
        .collect();
    let standardize = |buf: &mut [f64]| {
        for (i, v) in buf.iter_mut().enumerate() {
            let j = i % z;
            *v = (*v - mean[j]) / std[j];
        }
    };
    standardize(&mut train_x);
    standardize(&mut test_x);

    let (w, b) = train_logistic(&train_x, &train_y, z, 1500, 0.5, seed)?;
    let mut errors = 0usize;
    for (i, &y) in test_y.iter().enumerate() {
        let row = &test_x[i * z..(i + 1) * z];
        let score: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
        let pred = if score > 0.0 { 1.0 } else { 0.0 };
        if pred != y {
            errors += 1;
        }
    }
    let eps = errors as f64 / test_y.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * eps)).clamp(0.0, 2.0))
}

fn train_logistic(
    x: &[f64],
    y: &[f64],
    dim: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let n = y.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.01..0.01)).collect();
    let mut b = 0.0f64;
    for _ in 0..steps {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for i in 0..n {
            let row = &x[i * dim..(i + 1) * dim];
            let score: f64 = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-score).exp());
            let d = p - y[i];
            for (g, &xi) in gw.iter_mut().zip(row) {
                *g += d * xi;
            }
            gb += d;
        }
        let inv = lr / n as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= inv * g;
        }
        b -= inv * gb;
    }
    Ok((w, b))
}

// ---------------------------------------------------------------------------
// Monte-Carlo moment verification
// ---------------------------------------------------------------------------

/// Per-coordinate standardized discrepancies between sampled and closed-form
/// moments of the modulated latent.
pub struct MomentCheck {
    /// (sample mean − μ_zz) / (σ_zz / √n), per coordinate.
    pub mean_scores: Vec<f64>,
    /// (sample std − σ_zz) / (σ_zz / √(2n)), per coordinate.
    pub std_scores: Vec<f64>,
    pub n_samples: usize,
}

impl MomentCheck {
    pub fn max_abs_score(&self) -> f64 {
        self.mean_scores
            .iter()
            .chain(&self.std_scores)
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Sample z = μ + σ (γ₁ h + γ₂ ε) with h ~ N(μ_h, σ_h²), ε ~ N(0, 1) and
/// standardize the sampled moments against the closed-form prediction.
#[allow(clippy::too_many_arguments)]
pub fn moment_z_scores(
    mu: &[f64],
    sigma: &[f64],
    mu_h: &[f64],
    sigma_h: &[f64],
    gamma1: f64,
    gamma2: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MomentCheck> {
    let d = mu.len();
    if sigma.len() != d || mu_h.len() != d || sigma_h.len() != d {
        return Err(CdlmError::Usage(
            "moment check requires equal-length coordinate vectors".into(),
        ));
    }
    if sigma.iter().chain(sigma_h).any(|&s| s < 0.0) {
        return Err(CdlmError::Domain {
            op: "moment_z_scores",
            detail: "scales must be non-negative".into(),
        });
    }
    let (mu_zz, sigma_zz) = closed_form_moments(mu, sigma, mu_h, sigma_h, gamma1, gamma2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0f64; d];
    let mut sum_sq = vec![0.0f64; d];
    for _ in 0..n_samples {
        for j in 0..d {
            let h: f64 = mu_h[j] + sigma_h[j] * rng.sample::<f64, _>(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let z = mu[j] + sigma[j] * (gamma1 * h + gamma2 * e);
            sum[j] += z;
            sum_sq[j] += z * z;
        }
    }
    let n = n_samples as f64;
    let mut mean_scores = Vec::with_capacity(d);
    let mut std_scores = Vec::with_capacity(d);
    for j in 0..d {
        let mean = sum[j] / n;
        let var = (sum_sq[j] / n - mean * mean).max(0.0);
        let std = var.sqrt();
        let se_mean = sigma_zz[j] / n.sqrt();
        let se_std = sigma_zz[j] / (2.0 * n).sqrt();
        if se_mean == 0.0 {
            // degenerate (deterministic) latent: exact match required
            mean_scores.push(if (mean - mu_zz[j]).abs() < 1e-12 { 0.0 } else { f64::INFINITY });
            std_scores.push(if std < 1e-12 { 0.0 } else { f64::INFINITY });
        } else {
            mean_scores.push((mean - mu_zz[j]) / se_mean);
            std_scores.push((std - sigma_zz[j]) / se_std);
        }
    }
    Ok(MomentCheck {
        mean_scores,
        std_scores,
        n_samples,
    })
}

/// True when every sampled moment sits within `threshold` standard errors of
/// its closed-form value.
#[allow(clippy::too_many_arguments)]
pub fn verify_moments(
    mu: &[f64],
    sigma: &[f64],
    mu_h: &[f64],
    sigma_h: &[f64],
    gamma1: f64,
    gamma2: f64,
    n_samples: usize,
    seed: u64,
    threshold: f64,
) -> Result<bool> {
    let check = moment_z_scores(mu, sigma, mu_h, sigma_h, gamma1, gamma2, n_samples, seed)?;
    Ok(check.max_abs_score() < threshold)
}

// ---------------------------------------------------------------------------
// image metrics
// ---------------------------------------------------------------------------

/// Mean squared error and PSNR (in dB, `None` when the images are identical)
/// for unit-range images.
pub fn image_metrics<T: Scalar>(a: &[T], b: &[T]) -> Result<(f64, Option<f64>)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CdlmError::Usage(format!(
            "image metric inputs must be equal non-empty lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64_c() - y.to_f64_c();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    let psnr = if mse == 0.0 {
        None
    } else {
        Some(10.0 * (1.0 / mse).log10())
    };
    Ok((mse, psnr))
}

// ---------------------------------------------------------------------------
// embedding export
// ---------------------------------------------------------------------------

/// Write per-sample latent embeddings (variational mean and deep
/// representation) for both domains as CSV.
pub fn export_embeddings<T: Scalar>(
    path: &Path,
    model: &CdlmModel<T>,
    source: &DomainBatch<T>,
    target: &DomainBatch<T>,
) -> Result<()> {
    let z = model.cfg.z_dim;
    let mut out = String::new();
    out.push_str("domain,label");
    for j in 0..z {
        out.push_str(&format!(",mu_{j}"));
    }
    for j in 0..z {
        out.push_str(&format!(",h_{j}"));
    }
    out.push('\n');
    for (tag, data) in [("source", source), ("target", target)] {
        let mu = encode_means(model, data)?;
        let h = encode_reps(model, data)?;
        for i in 0..data.n {
            let label = data
                .labels
                .as_ref()
                .map(|l| l[i] as i64)
                .unwrap_or(-1);
            out.push_str(&format!("{tag},{label}"));
            for j in 0..z {
                out.push_str(&format!(",{}", mu[i * z + j]));
            }
            for j in 0..z {
                out.push_str(&format!(",{}", h[i * z + j]));
            }
            out.push('\n');
        }
    }
    let mut f =
        fs::File::create(path).map_err(|e| CdlmError::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| CdlmError::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// full evaluation report
// ---------------------------------------------------------------------------

/// Headline metrics of one trained model.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub source_acc: f64,
    pub target_direct_acc: f64,
    pub adaptation_acc: f64,
    pub a_distance: f64,
    pub recon_mse: f64,
    pub recon_psnr: Option<f64>,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "source_acc,target_direct_acc,adaptation_acc,a_distance,recon_mse,recon_psnr"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.source_acc,
            self.target_direct_acc,
            self.adaptation_acc,
            self.a_distance,
            self.recon_mse,
            self.recon_psnr.map(|v| v.to_string()).unwrap_or_else(|| "inf".into()),
        )
    }
}

/// Evaluate a trained model against all headline metrics.
pub fn evaluate<T: Scalar>(
    model: &CdlmModel<T>,
    clf: &Classifier<T>,
    data: &DomainPair<T>,
    gamma1: f64,
    gamma2: f64,
    seed: u64,
) -> Result<EvalReport> {
    let source_acc = clf.accuracy(&data.source_test)?;
    let target_direct_acc = clf.accuracy(&data.target_test)?;
    let adaptation_acc =
        adaptation_accuracy(model, clf, &data.target_test, gamma1, gamma2, seed)?;
    let a_dist = a_distance(model, &data.source_test, &data.target_test, seed ^ 0x5ead)?;
    let translated = translate_target(model, &data.target_test, gamma1, gamma2, seed)?;
    let (recon_mse, recon_psnr) = image_metrics(&translated.images, &data.target_test.images)?;
    Ok(EvalReport {
        source_acc,
        target_direct_acc,
        adaptation_acc,
        a_distance: a_dist,
        recon_mse,
        recon_psnr,
    })
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

/// One cell of an ablation grid: named hyperparameter overrides.
#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub name: String,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub h_tap: usize,
}

impl AblationSpec {
    pub fn from_base(name: &str, train: &TrainConfig, net: &NetConfig) -> Self {
        AblationSpec {
            name: name.to_string(),
            gamma1: train.gamma1,
            gamma2: train.gamma2,
            beta1: train.beta1,
            beta2: train.beta2,
            h_tap: net.h_tap,
        }
    }
}

/// One completed (or failed) ablation cell.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub adaptation_acc: Option<f64>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn csv_header() -> &'static str {
        "name,gamma1,gamma2,beta1,beta2,h_tap,adaptation_acc,error"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.spec.name,
            self.spec.gamma1,
            self.spec.gamma2,
            self.spec.beta1,
            self.spec.beta2,
            self.spec.h_tap,
            self.adaptation_acc
                .map(|v| v.to_string())
                .unwrap_or_default(),
            self.error.clone().unwrap_or_default(),
        )
    }
}

/// Train one model per grid cell (in parallel across `jobs` threads, same
/// seed per cell so cells differ only in the overrides) and score each with
/// the shared source classifier. Per-cell failures land in the error column
/// without aborting the grid.
pub fn run_ablations<T: Scalar>(
    grid: &[AblationSpec],
    base_train: &TrainConfig,
    base_net: &NetConfig,
    data: &DomainPair<T>,
    clf: &Classifier<T>,
    jobs: usize,
) -> Vec<AblationRow> {
    let jobs = jobs.max(1);
    let next = Mutex::new(0usize);
    let rows: Vec<Mutex<Option<AblationRow>>> =
        (0..grid.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(grid.len().max(1)) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= grid.len() {
                    break;
                }
                let spec = grid[i].clone();
                let row = match run_one_ablation(&spec, base_train, base_net, data, clf) {
                    Ok(acc) => AblationRow {
                        spec,
                        adaptation_acc: Some(acc),
                        error: None,
                    },
                    Err(e) => AblationRow {
                        spec,
                        adaptation_acc: None,
                        error: Some(e.to_string()),
                    },
                };
                *rows[i].lock().unwrap() = Some(row);
            });
        }
    });
    rows.into_iter()
        .map(|m| m.into_inner().unwrap().expect("every cell filled"))
        .collect()
}

fn run_one_ablation<T: Scalar>(
    spec: &AblationSpec,
    base_train: &TrainConfig,
    base_net: &NetConfig,
    data: &DomainPair<T>,
    clf: &Classifier<T>,
) -> Result<f64> {
    let mut train = base_train.clone();
    train.gamma1 = spec.gamma1;
    train.gamma2 = spec.gamma2;
    train.beta1 = spec.beta1;
    train.beta2 = spec.beta2;
    let mut net = base_net.clone();
    net.h_tap = spec.h_tap;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let model = CdlmModel::new(net, &mut rng)?;
    let mut state = TrainState::new(model, train.clone());
    // Score the cell by the mean adapted accuracy over the last few training
    // snapshots and several noise draws each, so grid comparisons reflect the
    // plateau rather than a single stochastic end point.
    let total = train.steps;
    let mut snapshots: Vec<u64> = [total.saturating_sub(400), total.saturating_sub(200), total]
        .into_iter()
        .collect();
    snapshots.dedup();
    let mut accs = Vec::new();
    for snap in snapshots {
        state.config.steps = snap;
        fit(&mut state, data, FitOptions::default())?;
        for draw in 0..3u64 {
            accs.push(adaptation_accuracy(
                &state.model,
                clf,
                &data.target_test,
                train.gamma1,
                train.gamma2,
                (train.seed ^ 0xE7A1).wrapping_add(draw),
            )?);
        }
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_matches_hand_value() {
        // constant error of 0.1 -> mse 0.01 -> psnr 20 dB
        let a = vec![0.5f64; 100];
        let b = vec![0.6f64; 100];
        let (mse, psnr) = image_metrics(&a, &b).unwrap();
        assert!((mse - 0.01).abs() < 1e-12);
        assert!((psnr.unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn identical_images_have_infinite_psnr() {
        let a = vec![0.25f32; 16];
        let (mse, psnr) = image_metrics(&a, &a).unwrap();
        assert_eq!(mse, 0.0);
        assert!(psnr.is_none());
    }

    #[test]
    fn mse_scales_quadratically_with_error() {
        let a = vec![0.0f64; 10];
        let b1 = vec![0.1f64; 10];
        let b2 = vec![0.2f64; 10];
        let (m1, _) = image_metrics(&a, &b1).unwrap();
        let (m2, _) = image_metrics(&a, &b2).unwrap();
        assert!((m2 / m1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn moment_check_passes_for_matching_distribution() {
        let ok = verify_moments(
            &[0.3, -1.0],
            &[1.2, 0.4],
            &[0.5, 0.2],
            &[0.3, 0.6],
            1.0,
            0.1,
            200_000,
            17,
            4.0,
        )
        .unwrap();
        assert!(ok);
    }

    #[test]
    fn moment_check_rejects_wrong_moments() {
        let n = 100_000usize;
        let check = moment_z_scores(&[0.0], &[1.0], &[0.5], &[0.1], 1.0, 0.1, n, 3).unwrap();
        assert!(check.max_abs_score() < 5.0);
        // reconstruct the raw sampled mean, then standardize it against the
        // closed form for a doubled gamma1: the discrepancy must be huge
        let (mu_right, sig_right) = closed_form_moments(&[0.0], &[1.0], &[0.5], &[0.1], 1.0, 0.1);
        let (mu_wrong, sig_wrong) = closed_form_moments(&[0.0], &[1.0], &[0.5], &[0.1], 2.0, 0.1);
        let sampled_mean = check.mean_scores[0] * sig_right[0] / (n as f64).sqrt() + mu_right[0];
        let wrong_score = (sampled_mean - mu_wrong[0]) / (sig_wrong[0] / (n as f64).sqrt());
        assert!(wrong_score.abs() > 100.0, "{wrong_score}");
    }

    #[test]
    fn logistic_probe_separates_disjoint_clusters() {
        // two well-separated 1-D clusters -> near-zero error -> distance ~2
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..50 {
            x.push(-2.0 - (i % 5) as f64 * 0.1);
            y.push(0.0);
        }
        for i in 0..50 {
            x.push(2.0 + (i % 5) as f64 * 0.1);
            y.push(1.0);
        }
        let (w, b) = train_logistic(&x, &y, 1, 500, 0.5, 1).unwrap();
        let errs = x
            .iter()
            .zip(&y)
            .filter(|(&xi, &yi)| {
                let pred = if w[0] * xi + b > 0.0 { 1.0 } else { 0.0 };
                pred != yi
            })
            .count();
        assert_eq!(errs, 0);
    }

    #[test]
    fn classifier_learns_a_trivial_rule() {
        // class 0 = dark images, class 1 = bright images
        let n = 64;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let (v, l) = if i % 2 == 0 { (0.1f32, 0u8) } else { (0.9, 1) };
            images.extend(std::iter::repeat(v).take(64));
            labels.push(l);
        }
        let data = DomainBatch::new(images, n, 1, 8, 8, Some(labels)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut clf = Classifier::new(1, 8, 8, 2, &mut rng).unwrap();
        clf.train(&data, 60, 32, 1e-2, 5).unwrap();
        let acc = clf.accuracy(&data).unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }
}
