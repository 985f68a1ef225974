//! The CDLM optimization loop: split updates with SGD-momentum for the
//! variational (and discriminator) parameters and Adam for the generation
//! parameters, plus loss-trace emission and periodic checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{DomainBatch, Unlabeled};
use crate::error::{CdlmError, Result};
use crate::losses::{
    adversarial_loss, consistency_loss, kl_modulated, mse, reconstruction_loss, LossReport,
};
use crate::model::{modulate, rep_to_latent, BoundModel, CdlmModel, Domain, Role};
use crate::num::Scalar;
use crate::optim::{Adam, SgdMomentum};
use crate::tensor::{Graph, Tensor};

/// Reconstruction likelihood choice (Bernoulli BCE default, MSE for ablation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconLoss {
    Bce,
    Mse,
}

impl ReconLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            ReconLoss::Bce => "bce",
            ReconLoss::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(ReconLoss::Bce),
            "mse" => Ok(ReconLoss::Mse),
            other => Err(CdlmError::Usage(format!("unknown recon loss {other:?}"))),
        }
    }
}

/// Every scalar hyperparameter of the training procedure.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub momentum: f64,
    pub adam_b1: f64,
    pub adam_b2: f64,
    pub adam_eps: f64,
    pub grl_scale: f64,
    /// Weight on the adversarial term in the φ update (1.0 reproduces the
    /// published update rule; 0.0 detaches it for ablations).
    pub adv_weight: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub recon: ReconLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma1: 1.0,
            gamma2: 0.1,
            lambda1: 0.0001,
            lambda2: 0.0001,
            beta1: 0.1,
            beta2: 0.01,
            eta1: 0.01,
            eta2: 0.0005,
            momentum: 0.9,
            adam_b1: 0.9,
            adam_b2: 0.999,
            adam_eps: 1e-8,
            grl_scale: 1.0,
            adv_weight: 1.0,
            batch_size: 64,
            steps: 5000,
            seed: 7,
            eval_every: 500,
            recon: ReconLoss::Bce,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(CdlmError::Config("batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("adam_b1", self.adam_b1),
            ("adam_b2", self.adam_b2),
            ("adam_eps", self.adam_eps),
        ] {
            if v <= 0.0 {
                return Err(CdlmError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(CdlmError::Config("gammas must be >= 0".into()));
        }
        Ok(())
    }

    /// Ordered (key, value) pairs — the line-based config file content.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("gamma1", self.gamma1.to_string()),
            ("gamma2", self.gamma2.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eta1", self.eta1.to_string()),
            ("eta2", self.eta2.to_string()),
            ("momentum", self.momentum.to_string()),
            ("adam_b1", self.adam_b1.to_string()),
            ("adam_b2", self.adam_b2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("grl_scale", self.grl_scale.to_string()),
            ("adv_weight", self.adv_weight.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("recon", self.recon.as_str().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_key_values() {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Parse a line-based `key=value` config; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut offenders = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CdlmError::Usage(format!(
                    "config line {} is not key=value: {line:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad_num = || CdlmError::Usage(format!("bad value for {key}: {value:?}"));
            match key {
                "gamma1" => cfg.gamma1 = value.parse().map_err(|_| bad_num())?,
                "gamma2" => cfg.gamma2 = value.parse().map_err(|_| bad_num())?,
                "lambda1" => cfg.lambda1 = value.parse().map_err(|_| bad_num())?,
                "lambda2" => cfg.lambda2 = value.parse().map_err(|_| bad_num())?,
                "beta1" => cfg.beta1 = value.parse().map_err(|_| bad_num())?,
                "beta2" => cfg.beta2 = value.parse().map_err(|_| bad_num())?,
                "eta1" => cfg.eta1 = value.parse().map_err(|_| bad_num())?,
                "eta2" => cfg.eta2 = value.parse().map_err(|_| bad_num())?,
                "momentum" => cfg.momentum = value.parse().map_err(|_| bad_num())?,
                "adam_b1" => cfg.adam_b1 = value.parse().map_err(|_| bad_num())?,
                "adam_b2" => cfg.adam_b2 = value.parse().map_err(|_| bad_num())?,
                "adam_eps" => cfg.adam_eps = value.parse().map_err(|_| bad_num())?,
                "grl_scale" => cfg.grl_scale = value.parse().map_err(|_| bad_num())?,
                "adv_weight" => cfg.adv_weight = value.parse().map_err(|_| bad_num())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad_num())?,
                "steps" => cfg.steps = value.parse().map_err(|_| bad_num())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad_num())?,
                "eval_every" => cfg.eval_every = value.parse().map_err(|_| bad_num())?,
                "recon" => cfg.recon = ReconLoss::parse(value)?,
                other => offenders.push(other.to_string()),
            }
        }
        if !offenders.is_empty() {
            return Err(CdlmError::Usage(format!(
                "unknown config keys: {}",
                offenders.join(", ")
            )));
        }
        Ok(cfg)
    }
}

/// Mutable training state: parameters, optimizer slots, RNG, step counter.
#[derive(Debug)]
pub struct TrainState<T: Scalar> {
    pub step: u64,
    pub config: TrainConfig,
    pub model: CdlmModel<T>,
    pub sgd: SgdMomentum<T>,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: CdlmModel<T>, config: TrainConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sgd = SgdMomentum::new(T::from_f64_c(config.momentum));
        let adam = Adam::new(
            T::from_f64_c(config.adam_b1),
            T::from_f64_c(config.adam_b2),
            T::from_f64_c(config.adam_eps),
        );
        TrainState {
            step: 0,
            config,
            model,
            sgd,
            adam,
            rng,
        }
    }
}

/// The four splits consumed by a full adaptation run. Target-side labels are
/// carried for evaluation only; `fit` strips them before training.
#[derive(Clone, Debug)]
pub struct DomainPair<T> {
    pub source_train: DomainBatch<T>,
    pub source_test: DomainBatch<T>,
    pub target_train: DomainBatch<T>,
    pub target_test: DomainBatch<T>,
}

fn standard_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            T::from_f64_c(v)
        })
        .collect()
}

fn sample_indices(rng: &mut ChaCha8Rng, population: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..population)).collect()
}

/// Column mean and (floored) column variance over the batch: `[b, z] -> [1, z]`.
fn batch_stats<T: Scalar>(h: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, _z) = (h.shape()[0], h.shape()[1]);
    let g = h.graph().clone();
    let inv_b = T::from_f64_c(1.0 / b as f64);
    let ones = g.constant(&[1, b], vec![T::one(); b])?;
    let mu = ones.matmul(h)?.scale(inv_b)?;
    let m2 = ones.matmul(&h.square()?)?.scale(inv_b)?;
    let var = m2
        .sub(&mu.square()?)?
        .clamp(T::from_f64_c(1e-8), T::max_value())?;
    Ok((mu, var))
}

fn kl_term<T: Scalar>(
    info_mu: &Tensor<T>,
    info_log_sigma: &Tensor<T>,
    h_other: &Tensor<T>,
    gamma1: T,
    gamma2: T,
) -> Result<Tensor<T>> {
    let (mu_h, var_h) = batch_stats(h_other)?;
    let inner = var_h
        .scale(gamma1 * gamma1)?
        .add_scalar(gamma2 * gamma2)?;
    let shape = info_mu.shape().to_vec();
    let inner_b = inner.broadcast_to(&shape)?;
    let mu_h_b = mu_h.broadcast_to(&shape)?;
    let sigma = info_log_sigma.exp()?;
    let mu_zz = info_mu.add(&sigma.mul(&mu_h_b)?.scale(gamma1)?)?;
    kl_modulated(&mu_zz, info_log_sigma, &inner_b)
}

pub(crate) struct StepGrads<T> {
    pub report: LossReport,
    pub phi: BTreeMap<String, Vec<T>>,
    pub theta: BTreeMap<String, Vec<T>>,
}

fn collect_grads<T: Scalar>(
    bound: &BoundModel<T>,
    model: &CdlmModel<T>,
    roles: &[Role],
) -> BTreeMap<String, Vec<T>> {
    let mut out = BTreeMap::new();
    for (name, tensor) in bound.param_tensors() {
        let role = model.params.get(name).expect("param exists").role;
        if roles.contains(&role) {
            if let Some(g) = tensor.grad() {
                out.insert(name.clone(), g);
            }
        }
    }
    out
}

/// One full forward/backward pass. φ-gradients come from
/// ℒ_adv + λ₁ℒ_KL + λ₂ℒ_Rec, θ-gradients from ℒ_Rec + β₁ℒ_c^s + β₂ℒ_c^t —
/// the update split is enforced by reading each partition from its own
/// backward sweep only.
pub(crate) fn compute_step_grads<T: Scalar>(
    state: &mut TrainState<T>,
    source: &DomainBatch<T>,
    target: &Unlabeled<T>,
) -> Result<StepGrads<T>> {
    let cfg = &state.config;
    let target = target.batch();
    if source.n != target.n {
        return Err(CdlmError::Usage(format!(
            "source batch ({}) and target batch ({}) must be the same size",
            source.n, target.n
        )));
    }
    let b = source.n;
    let z_dim = state.model.cfg.z_dim;
    let g1 = T::from_f64_c(cfg.gamma1);
    let g2 = T::from_f64_c(cfg.gamma2);

    // one ε draw per domain per step, shared across branches
    let eps_s_data = standard_normal::<T>(&mut state.rng, b * z_dim);
    let eps_t_data = standard_normal::<T>(&mut state.rng, b * z_dim);

    let graph = Graph::new();
    let bound = state.model.bind(&graph)?;
    let xs = graph.constant(&source.shape(), source.images.clone())?;
    let xt = graph.constant(&target.shape(), target.images.clone())?;
    let (info_s, rep_s) = bound.encode(&xs)?;
    let (info_t, rep_t) = bound.encode(&xt)?;
    let eps_s = graph.constant(&[b, z_dim], eps_s_data)?;
    let eps_t = graph.constant(&[b, z_dim], eps_t_data)?;

    let z_st = modulate(&info_s, Domain::Source, &rep_t, Domain::Target, &eps_s, g1, g2, false)?;
    let z_ts = modulate(&info_t, Domain::Target, &rep_s, Domain::Source, &eps_t, g1, g2, false)?;

    let xhat_st = bound.decode(&z_st.z)?;
    let xhat_ts = bound.decode(&z_ts.z)?;
    let xtilde_s = bound.decode(&rep_to_latent(&rep_s, &eps_s, g1, g2)?)?;
    let xtilde_t = bound.decode(&rep_to_latent(&rep_t, &eps_t, g1, g2)?)?;

    let rec = match cfg.recon {
        ReconLoss::Bce => reconstruction_loss(&xhat_st, &xs)?,
        ReconLoss::Mse => mse(&xhat_st, &xs)?,
    };
    let kl_st = kl_term(&info_s.mu, &info_s.log_sigma, &rep_t.h, g1, g2)?;
    let kl_ts = kl_term(&info_t.mu, &info_t.log_sigma, &rep_s.h, g1, g2)?;
    let grl = T::from_f64_c(cfg.grl_scale);
    let p_s = bound.discriminate(&rep_s, grl)?;
    let p_t = bound.discriminate(&rep_t, grl)?;
    let adv = adversarial_loss(&p_s, &p_t)?;
    let (cons_s, cons_t) = consistency_loss(&xhat_st, &xtilde_s, &xhat_ts, &xtilde_t)?;

    let total_phi = adv
        .scale(T::from_f64_c(cfg.adv_weight))?
        .add(&kl_st.add(&kl_ts)?.scale(T::from_f64_c(cfg.lambda1))?)?
        .add(&rec.scale(T::from_f64_c(cfg.lambda2))?)?;
    let total_theta = rec
        .add(&cons_s.scale(T::from_f64_c(cfg.beta1))?)?
        .add(&cons_t.scale(T::from_f64_c(cfg.beta2))?)?;

    let report = LossReport {
        rec: rec.scalar_value().to_f64_c(),
        kl_st: kl_st.scalar_value().to_f64_c(),
        kl_ts: kl_ts.scalar_value().to_f64_c(),
        adv: adv.scalar_value().to_f64_c(),
        cons_s: cons_s.scalar_value().to_f64_c(),
        cons_t: cons_t.scalar_value().to_f64_c(),
        total_phi: total_phi.scalar_value().to_f64_c(),
        total_theta: total_theta.scalar_value().to_f64_c(),
    };
    if !report.all_finite() {
        return Err(CdlmError::NonFinite {
            op: "train_step",
            index: 0,
        });
    }

    total_phi.backward()?;
    let phi = collect_grads(&bound, &state.model, &[Role::Encoder, Role::Discriminator]);
    graph.zero_grads();
    total_theta.backward()?;
    let theta = collect_grads(&bound, &state.model, &[Role::Decoder]);

    Ok(StepGrads { report, phi, theta })
}

/// One optimization step: SGD-momentum on φ (and ξ) at η₁, Adam on θ at η₂.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    source: &DomainBatch<T>,
    target: &Unlabeled<T>,
) -> Result<LossReport> {
    let grads = compute_step_grads(state, source, target)?;
    let eta1 = T::from_f64_c(state.config.eta1);
    let eta2 = T::from_f64_c(state.config.eta2);

    let mut phi_params: Vec<&mut crate::model::Param<T>> = state
        .model
        .params
        .iter_mut()
        .filter(|p| matches!(p.role, Role::Encoder | Role::Discriminator))
        .collect();
    state.sgd.step(eta1, &mut phi_params, &grads.phi);

    let mut theta_params: Vec<&mut crate::model::Param<T>> = state
        .model
        .params
        .iter_mut()
        .filter(|p| p.role == Role::Decoder)
        .collect();
    state.adam.step(eta2, &mut theta_params, &grads.theta);

    state.step += 1;
    state.model.trained = true;
    Ok(grads.report)
}

/// Per-eval hook: receives the frozen state and the step, returns named
/// metric values that `fit` appends to the eval CSV.
pub type EvalHook<'a, T> = &'a mut dyn FnMut(&TrainState<T>, u64) -> Result<Vec<(String, f64)>>;

/// Output sinks and hooks for `fit`.
pub struct FitOptions<'a, T: Scalar> {
    pub trace_path: Option<&'a Path>,
    pub checkpoint_dir: Option<&'a Path>,
    pub eval_csv_path: Option<&'a Path>,
    pub eval_hook: Option<EvalHook<'a, T>>,
}

impl<T: Scalar> Default for FitOptions<'_, T> {
    fn default() -> Self {
        FitOptions {
            trace_path: None,
            checkpoint_dir: None,
            eval_csv_path: None,
            eval_hook: None,
        }
    }
}

fn append_line(path: &Path, line: &str, truncate: bool) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(truncate)
        .append(!truncate)
        .open(path)
        .map_err(|e| CdlmError::io(path.display().to_string(), e))?;
    writeln!(f, "{line}").map_err(|e| CdlmError::io(path.display().to_string(), e))
}

/// Run the configured number of steps, emitting one trace row per step and a
/// checkpoint (plus optional eval metrics) every `eval_every` steps.
pub fn fit<T: Scalar>(
    state: &mut TrainState<T>,
    data: &DomainPair<T>,
    mut opts: FitOptions<'_, T>,
) -> Result<Vec<LossReport>> {
    let fresh = state.step == 0;
    if let Some(p) = opts.trace_path {
        if fresh {
            append_line(p, LossReport::csv_header(), true)?;
        }
    }
    if let Some(dir) = opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| CdlmError::io(dir.display().to_string(), e))?;
        if fresh {
            crate::checkpoint::save_checkpoint(&dir.join("checkpoint_init.cdlm"), state)?;
        }
    }
    let target_train = Unlabeled::new(data.target_train.clone());
    let mut reports = Vec::new();
    while state.step < state.config.steps {
        let si = sample_indices(&mut state.rng, data.source_train.n, state.config.batch_size);
        let ti = sample_indices(&mut state.rng, data.target_train.n, state.config.batch_size);
        let sb = data.source_train.select(&si);
        let tb = Unlabeled::new(target_train.batch().select(&ti));
        let report = train_step(state, &sb, &tb)?;
        if let Some(p) = opts.trace_path {
            append_line(p, &report.csv_row(state.step), false)?;
        }
        let at_eval = state.config.eval_every > 0 && state.step % state.config.eval_every == 0;
        if at_eval || state.step == state.config.steps {
            if let Some(dir) = opts.checkpoint_dir {
                crate::checkpoint::save_checkpoint(
                    &dir.join(format!("checkpoint_{:06}.cdlm", state.step)),
                    state,
                )?;
            }
            if let Some(hook) = opts.eval_hook.as_mut() {
                let metrics = hook(state, state.step)?;
                if let Some(p) = opts.eval_csv_path {
                    if !metrics.is_empty() {
                        let row = metrics
                            .iter()
                            .map(|(k, v)| format!("{k}={v}"))
                            .collect::<Vec<_>>()
                            .join(",");
                        append_line(p, &format!("{},{row}", state.step), false)?;
                    }
                }
            }
        }
        reports.push(report);
    }
    if let Some(dir) = opts.checkpoint_dir {
        crate::checkpoint::save_checkpoint(&dir.join("checkpoint_final.cdlm"), state)?;
    }
    Ok(reports)
}
