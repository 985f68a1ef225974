//! Training objectives: Bernoulli reconstruction, KL to the standard-normal
//! prior evaluated on the modulated moments, the adversarial domain loss, and
//! the pairwise reconstruction/generation consistency.

use crate::error::{CdlmError, Result};
use crate::num::Scalar;
use crate::tensor::Tensor;

/// Per-batch loss terms of one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub rec: f64,
    pub kl_st: f64,
    pub kl_ts: f64,
    pub adv: f64,
    pub cons_s: f64,
    pub cons_t: f64,
    pub total_phi: f64,
    pub total_theta: f64,
}

impl LossReport {
    pub fn csv_header() -> &'static str {
        "step,rec,kl_st,kl_ts,adv,cons_s,cons_t,total_phi,total_theta"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            step,
            self.rec,
            self.kl_st,
            self.kl_ts,
            self.adv,
            self.cons_s,
            self.cons_t,
            self.total_phi,
            self.total_theta
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.rec,
            self.kl_st,
            self.kl_ts,
            self.adv,
            self.cons_s,
            self.cons_t,
            self.total_phi,
            self.total_theta,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// KL(N(μ, σ²) ‖ N(0, I)): mean over the batch of ½ Σ_i (μ² + σ² − 2 log σ − 1).
///
/// `mu` and `sigma` are `[batch, z_dim]` tensors; `sigma` must be positive.
pub fn kl_standard_normal<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>) -> Result<Tensor<T>> {
    if mu.shape() != sigma.shape() || mu.shape().len() != 2 {
        return Err(CdlmError::ShapeMismatch {
            op: "kl_standard_normal",
            lhs: mu.shape().to_vec(),
            rhs: sigma.shape().to_vec(),
        });
    }
    if sigma.value().iter().any(|&s| s <= T::zero()) {
        return Err(CdlmError::Domain {
            op: "kl_standard_normal",
            detail: "sigma must be strictly positive".into(),
        });
    }
    let two = T::from_f64_c(2.0);
    let term = mu
        .square()?
        .add(&sigma.square()?)?
        .sub(&sigma.log()?.scale(two)?)?
        .add_scalar(-T::one())?;
    term.row_sum()?.mean()?.scale(T::from_f64_c(0.5))
}

/// KL against N(0, I) expressed through log σ and the modulation variance:
/// σ_zz² = σ² v where v = γ₁² var_h + γ₂². Avoids `sqrt`/`log` of raw
/// variances near zero, so it stays differentiable for the γ₂ = 0 ablation.
///
/// `log_sigma` is `[batch, z]`, `var_inner` is the broadcast `[batch, z]`
/// value of γ₁² var_h + γ₂² (already floored away from zero by the caller),
/// `mu_zz` the modulated mean.
pub fn kl_modulated<T: Scalar>(
    mu_zz: &Tensor<T>,
    log_sigma: &Tensor<T>,
    var_inner: &Tensor<T>,
) -> Result<Tensor<T>> {
    let two = T::from_f64_c(2.0);
    let sigma_sq = log_sigma.scale(two)?.exp()?;
    let sigma_zz_sq = sigma_sq.mul(var_inner)?;
    let log_sigma_zz_sq = log_sigma.scale(two)?.add(&var_inner.log()?)?;
    let term = mu_zz
        .square()?
        .add(&sigma_zz_sq)?
        .sub(&log_sigma_zz_sq)?
        .add_scalar(-T::one())?;
    term.row_sum()?.mean()?.scale(T::from_f64_c(0.5))
}

const BCE_EPS: f64 = 1e-7;

/// Mean per-pixel binary cross-entropy (Bernoulli likelihood).
///
/// `x_hat` must lie in (0, 1); predictions saturated beyond [0, 1] are a
/// domain error. Saturation within [0, 1] is clamped to keep the log finite.
pub fn reconstruction_loss<T: Scalar>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x_hat.shape() != x.shape() {
        return Err(CdlmError::ShapeMismatch {
            op: "reconstruction_loss",
            lhs: x_hat.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    if x_hat.value().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(CdlmError::Domain {
            op: "reconstruction_loss",
            detail: "x_hat outside (0, 1)".into(),
        });
    }
    let eps = T::from_f64_c(BCE_EPS);
    let p = x_hat.clamp(eps, T::one() - eps)?;
    let pos = x.mul(&p.log()?)?;
    let neg = x
        .neg()?
        .add_scalar(T::one())?
        .mul(&p.neg()?.add_scalar(T::one())?.log()?)?;
    pos.add(&neg)?.mean()?.neg()
}

/// Mean squared error between two same-shaped tensors.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(CdlmError::ShapeMismatch {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    a.sub(b)?.square()?.mean()
}

/// −E[log Ξ(h_s)] − E[log(1 − Ξ(h_t))].
///
/// Minimized by the discriminator; the encoder receives reversed gradients
/// because the inputs pass through `grad_reverse` inside `discriminate`.
pub fn adversarial_loss<T: Scalar>(p_s: &Tensor<T>, p_t: &Tensor<T>) -> Result<Tensor<T>> {
    for p in [p_s, p_t] {
        if p.value().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(CdlmError::Domain {
                op: "adversarial_loss",
                detail: "probabilities outside (0, 1)".into(),
            });
        }
    }
    let eps = T::from_f64_c(BCE_EPS);
    let ls = p_s.clamp(eps, T::one() - eps)?.log()?.mean()?;
    let lt = p_t
        .neg()?
        .add_scalar(T::one())?
        .clamp(eps, T::one() - eps)?
        .log()?
        .mean()?;
    ls.add(&lt)?.neg()
}

/// (ℒ_c^s, ℒ_c^t): MSE between each reconstruction-from-z̈ and the matching
/// generation-from-h. The β weights are applied at aggregation.
pub fn consistency_loss<T: Scalar>(
    xhat_st: &Tensor<T>,
    xtilde_s: &Tensor<T>,
    xhat_ts: &Tensor<T>,
    xtilde_t: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((mse(xhat_st, xtilde_s)?, mse(xhat_ts, xtilde_t)?))
}

/// Scalar update-rule aggregation:
/// total_φ = ℒ_adv + λ₁(ℒ_KL,st + ℒ_KL,ts) + λ₂ ℒ_Rec,
/// total_θ = ℒ_Rec + β₁ ℒ_c^s + β₂ ℒ_c^t.
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    rec: f64,
    kl_st: f64,
    kl_ts: f64,
    adv: f64,
    cons_s: f64,
    cons_t: f64,
    lambda1: f64,
    lambda2: f64,
    beta1: f64,
    beta2: f64,
) -> (f64, f64) {
    let total_phi = adv + lambda1 * (kl_st + kl_ts) + lambda2 * rec;
    let total_theta = rec + beta1 * cons_s + beta2 * cons_t;
    (total_phi, total_theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    type G = Graph<f64>;

    #[test]
    fn kl_of_prior_is_zero() {
        let g = G::new();
        let mu = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let sigma = g.constant(&[2, 3], vec![1.0; 6]).unwrap();
        let kl = kl_standard_normal(&mu, &sigma).unwrap();
        assert!(kl.scalar_value().abs() < 1e-12);
    }

    #[test]
    fn kl_hand_case() {
        let g = G::new();
        let mu = g.constant(&[1, 1], vec![1.0]).unwrap();
        let sigma = g.constant(&[1, 1], vec![1.0]).unwrap();
        let kl = kl_standard_normal(&mu, &sigma).unwrap();
        assert!((kl.scalar_value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_positive_sigma() {
        let g = G::new();
        let mu = g.constant(&[1, 1], vec![0.0]).unwrap();
        let sigma = g.constant(&[1, 1], vec![0.0]).unwrap();
        assert!(matches!(
            kl_standard_normal(&mu, &sigma),
            Err(CdlmError::Domain { .. })
        ));
    }

    #[test]
    fn kl_modulated_matches_direct_form() {
        let g = G::new();
        // sigma = e^0.3, inner = 0.7 -> sigma_zz = sigma * sqrt(0.7)
        let mu = g.constant(&[1, 2], vec![0.4, -0.9]).unwrap();
        let log_sigma = g.constant(&[1, 2], vec![0.3, -0.1]).unwrap();
        let inner = g.constant(&[1, 2], vec![0.7, 1.3]).unwrap();
        let a = kl_modulated(&mu, &log_sigma, &inner).unwrap().scalar_value();

        let sig_zz: Vec<f64> = vec![
            (0.3f64).exp() * (0.7f64).sqrt(),
            (-0.1f64).exp() * (1.3f64).sqrt(),
        ];
        let s = g.constant(&[1, 2], sig_zz).unwrap();
        let b = kl_standard_normal(&mu, &s).unwrap().scalar_value();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let g = G::new();
        let x = g.constant(&[1, 4], vec![0.5; 4]).unwrap();
        let loss = reconstruction_loss(&x, &x).unwrap();
        assert!((loss.scalar_value() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_limit_toward_zero() {
        let g = G::new();
        let x = g.constant(&[1, 2], vec![0.0, 1.0]).unwrap();
        let xh = g.constant(&[1, 2], vec![1e-6, 1.0 - 1e-6]).unwrap();
        let loss = reconstruction_loss(&xh, &x).unwrap();
        assert!(loss.scalar_value() < 1e-5);
    }

    #[test]
    fn bce_rejects_out_of_range_prediction() {
        let g = G::new();
        let x = g.constant(&[1, 1], vec![0.5]).unwrap();
        let xh = g.constant(&[1, 1], vec![1.5]).unwrap();
        assert!(matches!(
            reconstruction_loss(&xh, &x),
            Err(CdlmError::Domain { .. })
        ));
    }

    #[test]
    fn adversarial_chance_level() {
        let g = G::new();
        let p = g.constant(&[4, 1], vec![0.5; 4]).unwrap();
        let loss = adversarial_loss(&p, &p).unwrap();
        assert!((loss.scalar_value() - 2.0 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn adversarial_perfect_discrimination_near_zero() {
        let g = G::new();
        let ps = g.constant(&[2, 1], vec![1.0 - 1e-6; 2]).unwrap();
        let pt = g.constant(&[2, 1], vec![1e-6; 2]).unwrap();
        let loss = adversarial_loss(&ps, &pt).unwrap();
        assert!(loss.scalar_value() < 1e-5);
    }

    #[test]
    fn consistency_zero_on_identical_and_hand_case() {
        let g = G::new();
        let a = g.constant(&[1, 4], vec![0.5; 4]).unwrap();
        let b = g.constant(&[1, 4], vec![0.6; 4]).unwrap();
        let (cs, ct) = consistency_loss(&a, &a, &a, &b).unwrap();
        assert_eq!(cs.scalar_value(), 0.0);
        assert!((ct.scalar_value() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn aggregate_weight_zeroing() {
        let (phi, theta) = aggregate(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(phi, 4.0);
        assert_eq!(theta, 1.0);
        let (phi, theta) = aggregate(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4);
        assert_eq!((phi, theta), (0.0, 0.0));
    }

    #[test]
    fn aggregate_paper_defaults() {
        let (phi, theta) =
            aggregate(2.0, 1.0, 1.5, 0.5, 3.0, 4.0, 0.0001, 0.0001, 0.1, 0.01);
        assert!((phi - (0.5 + 0.0001 * 2.5 + 0.0001 * 2.0)).abs() < 1e-12);
        assert!((theta - (2.0 + 0.1 * 3.0 + 0.01 * 4.0)).abs() < 1e-12);
    }
}
