//! The CDLM network: unified inference model producing variational moments
//! and a sigmoid-bounded deep representation, the cross-domain modulated
//! reparameterization, the shared decoder, and the domain discriminator
//! behind gradient reversal.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdlmError, Result};
use crate::num::Scalar;
use crate::tensor::{conv_out_extent, numel, Graph, Tensor};

/// Which side of the domain pair an artifact came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Parameter partition: each optimizer step touches exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
    Discriminator,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Encoder => 0,
            Role::Decoder => 1,
            Role::Discriminator => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Role> {
        match c {
            0 => Some(Role::Encoder),
            1 => Some(Role::Decoder),
            2 => Some(Role::Discriminator),
            _ => None,
        }
    }
}

/// One conv layer of the encoder stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Desk-scale architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv: Vec<ConvSpec>,
    pub z_dim: usize,
    pub disc_hidden: usize,
    pub leaky_slope: f64,
    /// 1-based index of the conv layer whose flattened activations feed the
    /// deep-representation head. Defaults to the last layer; smaller values
    /// expose the encoder-depth ablation.
    pub h_tap: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            height: 16,
            width: 16,
            conv: vec![
                ConvSpec { out_channels: 16, kernel: 3, stride: 2, pad: 1 },
                ConvSpec { out_channels: 32, kernel: 3, stride: 2, pad: 1 },
                ConvSpec { out_channels: 64, kernel: 3, stride: 2, pad: 1 },
            ],
            z_dim: 64,
            disc_hidden: 256,
            leaky_slope: 0.2,
            h_tap: 3,
        }
    }
}

impl NetConfig {
    /// Tiny configuration for 64-bit gradient-verification graphs.
    pub fn tiny() -> Self {
        NetConfig {
            in_channels: 2,
            height: 8,
            width: 8,
            conv: vec![
                ConvSpec { out_channels: 3, kernel: 3, stride: 2, pad: 1 },
                ConvSpec { out_channels: 4, kernel: 3, stride: 2, pad: 1 },
            ],
            z_dim: 4,
            disc_hidden: 8,
            leaky_slope: 0.2,
            h_tap: 2,
        }
    }

    /// Per-layer (channels, height, width) after each encoder conv.
    pub fn feature_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut h = self.height;
        let mut w = self.width;
        let mut out = Vec::new();
        for (i, l) in self.conv.iter().enumerate() {
            let oh = conv_out_extent(h, l.kernel, l.stride, l.pad);
            let ow = conv_out_extent(w, l.kernel, l.stride, l.pad);
            match (oh, ow) {
                (Some(a), Some(b)) if a >= 1 && b >= 1 => {
                    h = a;
                    w = b;
                }
                _ => {
                    return Err(CdlmError::Config(format!(
                        "encoder layer {i} collapses spatial extent ({h}x{w} with kernel {})",
                        l.kernel
                    )))
                }
            }
            out.push((l.out_channels, h, w));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dim < 2 {
            return Err(CdlmError::Config(format!("z_dim must be >= 2, got {}", self.z_dim)));
        }
        if self.conv.is_empty() {
            return Err(CdlmError::Config("encoder needs at least one conv layer".into()));
        }
        if self.h_tap == 0 || self.h_tap > self.conv.len() {
            return Err(CdlmError::Config(format!(
                "h_tap {} out of range 1..={}",
                self.h_tap,
                self.conv.len()
            )));
        }
        // decoder mirror only doubles, so every encoder stride must be 2
        for l in &self.conv {
            if l.stride != 2 {
                return Err(CdlmError::Config(
                    "decoder mirror requires stride-2 encoder layers".into(),
                ));
            }
        }
        let shapes = self.feature_shapes()?;
        let (_, fh, fw) = shapes[shapes.len() - 1];
        let layers = self.conv.len() as u32;
        if fh << layers != self.height || fw << layers != self.width {
            return Err(CdlmError::Config(format!(
                "decoder mirror cannot reproduce {}x{} from {}x{} bottleneck",
                self.height, self.width, fh, fw
            )));
        }
        Ok(())
    }

    /// Flattened width of the encoder bottleneck h'.
    pub fn flat_dim(&self) -> Result<usize> {
        let shapes = self.feature_shapes()?;
        let (c, h, w) = shapes[shapes.len() - 1];
        Ok(c * h * w)
    }

    /// Flattened width of the h-head input (depends on the tap depth).
    pub fn tap_dim(&self) -> Result<usize> {
        let shapes = self.feature_shapes()?;
        let (c, h, w) = shapes[self.h_tap - 1];
        Ok(c * h * w)
    }
}

/// One named leaf parameter.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named leaf tensors partitioned into encoder / decoder / discriminator.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { params: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Re-insert a parameter restored from a checkpoint.
    pub(crate) fn push_restored(&mut self, p: Param<T>) {
        debug_assert!(self.get(&p.name).is_none(), "duplicate param {}", p.name);
        self.params.push(p);
    }

    fn push(&mut self, name: &str, role: Role, shape: Vec<usize>, data: Vec<T>) {
        debug_assert_eq!(numel(&shape), data.len());
        debug_assert!(self.get(name).is_none(), "duplicate param {name}");
        self.params.push(Param {
            name: name.to_string(),
            role,
            shape,
            data,
        });
    }
}

fn fan_in_uniform<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64_c(rng.gen_range(-bound..bound)))
        .collect()
}

/// Variational moments Ω = (μ, log σ) for one batch.
pub struct DomainInfo<T: Scalar> {
    pub mu: Tensor<T>,
    pub log_sigma: Tensor<T>,
}

impl<T: Scalar> DomainInfo<T> {
    pub fn sigma(&self) -> Result<Tensor<T>> {
        self.log_sigma.exp()
    }
}

/// Sigmoid-bounded deep representation h, every element in (0, 1).
pub struct DeepRep<T: Scalar> {
    pub h: Tensor<T>,
}

/// A sample from the transfer latent space, tagged with its provenance.
pub struct TransferLatent<T: Scalar> {
    pub z: Tensor<T>,
    pub info_domain: Domain,
    pub rep_domain: Domain,
}

/// z = μ + σ ⊙ (γ₁ h_other + γ₂ ε), differentiable into both encoder paths.
///
/// Cross-modulated samples require `info_domain != rep_domain`; same-domain
/// pairs are only allowed in diagnostic mode.
#[allow(clippy::too_many_arguments)]
pub fn modulate<T: Scalar>(
    info: &DomainInfo<T>,
    info_domain: Domain,
    rep_other: &DeepRep<T>,
    rep_domain: Domain,
    eps: &Tensor<T>,
    gamma1: T,
    gamma2: T,
    diagnostic: bool,
) -> Result<TransferLatent<T>> {
    if info_domain == rep_domain && !diagnostic {
        return Err(CdlmError::Usage(
            "cross-modulation requires info and representation from different domains".into(),
        ));
    }
    if info.mu.shape() != rep_other.h.shape() || info.mu.shape() != eps.shape() {
        return Err(CdlmError::ShapeMismatch {
            op: "modulate",
            lhs: info.mu.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let noise = rep_other
        .h
        .scale(gamma1)?
        .add(&eps.scale(gamma2)?)?;
    let z = info.mu.add(&info.sigma()?.mul(&noise)?)?;
    Ok(TransferLatent {
        z,
        info_domain,
        rep_domain,
    })
}

/// γ₁·h + γ₂·ε — the generation/test-mode latent.
pub fn rep_to_latent<T: Scalar>(
    rep: &DeepRep<T>,
    eps: &Tensor<T>,
    gamma1: T,
    gamma2: T,
) -> Result<Tensor<T>> {
    if rep.h.shape() != eps.shape() {
        return Err(CdlmError::ShapeMismatch {
            op: "rep_to_latent",
            lhs: rep.h.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    rep.h.scale(gamma1)?.add(&eps.scale(gamma2)?)
}

/// Closed-form moments of the modulated latent: per coordinate
/// μ_zz = μ + γ₁ σ μ_h and σ_zz = σ √(γ₁² σ_h² + γ₂²).
///
/// `mu`/`sigma` are `[batch * z]`, `mu_h`/`sigma_h` are `[z]` (broadcast over
/// the batch). Pure function; no sampling.
pub fn closed_form_moments<T: Scalar>(
    mu: &[T],
    sigma: &[T],
    mu_h: &[T],
    sigma_h: &[T],
    gamma1: T,
    gamma2: T,
) -> (Vec<T>, Vec<T>) {
    let z = mu_h.len();
    debug_assert_eq!(mu.len(), sigma.len());
    debug_assert_eq!(mu.len() % z, 0);
    let mut mu_zz = Vec::with_capacity(mu.len());
    let mut sigma_zz = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let j = i % z;
        mu_zz.push(mu[i] + gamma1 * sigma[i] * mu_h[j]);
        let inner = gamma1 * gamma1 * sigma_h[j] * sigma_h[j] + gamma2 * gamma2;
        sigma_zz.push(sigma[i] * inner.sqrt());
    }
    (mu_zz, sigma_zz)
}

/// The CDLM network. A single shared encoder parameter set serves both
/// domains; the decoder is shared between reconstruction and generation.
#[derive(Clone, Debug)]
pub struct CdlmModel<T: Scalar> {
    pub cfg: NetConfig,
    pub params: ParamSet<T>,
    /// Set once training has touched the parameters (or a checkpoint loaded).
    pub trained: bool,
}

impl<T: Scalar> CdlmModel<T> {
    pub fn new(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.feature_shapes()?;
        let mut params = ParamSet::default();

        let mut in_c = cfg.in_channels;
        for (i, l) in cfg.conv.iter().enumerate() {
            let wshape = vec![l.out_channels, in_c, l.kernel, l.kernel];
            let fan = in_c * l.kernel * l.kernel;
            params.push(
                &format!("enc.conv{i}.w"),
                Role::Encoder,
                wshape.clone(),
                fan_in_uniform(rng, numel(&wshape), fan),
            );
            params.push(
                &format!("enc.conv{i}.b"),
                Role::Encoder,
                vec![1, l.out_channels, 1, 1],
                vec![T::zero(); l.out_channels],
            );
            in_c = l.out_channels;
        }

        let flat = cfg.flat_dim()?;
        let tap = cfg.tap_dim()?;
        // The h head feeds a sigmoid; a large init gain keeps its
        // outputs spread across (0, 1) instead of pinned near 0.5, so the
        // deep representation carries signal from the first step.
        for (head, in_dim, gain) in [("mu", flat, 1.0), ("logsig", flat, 1.0), ("h", tap, 32.0)] {
            let gain = T::from_f64_c(gain);
            params.push(
                &format!("enc.{head}.w"),
                Role::Encoder,
                vec![in_dim, cfg.z_dim],
                fan_in_uniform::<T>(rng, in_dim * cfg.z_dim, in_dim)
                    .into_iter()
                    .map(|v| v * gain)
                    .collect::<Vec<T>>(),
            );
            params.push(
                &format!("enc.{head}.b"),
                Role::Encoder,
                vec![1, cfg.z_dim],
                vec![T::zero(); cfg.z_dim],
            );
        }

        params.push(
            "dec.fc.w",
            Role::Decoder,
            vec![cfg.z_dim, flat],
            fan_in_uniform(rng, cfg.z_dim * flat, cfg.z_dim),
        );
        params.push("dec.fc.b", Role::Decoder, vec![1, flat], vec![T::zero(); flat]);

        // transposed-conv mirror: kernel 4, stride 2, pad 1 doubles each time
        let mut dec_in = shapes[shapes.len() - 1].0;
        for i in (0..cfg.conv.len()).rev() {
            let out_c = if i == 0 {
                cfg.in_channels
            } else {
                shapes[i - 1].0
            };
            let idx = cfg.conv.len() - 1 - i;
            let wshape = vec![dec_in, out_c, 4, 4];
            params.push(
                &format!("dec.convt{idx}.w"),
                Role::Decoder,
                wshape.clone(),
                fan_in_uniform(rng, numel(&wshape), dec_in * 16),
            );
            params.push(
                &format!("dec.convt{idx}.b"),
                Role::Decoder,
                vec![1, out_c, 1, 1],
                vec![T::zero(); out_c],
            );
            dec_in = out_c;
        }

        params.push(
            "disc.fc1.w",
            Role::Discriminator,
            vec![cfg.z_dim, cfg.disc_hidden],
            fan_in_uniform(rng, cfg.z_dim * cfg.disc_hidden, cfg.z_dim),
        );
        params.push(
            "disc.fc1.b",
            Role::Discriminator,
            vec![1, cfg.disc_hidden],
            vec![T::zero(); cfg.disc_hidden],
        );
        params.push(
            "disc.fc2.w",
            Role::Discriminator,
            vec![cfg.disc_hidden, 1],
            fan_in_uniform(rng, cfg.disc_hidden, cfg.disc_hidden),
        );
        params.push(
            "disc.fc2.b",
            Role::Discriminator,
            vec![1, 1],
            vec![T::zero(); 1],
        );

        Ok(CdlmModel {
            cfg,
            params,
            trained: false,
        })
    }

    /// Materialize every parameter as a leaf on `graph`.
    pub fn bind(&self, graph: &Graph<T>) -> Result<BoundModel<T>> {
        let mut tensors = BTreeMap::new();
        for p in self.params.iter() {
            tensors.insert(p.name.clone(), graph.leaf(&p.shape, p.data.clone())?);
        }
        Ok(BoundModel {
            cfg: self.cfg.clone(),
            graph: graph.clone(),
            tensors,
        })
    }

    /// Test-mode protocol: x̃_ts = decode(γ₁·h(x_t) + γ₂·ε). No source data
    /// is consulted; only the target image and the trained parameters.
    pub fn test_mode_adapt(
        &self,
        x_t: &[T],
        batch: usize,
        eps: &[T],
        gamma1: T,
        gamma2: T,
    ) -> Result<Vec<T>> {
        if !self.trained {
            return Err(CdlmError::State(
                "test_mode_adapt requires trained parameters".into(),
            ));
        }
        let graph = Graph::new();
        let bound = self.bind(&graph)?;
        let x = graph.constant(
            &[batch, self.cfg.in_channels, self.cfg.height, self.cfg.width],
            x_t.to_vec(),
        )?;
        let (_, rep) = bound.encode(&x)?;
        let eps = graph.constant(&[batch, self.cfg.z_dim], eps.to_vec())?;
        let z = rep_to_latent(&rep, &eps, gamma1, gamma2)?;
        let out = bound.decode(&z)?;
        Ok(out.value())
    }
}

/// A model whose parameters live as leaves on one graph.
pub struct BoundModel<T: Scalar> {
    cfg: NetConfig,
    graph: Graph<T>,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> BoundModel<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn param_tensors(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    fn linear(&self, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        let y = x.matmul(w)?;
        let bb = b.broadcast_to(y.shape())?;
        y.add(&bb)
    }

    /// Unified inference model: x -> (Ω, h). The same parameters serve both
    /// domains; callers invoke this once per domain batch.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(DomainInfo<T>, DeepRep<T>)> {
        let shape = x.shape();
        let expect = [self.cfg.in_channels, self.cfg.height, self.cfg.width];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(CdlmError::Config(format!(
                "encode expects [N, {}, {}, {}], got {:?}",
                expect[0], expect[1], expect[2], shape
            )));
        }
        {
            let v = x.value();
            if v.iter().any(|&p| p < T::zero() || p > T::one()) {
                return Err(CdlmError::Config("encode expects pixels in [0, 1]".into()));
            }
        }
        let batch = shape[0];
        let slope = T::from_f64_c(self.cfg.leaky_slope);
        let mut a = x.clone();
        let mut tap_flat = None;
        for (i, l) in self.cfg.conv.iter().enumerate() {
            let w = self.param(&format!("enc.conv{i}.w"));
            let b = self.param(&format!("enc.conv{i}.b"));
            let y = a.conv2d(w, l.stride, l.pad)?;
            let y = y.add(&b.broadcast_to(y.shape())?)?;
            a = y.leaky_relu(slope)?;
            if i + 1 == self.cfg.h_tap {
                tap_flat = Some(a.reshape(&[batch, a.numel() / batch])?);
            }
        }
        let flat = a.reshape(&[batch, a.numel() / batch])?;
        let tap = tap_flat.expect("h_tap validated");

        let mu = self.linear(&flat, "enc.mu")?;
        // Soft-bound log sigma to (-0.405, 0.405): identity near zero,
        // saturating smoothly. Keeps exp(log sigma) finite under large
        // adversarial updates, and caps sigma at 1.5 so the modulated-moment
        // KL cannot be satisfied by inflating sigma while the deep
        // representation's batch variance collapses to zero — the cap sits
        // low enough that even mid-strength modulation (gamma1 = gamma2 =
        // 0.5) leaves a variance deficit the KL must close through h.
        let bound = T::from_f64_c(0.405);
        let log_sigma = self
            .linear(&flat, "enc.logsig")?
            .scale(T::one() / bound)?
            .tanh()?
            .scale(bound)?;
        let h = self.linear(&tap, "enc.h")?.sigmoid()?;
        Ok((DomainInfo { mu, log_sigma }, DeepRep { h }))
    }

    /// Shared generative model: latent `[N, z_dim]` -> image batch in (0, 1).
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.shape()[1] != self.cfg.z_dim {
            return Err(CdlmError::Config(format!(
                "decode expects [N, {}], got {:?}",
                self.cfg.z_dim,
                z.shape()
            )));
        }
        let batch = z.shape()[0];
        let slope = T::from_f64_c(self.cfg.leaky_slope);
        let shapes = self.cfg.feature_shapes().expect("validated");
        let (c, fh, fw) = shapes[shapes.len() - 1];

        let a = self.linear(z, "dec.fc")?.leaky_relu(slope)?;
        let mut a = a.reshape(&[batch, c, fh, fw])?;
        let n_layers = self.cfg.conv.len();
        for i in 0..n_layers {
            let w = self.param(&format!("dec.convt{i}.w"));
            let b = self.param(&format!("dec.convt{i}.b"));
            let y = a.conv_transpose2d(w, 2, 1)?;
            let y = y.add(&b.broadcast_to(y.shape())?)?;
            a = if i + 1 == n_layers {
                y.sigmoid()?
            } else {
                y.leaky_relu(slope)?
            };
        }
        Ok(a)
    }

    /// Domain probability of a deep representation, behind gradient reversal.
    pub fn discriminate(&self, rep: &DeepRep<T>, grl_scale: T) -> Result<Tensor<T>> {
        let slope = T::from_f64_c(self.cfg.leaky_slope);
        let x = rep.h.grad_reverse(grl_scale)?;
        // h is sigmoid-bounded and clusters near 0.5; center and rescale so
        // the discriminator's first layer starts well-conditioned.
        let x = x.add_scalar(T::from_f64_c(-0.5))?.scale(T::from_f64_c(4.0))?;
        let a = self.linear(&x, "disc.fc1")?.leaky_relu(slope)?;
        self.linear(&a, "disc.fc2")?.sigmoid()
    }
}
