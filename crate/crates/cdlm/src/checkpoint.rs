//! Versioned binary checkpoint: architecture, hyperparameters, named
//! parameter tensors, optimizer slots, and the exact RNG position, so a
//! resumed run continues bit-for-bit where the saved one stopped.
//!
//! Layout (little-endian): magic `CDLM`, format version, architecture block,
//! training-config block, step counter, parameter tensors (values stored as
//! f64 for lossless f32 round-trips), SGD velocity, Adam first/second moments
//! and step count, then the 32-byte RNG seed plus its 128-bit word position.

use std::fs;
use std::io::{Cursor, Read as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdlmError, Result};
use crate::model::{CdlmModel, ConvSpec, NetConfig, Param, ParamSet, Role};
use crate::num::Scalar;
use crate::optim::{Adam, SgdMomentum};
use crate::trainer::{ReconLoss, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDLM";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).unwrap();
    }

    fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LittleEndian>(v).unwrap();
    }

    fn u128(&mut self, v: u128) {
        self.buf.write_u128::<LittleEndian>(v).unwrap();
    }

    fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LittleEndian>(v).unwrap();
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f64_slice<T: Scalar>(&mut self, data: &[T]) {
        self.u64(data.len() as u64);
        for &v in data {
            self.f64(v.to_f64_c());
        }
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &str) -> Self {
        Reader {
            cur: Cursor::new(bytes),
            path: path.to_string(),
        }
    }

    fn err(&self, detail: impl Into<String>) -> CdlmError {
        CdlmError::Format {
            path: self.path.clone(),
            offset: self.cur.position(),
            detail: detail.into(),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.err("truncated (u8)"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur
            .read_u32::<LittleEndian>()
            .map_err(|_| self.err("truncated (u32)"))
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur
            .read_u64::<LittleEndian>()
            .map_err(|_| self.err("truncated (u64)"))
    }

    fn u128(&mut self) -> Result<u128> {
        self.cur
            .read_u128::<LittleEndian>()
            .map_err(|_| self.err("truncated (u128)"))
    }

    fn f64(&mut self) -> Result<f64> {
        self.cur
            .read_f64::<LittleEndian>()
            .map_err(|_| self.err("truncated (f64)"))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(self.err(format!("implausible string length {len}")));
        }
        let mut bytes = vec![0u8; len];
        self.cur
            .read_exact(&mut bytes)
            .map_err(|_| self.err("truncated (string)"))?;
        String::from_utf8(bytes).map_err(|_| self.err("non-UTF-8 string"))
    }

    fn f64_vec<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let len = self.u64()? as usize;
        if len > 1 << 32 {
            return Err(self.err(format!("implausible tensor length {len}")));
        }
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(T::from_f64_c(self.f64()?));
        }
        Ok(out)
    }
}

fn write_net_config(w: &mut Writer, cfg: &NetConfig) {
    w.u32(cfg.in_channels as u32);
    w.u32(cfg.height as u32);
    w.u32(cfg.width as u32);
    w.u32(cfg.conv.len() as u32);
    for l in &cfg.conv {
        w.u32(l.out_channels as u32);
        w.u32(l.kernel as u32);
        w.u32(l.stride as u32);
        w.u32(l.pad as u32);
    }
    w.u32(cfg.z_dim as u32);
    w.u32(cfg.disc_hidden as u32);
    w.f64(cfg.leaky_slope);
    w.u32(cfg.h_tap as u32);
}

fn read_net_config(r: &mut Reader<'_>) -> Result<NetConfig> {
    let in_channels = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n_conv = r.u32()? as usize;
    if n_conv == 0 || n_conv > 32 {
        return Err(r.err(format!("implausible conv layer count {n_conv}")));
    }
    let mut conv = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv.push(ConvSpec {
            out_channels: r.u32()? as usize,
            kernel: r.u32()? as usize,
            stride: r.u32()? as usize,
            pad: r.u32()? as usize,
        });
    }
    Ok(NetConfig {
        in_channels,
        height,
        width,
        conv,
        z_dim: r.u32()? as usize,
        disc_hidden: r.u32()? as usize,
        leaky_slope: r.f64()?,
        h_tap: r.u32()? as usize,
    })
}

fn write_train_config(w: &mut Writer, cfg: &TrainConfig) {
    for v in [
        cfg.gamma1, cfg.gamma2, cfg.lambda1, cfg.lambda2, cfg.beta1, cfg.beta2, cfg.eta1,
        cfg.eta2, cfg.momentum, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps, cfg.grl_scale,
        cfg.adv_weight,
    ] {
        w.f64(v);
    }
    w.u64(cfg.batch_size as u64);
    w.u64(cfg.steps);
    w.u64(cfg.seed);
    w.u64(cfg.eval_every);
    w.u8(match cfg.recon {
        ReconLoss::Bce => 0,
        ReconLoss::Mse => 1,
    });
}

fn read_train_config(r: &mut Reader<'_>) -> Result<TrainConfig> {
    let mut f = [0f64; 14];
    for slot in &mut f {
        *slot = r.f64()?;
    }
    let batch_size = r.u64()? as usize;
    let steps = r.u64()?;
    let seed = r.u64()?;
    let eval_every = r.u64()?;
    let recon = match r.u8()? {
        0 => ReconLoss::Bce,
        1 => ReconLoss::Mse,
        other => return Err(r.err(format!("unknown recon code {other}"))),
    };
    Ok(TrainConfig {
        gamma1: f[0],
        gamma2: f[1],
        lambda1: f[2],
        lambda2: f[3],
        beta1: f[4],
        beta2: f[5],
        eta1: f[6],
        eta2: f[7],
        momentum: f[8],
        adam_b1: f[9],
        adam_b2: f[10],
        adam_eps: f[11],
        grl_scale: f[12],
        adv_weight: f[13],
        batch_size,
        steps,
        seed,
        eval_every,
        recon,
    })
}

fn write_slot_map<T: Scalar>(
    w: &mut Writer,
    map: &std::collections::BTreeMap<String, Vec<T>>,
) {
    w.u32(map.len() as u32);
    for (name, data) in map {
        w.str(name);
        w.f64_slice(data);
    }
}

fn read_slot_map<T: Scalar>(
    r: &mut Reader<'_>,
) -> Result<std::collections::BTreeMap<String, Vec<T>>> {
    let n = r.u32()? as usize;
    if n > 4096 {
        return Err(r.err(format!("implausible slot count {n}")));
    }
    let mut map = std::collections::BTreeMap::new();
    for _ in 0..n {
        let name = r.str()?;
        let data = r.f64_vec()?;
        map.insert(name, data);
    }
    Ok(map)
}

/// Serialize the whole training state to `path`.
pub fn save_checkpoint<T: Scalar>(path: &Path, state: &TrainState<T>) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    write_net_config(&mut w, &state.model.cfg);
    write_train_config(&mut w, &state.config);
    w.u64(state.step);

    w.u32(state.model.params.len() as u32);
    for p in state.model.params.iter() {
        w.str(&p.name);
        w.u8(p.role.code());
        w.u8(p.shape.len() as u8);
        for &d in &p.shape {
            w.u32(d as u32);
        }
        w.f64_slice(&p.data);
    }

    write_slot_map(&mut w, &state.sgd.velocity);
    write_slot_map(&mut w, &state.adam.m);
    write_slot_map(&mut w, &state.adam.v);
    w.u64(state.adam.t);

    w.buf.extend_from_slice(&state.rng.get_seed());
    w.u128(state.rng.get_word_pos());

    fs::write(path, &w.buf).map_err(|e| CdlmError::io(path.display().to_string(), e))
}

/// Restore a training state; the loaded model is marked trained.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| CdlmError::io(&pstr, e))?;
    let mut r = Reader::new(&bytes, &pstr);

    let mut magic = [0u8; 4];
    r.cur
        .read_exact(&mut magic)
        .map_err(|_| CdlmError::Format {
            path: pstr.clone(),
            offset: 0,
            detail: "truncated magic".into(),
        })?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CdlmError::Format {
            path: pstr,
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }

    let net = read_net_config(&mut r)?;
    net.validate()?;
    let config = read_train_config(&mut r)?;
    let step = r.u64()?;

    let n_params = r.u32()? as usize;
    if n_params > 4096 {
        return Err(r.err(format!("implausible parameter count {n_params}")));
    }
    let mut params = ParamSet::default();
    for _ in 0..n_params {
        let name = r.str()?;
        let role =
            Role::from_code(r.u8()?).ok_or_else(|| r.err(format!("bad role for {name}")))?;
        let ndim = r.u8()? as usize;
        if ndim > 8 {
            return Err(r.err(format!("implausible rank {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let data: Vec<T> = r.f64_vec()?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(r.err(format!(
                "tensor {name}: shape {shape:?} does not match {} stored values",
                data.len()
            )));
        }
        params.push_restored(Param {
            name,
            role,
            shape,
            data,
        });
    }

    let mut sgd = SgdMomentum::new(T::from_f64_c(config.momentum));
    sgd.velocity = read_slot_map(&mut r)?;
    let mut adam = Adam::new(
        T::from_f64_c(config.adam_b1),
        T::from_f64_c(config.adam_b2),
        T::from_f64_c(config.adam_eps),
    );
    adam.m = read_slot_map(&mut r)?;
    adam.v = read_slot_map(&mut r)?;
    adam.t = r.u64()?;

    let mut seed = [0u8; 32];
    r.cur
        .read_exact(&mut seed)
        .map_err(|_| r.err("truncated RNG seed"))?;
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        step,
        config,
        model: CdlmModel {
            cfg: net,
            params,
            trained: true,
        },
        sgd,
        adam,
        rng,
    })
}
