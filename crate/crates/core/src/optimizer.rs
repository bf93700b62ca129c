//! AdamW with decoupled weight decay, linear-warmup + cosine learning rate
//! and a cosine weight-decay ramp.

use std::f64::consts::PI;

use crate::encoder::{Encoder, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::record::ByteReader;
use crate::numerics::{Real, Tensor};

/// The cosine phase decays to this fraction of the base rate.
pub const LR_FINAL_FRACTION: f64 = 1e-6;

/// Batch size times clip length at which the base rate equals the scale
/// constant.
pub const LR_REFERENCE_BATCH: f64 = 1024.0;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    pub lr_scale_constant: f64,
    pub batch_size: usize,
    pub clip_len: usize,
    pub steps_per_epoch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_epochs: 5,
            total_epochs: 25,
            wd_start: 0.04,
            wd_end: 0.4,
            lr_scale_constant: 0.003,
            batch_size: 16,
            clip_len: 4,
            steps_per_epoch: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        for (name, v) in [
            ("eps", self.eps),
            ("wd_start", self.wd_start),
            ("wd_end", self.wd_end),
            ("lr_scale_constant", self.lr_scale_constant),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.clip_len == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size, clip_len and steps_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Linear scaling rule: `constant · batch · L / 1024`.
pub fn base_lr(cfg: &OptimizerConfig) -> f64 {
    cfg.lr_scale_constant * (cfg.batch_size * cfg.clip_len) as f64 / LR_REFERENCE_BATCH
}

pub fn final_lr(cfg: &OptimizerConfig) -> f64 {
    LR_FINAL_FRACTION * base_lr(cfg)
}

/// Half-cosine from `start` (p = 0) to `end` (p = 1), with exact endpoints.
fn cosine_interp(start: f64, end: f64, p: f64) -> f64 {
    if p <= 0.0 {
        start
    } else if p >= 1.0 {
        end
    } else {
        end + 0.5 * (start - end) * (1.0 + (PI * p).cos())
    }
}

pub fn lr_at(step: usize, cfg: &OptimizerConfig) -> f64 {
    let base = base_lr(cfg);
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = cfg.total_steps().saturating_sub(warmup).max(1);
    cosine_interp(base, final_lr(cfg), (step - warmup) as f64 / span as f64)
}

pub fn wd_at(step: usize, cfg: &OptimizerConfig) -> f64 {
    let total = cfg.total_steps().max(1);
    cosine_interp(cfg.wd_start, cfg.wd_end, step as f64 / total as f64)
}

/// Whether each parameter of `encoder` takes weight decay.
pub fn decay_mask(encoder: &Encoder) -> Vec<bool> {
    (0..encoder.param_shapes().len())
        .map(|i| !encoder.is_decay_exempt(i))
        .collect()
}

/// First and second moments, named after the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Real> OptState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        for (name, t) in params.iter() {
            m.push(name, Tensor::zeros(t.shape()));
        }
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn write(&self, prefix: &str, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.step.to_le_bytes());
        self.m.write(&format!("{prefix}m/"), out);
        self.v.write(&format!("{prefix}v/"), out);
    }

    pub fn read(prefix: &str, r: &mut ByteReader<'_>) -> Result<Self> {
        let step = r.u64()?;
        let m = ParamStore::read(&format!("{prefix}m/"), r)?;
        let v = ParamStore::read(&format!("{prefix}v/"), r)?;
        m.check_layout(&v)?;
        Ok(Self { m, v, step })
    }
}

/// One AdamW update: `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`, with `wd`
/// applied only where `decay[i]` is set.
///
/// Returns `Ok(false)` and leaves everything untouched when any gradient is
/// non-finite.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut OptState<T>,
    lr: f64,
    wd: f64,
    cfg: &OptimizerConfig,
) -> Result<bool> {
    if grads.len() != params.len() || decay.len() != params.len() {
        return Err(Error::invalid(format!(
            "adamw_step: {} parameters, {} gradients, {} decay flags",
            params.len(),
            grads.len(),
            decay.len()
        )));
    }
    params.check_layout(&state.m)?;
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            log::warn!(
                "skipping optimizer step {}: non-finite gradient for {}",
                state.step + 1,
                params.name(i)
            );
            return Ok(false);
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let f = T::from_f64_lossy;
    let (b1t, b2t, eps, lr_t) = (f(b1), f(b2), f(cfg.eps), f(lr));
    let (c1t, c2t) = (f(c1), f(c2));
    let one = T::one();

    for (i, g) in grads.iter().enumerate() {
        let wd_i = if decay[i] { f(wd) } else { T::zero() };
        let m = state.m.tensors_mut()[i].data_mut();
        let v = state.v.tensors_mut()[i].data_mut();
        let p = params.tensors_mut()[i].data_mut();
        for (((pj, mj), vj), &gj) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
            *mj = b1t * *mj + (one - b1t) * gj;
            *vj = b2t * *vj + (one - b2t) * gj * gj;
            let m_hat = *mj / c1t;
            let v_hat = *vj / c2t;
            *pj = *pj - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd_i * *pj);
        }
    }
    Ok(true)
}
