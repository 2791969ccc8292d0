//! AdamW with decoupled weight decay, gradient clipping and the cosine schedule.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<S: Scalar>(store: &ParamStore<S>) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.value(id).len()).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// Little-endian blob: step, parameter count, then per parameter the
    /// length followed by `m` and `v` as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Option<&[u8]> {
            let s = bytes.get(pos..pos + n)?;
            pos += n;
            Some(s)
        };
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
        let step = u64_at(take(8)?);
        let count = u64_at(take(8)?) as usize;
        let mut m = Vec::with_capacity(count.min(1 << 16));
        let mut v = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u64_at(take(8)?) as usize;
            let raw = take(len.checked_mul(16)?)?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            m.push(vals[..len].to_vec());
            v.push(vals[len..].to_vec());
        }
        if pos != bytes.len() {
            return None;
        }
        Some(Self { step, m, v })
    }
}

/// One AdamW update of every trainable parameter in `store` using its
/// accumulated gradient. Decay is applied as `p -= lr·λ·p` before the
/// bias-corrected Adam step.
pub fn adamw_step<S: Scalar>(store: &mut ParamStore<S>, state: &mut OptimizerState, cfg: &AdamWConfig, lr: f64) {
    if state.m.len() != store.len() {
        *state = OptimizerState {
            step: state.step,
            ..OptimizerState::new(store)
        };
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let grad: Vec<f64> = store.grad(id).iter().map(|g| g.as_f64()).collect();
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let value = store.value_mut(id).data_mut();
        for i in 0..value.len() {
            let mut p = value[i].as_f64();
            p -= lr * cfg.weight_decay * p;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p -= lr * mhat / (vhat.sqrt() + cfg.eps);
            value[i] = S::from_f64(p);
        }
    }
}

/// Rescales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.ids().filter(|id| store.is_trainable(*id)).collect();
    let norm = ids
        .iter()
        .flat_map(|id| store.grad(*id).iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = S::from_f64(max_norm / (norm + 1e-12));
        for id in ids {
            store.grad_mut(id).iter_mut().for_each(|g| *g = *g * scale);
        }
    }
    norm
}

/// `lr0 · (1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}
