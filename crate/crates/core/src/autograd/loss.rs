//! Loss kernels: softmax cross-entropy, softmax focal loss and smooth-L1.

use super::Scalar;

fn log_softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = row.iter().map(|v| (*v - max).exp()).sum::<S>().ln() + max;
    for (o, v) in out.iter_mut().zip(row) {
        *o = *v - lse;
    }
}

/// Mean softmax cross-entropy over rows; returns the loss and `dL/dlogits`.
pub(crate) fn cross_entropy<S: Scalar>(logits: &[S], classes: usize, labels: &[usize]) -> (S, Vec<S>) {
    let rows = labels.len();
    let mut logp = vec![S::zero(); logits.len()];
    let mut loss = 0.0f64;
    let scale = S::one() / S::from_f64(rows.max(1) as f64);
    let mut grad = vec![S::zero(); logits.len()];
    for (r, &label) in labels.iter().enumerate() {
        let span = r * classes..(r + 1) * classes;
        log_softmax_row(&logits[span.clone()], &mut logp[span.clone()]);
        loss -= logp[r * classes + label].as_f64();
        for j in 0..classes {
            let p = logp[r * classes + j].exp();
            let target = if j == label { S::one() } else { S::zero() };
            grad[r * classes + j] = (p - target) * scale;
        }
    }
    (S::from_f64(loss) * scale, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Weight of foreground targets; background rows get `1 - alpha`.
    pub alpha: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Per-row focal term `-α_t (1-p_t)^γ log p_t` for a single probability.
pub fn focal_loss_value(p_t: f64, gamma: f64, alpha_t: f64) -> f64 {
    -alpha_t * (1.0 - p_t).powf(gamma) * p_t.ln()
}

/// Softmax focal loss summed over rows and divided by `normalizer`.
/// Target `0` is background.
pub(crate) fn focal_loss<S: Scalar>(
    logits: &[S],
    classes: usize,
    targets: &[usize],
    cfg: &FocalConfig,
    normalizer: S,
) -> (S, Vec<S>) {
    let gamma = S::from_f64(cfg.gamma);
    let mut logp = vec![S::zero(); classes];
    let mut grad = vec![S::zero(); logits.len()];
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        log_softmax_row(row, &mut logp);
        let alpha_t = S::from_f64(if t == 0 { 1.0 - cfg.alpha } else { cfg.alpha });
        let log_pt = logp[t];
        let pt = log_pt.exp();
        let q = (-log_pt.exp_m1()).max(S::zero());
        let mod_term = if cfg.gamma == 0.0 { S::one() } else { q.powf(gamma) };
        total -= (alpha_t * mod_term * log_pt).as_f64();
        // dL/dz_j = α_t [γ (1-p_t)^(γ-1) p_t log p_t - (1-p_t)^γ] (δ_tj - p_j)
        let slope = if cfg.gamma == 0.0 || q <= S::zero() {
            S::zero()
        } else {
            gamma * q.powf(gamma - S::one()) * pt * log_pt
        };
        let coef = alpha_t * (slope - mod_term) / normalizer;
        for j in 0..classes {
            let delta = if j == t { S::one() } else { S::zero() };
            grad[r * classes + j] = coef * (delta - logp[j].exp());
        }
    }
    (S::from_f64(total / normalizer.as_f64()), grad)
}

pub fn smooth_l1<S: Scalar>(d: S) -> S {
    let a = d.abs();
    if a < S::one() {
        S::from_f64(0.5) * a * a
    } else {
        a - S::from_f64(0.5)
    }
}

fn smooth_l1_grad<S: Scalar>(d: S) -> S {
    if d.abs() < S::one() {
        d
    } else {
        d.signum()
    }
}

/// Smooth-L1 over the rows selected by `mask`, each row `width` wide.
pub(crate) fn masked_smooth_l1<S: Scalar>(
    pred: &[S],
    target: &[S],
    mask: &[bool],
    width: usize,
    normalizer: S,
) -> (S, Vec<S>) {
    let mut grad = vec![S::zero(); pred.len()];
    let mut total = 0.0f64;
    for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for c in r * width..(r + 1) * width {
            let d = pred[c] - target[c];
            total += smooth_l1(d).as_f64();
            grad[c] = smooth_l1_grad(d) / normalizer;
        }
    }
    (S::from_f64(total / normalizer.as_f64()), grad)
}
