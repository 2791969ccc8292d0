//! Spike generation and the multi-step leaky integrate-and-fire recurrence.

use serde::{Deserialize, Serialize};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Membrane set to `v_reset` after a spike.
    #[default]
    Hard,
    /// Threshold subtracted from the membrane after a spike.
    Soft,
}

/// Forward nonlinearity of the firing function.
///
/// `Smooth` replaces the step with the antiderivative of the ATan surrogate,
/// so that the backward pass is the exact derivative of the forward pass.
/// It exists to verify the BPTT machinery with finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FireMode {
    #[default]
    Heaviside,
    Smooth,
}

pub fn heaviside<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one()
    } else {
        S::zero()
    }
}

/// Derivative of `atan(π·α·v/2)/π + 1/2`: `α / (2·(1 + (π·α·v/2)²))`.
pub fn atan_surrogate_grad<S: Scalar>(v: S, alpha: S) -> S {
    let two = S::from_f64(2.0);
    let z = S::from_f64(std::f64::consts::PI) * alpha * v / two;
    alpha / (two * (S::one() + z * z))
}

pub(crate) fn fire<S: Scalar>(v: S, alpha: S, mode: FireMode) -> S {
    match mode {
        FireMode::Heaviside => heaviside(v),
        FireMode::Smooth => {
            let pi = S::from_f64(std::f64::consts::PI);
            (pi * alpha * v / S::from_f64(2.0)).atan() / pi + S::from_f64(0.5)
        }
    }
}

/// Parameters of `H = V + (X - (V - v_reset))·k`, `S = fire(H - θ)`, reset.
#[derive(Debug, Clone, Copy)]
pub struct LifRecurrence<S> {
    /// Leak factor `k = 1/τ`.
    pub leak: S,
    pub v_threshold: S,
    pub v_reset: S,
    pub reset: ResetMode,
    pub alpha: S,
    pub fire: FireMode,
}

pub(crate) struct LifTrace<S> {
    pub spikes: Vec<S>,
    /// Membrane after charging, before reset, for every step.
    pub charged: Vec<S>,
    pub final_v: Vec<S>,
}

impl<S: Scalar> LifRecurrence<S> {
    pub fn charge(&self, v: S, x: S) -> S {
        v + (x - (v - self.v_reset)) * self.leak
    }

    pub fn after_reset(&self, h: S, s: S) -> S {
        match self.reset {
            ResetMode::Hard => h * (S::one() - s) + self.v_reset * s,
            ResetMode::Soft => h - self.v_threshold * s,
        }
    }

    /// Runs `steps` time steps over `x` laid out as `[t][m]`, starting from
    /// the membrane `v0` of length `m`.
    pub(crate) fn forward(&self, x: &[S], steps: usize, v0: &[S]) -> LifTrace<S> {
        let m = v0.len();
        debug_assert_eq!(x.len(), steps * m);
        let mut v = v0.to_vec();
        let mut spikes = vec![S::zero(); x.len()];
        let mut charged = vec![S::zero(); x.len()];
        for t in 0..steps {
            let off = t * m;
            for i in 0..m {
                let h = self.charge(v[i], x[off + i]);
                let s = fire(h - self.v_threshold, self.alpha, self.fire);
                charged[off + i] = h;
                spikes[off + i] = s;
                v[i] = self.after_reset(h, s);
            }
        }
        LifTrace {
            spikes,
            charged,
            final_v: v,
        }
    }

    /// Backpropagation through time. Returns `dX` and `dL/dk`.
    pub(crate) fn backward(
        &self,
        x: &[S],
        steps: usize,
        v0: &[S],
        trace: &LifTrace<S>,
        dspikes: &[S],
    ) -> (Vec<S>, S) {
        let m = v0.len();
        let mut dx = vec![S::zero(); x.len()];
        let mut dv = vec![S::zero(); m];
        let mut dk = 0.0f64;
        let one = S::one();
        for t in (0..steps).rev() {
            let off = t * m;
            for i in 0..m {
                let h = trace.charged[off + i];
                let s = trace.spikes[off + i];
                let (dv_dh, dv_ds) = match self.reset {
                    ResetMode::Hard => (one - s, self.v_reset - h),
                    ResetMode::Soft => (one, -self.v_threshold),
                };
                let ds = dspikes[off + i] + dv[i] * dv_ds;
                let dh = ds * atan_surrogate_grad(h - self.v_threshold, self.alpha) + dv[i] * dv_dh;
                let v_prev = if t == 0 {
                    v0[i]
                } else {
                    let p = off - m + i;
                    self.after_reset(trace.charged[p], trace.spikes[p])
                };
                dx[off + i] = dh * self.leak;
                dk += (dh * (x[off + i] - v_prev + self.v_reset)).as_f64();
                dv[i] = dh * (one - self.leak);
            }
        }
        (dx, S::from_f64(dk))
    }
}
