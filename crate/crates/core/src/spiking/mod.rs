//! PLIF neurons, network descriptions, builders, execution and the
//! inference-time rewrites (batch-norm folding, depthwise conversion).

mod builders;
mod fusion;
mod network;
mod spec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{heaviside, CheckpointError, FireMode, LifRecurrence, ResetMode, TensorError};

pub use builders::{
    build_densenet, build_detector, build_mobilenet, build_small_cnn, build_squeezenet, build_vgg, BlockStyle,
    BnPlacement, ConvMode, DetectorBackbone, DetectorConfig, NetBuilder, NeuronKind, SmallCnnConfig,
};
pub use fusion::{dwsep_to_normal_conv, fuse_bn_into_conv, BnParams, BnState, ConvParams};
pub use network::{channel_counts, ForwardOutput, NetState, Network, RunOutput};
pub use spec::{LayerOp, LayerSpec, NetworkSpec, OutputSpec, Shape3, ValueKind};

#[derive(Debug, Error)]
pub enum SpikingError {
    #[error("invalid network description: {0}")]
    Spec(String),
    #[error("layer {index} ({layer}): {detail}")]
    Shape { layer: String, index: usize, detail: String },
    #[error("spike purity violated at layer {index} ({layer}): {detail}")]
    Purity { layer: String, index: usize, detail: String },
    #[error("input has {got} channels, network expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("unknown variant {0}")]
    UnknownVariant(String),
    #[error("batch norm is in training mode; fold only with frozen statistics")]
    TrainModeBn,
    #[error("cannot convert: {0}")]
    Conversion(String),
    #[error("invalid neuron configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Encoding(#[from] crate::encoding::EncodingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlifConfig {
    pub tau_init: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    pub reset_mode: ResetMode,
    /// Sharpness of the ATan surrogate.
    pub alpha: f64,
    /// PLIF when true (one learnable `w` per layer), plain LIF otherwise.
    pub learnable_tau: bool,
}

impl Default for PlifConfig {
    fn default() -> Self {
        Self {
            tau_init: 2.0,
            v_threshold: 1.0,
            v_reset: 0.0,
            reset_mode: ResetMode::Hard,
            alpha: 2.0,
            learnable_tau: true,
        }
    }
}

impl PlifConfig {
    pub fn validate(&self) -> Result<(), SpikingError> {
        if !(self.tau_init > 1.0) {
            return Err(SpikingError::Config(format!("tau_init {} must exceed 1", self.tau_init)));
        }
        if !(self.v_threshold > self.v_reset) {
            return Err(SpikingError::Config(format!(
                "threshold {} must exceed reset {}",
                self.v_threshold, self.v_reset
            )));
        }
        Ok(())
    }

    /// `w` such that `sigmoid(w) = 1/τ`.
    pub fn initial_w(&self) -> f64 {
        -(self.tau_init - 1.0).ln()
    }

    pub fn recurrence(&self, leak: f32) -> LifRecurrence<f32> {
        LifRecurrence {
            leak,
            v_threshold: self.v_threshold as f32,
            v_reset: self.v_reset as f32,
            reset: self.reset_mode,
            alpha: self.alpha as f32,
            fire: FireMode::Heaviside,
        }
    }
}

/// Membrane potentials of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PlifState {
    pub v: Vec<f32>,
}

impl PlifState {
    pub fn new(len: usize, cfg: &PlifConfig) -> Self {
        Self {
            v: vec![cfg.v_reset as f32; len],
        }
    }

    pub fn reset(&mut self, cfg: &PlifConfig) {
        self.v.fill(cfg.v_reset as f32);
    }
}

/// One time step of the neuron with leak `1/τ`. Returns the spikes and
/// updates `state` in place.
pub fn plif_step(state: &mut PlifState, x: &[f32], cfg: &PlifConfig, leak: f32) -> Result<Vec<f32>, SpikingError> {
    if x.len() != state.v.len() {
        return Err(SpikingError::Shape {
            layer: "plif".into(),
            index: 0,
            detail: format!("input has {} values, state {}", x.len(), state.v.len()),
        });
    }
    let rec = cfg.recurrence(leak);
    Ok(state
        .v
        .iter_mut()
        .zip(x)
        .map(|(v, &xi)| {
            let h = rec.charge(*v, xi);
            let s = heaviside(h - rec.v_threshold);
            *v = rec.after_reset(h, s);
            s
        })
        .collect())
}

pub fn sigmoid(w: f64) -> f64 {
    1.0 / (1.0 + (-w).exp())
}

/// Spike counts per PLIF layer per time step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpikeRecord {
    pub layers: Vec<LayerSpikes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpikes {
    pub name: String,
    pub spikes: Vec<u64>,
    pub elements: Vec<u64>,
}

impl LayerSpikes {
    pub fn total_spikes(&self) -> u64 {
        self.spikes.iter().sum()
    }

    pub fn total_elements(&self) -> u64 {
        self.elements.iter().sum()
    }
}

impl SpikeRecord {
    /// Adds another record with the same layer layout (e.g. a later batch).
    pub fn merge(&mut self, other: &SpikeRecord) {
        if self.layers.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.spikes.len() < b.spikes.len() {
                a.spikes.resize(b.spikes.len(), 0);
                a.elements.resize(b.elements.len(), 0);
            }
            for (i, (s, e)) in b.spikes.iter().zip(&b.elements).enumerate() {
                a.spikes[i] += s;
                a.elements[i] += e;
            }
        }
    }

    pub fn total_spikes(&self) -> u64 {
        self.layers.iter().map(|l| l.total_spikes()).sum()
    }

    pub fn total_elements(&self) -> u64 {
        self.layers.iter().map(|l| l.total_elements()).sum()
    }
}
