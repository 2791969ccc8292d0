//! Parameter and accumulate-operation counts derived from a network description.

use serde::{Deserialize, Serialize};

use crate::spiking::{LayerOp, NetworkSpec, SpikingError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub accs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCountReport {
    pub network: String,
    pub input_height: usize,
    pub input_width: usize,
    /// Conv weights and biases plus one τ parameter per learnable PLIF layer.
    pub params: u64,
    /// Batch-norm γ and β; foldable into the convs at inference.
    pub bn_params: u64,
    /// Dense synaptic accumulations plus one per PLIF neuron, per time step.
    pub accs_per_timestep: u64,
    pub conv_accs: u64,
    pub neuron_accs: u64,
    pub layers: Vec<LayerCount>,
}

impl OpCountReport {
    pub fn params_with_bn(&self) -> u64 {
        self.params + self.bn_params
    }
}

/// Counts for an `h × w` input. Pools, concats and batch norms add no ACCs.
pub fn count_ops(spec: &NetworkSpec, h: usize, w: usize) -> Result<OpCountReport, SpikingError> {
    let shapes = spec.infer_shapes(h, w)?;
    let mut layers = Vec::new();
    let (mut params, mut bn_params, mut conv_accs, mut neuron_accs) = (0u64, 0u64, 0u64, 0u64);
    for (i, l) in spec.layers.iter().enumerate() {
        let out = shapes[i];
        let (kind, p, a) = match &l.op {
            LayerOp::Conv {
                out_channels,
                kernel,
                groups,
                bias,
                ..
            } => {
                let cin = shapes[l.inputs[0]].c;
                let fan_in = (cin / groups * kernel * kernel) as u64;
                let p = *out_channels as u64 * fan_in + if *bias { *out_channels as u64 } else { 0 };
                let a = out.numel() as u64 * fan_in;
                params += p;
                conv_accs += a;
                ("conv", p, a)
            }
            LayerOp::BatchNorm => {
                let p = 2 * out.c as u64;
                bn_params += p;
                ("bn", p, 0)
            }
            LayerOp::Plif => {
                let p = u64::from(spec.neuron.learnable_tau);
                let a = out.numel() as u64;
                params += p;
                neuron_accs += a;
                ("plif", p, a)
            }
            LayerOp::MaxPool { .. } => ("maxpool", 0, 0),
            LayerOp::Concat => ("concat", 0, 0),
            LayerOp::Input { .. } => ("input", 0, 0),
        };
        layers.push(LayerCount {
            name: l.name.clone(),
            kind: kind.into(),
            params: p,
            accs: a,
        });
    }
    Ok(OpCountReport {
        network: spec.name.clone(),
        input_height: h,
        input_width: w,
        params,
        bn_params,
        accs_per_timestep: conv_accs + neuron_accs,
        conv_accs,
        neuron_accs,
        layers,
    })
}

pub fn count_params(spec: &NetworkSpec) -> u64 {
    spec_param_count(spec)
}

/// Parameter count needs channel counts only, so no input size is required.
fn spec_param_count(spec: &NetworkSpec) -> u64 {
    let ch = crate::spiking::channel_counts(spec);
    spec.layers
        .iter()
        .map(|l| match &l.op {
            LayerOp::Conv {
                out_channels,
                kernel,
                groups,
                bias,
                ..
            } => {
                let cin = ch[l.inputs[0]];
                (*out_channels * cin / groups * kernel * kernel + if *bias { *out_channels } else { 0 }) as u64
            }
            LayerOp::Plif => u64::from(spec.neuron.learnable_tau),
            _ => 0,
        })
        .sum()
}

pub fn count_accs_per_timestep(spec: &NetworkSpec, h: usize, w: usize) -> Result<u64, SpikingError> {
    Ok(count_ops(spec, h, w)?.accs_per_timestep)
}
