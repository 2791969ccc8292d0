//! Declarative network description shared by the trainer and the counters.

use serde::{Deserialize, Serialize};

use super::{PlifConfig, SpikingError};
use crate::autograd::conv_output_size;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    Input {
        channels: usize,
    },
    BatchNorm,
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        /// Per-input-channel value used for padding instead of zero.
        /// Produced when a preceding batch norm is folded into the conv.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        pad_fill: bool,
    },
    Plif,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub op: LayerOp,
    /// Indices of earlier layers feeding this one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputSpec {
    /// Spikes of `node` are summed over space, then over time, per class.
    Classifier { node: usize, num_classes: usize },
    /// SSD heads: one classification and one regression conv per tap.
    Detection {
        taps: Vec<usize>,
        cls_heads: Vec<usize>,
        reg_heads: Vec<usize>,
        anchors_per_cell: Vec<usize>,
        /// Object classes, background excluded.
        num_classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub neuron: PlifConfig,
    pub layers: Vec<LayerSpec>,
    pub output: OutputSpec,
    /// Free-form notes on how the layout was reconstructed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Kinds of values flowing along edges, for the spike-purity audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    /// Binary: the input cube, PLIF outputs, and pools/concats of those.
    Spike,
    /// Batch-norm output whose input was binary.
    NormalizedSpike,
    Real,
}

impl NetworkSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, SpikingError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| SpikingError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_channels(&self) -> usize {
        match self.layers.first().map(|l| &l.op) {
            Some(LayerOp::Input { channels }) => *channels,
            _ => 0,
        }
    }

    /// Consumers of every layer.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            for &src in &l.inputs {
                out[src].push(i);
            }
        }
        out
    }

    /// Structural checks: a single leading input, inputs referring to
    /// earlier layers, arity per op, and output references in range.
    pub fn validate(&self) -> Result<(), SpikingError> {
        let err = |m: String| Err(SpikingError::Spec(m));
        if !matches!(self.layers.first().map(|l| &l.op), Some(LayerOp::Input { .. })) {
            return err("first layer must be the input".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 && matches!(l.op, LayerOp::Input { .. }) {
                return err(format!("layer {i} ({}) is a second input", l.name));
            }
            if l.inputs.iter().any(|&s| s >= i) {
                return err(format!("layer {i} ({}) reads a later layer", l.name));
            }
            let arity_ok = match l.op {
                LayerOp::Input { .. } => l.inputs.is_empty(),
                LayerOp::Concat => !l.inputs.is_empty(),
                _ => l.inputs.len() == 1,
            };
            if !arity_ok {
                return err(format!("layer {i} ({}) has {} inputs", l.name, l.inputs.len()));
            }
        }
        let n = self.layers.len();
        match &self.output {
            OutputSpec::Classifier { node, .. } if *node >= n => err("classifier node out of range".into()),
            OutputSpec::Detection {
                taps,
                cls_heads,
                reg_heads,
                anchors_per_cell,
                ..
            } => {
                if taps.len() != cls_heads.len() || taps.len() != reg_heads.len() || taps.len() != anchors_per_cell.len() {
                    return err("detection taps, heads and anchor counts differ in length".into());
                }
                if taps.iter().chain(cls_heads).chain(reg_heads).any(|i| *i >= n) {
                    return err("detection reference out of range".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Output shape of every layer for an `h × w` input.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<Shape3>, SpikingError> {
        self.validate()?;
        let mut shapes: Vec<Shape3> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let input = l.inputs.first().map(|&s| shapes[s]);
            let shape_err = |m: String| SpikingError::Shape {
                layer: l.name.clone(),
                index: i,
                detail: m,
            };
            let s = match &l.op {
                LayerOp::Input { channels } => Shape3 { c: *channels, h, w },
                LayerOp::BatchNorm | LayerOp::Plif => input.expect("arity checked"),
                LayerOp::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    groups,
                    ..
                } => {
                    let x = input.expect("arity checked");
                    if *groups == 0 || x.c % groups != 0 || out_channels % groups != 0 {
                        return Err(shape_err(format!("{} input channels, {} outputs, {} groups", x.c, out_channels, groups)));
                    }
                    let ho = conv_output_size(x.h, *kernel, *stride, *padding)
                        .ok_or_else(|| shape_err(format!("height {} too small for kernel {}", x.h, kernel)))?;
                    let wo = conv_output_size(x.w, *kernel, *stride, *padding)
                        .ok_or_else(|| shape_err(format!("width {} too small for kernel {}", x.w, kernel)))?;
                    Shape3 { c: *out_channels, h: ho, w: wo }
                }
                LayerOp::MaxPool { kernel, stride, padding } => {
                    let x = input.expect("arity checked");
                    let ho = conv_output_size(x.h, *kernel, *stride, *padding)
                        .ok_or_else(|| shape_err(format!("height {} too small for pool {}", x.h, kernel)))?;
                    let wo = conv_output_size(x.w, *kernel, *stride, *padding)
                        .ok_or_else(|| shape_err(format!("width {} too small for pool {}", x.w, kernel)))?;
                    Shape3 { c: x.c, h: ho, w: wo }
                }
                LayerOp::Concat => {
                    let first = shapes[l.inputs[0]];
                    let mut c = 0;
                    for &src in &l.inputs {
                        let s = shapes[src];
                        if (s.h, s.w) != (first.h, first.w) {
                            return Err(shape_err(format!("concat of {}x{} and {}x{}", first.h, first.w, s.h, s.w)));
                        }
                        c += s.c;
                    }
                    Shape3 { c, h: first.h, w: first.w }
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Static spike-purity audit. Every conv must read spikes or a batch
    /// norm of spikes (detection heads read spikes); pools and concats
    /// must read spikes; batch norms must read spikes or conv outputs.
    pub fn audit_spike_purity(&self) -> Result<Vec<ValueKind>, SpikingError> {
        self.validate()?;
        let mut kinds = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let ins: Vec<ValueKind> = l.inputs.iter().map(|&s| kinds[s]).collect();
            let fail = |m: &str| {
                Err(SpikingError::Purity {
                    layer: l.name.clone(),
                    index: i,
                    detail: m.to_string(),
                })
            };
            let kind = match l.op {
                LayerOp::Input { .. } => ValueKind::Spike,
                LayerOp::Plif => ValueKind::Spike,
                LayerOp::BatchNorm => match ins[0] {
                    ValueKind::Spike => ValueKind::NormalizedSpike,
                    ValueKind::Real if matches!(self.layers[l.inputs[0]].op, LayerOp::Conv { .. }) => ValueKind::Real,
                    _ => return fail("batch norm reads a non-spike, non-conv value"),
                },
                LayerOp::Conv { groups, .. } => {
                    let src = &self.layers[l.inputs[0]];
                    let ok = match ins[0] {
                        ValueKind::Spike | ValueKind::NormalizedSpike => true,
                        // Pointwise half of a depthwise-separable pair.
                        ValueKind::Real => is_depthwise(src) || is_bn_of_depthwise(self, src) || groups > 1,
                    };
                    if !ok {
                        return fail("conv reads a real-valued tensor");
                    }
                    ValueKind::Real
                }
                LayerOp::MaxPool { .. } | LayerOp::Concat => {
                    if ins.iter().any(|k| *k != ValueKind::Spike) {
                        return fail("pool/concat reads non-spike data");
                    }
                    ValueKind::Spike
                }
            };
            kinds.push(kind);
        }
        Ok(kinds)
    }
}

fn is_depthwise(layer: &LayerSpec) -> bool {
    matches!(layer.op, LayerOp::Conv { groups, .. } if groups > 1)
}

fn is_bn_of_depthwise(spec: &NetworkSpec, layer: &LayerSpec) -> bool {
    matches!(layer.op, LayerOp::BatchNorm) && is_depthwise(&spec.layers[layer.inputs[0]])
}
