//! Inference-time rewrites: folding batch norms into neighbouring convs and
//! merging depthwise-separable pairs into dense convs.

use std::collections::HashMap;

use super::network::{Network, Slot};
use super::spec::{LayerOp, LayerSpec, NetworkSpec, OutputSpec};
use super::SpikingError;
use crate::autograd::{ParamStore, Tensor, BN_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnState {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f64,
    pub state: BnState,
}

impl BnParams {
    /// Per-channel `(scale, shift)` of the frozen affine map, in f64.
    fn affine(&self) -> Result<Vec<(f64, f64)>, SpikingError> {
        if self.state == BnState::Train {
            return Err(SpikingError::TrainModeBn);
        }
        let n = self.gamma.len();
        if [self.beta.len(), self.mean.len(), self.var.len()].iter().any(|&l| l != n) {
            return Err(SpikingError::Conversion("batch norm vectors differ in length".into()));
        }
        Ok((0..n)
            .map(|c| {
                let scale = self.gamma[c] as f64 / (self.var[c] as f64 + self.eps).sqrt();
                (scale, self.beta[c] as f64 - self.mean[c] as f64 * scale)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(out, in/groups, k, k)`
    pub weight: Tensor<f32>,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// Per-input-channel padding value (zero when absent).
    pub pad_fill: Option<Vec<f32>>,
}

impl ConvParams {
    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    pub fn in_channels(&self) -> usize {
        self.dims().1 * self.groups
    }
}

/// `conv'` with `conv'(x) = conv(bn(x))`. The padding of `conv` acts on the
/// normalised values, so `conv'` pads with the input that the batch norm maps
/// to the old padding value.
pub fn fuse_bn_into_conv(bn: &BnParams, conv: &ConvParams) -> Result<ConvParams, SpikingError> {
    let aff = bn.affine()?;
    let (cout, cin_g, k) = conv.dims();
    let cin = cin_g * conv.groups;
    if aff.len() != cin {
        return Err(SpikingError::Conversion(format!("batch norm has {} channels, conv reads {}", aff.len(), cin)));
    }
    let out_per_group = cout / conv.groups;
    let kk = k * k;
    let w = conv.weight.data();
    let mut nw = vec![0.0f32; w.len()];
    let mut nb = vec![0.0f64; cout];
    for o in 0..cout {
        let g = o / out_per_group;
        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[o] as f64);
        for ip in 0..cin_g {
            let (scale, shift) = aff[g * cin_g + ip];
            for j in 0..kk {
                let idx = (o * cin_g + ip) * kk + j;
                nw[idx] = (w[idx] as f64 * scale) as f32;
                acc += w[idx] as f64 * shift;
            }
        }
        nb[o] = acc;
    }
    let pad_fill = if conv.padding > 0 {
        let old = conv.pad_fill.clone().unwrap_or_else(|| vec![0.0; cin]);
        let mut fill = Vec::with_capacity(cin);
        for (c, &(scale, shift)) in aff.iter().enumerate() {
            if scale == 0.0 {
                return Err(SpikingError::Conversion(format!("channel {c} has zero scale; padding cannot be folded")));
            }
            fill.push(((old[c] as f64 - shift) / scale) as f32);
        }
        Some(fill)
    } else {
        None
    };
    Ok(ConvParams {
        weight: Tensor::new(conv.weight.shape().to_vec(), nw)?,
        bias: Some(nb.into_iter().map(|v| v as f32).collect()),
        stride: conv.stride,
        padding: conv.padding,
        groups: conv.groups,
        pad_fill,
    })
}

/// `conv'` with `conv'(x) = bn(conv(x))`.
pub fn fuse_conv_into_bn(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams, SpikingError> {
    let aff = bn.affine()?;
    let (cout, cin_g, k) = conv.dims();
    if aff.len() != cout {
        return Err(SpikingError::Conversion(format!("batch norm has {} channels, conv writes {}", aff.len(), cout)));
    }
    let per = cin_g * k * k;
    let w = conv.weight.data();
    let mut nw = vec![0.0f32; w.len()];
    let mut nb = Vec::with_capacity(cout);
    for (o, &(scale, shift)) in aff.iter().enumerate() {
        for j in o * per..(o + 1) * per {
            nw[j] = (w[j] as f64 * scale) as f32;
        }
        let b = conv.bias.as_ref().map_or(0.0, |b| b[o] as f64);
        nb.push((b * scale + shift) as f32);
    }
    Ok(ConvParams {
        weight: Tensor::new(conv.weight.shape().to_vec(), nw)?,
        bias: Some(nb),
        ..conv.clone()
    })
}

/// Dense conv equal to a depthwise conv followed by a pointwise conv:
/// `W[o,i] = Wp[o,i]·Wd[i]`, bias `bp + Wp·bd`.
pub fn dwsep_to_normal_conv(dw: &ConvParams, pw: &ConvParams) -> Result<ConvParams, SpikingError> {
    let (dc, dcg, k) = dw.dims();
    let (po, pi, pk) = pw.dims();
    if dcg != 1 || dw.groups != dc {
        return Err(SpikingError::Conversion(format!("first conv is not depthwise ({} groups, {} outputs)", dw.groups, dc)));
    }
    if pk != 1 || pw.groups != 1 || pw.stride != 1 || pw.padding != 0 {
        return Err(SpikingError::Conversion("second conv is not a plain 1x1 conv".into()));
    }
    if pi != dc {
        return Err(SpikingError::Conversion(format!("depthwise has {dc} channels, pointwise reads {pi}")));
    }
    let kk = k * k;
    let wd = dw.weight.data();
    let wp = pw.weight.data();
    let mut w = vec![0.0f32; po * dc * kk];
    let mut b = vec![0.0f32; po];
    for o in 0..po {
        let mut acc = pw.bias.as_ref().map_or(0.0, |b| b[o] as f64);
        for i in 0..dc {
            let p = wp[o * pi + i];
            for j in 0..kk {
                w[(o * dc + i) * kk + j] = (p as f64 * wd[i * kk + j] as f64) as f32;
            }
            acc += p as f64 * dw.bias.as_ref().map_or(0.0, |b| b[i] as f64);
        }
        b[o] = acc as f32;
    }
    let has_bias = dw.bias.is_some() || pw.bias.is_some();
    Ok(ConvParams {
        weight: Tensor::new(vec![po, dc, k, k], w)?,
        bias: has_bias.then_some(b),
        stride: dw.stride,
        padding: dw.padding,
        groups: 1,
        pad_fill: dw.pad_fill.clone(),
    })
}

/// Pending graph edit: removed layers forward to another layer, replaced
/// convs get new parameters.
#[derive(Default)]
struct Rewrite {
    alias: HashMap<usize, usize>,
    replaced: HashMap<usize, (String, ConvParams)>,
}

impl Rewrite {
    fn resolve(&self, mut i: usize) -> usize {
        while let Some(&j) = self.alias.get(&i) {
            i = j;
        }
        i
    }
}

const SUFFIXES: [&str; 8] = ["weight", "bias", "pad_fill", "gamma", "beta", "running_mean", "running_var", "w"];

impl Network {
    pub fn conv_params(&self, layer: usize) -> Option<ConvParams> {
        let l = &self.spec().layers[layer];
        match (&l.op, self.slot(layer)) {
            (LayerOp::Conv { stride, padding, groups, .. }, Slot::Conv { w, b, fill }) => Some(ConvParams {
                weight: self.params().value(w).clone(),
                bias: b.map(|b| self.params().value(b).data().to_vec()),
                stride: *stride,
                padding: *padding,
                groups: *groups,
                pad_fill: fill.map(|f| self.params().value(f).data().to_vec()),
            }),
            _ => None,
        }
    }

    /// Frozen batch-norm parameters (running statistics).
    pub fn bn_params(&self, layer: usize) -> Option<BnParams> {
        match self.slot(layer) {
            Slot::Bn { gamma, beta, mean, var } => {
                let p = self.params();
                Some(BnParams {
                    gamma: p.value(gamma).data().to_vec(),
                    beta: p.value(beta).data().to_vec(),
                    mean: p.value(mean).data().to_vec(),
                    var: p.value(var).data().to_vec(),
                    eps: BN_EPS,
                    state: BnState::Eval,
                })
            }
            _ => None,
        }
    }

    fn is_conv(&self, i: usize) -> bool {
        matches!(self.spec().layers[i].op, LayerOp::Conv { .. })
    }

    /// Merges every depthwise → [bn] → pointwise chain into one dense conv.
    pub fn convert_dwsep(&self) -> Result<Network, SpikingError> {
        let spec = self.spec();
        let consumers = spec.consumers();
        let mut rw = Rewrite::default();
        for (i, l) in spec.layers.iter().enumerate() {
            let LayerOp::Conv { kernel: 1, groups: 1, .. } = l.op else { continue };
            let src = l.inputs[0];
            let (mid_bn, dw) = match spec.layers[src].op {
                LayerOp::BatchNorm if consumers[src].len() == 1 => (Some(src), spec.layers[src].inputs[0]),
                LayerOp::Conv { .. } => (None, src),
                _ => continue,
            };
            let is_dw = matches!(spec.layers[dw].op, LayerOp::Conv { groups, out_channels, .. } if groups > 1 && groups == out_channels);
            if !is_dw || consumers[dw].len() != 1 {
                continue;
            }
            let dwp = self.conv_params(dw).expect("conv layer");
            let mut pwp = self.conv_params(i).expect("conv layer");
            if let Some(b) = mid_bn {
                pwp = fuse_bn_into_conv(&self.bn_params(b).expect("bn layer"), &pwp)?;
            }
            let dense = dwsep_to_normal_conv(&dwp, &pwp)?;
            let base = spec.layers[dw].name.strip_suffix(".dw").unwrap_or(&spec.layers[dw].name);
            let mut name = format!("{base}.conv");
            if spec.layers.iter().any(|l| l.name == name) {
                name = format!("{}.dense", spec.layers[dw].name);
            }
            if let Some(b) = mid_bn {
                rw.alias.insert(b, dw);
            }
            rw.alias.insert(dw, spec.layers[dw].inputs[0]);
            rw.replaced.insert(i, (name, dense));
        }
        self.apply(rw)
    }

    /// Folds every batch norm that sits directly before or after a conv it
    /// exclusively feeds or reads.
    pub fn fuse_batch_norms(&self) -> Result<Network, SpikingError> {
        let spec = self.spec();
        let consumers = spec.consumers();
        let mut rw = Rewrite::default();
        let mut current: HashMap<usize, ConvParams> = HashMap::new();
        for (i, l) in spec.layers.iter().enumerate() {
            if !matches!(l.op, LayerOp::BatchNorm) {
                continue;
            }
            let bn = self.bn_params(i).expect("bn layer");
            let src = l.inputs[0];
            if self.is_conv(src) && consumers[src].len() == 1 {
                // conv → bn
                let conv = current.remove(&src).unwrap_or_else(|| self.conv_params(src).expect("conv"));
                current.insert(src, fuse_conv_into_bn(&conv, &bn)?);
                rw.alias.insert(i, src);
            } else if consumers[i].len() == 1 && self.is_conv(consumers[i][0]) {
                // bn → conv
                let dst = consumers[i][0];
                let conv = current.remove(&dst).unwrap_or_else(|| self.conv_params(dst).expect("conv"));
                current.insert(dst, fuse_bn_into_conv(&bn, &conv)?);
                rw.alias.insert(i, src);
            }
        }
        for (i, p) in current {
            rw.replaced.insert(i, (spec.layers[i].name.clone(), p));
        }
        self.apply(rw)
    }

    fn apply(&self, rw: Rewrite) -> Result<Network, SpikingError> {
        let old = self.spec();
        let mut index = vec![usize::MAX; old.layers.len()];
        let mut layers = Vec::new();
        let mut params = ParamStore::new();
        for (i, l) in old.layers.iter().enumerate() {
            if rw.alias.contains_key(&i) {
                continue;
            }
            let inputs = l.inputs.iter().map(|&s| index[rw.resolve(s)]).collect();
            if let Some((name, conv)) = rw.replaced.get(&i) {
                let (cout, _, k) = conv.dims();
                layers.push(LayerSpec {
                    name: name.clone(),
                    op: LayerOp::Conv {
                        out_channels: cout,
                        kernel: k,
                        stride: conv.stride,
                        padding: conv.padding,
                        groups: conv.groups,
                        bias: conv.bias.is_some(),
                        pad_fill: conv.pad_fill.is_some(),
                    },
                    inputs,
                });
                params.add(&format!("{name}.weight"), conv.weight.clone());
                if let Some(b) = &conv.bias {
                    params.add(&format!("{name}.bias"), Tensor::new(vec![cout], b.clone())?);
                }
                if let Some(f) = &conv.pad_fill {
                    params.add_buffer(&format!("{name}.pad_fill"), Tensor::new(vec![f.len()], f.clone())?);
                }
            } else {
                layers.push(LayerSpec {
                    name: l.name.clone(),
                    op: l.op.clone(),
                    inputs,
                });
                let p = self.params();
                for suffix in SUFFIXES {
                    if let Some(id) = p.get(&format!("{}.{suffix}", l.name)) {
                        let nid = if p.is_buffer(id) {
                            params.add_buffer(p.name(id), p.value(id).clone())
                        } else {
                            params.add(p.name(id), p.value(id).clone())
                        };
                        params.set_trainable(nid, p.is_trainable(id));
                    }
                }
            }
            index[i] = layers.len() - 1;
        }
        let map = |i: usize| index[rw.resolve(i)];
        let output = match &old.output {
            OutputSpec::Classifier { node, num_classes } => OutputSpec::Classifier {
                node: map(*node),
                num_classes: *num_classes,
            },
            OutputSpec::Detection {
                taps,
                cls_heads,
                reg_heads,
                anchors_per_cell,
                num_classes,
            } => OutputSpec::Detection {
                taps: taps.iter().map(|&t| map(t)).collect(),
                cls_heads: cls_heads.iter().map(|&t| map(t)).collect(),
                reg_heads: reg_heads.iter().map(|&t| map(t)).collect(),
                anchors_per_cell: anchors_per_cell.clone(),
                num_classes: *num_classes,
            },
        };
        let spec = NetworkSpec {
            name: old.name.clone(),
            neuron: old.neuron,
            layers,
            output,
            notes: old.notes.clone(),
        };
        Network::from_parts(spec, params)
    }
}
