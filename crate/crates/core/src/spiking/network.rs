//! Parameters bound to a [`NetworkSpec`] and the multi-step forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerOp, NetworkSpec, OutputSpec};
use super::{LayerSpikes, SpikeRecord, SpikingError};
use crate::autograd::{
    kaiming_uniform_with, Checkpoint, Conv2dConfig, ParamId, ParamStore, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM,
};
use crate::encoding::{cubes_to_tensor, VoxelCube};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Slot {
    None,
    Conv {
        w: ParamId,
        b: Option<ParamId>,
        fill: Option<ParamId>,
    },
    Bn {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
    },
    Plif {
        w: ParamId,
    },
}

/// A network description together with its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    params: ParamStore<f32>,
    slots: Vec<Slot>,
}

/// Membrane potentials of every PLIF layer, indexed by layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetState {
    pub v: Vec<Option<Vec<f32>>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Value of every layer on the tape.
    pub nodes: Vec<Var>,
    /// `(N, K)` spike counts of a classifier.
    pub logits: Option<Var>,
    /// `(N, anchors, K+1)` and `(N, anchors, 4)` time-summed head outputs.
    pub cls: Option<Var>,
    pub reg: Option<Var>,
    pub record: SpikeRecord,
    pub state: NetState,
    /// Trainable parameters and the leaves they were placed on.
    pub bindings: Vec<(ParamId, Var)>,
}

/// Result of running one sample through the network step by step.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Per time step: class spike counts (classifier) or the flattened raw
    /// head outputs (detector).
    pub per_step: Vec<Vec<f32>>,
    pub record: SpikeRecord,
}

impl Network {
    /// Fresh parameters: Kaiming-uniform conv weights, zero biases, identity
    /// batch norms and `w` giving the configured τ.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, SpikingError> {
        spec.validate()?;
        spec.neuron.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let channels = channel_counts(&spec);
        for (i, l) in spec.layers.iter().enumerate() {
            let cin = l.inputs.first().map(|&s| channels[s]).unwrap_or(0);
            match &l.op {
                LayerOp::Conv {
                    out_channels,
                    kernel,
                    groups,
                    bias,
                    pad_fill,
                    ..
                } => {
                    let fan_in = cin / groups * kernel * kernel;
                    let shape = [*out_channels, cin / groups, *kernel, *kernel];
                    params.add(&format!("{}.weight", l.name), kaiming_uniform_with(&mut rng, &shape, fan_in));
                    if *bias {
                        params.add(&format!("{}.bias", l.name), Tensor::zeros(&[*out_channels]));
                    }
                    if *pad_fill {
                        params.add_buffer(&format!("{}.pad_fill", l.name), Tensor::zeros(&[cin]));
                    }
                }
                LayerOp::BatchNorm => {
                    let c = channels[i];
                    params.add(&format!("{}.gamma", l.name), Tensor::full(&[c], 1.0));
                    params.add(&format!("{}.beta", l.name), Tensor::zeros(&[c]));
                    params.add_buffer(&format!("{}.running_mean", l.name), Tensor::zeros(&[c]));
                    params.add_buffer(&format!("{}.running_var", l.name), Tensor::full(&[c], 1.0));
                }
                LayerOp::Plif => {
                    let w = Tensor::full(&[1], spec.neuron.initial_w() as f32);
                    let name = format!("{}.w", l.name);
                    if spec.neuron.learnable_tau {
                        params.add(&name, w);
                    } else {
                        params.add_buffer(&name, w);
                    }
                }
                _ => {}
            }
        }
        let slots = bind_slots(&spec, &params)?;
        Ok(Self { spec, params, slots })
    }

    /// Rebuilds a network from a checkpoint holding its description.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, SpikingError> {
        let spec = NetworkSpec::from_json(&ckpt.spec_json)?;
        let mut net = Self::new(spec, 0)?;
        ckpt.load_into(&mut net.params, "", true)?;
        Ok(net)
    }

    pub fn to_checkpoint(&self, optimizer: Vec<u8>) -> Checkpoint {
        Checkpoint::from_store(&self.params, self.spec.to_json(), optimizer)
    }

    pub(crate) fn from_parts(spec: NetworkSpec, params: ParamStore<f32>) -> Result<Self, SpikingError> {
        spec.validate()?;
        let slots = bind_slots(&spec, &params)?;
        Ok(Self { spec, params, slots })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub(crate) fn slot(&self, layer: usize) -> Slot {
        self.slots[layer]
    }

    /// Parameter id of `{layer}.{suffix}`.
    pub fn param(&self, layer: &str, suffix: &str) -> Option<ParamId> {
        self.params.get(&format!("{layer}.{suffix}"))
    }

    /// Leak factor `1/τ` of every PLIF layer.
    pub fn leaks(&self) -> Vec<(String, f64)> {
        self.spec
            .layers
            .iter()
            .zip(&self.slots)
            .filter_map(|(l, s)| match s {
                Slot::Plif { w } => Some((l.name.clone(), super::sigmoid(self.params.value(*w).data()[0] as f64))),
                _ => None,
            })
            .collect()
    }

    /// Training forward: batch norms use batch statistics and update their
    /// running estimates.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<f32>,
        input: &Tensor<f32>,
        steps: usize,
    ) -> Result<ForwardOutput, SpikingError> {
        let (out, updates) = self.forward_impl(tape, input, steps, None, true)?;
        for (id, values) in updates {
            self.params.value_mut(id).data_mut().copy_from_slice(&values);
        }
        Ok(out)
    }

    /// Eval-mode forward with frozen batch-norm statistics.
    pub fn forward_eval(
        &self,
        tape: &mut Tape<f32>,
        input: &Tensor<f32>,
        steps: usize,
        state: Option<&NetState>,
    ) -> Result<ForwardOutput, SpikingError> {
        Ok(self.forward_impl(tape, input, steps, state, false)?.0)
    }

    /// Adds the tape gradients of a training forward into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<f32>, out: &ForwardOutput) {
        for &(id, var) in &out.bindings {
            self.params.accumulate_grad(tape, id, var);
        }
    }

    /// Feeds the cube frame by frame from reset membranes.
    pub fn run(&self, cube: &VoxelCube) -> Result<RunOutput, SpikingError> {
        let expected = self.spec.input_channels();
        if cube.channels != expected {
            return Err(SpikingError::ChannelMismatch {
                expected,
                got: cube.channels,
            });
        }
        let input = cubes_to_tensor(&[cube])?;
        let mut tape = Tape::inference();
        let out = self.forward_eval(&mut tape, &input, cube.timesteps, None)?;
        let steps = cube.timesteps;
        let per_step = match &self.spec.output {
            OutputSpec::Classifier { node, .. } => {
                let v = tape.value(out.nodes[*node]);
                let [t, c, h, w] = v.dims4()?;
                (0..t)
                    .map(|ti| {
                        (0..c)
                            .map(|ch| {
                                let off = (ti * c + ch) * h * w;
                                v.data()[off..off + h * w].iter().sum()
                            })
                            .collect()
                    })
                    .collect()
            }
            OutputSpec::Detection { cls_heads, reg_heads, .. } => (0..steps)
                .map(|t| {
                    let mut row = Vec::new();
                    for &h in cls_heads.iter().chain(reg_heads) {
                        let v = tape.value(out.nodes[h]);
                        row.extend_from_slice(v.outer_slice(t));
                    }
                    row
                })
                .collect(),
        };
        Ok(RunOutput {
            per_step,
            record: out.record,
        })
    }

    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        tape: &mut Tape<f32>,
        input: &Tensor<f32>,
        steps: usize,
        state: Option<&NetState>,
        train: bool,
    ) -> Result<(ForwardOutput, Vec<(ParamId, Vec<f32>)>), SpikingError> {
        let dims = input.dims4()?;
        let expected = self.spec.input_channels();
        if dims[1] != expected {
            return Err(SpikingError::ChannelMismatch {
                expected,
                got: dims[1],
            });
        }
        if steps == 0 || dims[0] % steps != 0 {
            return Err(SpikingError::Spec(format!(
                "batch of {} frames is not a multiple of {} steps",
                dims[0], steps
            )));
        }
        let p = &self.params;
        let mut bindings = Vec::new();
        let mut leaf = |tape: &mut Tape<f32>, id: ParamId| {
            let v = p.leaf(tape, id);
            if p.is_trainable(id) && tape.is_recording() {
                bindings.push((id, v));
            }
            v
        };
        let mut nodes: Vec<Var> = Vec::with_capacity(self.spec.layers.len());
        let mut updates = Vec::new();
        let mut record = SpikeRecord::default();
        let mut new_state = NetState {
            v: vec![None; self.spec.layers.len()],
        };
        for (i, l) in self.spec.layers.iter().enumerate() {
            let x = l.inputs.first().map(|&s| nodes[s]);
            let v = match (&l.op, self.slots[i]) {
                (LayerOp::Input { .. }, _) => tape.leaf(input.clone(), false),
                (LayerOp::Conv { stride, padding, groups, .. }, Slot::Conv { w, b, fill }) => {
                    let wv = leaf(tape, w);
                    let bv = b.map(|b| leaf(tape, b));
                    let cfg = Conv2dConfig {
                        stride: *stride,
                        padding: *padding,
                        groups: *groups,
                    };
                    let fill = fill.map(|f| p.value(f).data().to_vec());
                    tape.conv2d(x.expect("arity"), wv, bv, cfg, fill.as_deref())?
                }
                (LayerOp::BatchNorm, Slot::Bn { gamma, beta, mean, var }) => {
                    let g = leaf(tape, gamma);
                    let b = leaf(tape, beta);
                    if train {
                        let mut m = p.value(mean).data().to_vec();
                        let mut s = p.value(var).data().to_vec();
                        let out = tape.batch_norm_train(
                            x.expect("arity"),
                            g,
                            b,
                            &mut m,
                            &mut s,
                            BN_MOMENTUM as f32,
                            BN_EPS as f32,
                        )?;
                        updates.push((mean, m));
                        updates.push((var, s));
                        out
                    } else {
                        tape.batch_norm_eval(x.expect("arity"), g, b, p.value(mean), p.value(var), BN_EPS as f32)?
                    }
                }
                (LayerOp::Plif, Slot::Plif { w }) => {
                    let wv = leaf(tape, w);
                    let v0 = state.and_then(|s| s.v.get(i)).and_then(|v| v.as_deref());
                    let rec = self.spec.neuron.recurrence(0.5);
                    let (out, final_v) = tape.lif(x.expect("arity"), steps, v0, Some(wv), rec)?;
                    new_state.v[i] = Some(final_v);
                    record.layers.push(count_spikes(&l.name, tape.value(out), steps));
                    out
                }
                (LayerOp::MaxPool { kernel, stride, padding }, _) => {
                    tape.max_pool2d(x.expect("arity"), *kernel, *stride, *padding)?
                }
                (LayerOp::Concat, _) => {
                    let parts: Vec<Var> = l.inputs.iter().map(|&s| nodes[s]).collect();
                    tape.concat_channels(&parts)?
                }
                (op, slot) => {
                    return Err(SpikingError::Spec(format!("layer {} has op {:?} but slot {:?}", l.name, op, slot)))
                }
            };
            nodes.push(v);
        }
        let mut out = ForwardOutput {
            nodes,
            logits: None,
            cls: None,
            reg: None,
            record,
            state: new_state,
            bindings,
        };
        match &self.spec.output {
            OutputSpec::Classifier { node, .. } => {
                out.logits = Some(tape.sum_time_spatial(out.nodes[*node], steps)?);
            }
            OutputSpec::Detection {
                cls_heads,
                reg_heads,
                anchors_per_cell,
                ..
            } => {
                let mut cls = Vec::new();
                let mut reg = Vec::new();
                for ((&c, &r), &a) in cls_heads.iter().zip(reg_heads).zip(anchors_per_cell) {
                    let cs = tape.sum_time(out.nodes[c], steps)?;
                    cls.push(tape.anchor_rows(cs, a)?);
                    let rs = tape.sum_time(out.nodes[r], steps)?;
                    reg.push(tape.anchor_rows(rs, a)?);
                }
                out.cls = Some(tape.concat_rows(&cls)?);
                out.reg = Some(tape.concat_rows(&reg)?);
            }
        }
        Ok((out, updates))
    }
}

fn count_spikes(name: &str, v: &Tensor<f32>, steps: usize) -> LayerSpikes {
    let per = v.len() / steps;
    let mut spikes = Vec::with_capacity(steps);
    for t in 0..steps {
        spikes.push(v.data()[t * per..(t + 1) * per].iter().filter(|s| **s != 0.0).count() as u64);
    }
    LayerSpikes {
        name: name.to_string(),
        spikes,
        elements: vec![per as u64; steps],
    }
}

pub fn channel_counts(spec: &NetworkSpec) -> Vec<usize> {
    let mut ch: Vec<usize> = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let c = match &l.op {
            LayerOp::Input { channels } => *channels,
            LayerOp::Conv { out_channels, .. } => *out_channels,
            LayerOp::Concat => l.inputs.iter().map(|&s| ch[s]).sum(),
            _ => ch[l.inputs[0]],
        };
        ch.push(c);
    }
    ch
}

fn bind_slots(spec: &NetworkSpec, params: &ParamStore<f32>) -> Result<Vec<Slot>, SpikingError> {
    let need = |name: String| {
        params
            .get(&name)
            .ok_or_else(|| SpikingError::Spec(format!("missing parameter {name}")))
    };
    spec.layers
        .iter()
        .map(|l| {
            Ok(match &l.op {
                LayerOp::Conv { bias, pad_fill, .. } => Slot::Conv {
                    w: need(format!("{}.weight", l.name))?,
                    b: if *bias { Some(need(format!("{}.bias", l.name))?) } else { None },
                    fill: if *pad_fill {
                        Some(need(format!("{}.pad_fill", l.name))?)
                    } else {
                        None
                    },
                },
                LayerOp::BatchNorm => Slot::Bn {
                    gamma: need(format!("{}.gamma", l.name))?,
                    beta: need(format!("{}.beta", l.name))?,
                    mean: need(format!("{}.running_mean", l.name))?,
                    var: need(format!("{}.running_var", l.name))?,
                },
                LayerOp::Plif => Slot::Plif {
                    w: need(format!("{}.w", l.name))?,
                },
                _ => Slot::None,
            })
        })
        .collect()
}
