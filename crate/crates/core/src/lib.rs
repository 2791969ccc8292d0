//! Event-camera encoding and spiking neural networks trained with surrogate
//! gradients.
//!
//! The crate is organised bottom-up:
//!
//! * [`event_io`] reads, writes, synthesises and reshapes event streams and
//!   box annotations.
//! * [`encoding`] turns event streams into binary voxel cubes.
//! * [`autograd`] is a small dense-tensor engine with reverse-mode
//!   differentiation, AdamW and the learning-rate schedule.
//! * [`spiking`] holds the PLIF neuron, the declarative network description,
//!   the architecture builders and the inference-time rewrites.
//! * [`detection`] adds SSD anchors, matching, losses and post-processing.
//! * [`metrics`] computes accuracy, COCO mAP, parameter/ACC counts and spike
//!   sparsity.
//! * [`pipeline`] wires everything into training, evaluation and ablation runs.

pub mod autograd;
pub mod detection;
pub mod encoding;
pub mod event_io;
pub mod metrics;
pub mod pipeline;
pub mod spiking;
