//! BPTT training loops and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Task, TrainConfig};
use super::tasks::{ClassDataset, DetDataset};
use super::PipelineError;
use crate::autograd::{adamw_step, clip_grad_norm, cosine_lr, load_checkpoint, AdamWConfig, OptimizerState, Tape};
use crate::detection::{
    decode_detections, detection_loss, generate_anchors, match_anchors, Anchor, AnchorConfig, BoxF, Detection,
    MatchResult,
};
use crate::encoding::{cubes_to_tensor, VoxelCube};
use crate::metrics::{accuracy, coco_map, count_ops, sparsity, GroundTruth, MapReport, OpCountReport, SparsityReport};
use crate::spiking::{Network, NetworkSpec, OutputSpec, SpikeRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub last_lr: f64,
    pub mean_grad_norm: f64,
    /// Held-out accuracy or mAP@0.5 after the epoch, when a test set is given.
    pub eval_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config: TrainConfig,
    pub version: String,
    pub network: String,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimisation step.
    pub losses: Vec<f64>,
    pub metric_name: String,
    pub final_metric: Option<f64>,
    pub sparsity: Option<SparsityReport>,
    pub counts: OpCountReport,
    pub wall_clock_s: f64,
}

impl ExperimentManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

pub struct TrainOutcome {
    pub network: Network,
    pub optimizer: OptimizerState,
    pub manifest: ExperimentManifest,
}

/// Network prepared for inference: separable pairs merged and batch norms
/// folded when `fused`, unchanged otherwise.
pub fn inference_network(net: &Network, fused: bool) -> Result<Network, PipelineError> {
    Ok(if fused {
        net.convert_dwsep()?.fuse_batch_norms()?
    } else {
        net.clone()
    })
}

fn init_network(cfg: &TrainConfig, spec: NetworkSpec) -> Result<Network, PipelineError> {
    let mut net = Network::new(spec, cfg.seed)?;
    if let Some(path) = &cfg.pretrained {
        let ckpt = load_checkpoint(path)?;
        ckpt.load_into(net.params_mut(), "", false)?;
    }
    Ok(net)
}

fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Shared optimisation step: clip, schedule, AdamW. Returns `(lr, norm)`.
fn optimise(
    net: &mut Network,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    step: usize,
    total: usize,
    loss: f64,
    epoch: usize,
) -> Result<(f64, f64), PipelineError> {
    let lr = cosine_lr(step, total.saturating_sub(1), cfg.lr0());
    let norm = clip_grad_norm(net.params_mut(), cfg.grad_clip);
    if !loss.is_finite() || !norm.is_finite() {
        return Err(PipelineError::NanLoss {
            epoch,
            step,
            lr,
            grad_norm: norm,
        });
    }
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    adamw_step(net.params_mut(), opt, &adam, lr);
    Ok((lr, norm))
}

fn batch_tensor(cubes: &[VoxelCube], idx: &[usize]) -> Result<crate::autograd::Tensor, PipelineError> {
    let refs: Vec<&VoxelCube> = idx.iter().map(|&i| &cubes[i]).collect();
    Ok(cubes_to_tensor(&refs)?)
}

// ------------------------------------------------------- classification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Class spike counts per sample.
    pub scores: Vec<Vec<f32>>,
    pub sparsity: SparsityReport,
    pub record: SpikeRecord,
}

pub fn evaluate_classifier(net: &Network, data: &ClassDataset, batch: usize) -> Result<ClassEval, PipelineError> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut scores = Vec::with_capacity(data.len());
    let mut record = SpikeRecord::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = batch_tensor(&data.cubes, chunk)?;
        let steps = data.cubes[chunk[0]].timesteps;
        let mut tape = Tape::inference();
        let out = net.forward_eval(&mut tape, &x, steps, None)?;
        let logits = tape.value(out.logits.ok_or(PipelineError::Config("network is not a classifier".into()))?);
        predictions.extend(logits.argmax_rows());
        for i in 0..chunk.len() {
            scores.push(logits.outer_slice(i).to_vec());
        }
        record.merge(&out.record);
    }
    Ok(ClassEval {
        accuracy: accuracy(&predictions, &data.labels),
        predictions,
        scores,
        sparsity: sparsity(&record),
        record,
    })
}

pub fn train_classifier(cfg: &TrainConfig, train: &ClassDataset, test: Option<&ClassDataset>) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    if cfg.task != Task::Classification {
        return Err(PipelineError::Config("train_classifier needs a classification config".into()));
    }
    if train.is_empty() {
        return Err(PipelineError::Config("empty training set".into()));
    }
    let start = Instant::now();
    let spec = cfg.build_spec(train.num_classes)?;
    let mut net = init_network(cfg, spec)?;
    let mut opt = OptimizerState::new(net.params());
    let steps = train.cubes[0].timesteps;
    let epochs = cfg.epochs();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = epochs * per_epoch;
    let mut step = 0;
    let mut logs = Vec::new();
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        let (mut sum_loss, mut sum_norm, mut last_lr) = (0.0, 0.0, 0.0);
        for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let x = batch_tensor(&train.cubes, &idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let out = net.forward_train(&mut tape, &x, steps)?;
            let loss = tape.cross_entropy(out.logits.expect("classifier"), &labels)?;
            let value = tape.value(loss).data()[0] as f64;
            if value.is_finite() {
                tape.backward(loss)?;
            }
            net.params_mut().zero_grad();
            net.accumulate_grads(&tape, &out);
            let (lr, norm) = optimise(&mut net, &mut opt, cfg, step, total, value, epoch)?;
            sum_loss += value;
            sum_norm += norm;
            last_lr = lr;
            losses.push(value);
            step += 1;
        }
        let eval_metric = match test {
            Some(t) if !t.is_empty() => Some(evaluate_classifier(&net, t, cfg.batch_size)?.accuracy),
            _ => None,
        };
        logs.push(EpochLog {
            epoch,
            mean_loss: sum_loss / per_epoch as f64,
            last_lr,
            mean_grad_norm: sum_norm / per_epoch as f64,
            eval_metric,
        });
    }
    let (final_metric, sp) = match test {
        Some(t) if !t.is_empty() => {
            let inf = inference_network(&net, cfg.eval_fused)?;
            let e = evaluate_classifier(&inf, t, cfg.batch_size)?;
            (Some(e.accuracy), Some(e.sparsity))
        }
        _ => (None, None),
    };
    let counts = count_ops(net.spec(), cfg.height, cfg.width)?;
    let manifest = ExperimentManifest {
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        network: net.spec().name.clone(),
        epochs: logs,
        losses,
        metric_name: "accuracy".into(),
        final_metric,
        sparsity: sp,
        counts,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        network: net,
        optimizer: opt,
        manifest,
    })
}

// ------------------------------------------------------------ detection

/// Anchors for the detector's feature maps at an `h × w` input.
pub fn detector_anchors(spec: &NetworkSpec, h: usize, w: usize, cfg: &TrainConfig) -> Result<Vec<Anchor>, PipelineError> {
    let OutputSpec::Detection {
        taps, anchors_per_cell, ..
    } = &spec.output
    else {
        return Err(PipelineError::Config("network has no detection heads".into()));
    };
    let shapes = spec.infer_shapes(h, w)?;
    let acfg = AnchorConfig {
        feature_maps: taps.iter().map(|&t| (shapes[t].h, shapes[t].w)).collect(),
        scale_min: cfg.detection.scale_min,
        scale_max: cfg.detection.scale_max,
        aspect_ratios: vec![cfg.detection.aspect_ratios.clone()],
    };
    for (k, &a) in anchors_per_cell.iter().enumerate() {
        if acfg.anchors_per_cell(k) != a {
            return Err(PipelineError::Config(format!(
                "map {k}: heads predict {a} anchors per cell, anchor config gives {}",
                acfg.anchors_per_cell(k)
            )));
        }
    }
    Ok(generate_anchors(&acfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetEval {
    pub map: MapReport,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
    pub sparsity: SparsityReport,
}

pub fn evaluate_detector(net: &Network, data: &DetDataset, cfg: &TrainConfig) -> Result<DetEval, PipelineError> {
    let first = data.cubes.first().ok_or(PipelineError::Config("empty evaluation set".into()))?;
    let anchors = detector_anchors(net.spec(), first.height, first.width, cfg)?;
    let (iw, ih) = data.image_size;
    let keep = |b: &BoxF| cfg.min_box_diagonal.is_none_or(|d| (b.w * b.w + b.h * b.h).sqrt() >= d);
    let mut detections = Vec::new();
    let mut ground_truth = Vec::new();
    let mut record = SpikeRecord::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let x = batch_tensor(&data.cubes, chunk)?;
        let mut tape = Tape::inference();
        let out = net.forward_eval(&mut tape, &x, first.timesteps, None)?;
        record.merge(&out.record);
        let cls = tape.value(out.cls.expect("detector"));
        let reg = tape.value(out.reg.expect("detector"));
        for (j, &i) in chunk.iter().enumerate() {
            let dets = decode_detections(
                i as u64,
                cls.outer_slice(j),
                reg.outer_slice(j),
                &anchors,
                iw,
                ih,
                &cfg.detection.postprocess,
            );
            detections.extend(dets.into_iter().filter(|d| keep(&d.bbox)));
            for g in &data.boxes[i] {
                let b = g.bbox.scaled(iw, ih);
                if keep(&b) {
                    ground_truth.push(GroundTruth {
                        image_id: i as u64,
                        class_id: g.class_id,
                        bbox: b,
                    });
                }
            }
        }
    }
    Ok(DetEval {
        map: coco_map(&detections, &ground_truth),
        detections,
        ground_truth,
        sparsity: sparsity(&record),
    })
}

/// Freezes every parameter outside the extra blocks and heads.
pub fn freeze_backbone(net: &mut Network) {
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        let name = net.params().name(id);
        let head = name.starts_with("extra") || name.starts_with("head");
        if !head {
            net.params_mut().set_trainable(id, false);
        }
    }
}

pub fn train_detector(cfg: &TrainConfig, train: &DetDataset, test: Option<&DetDataset>) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    if cfg.task != Task::Detection {
        return Err(PipelineError::Config("train_detector needs a detection config".into()));
    }
    let first = train.cubes.first().ok_or(PipelineError::Config("empty training set".into()))?;
    let start = Instant::now();
    let spec = cfg.build_spec(train.num_classes)?;
    let mut net = init_network(cfg, spec)?;
    if cfg.freeze_backbone {
        freeze_backbone(&mut net);
    }
    let anchors = detector_anchors(net.spec(), first.height, first.width, cfg)?;
    let targets: Vec<MatchResult> = train
        .boxes
        .iter()
        .map(|b| match_anchors(&anchors, b, cfg.detection.loss.iou_pos))
        .collect::<Result<_, _>>()?;
    let mut opt = OptimizerState::new(net.params());
    let epochs = cfg.epochs();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = epochs * per_epoch;
    let mut step = 0;
    let mut logs = Vec::new();
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        let (mut sum_loss, mut sum_norm, mut last_lr) = (0.0, 0.0, 0.0);
        for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let x = batch_tensor(&train.cubes, &idx)?;
            let t: Vec<MatchResult> = idx.iter().map(|&i| targets[i].clone()).collect();
            let mut tape = Tape::new();
            let out = net.forward_train(&mut tape, &x, first.timesteps)?;
            let (loss, _, _) = detection_loss(
                &mut tape,
                out.cls.expect("detector"),
                out.reg.expect("detector"),
                &t,
                &cfg.detection.loss,
            )?;
            let value = tape.value(loss).data()[0] as f64;
            if value.is_finite() {
                tape.backward(loss)?;
            }
            net.params_mut().zero_grad();
            net.accumulate_grads(&tape, &out);
            let (lr, norm) = optimise(&mut net, &mut opt, cfg, step, total, value, epoch)?;
            sum_loss += value;
            sum_norm += norm;
            last_lr = lr;
            losses.push(value);
            step += 1;
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: sum_loss / per_epoch as f64,
            last_lr,
            mean_grad_norm: sum_norm / per_epoch as f64,
            eval_metric: None,
        });
    }
    let (final_metric, sp) = match test {
        Some(t) if !t.is_empty() => {
            let inf = inference_network(&net, cfg.eval_fused)?;
            let e = evaluate_detector(&inf, t, cfg)?;
            if let Some(last) = logs.last_mut() {
                last.eval_metric = Some(e.map.map50);
            }
            (Some(e.map.map50), Some(e.sparsity))
        }
        _ => (None, None),
    };
    let counts = count_ops(net.spec(), first.height, first.width)?;
    let manifest = ExperimentManifest {
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        network: net.spec().name.clone(),
        epochs: logs,
        losses,
        metric_name: "mAP@0.5".into(),
        final_metric,
        sparsity: sp,
        counts,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        network: net,
        optimizer: opt,
        manifest,
    })
}
