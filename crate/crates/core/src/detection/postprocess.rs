//! Time summation, decoding and non-maximum suppression.

use serde::{Deserialize, Serialize};

use super::{decode_box, iou, Anchor, BoxF, Detection};

/// Elementwise sum of per-step head outputs.
pub fn sum_heads_over_time(per_step: &[Vec<f32>]) -> Vec<f32> {
    let Some(first) = per_step.first() else { return Vec::new() };
    let mut out = vec![0.0f32; first.len()];
    for step in per_step {
        for (o, v) in out.iter_mut().zip(step) {
            *o += v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub score_thresh: f64,
    pub iou_thresh: f64,
    /// Candidates kept per class before suppression.
    pub pre_nms_top_k: usize,
    /// Detections kept per image after suppression.
    pub top_k: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            iou_thresh: 0.5,
            pre_nms_top_k: 400,
            top_k: 100,
        }
    }
}

/// Greedy per-class suppression by descending score. Boxes under
/// `score_thresh` are dropped; at most `top_k` survive overall.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64, score_thresh: f64, top_k: usize) -> Vec<Detection> {
    dets.retain(|d| d.score >= score_thresh);
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && k.image_id == d.image_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            keep.push(d);
            if keep.len() == top_k {
                break;
            }
        }
    }
    keep
}

/// Softmax scores and decoded boxes for one image. `cls` is `(A, K+1)` with
/// background at column 0, `reg` is `(A, 4)`. Boxes come back in pixels.
pub fn decode_detections(
    image_id: u64,
    cls: &[f32],
    reg: &[f32],
    anchors: &[Anchor],
    width: f64,
    height: f64,
    cfg: &PostprocessConfig,
) -> Vec<Detection> {
    let a = anchors.len();
    if a == 0 {
        return Vec::new();
    }
    let classes = cls.len() / a;
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); classes.saturating_sub(1)];
    for (i, anchor) in anchors.iter().enumerate() {
        let row = &cls[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|v| (*v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let off = [reg[i * 4] as f64, reg[i * 4 + 1] as f64, reg[i * 4 + 2] as f64, reg[i * 4 + 3] as f64];
        let mut decoded: Option<BoxF> = None;
        for k in 1..classes {
            let score = exps[k] / z;
            if score < cfg.score_thresh {
                continue;
            }
            let b = *decoded.get_or_insert_with(|| clip(decode_box(anchor, &off)).scaled(width, height));
            per_class[k - 1].push(Detection {
                image_id,
                class_id: k - 1,
                score,
                bbox: b,
            });
        }
    }
    let mut all = Vec::new();
    for mut dets in per_class {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(cfg.pre_nms_top_k);
        all.extend(nms(dets, cfg.iou_thresh, cfg.score_thresh, usize::MAX));
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(cfg.top_k);
    all
}

fn clip(b: BoxF) -> BoxF {
    let x0 = b.x.clamp(0.0, 1.0);
    let y0 = b.y.clamp(0.0, 1.0);
    let x1 = (b.x + b.w).clamp(0.0, 1.0);
    let y1 = (b.y + b.h).clamp(0.0, 1.0);
    BoxF::new(x0, y0, x1 - x0, y1 - y0)
}
