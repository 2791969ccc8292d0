//! SSD-style detection: anchors, matching, box coding, losses and
//! post-processing.

mod anchors;
mod dump;
mod postprocess;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{FocalConfig, Tape, Tensor, TensorError, Var};

pub use anchors::{anchor_scales, generate_anchors, Anchor, AnchorConfig};
pub use dump::{parse_detections_text, write_coco_json, write_detections_text};
pub use postprocess::{decode_detections, nms, sum_heads_over_time, PostprocessConfig};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("box has non-positive size ({w} x {h})")]
    NonPositiveSize { w: f64, h: f64 },
    #[error("feature map {index} is {h}x{w}; too small for a stride-2 block")]
    TooSmall { index: usize, h: usize, w: usize },
    #[error("invalid anchor configuration: {0}")]
    Config(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Axis-aligned box, top-left corner plus size. Units depend on context:
/// normalised `[0,1]` coordinates for anchors and matching, pixels for dumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxF {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }
}

/// Intersection over union; zero for disjoint or degenerate boxes.
pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Ground-truth box in normalised coordinates with a 0-based class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BoxF,
    pub class_id: usize,
}

/// Training targets for every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// 0 for background, `class_id + 1` otherwise.
    pub labels: Vec<usize>,
    pub matched_gt: Vec<Option<usize>>,
    /// Encoded offsets; zero for background anchors.
    pub offsets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l != 0).count()
    }
}

pub const VARIANCES: [f64; 2] = [0.1, 0.2];

pub fn encode_box(anchor: &Anchor, gt: &BoxF) -> Result<[f64; 4], DetectionError> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(DetectionError::NonPositiveSize { w: gt.w, h: gt.h });
    }
    let (cx, cy) = gt.center();
    Ok([
        (cx - anchor.cx) / anchor.w / VARIANCES[0],
        (cy - anchor.cy) / anchor.h / VARIANCES[0],
        (gt.w / anchor.w).ln() / VARIANCES[1],
        (gt.h / anchor.h).ln() / VARIANCES[1],
    ])
}

pub fn decode_box(anchor: &Anchor, off: &[f64; 4]) -> BoxF {
    let cx = anchor.cx + off[0] * VARIANCES[0] * anchor.w;
    let cy = anchor.cy + off[1] * VARIANCES[0] * anchor.h;
    let w = anchor.w * (off[2] * VARIANCES[1]).exp();
    let h = anchor.h * (off[3] * VARIANCES[1]).exp();
    BoxF::from_center(cx, cy, w, h)
}

/// Each ground truth first claims its best anchor (falling back to the next
/// best unclaimed one on collisions), then every anchor with IoU ≥ `iou_pos`
/// to some ground truth takes the best such ground truth.
pub fn match_anchors(anchors: &[Anchor], gts: &[GtBox], iou_pos: f64) -> Result<MatchResult, DetectionError> {
    let n = anchors.len();
    let mut labels = vec![0usize; n];
    let mut matched = vec![None; n];
    let mut best_iou = vec![0.0f64; n];
    let boxes: Vec<BoxF> = anchors.iter().map(|a| a.to_box()).collect();
    let mut ious = vec![vec![0.0f64; n]; gts.len()];
    for (g, gt) in gts.iter().enumerate() {
        for (a, b) in boxes.iter().enumerate() {
            let v = iou(b, &gt.bbox);
            ious[g][a] = v;
            if v >= iou_pos && v > best_iou[a] {
                best_iou[a] = v;
                matched[a] = Some(g);
            }
        }
    }
    let mut forced = vec![false; n];
    for (g, row) in ious.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        if let Some(&a) = order.iter().find(|&&a| !forced[a]) {
            forced[a] = true;
            matched[a] = Some(g);
        }
    }
    let mut offsets = vec![[0.0; 4]; n];
    for a in 0..n {
        if let Some(g) = matched[a] {
            labels[a] = gts[g].class_id + 1;
            offsets[a] = encode_box(&anchors[a], &gts[g].bbox)?;
        }
    }
    Ok(MatchResult {
        labels,
        matched_gt: matched,
        offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionLossConfig {
    pub gamma: f64,
    pub alpha: f64,
    /// Weight of the localisation term.
    pub loc_weight: f64,
    pub iou_pos: f64,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            loc_weight: 1.0,
            iou_pos: 0.5,
        }
    }
}

/// Focal classification loss plus smooth-L1 localisation over positives,
/// for time-summed heads `cls (N, A, K+1)` and `reg (N, A, 4)`.
/// Returns `(total, classification, localisation)`.
pub fn detection_loss(
    tape: &mut Tape<f32>,
    cls: Var,
    reg: Var,
    targets: &[MatchResult],
    cfg: &DetectionLossConfig,
) -> Result<(Var, Var, Var), DetectionError> {
    let labels: Vec<usize> = targets.iter().flat_map(|m| m.labels.iter().copied()).collect();
    let mask: Vec<bool> = labels.iter().map(|l| *l != 0).collect();
    let target: Vec<f32> = targets
        .iter()
        .flat_map(|m| m.offsets.iter().flat_map(|o| o.iter().map(|v| *v as f32)))
        .collect();
    let focal = FocalConfig {
        gamma: cfg.gamma,
        alpha: cfg.alpha,
    };
    let lc = tape.focal_loss(cls, &labels, &focal)?;
    let shape = tape.value(reg).shape().to_vec();
    let lr = tape.smooth_l1(reg, &Tensor::new(shape, target)?, &mask)?;
    let lr_w = tape.scale(lr, cfg.loc_weight as f32);
    let total = tape.add(lc, lr_w)?;
    Ok((total, lc, lr))
}

/// One detection in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BoxF,
}

/// Spatial sizes after each stride-2 extra block (3×3, pad 1) starting from
/// an `h × w` map. A map that is already 1 pixel along an axis cannot be
/// reduced further and is rejected.
pub fn extra_block_sizes(h: usize, w: usize, blocks: usize) -> Result<Vec<(usize, usize)>, DetectionError> {
    let mut out = Vec::with_capacity(blocks);
    let (mut h, mut w) = (h, w);
    for index in 0..blocks {
        if h < 2 || w < 2 {
            return Err(DetectionError::TooSmall { index, h, w });
        }
        h = (h - 1) / 2 + 1;
        w = (w - 1) / 2 + 1;
        out.push((h, w));
    }
    Ok(out)
}
