//! COCO-style mean average precision.

use serde::{Deserialize, Serialize};

use crate::detection::{iou, BoxF, Detection};

/// Ground truth for one image in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BoxF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// `(class, AP per threshold)` for classes with ground truth.
    pub per_class: Vec<(usize, Vec<f64>)>,
    pub map: f64,
    /// AP at IoU 0.5, averaged over classes.
    pub map50: f64,
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Average precision from 101-point interpolation of the precision/recall
/// curve. `tp` flags are in descending score order.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    // Precision envelope, monotone non-increasing from the right.
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = rec.partition_point(|&x| x < target - 1e-12);
        if idx < prec.len() {
            sum += prec[idx];
        }
    }
    sum / 101.0
}

/// Greedy matching by descending score; each ground truth is used once and
/// a detection takes the unmatched ground truth of highest IoU.
fn match_class(dets: &[&Detection], gts: &[&GroundTruth], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best = None;
            let mut best_iou = thr;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.image_id != d.image_id {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best_iou = v;
                    best = Some(g);
                }
            }
            match best {
                Some(g) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn coco_map(dets: &[Detection], gts: &[GroundTruth]) -> MapReport {
    let thresholds = coco_thresholds();
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    for &c in &classes {
        let mut cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        // Stable order for ties: by score, then image.
        cd.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| interpolated_ap(&match_class(&cd, &cg, t), cg.len()))
            .collect();
        per_class.push((c, aps));
    }
    let n = per_class.len().max(1) as f64;
    let map = per_class.iter().map(|(_, a)| a.iter().sum::<f64>() / a.len() as f64).sum::<f64>() / n;
    let map50 = per_class.iter().map(|(_, a)| a[0]).sum::<f64>() / n;
    MapReport {
        thresholds,
        per_class,
        map,
        map50,
    }
}
