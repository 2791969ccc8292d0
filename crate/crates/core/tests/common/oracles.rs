//! Independent reference implementations used as test oracles.

use snn_core::detection::{iou, Detection};
use snn_core::event_io::EventStream;
use snn_core::metrics::GroundTruth;

pub const DURATION: u64 = 100_000;

/// Brute-force encoder: for every event, scan all `(timestep, bin)`
/// intervals `[start, end)` and set the cell whose interval holds `t`.
pub fn encode_oracle(stream: &EventStream, t_steps: usize, n: usize, h: usize, w: usize) -> Vec<u8> {
    let c = 2 * n;
    let mut out = vec![0u8; c * t_steps * h * w];
    let bin = DURATION / (t_steps * n) as u64;
    for e in &stream.events {
        for k in 0..t_steps {
            for b in 0..n {
                let start = (k * n + b) as u64 * bin;
                if e.t >= start && e.t < start + bin {
                    let ch = e.p as usize * n + b;
                    out[((ch * t_steps + k) * h + e.y as usize) * w + e.x as usize] = 1;
                }
            }
        }
    }
    out
}


/// Brute-force COCO evaluation. For every prefix of the score-sorted
/// detections, the greedy matching is redone from scratch; AP is the mean
/// over 101 recall points of the best precision among prefixes reaching
/// that recall. Returns `(mAP, mAP@0.5)`.
pub fn map_oracle(dets: &[Detection], gts: &[GroundTruth]) -> (f64, f64) {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return (0.0, 0.0);
    }
    let (mut total, mut total50) = (0.0, 0.0);
    for &c in &classes {
        let mut cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        cd.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        let mut sum_ap = 0.0;
        for ti in 0..10 {
            let thr = (50 + 5 * ti) as f64 / 100.0;
            let mut pr = Vec::new();
            for k in 1..=cd.len() {
                let mut used = vec![false; cg.len()];
                let mut tp = 0usize;
                for d in &cd[..k] {
                    let mut pick: Option<(usize, f64)> = None;
                    for (g, gt) in cg.iter().enumerate() {
                        if used[g] || gt.image_id != d.image_id {
                            continue;
                        }
                        let v = iou(&d.bbox, &gt.bbox);
                        if v >= thr && pick.is_none_or(|(_, best)| v > best) {
                            pick = Some((g, v));
                        }
                    }
                    if let Some((g, _)) = pick {
                        used[g] = true;
                        tp += 1;
                    }
                }
                pr.push((tp as f64 / k as f64, tp as f64 / cg.len() as f64));
            }
            let mut ap = 0.0;
            for r in 0..=100 {
                let target = r as f64 / 100.0;
                let best = pr
                    .iter()
                    .filter(|(_, rec)| *rec >= target - 1e-12)
                    .map(|(p, _)| *p)
                    .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
                if let Some(p) = best {
                    ap += p;
                }
            }
            let ap = ap / 101.0;
            sum_ap += ap;
            if ti == 0 {
                total50 += ap;
            }
        }
        total += sum_ap / 10.0;
    }
    let n = classes.len() as f64;
    (total / n, total50 / n)
}
