//! Detection dumps: `image_id class score x y w h` lines and COCO JSON.

use super::{BoxF, Detection, DetectionError};

pub fn write_detections_text(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        s.push_str(&format!(
            "{} {} {:.6} {:.3} {:.3} {:.3} {:.3}\n",
            d.image_id, d.class_id, d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h
        ));
    }
    s
}

pub fn parse_detections_text(text: &str) -> Result<Vec<Detection>, DetectionError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let err = |d: &str| DetectionError::Parse {
            line: i + 1,
            detail: d.to_string(),
        };
        if parts.len() != 7 {
            return Err(err("expected 7 fields"));
        }
        let f = |j: usize| parts[j].parse::<f64>().map_err(|e| err(&e.to_string()));
        out.push(Detection {
            image_id: parts[0].parse().map_err(|_| err("bad image id"))?,
            class_id: parts[1].parse().map_err(|_| err("bad class id"))?,
            score: f(2)?,
            bbox: BoxF::new(f(3)?, f(4)?, f(5)?, f(6)?),
        });
    }
    Ok(out)
}

/// COCO results format; category ids are 1-based.
pub fn write_coco_json(dets: &[Detection]) -> String {
    let rows: Vec<serde_json::Value> = dets
        .iter()
        .map(|d| {
            serde_json::json!({
                "image_id": d.image_id,
                "category_id": d.class_id + 1,
                "bbox": [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h],
                "score": d.score,
            })
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("json")
}
