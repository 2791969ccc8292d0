//! Default boxes per feature-map cell.

use serde::{Deserialize, Serialize};

use super::{BoxF, DetectionError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn to_box(&self) -> BoxF {
        BoxF::from_center(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// `(height, width)` of each feature map, in head order.
    pub feature_maps: Vec<(usize, usize)>,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Aspect ratios `w/h` per map; a single entry is reused for all maps.
    pub aspect_ratios: Vec<Vec<f64>>,
}

impl AnchorConfig {
    pub fn new(feature_maps: Vec<(usize, usize)>) -> Self {
        Self {
            feature_maps,
            scale_min: 0.5,
            scale_max: 0.8,
            aspect_ratios: vec![vec![1.0, 2.0, 0.5]],
        }
    }

    pub fn ratios(&self, k: usize) -> &[f64] {
        if self.aspect_ratios.len() == 1 {
            &self.aspect_ratios[0]
        } else {
            &self.aspect_ratios[k]
        }
    }

    /// Anchors per cell for map `k`: one per ratio plus the extra square one.
    pub fn anchors_per_cell(&self, k: usize) -> usize {
        self.ratios(k).len() + 1
    }

    pub fn total_anchors(&self) -> usize {
        self.feature_maps
            .iter()
            .enumerate()
            .map(|(k, (h, w))| h * w * self.anchors_per_cell(k))
            .sum()
    }

    fn validate(&self) -> Result<(), DetectionError> {
        let m = self.feature_maps.len();
        if m == 0 {
            return Err(DetectionError::Config("no feature maps".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(DetectionError::Config(format!("scales {}..{}", self.scale_min, self.scale_max)));
        }
        if self.aspect_ratios.len() != 1 && self.aspect_ratios.len() != m {
            return Err(DetectionError::Config("aspect ratio lists do not match feature maps".into()));
        }
        if self.aspect_ratios.iter().flatten().any(|r| !(*r > 0.0)) {
            return Err(DetectionError::Config("aspect ratios must be positive".into()));
        }
        Ok(())
    }
}

/// `m + 1` scales: linear from `scale_min` to `scale_max` over the maps,
/// plus one step beyond the last map (capped at 1) for its extra anchor.
pub fn anchor_scales(cfg: &AnchorConfig) -> Vec<f64> {
    let m = cfg.feature_maps.len();
    let step = if m > 1 {
        (cfg.scale_max - cfg.scale_min) / (m - 1) as f64
    } else {
        cfg.scale_max - cfg.scale_min
    };
    let mut s: Vec<f64> = (0..m).map(|k| cfg.scale_min + step * k as f64).collect();
    s.push((cfg.scale_min + step * m as f64).min(1.0));
    s
}

/// Anchors ordered by map, then cell (row-major), then ratio, with the
/// extra square anchor last in each cell.
pub fn generate_anchors(cfg: &AnchorConfig) -> Result<Vec<Anchor>, DetectionError> {
    cfg.validate()?;
    let scales = anchor_scales(cfg);
    let mut out = Vec::with_capacity(cfg.total_anchors());
    for (k, &(fh, fw)) in cfg.feature_maps.iter().enumerate() {
        let s = scales[k];
        let extra = (s * scales[k + 1]).sqrt();
        for y in 0..fh {
            for x in 0..fw {
                let cx = (x as f64 + 0.5) / fw as f64;
                let cy = (y as f64 + 0.5) / fh as f64;
                for &r in cfg.ratios(k) {
                    out.push(Anchor {
                        cx,
                        cy,
                        w: (s * r.sqrt()).min(1.0),
                        h: (s / r.sqrt()).min(1.0),
                    });
                }
                out.push(Anchor {
                    cx,
                    cy,
                    w: extra.min(1.0),
                    h: extra.min(1.0),
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_maps_interpolate() {
        let cfg = AnchorConfig::new(vec![(4, 4), (2, 2), (1, 1), (1, 1)]);
        let s = anchor_scales(&cfg);
        for (a, b) in s.iter().zip([0.5, 0.6, 0.7, 0.8]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn count_and_square() {
        let cfg = AnchorConfig::new(vec![(3, 2), (1, 1)]);
        let a = generate_anchors(&cfg).unwrap();
        assert_eq!(a.len(), (6 + 1) * 4);
        assert_eq!(a[0].w, a[0].h);
        assert!(a.iter().all(|x| x.w > 0.0 && x.w <= 1.0 && x.h > 0.0 && x.h <= 1.0));
    }

    #[test]
    fn single_map_uses_min_scale() {
        let cfg = AnchorConfig::new(vec![(1, 1)]);
        assert_eq!(anchor_scales(&cfg)[0], 0.5);
    }
}
