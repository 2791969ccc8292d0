//! Classification samples cut out of detection recordings: the events of
//! a fixed window preceding each box, cropped to the box.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{crop_spatial, flip_horizontal, slice_time, BoxAnnotation, Event, EventError, EventStream};

/// One recording with its box annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub stream: EventStream,
    pub boxes: Vec<BoxAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationSample {
    pub stream: EventStream,
    pub label: u32,
    /// Nominal window length; events lie in `[0, duration)`.
    pub duration: u64,
    /// The box came earlier than one full window after the recording
    /// start; the available prefix is aligned to the end of the window.
    pub short_window: bool,
    /// Produced by horizontal flipping during rebalancing.
    pub flipped: bool,
    pub recording: usize,
    pub box_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub window_us: u64,
    pub rebalance: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window_us: 100_000,
            rebalance: true,
            seed: 0,
        }
    }
}

fn crop_rect(b: &BoxAnnotation, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    let c = b.clipped(width, height)?;
    let x0 = c.x.floor() as u32;
    let y0 = c.y.floor() as u32;
    let x1 = ((c.x + c.w).ceil() as u32).min(width);
    let y1 = ((c.y + c.h).ceil() as u32).min(height);
    (x1 > x0 && y1 > y0).then_some((x0, y0, x1 - x0, y1 - y0))
}

/// Builds one sample per box. Boxes lying entirely outside the sensor are
/// skipped. With `rebalance`, every class is brought to the mean class
/// count (rounded up): larger classes are randomly undersampled and
/// smaller ones are topped up with horizontally flipped copies.
pub fn build_classification_dataset(recordings: &[Recording], cfg: &DatasetConfig) -> Result<Vec<ClassificationSample>, EventError> {
    let mut samples = Vec::new();
    for (ri, rec) in recordings.iter().enumerate() {
        for (bi, b) in rec.boxes.iter().enumerate() {
            let Some((x0, y0, w, h)) = crop_rect(b, rec.stream.width, rec.stream.height) else {
                continue;
            };
            let t0 = b.t.saturating_sub(cfg.window_us);
            let short = b.t < cfg.window_us;
            let sliced = slice_time(&rec.stream, t0, b.t);
            let mut stream = crop_spatial(&sliced, x0, y0, w, h)?;
            if short {
                let shift = cfg.window_us - b.t;
                stream.events = stream.events.iter().map(|e| Event { t: e.t + shift, ..*e }).collect();
            }
            samples.push(ClassificationSample {
                stream,
                label: b.class_id,
                duration: cfg.window_us,
                short_window: short,
                flipped: false,
                recording: ri,
                box_index: bi,
            });
        }
    }
    if cfg.rebalance {
        samples = rebalance(samples, cfg.seed);
    }
    Ok(samples)
}

fn rebalance(samples: Vec<ClassificationSample>, seed: u64) -> Vec<ClassificationSample> {
    let mut by_class: BTreeMap<u32, Vec<ClassificationSample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.label).or_default().push(s);
    }
    if by_class.len() < 2 {
        return by_class.into_values().flatten().collect();
    }
    let total: usize = by_class.values().map(Vec::len).sum();
    let target = total.div_ceil(by_class.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut group) in by_class {
        if group.len() > target {
            let mut idx: Vec<usize> = (0..group.len()).collect();
            idx.shuffle(&mut rng);
            let mut keep: Vec<usize> = idx[..target].to_vec();
            keep.sort_unstable();
            out.extend(keep.into_iter().map(|i| group[i].clone()));
        } else {
            let originals = group.len();
            let mut order: Vec<usize> = (0..originals).collect();
            order.shuffle(&mut rng);
            for k in 0..target - originals {
                let src = &group[order[k % originals]];
                group.push(ClassificationSample {
                    stream: flip_horizontal(&src.stream),
                    flipped: true,
                    ..src.clone()
                });
            }
            out.extend(group);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(t: u64, class_id: u32) -> BoxAnnotation {
        BoxAnnotation {
            t,
            x: 2.0,
            y: 2.0,
            w: 4.0,
            h: 4.0,
            class_id,
            track_id: 0,
            confidence: 1.0,
        }
    }

    #[test]
    fn window_and_crop() {
        let events = vec![
            Event::new(350_000, 3, 3, 1),
            Event::new(450_000, 3, 3, 1),
            Event::new(450_000, 9, 9, 1),
            Event::new(500_000, 3, 3, 0),
        ];
        let rec = Recording {
            stream: EventStream::new(events, 16, 16).unwrap(),
            boxes: vec![bx(500_000, 0)],
        };
        let cfg = DatasetConfig {
            rebalance: false,
            ..Default::default()
        };
        let s = build_classification_dataset(&[rec], &cfg).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label, 0);
        assert_eq!(s[0].stream.events, vec![Event::new(50_000, 1, 1, 1)]);
        assert!(!s[0].short_window);
    }

    #[test]
    fn rebalance_four_to_two() {
        let rec = Recording {
            stream: EventStream::empty(16, 16),
            boxes: vec![bx(1, 0), bx(2, 0), bx(3, 0), bx(4, 0), bx(5, 1), bx(6, 1)],
        };
        let s = build_classification_dataset(std::slice::from_ref(&rec), &DatasetConfig::default()).unwrap();
        let cars = s.iter().filter(|s| s.label == 0).count();
        let peds = s.iter().filter(|s| s.label == 1).count();
        assert_eq!((cars, peds), (3, 3));
        assert_eq!(s.iter().filter(|s| s.flipped).count(), 1);
        assert!(s.iter().all(|s| s.short_window));
        let off = DatasetConfig {
            rebalance: false,
            ..Default::default()
        };
        assert_eq!(build_classification_dataset(&[rec], &off).unwrap().len(), 6);
    }
}
