//! Deterministic synthetic scenes: rigid objects moving over a flat
//! background, rendered at a fixed micro-step. A pixel fires when its
//! intensity changes by at least the threshold between two micro-steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BoxAnnotation, Event, EventError, EventStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    /// Brighter than the background: ON events at the leading edge.
    #[default]
    Bright,
    /// Darker than the background: OFF events at the leading edge.
    Dark,
}

impl Contrast {
    fn level(self) -> i8 {
        match self {
            Contrast::Bright => 1,
            Contrast::Dark => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObjectShape {
    Rectangle { w: f64, h: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticObject {
    pub shape: ObjectShape,
    /// Top-left corner at t = 0, pixels.
    pub x: f64,
    pub y: f64,
    /// Velocity in pixels per second.
    pub vx: f64,
    pub vy: f64,
    pub class_id: u32,
    #[serde(default)]
    pub contrast: Contrast,
}

impl SyntheticObject {
    fn size(&self) -> (f64, f64) {
        match self.shape {
            ObjectShape::Rectangle { w, h } => (w, h),
        }
    }

    fn position(&self, t_us: u64) -> (f64, f64) {
        let s = t_us as f64 * 1e-6;
        (self.x + self.vx * s, self.y + self.vy * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseModel {
    /// Spurious events per pixel per second, random polarity.
    pub rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub width: u32,
    pub height: u32,
    pub duration_us: u64,
    #[serde(default = "default_step")]
    pub step_us: u64,
    #[serde(default = "default_annotation_period")]
    pub annotation_period_us: u64,
    pub objects: Vec<SyntheticObject>,
    /// Minimum absolute intensity change that emits an event.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub seed: u64,
}

fn default_step() -> u64 {
    1000
}

fn default_annotation_period() -> u64 {
    50_000
}

fn default_threshold() -> f64 {
    0.5
}

impl SyntheticSceneSpec {
    pub fn new(width: u32, height: u32, duration_us: u64, objects: Vec<SyntheticObject>) -> Self {
        Self {
            width,
            height,
            duration_us,
            step_us: default_step(),
            annotation_period_us: default_annotation_period(),
            objects,
            threshold: default_threshold(),
            noise: NoiseModel::default(),
            seed: 0,
        }
    }
}

/// Pixel `(i, j)` is covered when its centre lies inside the rectangle.
fn render(spec: &SyntheticSceneSpec, t_us: u64, out: &mut [i8]) {
    out.iter_mut().for_each(|v| *v = 0);
    let (w, h) = (spec.width as i64, spec.height as i64);
    for obj in &spec.objects {
        let (ow, oh) = obj.size();
        let (x, y) = obj.position(t_us);
        // Columns i with x <= i + 0.5 < x + ow.
        let i0 = ((x - 0.5).ceil() as i64).max(0);
        let i1 = ((x + ow - 0.5).ceil() as i64).min(w);
        let j0 = ((y - 0.5).ceil() as i64).max(0);
        let j1 = ((y + oh - 0.5).ceil() as i64).min(h);
        for j in j0..j1 {
            for i in i0..i1 {
                out[(j * w + i) as usize] = obj.contrast.level();
            }
        }
    }
}

/// Simulates the scene. Events of micro-step `k ≥ 1` carry `t = k·step_us`
/// and only steps with `t < duration_us` are simulated. Boxes are emitted
/// at every multiple of the annotation period up to the duration, clipped
/// to the sensor; `track_id` is the object index.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<(EventStream, Vec<BoxAnnotation>), EventError> {
    if spec.width == 0 || spec.height == 0 || spec.step_us == 0 {
        return Err(EventError::Scene("sensor size and step must be positive".into()));
    }
    if spec.width > u16::MAX as u32 || spec.height > u16::MAX as u32 {
        return Err(EventError::Scene("sensor too large".into()));
    }
    for (i, obj) in spec.objects.iter().enumerate() {
        let (w, h) = obj.size();
        if !(w > 0.0 && h > 0.0) {
            return Err(EventError::Scene(format!("object {i} has non-positive size")));
        }
        if obj.x < 0.0 || obj.y < 0.0 || obj.x + w > spec.width as f64 || obj.y + h > spec.height as f64 {
            return Err(EventError::Scene(format!("object {i} starts outside the sensor")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise_p = (spec.noise.rate_hz * spec.step_us as f64 * 1e-6).clamp(0.0, 1.0);
    let n = (spec.width * spec.height) as usize;
    let mut prev = vec![0i8; n];
    let mut cur = vec![0i8; n];
    render(spec, 0, &mut prev);
    let mut events = Vec::new();
    let mut k = 1u64;
    while k * spec.step_us < spec.duration_us {
        let t = k * spec.step_us;
        render(spec, t, &mut cur);
        for idx in 0..n {
            let delta = f64::from(cur[idx] - prev[idx]);
            let (x, y) = ((idx as u32 % spec.width) as u16, (idx as u32 / spec.width) as u16);
            if delta != 0.0 && delta.abs() >= spec.threshold {
                events.push(Event::new(t, x, y, u8::from(delta > 0.0)));
            } else if noise_p > 0.0 && rng.gen_bool(noise_p) {
                events.push(Event::new(t, x, y, u8::from(rng.gen_bool(0.5))));
            }
        }
        std::mem::swap(&mut prev, &mut cur);
        k += 1;
    }
    let mut boxes = Vec::new();
    if spec.annotation_period_us > 0 {
        let mut t = spec.annotation_period_us;
        while t <= spec.duration_us {
            for (track, obj) in spec.objects.iter().enumerate() {
                let (w, h) = obj.size();
                let (x, y) = obj.position(t);
                let b = BoxAnnotation {
                    t,
                    x,
                    y,
                    w,
                    h,
                    class_id: obj.class_id,
                    track_id: track as u32,
                    confidence: 1.0,
                };
                boxes.extend(b.clipped(spec.width, spec.height));
            }
            t += spec.annotation_period_us;
        }
    }
    let stream = EventStream::new(events, spec.width, spec.height)?;
    Ok((stream, boxes))
}
