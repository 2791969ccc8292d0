//! Synthetic tasks: moving bars (direction classification) and moving
//! squares (two-class detection), plus the encoded dataset containers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::detection::{iou, BoxF, GtBox};
use crate::encoding::{encode_voxel_cube, resize_nearest, EncoderConfig, VoxelCube};
use crate::event_io::{generate_synthetic_scene, Contrast, EventStream, NoiseModel, ObjectShape, SyntheticObject, SyntheticSceneSpec};

#[derive(Debug, Clone, Default)]
pub struct ClassDataset {
    pub cubes: Vec<VoxelCube>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ClassDataset {
    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.cubes.truncate(n);
        self.labels.truncate(n);
    }
}

#[derive(Debug, Clone, Default)]
pub struct DetDataset {
    pub cubes: Vec<VoxelCube>,
    /// Normalised ground truth per sample.
    pub boxes: Vec<Vec<GtBox>>,
    pub num_classes: usize,
    /// Pixel size used to scale boxes for evaluation: `(width, height)`.
    pub image_size: (f64, f64),
}

impl DetDataset {
    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.cubes.truncate(n);
        self.boxes.truncate(n);
    }
}

/// Encodes a stream into the configured grid, resampling when the sensor
/// size differs.
pub fn encode_to(stream: &EventStream, enc: &EncoderConfig) -> Result<VoxelCube, PipelineError> {
    let native = EncoderConfig {
        height: stream.height as usize,
        width: stream.width as usize,
        ..*enc
    };
    let cube = encode_voxel_cube(stream, &native)?;
    Ok(if (native.height, native.width) == (enc.height, enc.width) {
        cube
    } else {
        resize_nearest(&cube, enc.height, enc.width)
    })
}

fn random_contrast(rng: &mut ChaCha8Rng) -> Contrast {
    if rng.gen_bool(0.5) {
        Contrast::Bright
    } else {
        Contrast::Dark
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarTaskConfig {
    pub size: u32,
    pub duration_us: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub min_width: u32,
    pub max_width: u32,
    pub min_height: u32,
    pub noise_hz: f64,
    pub seed: u64,
}

impl Default for BarTaskConfig {
    fn default() -> Self {
        Self {
            size: 64,
            duration_us: 100_000,
            train_samples: 512,
            test_samples: 256,
            min_width: 4,
            max_width: 10,
            min_height: 16,
            noise_hz: 1.0,
            seed: 7,
        }
    }
}

/// One bar sweeping horizontally over at least half the free width.
/// Label 0: moving right, 1: moving left. Contrast is random, so the
/// time-integrated event footprint alone does not reveal the direction.
pub fn bar_scene(rng: &mut ChaCha8Rng, cfg: &BarTaskConfig) -> Result<(EventStream, usize), PipelineError> {
    let size = cfg.size as f64;
    let label = rng.gen_range(0..2usize);
    let w = rng.gen_range(cfg.min_width..=cfg.max_width) as f64;
    let h = rng.gen_range(cfg.min_height..=cfg.size) as f64;
    let y = rng.gen_range(0.0..=(size - h));
    // Random sweep length and start, so the end points of the footprint do
    // not give the direction away.
    let room = size - w;
    let travel = rng.gen_range(room / 2.0..=room);
    let lo = rng.gen_range(0.0..=(room - travel));
    let speed = travel / (cfg.duration_us as f64 * 1e-6);
    let (x, vx) = if label == 0 { (lo, speed) } else { (lo + travel, -speed) };
    let obj = SyntheticObject {
        shape: ObjectShape::Rectangle { w, h },
        x,
        y,
        vx,
        vy: 0.0,
        class_id: label as u32,
        contrast: random_contrast(rng),
    };
    let mut spec = SyntheticSceneSpec::new(cfg.size, cfg.size, cfg.duration_us, vec![obj]);
    spec.noise = NoiseModel { rate_hz: cfg.noise_hz };
    spec.annotation_period_us = 0;
    spec.seed = rng.gen();
    let (stream, _) = generate_synthetic_scene(&spec)?;
    Ok((stream, label))
}

/// Train and test splits of the bar task, encoded with `enc`.
pub fn bar_task(cfg: &BarTaskConfig, enc: &EncoderConfig) -> Result<(ClassDataset, ClassDataset), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |n: usize| -> Result<ClassDataset, PipelineError> {
        let mut ds = ClassDataset {
            num_classes: 2,
            ..Default::default()
        };
        for _ in 0..n {
            let (stream, label) = bar_scene(&mut rng, cfg)?;
            ds.cubes.push(encode_to(&stream, enc)?);
            ds.labels.push(label);
        }
        Ok(ds)
    };
    let train = make(cfg.train_samples)?;
    let test = make(cfg.test_samples)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SquaresTaskConfig {
    pub size: u32,
    pub duration_us: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub max_objects: usize,
    /// Side length per class, pixels.
    pub class_sizes: Vec<f64>,
    /// Largest displacement over the sample, pixels.
    pub max_shift: f64,
    pub noise_hz: f64,
    pub seed: u64,
}

impl Default for SquaresTaskConfig {
    fn default() -> Self {
        Self {
            size: 64,
            duration_us: 100_000,
            train_samples: 384,
            test_samples: 128,
            max_objects: 3,
            class_sizes: vec![12.0, 24.0],
            max_shift: 8.0,
            noise_hz: 1.0,
            seed: 11,
        }
    }
}

/// Squares moving in straight lines; boxes are their positions at the end
/// of the sample. Squares overlap little (IoU < 0.1 at both ends).
pub fn squares_scene(rng: &mut ChaCha8Rng, cfg: &SquaresTaskConfig) -> Result<(EventStream, Vec<GtBox>), PipelineError> {
    let size = cfg.size as f64;
    let secs = cfg.duration_us as f64 * 1e-6;
    let count = rng.gen_range(1..=cfg.max_objects.max(1));
    let mut objects: Vec<SyntheticObject> = Vec::new();
    let mut ends: Vec<BoxF> = Vec::new();
    let mut starts: Vec<BoxF> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let class = rng.gen_range(0..cfg.class_sizes.len());
        let s = cfg.class_sizes[class];
        let x0 = rng.gen_range(0.0..=size - s);
        let y0 = rng.gen_range(0.0..=size - s);
        let x1 = (x0 + rng.gen_range(-cfg.max_shift..=cfg.max_shift)).clamp(0.0, size - s);
        let y1 = (y0 + rng.gen_range(-cfg.max_shift..=cfg.max_shift)).clamp(0.0, size - s);
        let a = BoxF::new(x0, y0, s, s);
        let b = BoxF::new(x1, y1, s, s);
        if starts.iter().any(|o| iou(o, &a) > 0.1) || ends.iter().any(|o| iou(o, &b) > 0.1) {
            continue;
        }
        starts.push(a);
        ends.push(b);
        objects.push(SyntheticObject {
            shape: ObjectShape::Rectangle { w: s, h: s },
            x: x0,
            y: y0,
            vx: (x1 - x0) / secs,
            vy: (y1 - y0) / secs,
            class_id: class as u32,
            contrast: random_contrast(rng),
        });
    }
    let mut spec = SyntheticSceneSpec::new(cfg.size, cfg.size, cfg.duration_us, objects);
    spec.noise = NoiseModel { rate_hz: cfg.noise_hz };
    spec.annotation_period_us = cfg.duration_us;
    spec.seed = rng.gen();
    let (stream, boxes) = generate_synthetic_scene(&spec)?;
    let gts = boxes
        .iter()
        .map(|b| GtBox {
            bbox: BoxF::new(b.x / size, b.y / size, b.w / size, b.h / size),
            class_id: b.class_id as usize,
        })
        .collect();
    Ok((stream, gts))
}

pub fn squares_task(cfg: &SquaresTaskConfig, enc: &EncoderConfig) -> Result<(DetDataset, DetDataset), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.size as f64;
    let mut make = |n: usize| -> Result<DetDataset, PipelineError> {
        let mut ds = DetDataset {
            num_classes: cfg.class_sizes.len(),
            image_size: (size, size),
            ..Default::default()
        };
        for _ in 0..n {
            let (stream, gts) = squares_scene(&mut rng, cfg)?;
            ds.cubes.push(encode_to(&stream, enc)?);
            ds.boxes.push(gts);
        }
        Ok(ds)
    };
    let train = make(cfg.train_samples)?;
    let test = make(cfg.test_samples)?;
    Ok((train, test))
}
