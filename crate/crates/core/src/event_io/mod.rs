//! Event streams, box annotations and the file formats that carry them.

mod canonical;
mod dat;
mod dataset;
mod npy;
mod synth;

pub use canonical::{parse_evb, parse_evt, read_events, write_evb, write_events, write_evt};
pub use dat::{parse_dat, write_dat, DatFile, HeaderMode, DEFAULT_GEN1_HEIGHT, DEFAULT_GEN1_WIDTH};
pub use dataset::{build_classification_dataset, ClassificationSample, DatasetConfig, Recording};
pub use npy::{parse_npy_boxes, write_npy_boxes};
pub use synth::{generate_synthetic_scene, Contrast, NoiseModel, ObjectShape, SyntheticObject, SyntheticSceneSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventError {
    #[error("truncated record at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("event {index} at (x={x}, y={y}) lies outside the {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("event {index} has timestamp {t} earlier than its predecessor")]
    Unsorted { index: usize, t: u64 },
    #[error("invalid polarity {p} in event {index}")]
    Polarity { index: usize, p: u8 },
    #[error("header: {0}")]
    Header(String),
    #[error("not an NPY file")]
    NotNpy,
    #[error("NPY: {0}")]
    Npy(String),
    #[error("NPY: missing required field '{0}'")]
    MissingField(String),
    #[error("parse error on line {line}: {detail}")]
    Text { line: usize, detail: String },
    #[error("zero-area crop {w}x{h}")]
    EmptyCrop { w: u32, h: u32 },
    #[error("crop ({x0},{y0},{w},{h}) does not intersect the {width}x{height} sensor")]
    CropOutside {
        x0: u32,
        y0: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("synthetic scene: {0}")]
    Scene(String),
    #[error("unsupported file extension: {0}")]
    Extension(String),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for EventError {
    fn from(e: std::io::Error) -> Self {
        EventError::Io(e.to_string())
    }
}

/// A single brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds since the start of the recording.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// 0 = OFF (decrease), 1 = ON (increase).
    pub p: u8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: u8) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-ordered events from a sensor of known size.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u32,
    pub height: u32,
}

impl EventStream {
    /// Checks bounds, polarity and ordering.
    pub fn new(events: Vec<Event>, width: u32, height: u32) -> Result<Self, EventError> {
        let s = Self { events, width, height };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), EventError> {
        let mut prev = 0u64;
        for (index, e) in self.events.iter().enumerate() {
            if u32::from(e.x) >= self.width || u32::from(e.y) >= self.height {
                return Err(EventError::OutOfBounds {
                    index,
                    x: e.x.into(),
                    y: e.y.into(),
                    width: self.width,
                    height: self.height,
                });
            }
            if e.p > 1 {
                return Err(EventError::Polarity { index, p: e.p });
            }
            if e.t < prev {
                return Err(EventError::Unsorted { index, t: e.t });
            }
            prev = e.t;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Events with `t0 <= t < t1`, re-based to `t - t0`. Empty when `t0 >= t1`.
pub fn slice_time(stream: &EventStream, t0: u64, t1: u64) -> EventStream {
    let mut out = EventStream::empty(stream.width, stream.height);
    if t0 >= t1 {
        return out;
    }
    let lo = stream.events.partition_point(|e| e.t < t0);
    let hi = stream.events.partition_point(|e| e.t < t1);
    out.events = stream.events[lo..hi]
        .iter()
        .map(|e| Event { t: e.t - t0, ..*e })
        .collect();
    out
}

/// Events inside the rectangle, re-based to its origin. The output sensor
/// is `w × h`.
pub fn crop_spatial(stream: &EventStream, x0: u32, y0: u32, w: u32, h: u32) -> Result<EventStream, EventError> {
    if w == 0 || h == 0 {
        return Err(EventError::EmptyCrop { w, h });
    }
    if x0 >= stream.width || y0 >= stream.height {
        return Err(EventError::CropOutside {
            x0,
            y0,
            w,
            h,
            width: stream.width,
            height: stream.height,
        });
    }
    let (x1, y1) = (x0 as u64 + w as u64, y0 as u64 + h as u64);
    let events = stream
        .events
        .iter()
        .filter(|e| {
            let (x, y) = (u64::from(e.x), u64::from(e.y));
            x >= x0 as u64 && x < x1 && y >= y0 as u64 && y < y1
        })
        .map(|e| Event {
            x: e.x - x0 as u16,
            y: e.y - y0 as u16,
            ..*e
        })
        .collect();
    Ok(EventStream {
        events,
        width: w,
        height: h,
    })
}

/// Mirrors the stream left to right: `x ← width − 1 − x`.
pub fn flip_horizontal(stream: &EventStream) -> EventStream {
    let w = stream.width as u16;
    EventStream {
        events: stream.events.iter().map(|e| Event { x: w - 1 - e.x, ..*e }).collect(),
        width: stream.width,
        height: stream.height,
    }
}

/// A labelled box; `(x, y)` is the top-left corner in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub t: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
    pub track_id: u32,
    pub confidence: f64,
}

impl BoxAnnotation {
    pub fn diagonal(&self) -> f64 {
        (self.w * self.w + self.h * self.h).sqrt()
    }

    /// Clips to `[0, width] × [0, height]`; `None` when nothing is left.
    pub fn clipped(&self, width: u32, height: u32) -> Option<Self> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then_some(Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            ..*self
        })
    }
}

/// Keeps boxes whose diagonal is at least `min_diagonal` pixels.
pub fn filter_small_boxes(boxes: &[BoxAnnotation], min_diagonal: f64) -> Vec<BoxAnnotation> {
    boxes.iter().filter(|b| b.diagonal() >= min_diagonal).copied().collect()
}

/// Diagonal threshold used when evaluating detection.
pub const MIN_BOX_DIAGONAL: f64 = 30.0;
