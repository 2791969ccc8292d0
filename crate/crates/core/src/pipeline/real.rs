//! Loaders for the recorded automotive datasets, when available on disk.
//!
//! NCARS: `<dir>/<split>/{cars,background}/*.dat`, one 100 ms sample per file.
//! GEN1: `<dir>/<split>/*_td.dat` with matching `*_bbox.npy` annotations.

use std::fs;
use std::path::{Path, PathBuf};

use super::tasks::{encode_to, ClassDataset, DetDataset};
use super::PipelineError;
use crate::detection::{BoxF, GtBox};
use crate::encoding::EncoderConfig;
use crate::event_io::{parse_dat, parse_npy_boxes, slice_time, Event, EventStream, HeaderMode, Recording};

fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    out.sort();
    Ok(out)
}

fn read_dat(path: &Path) -> Result<EventStream, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    Ok(parse_dat(&bytes, HeaderMode::Lenient)?.stream)
}

/// Shifts timestamps to start at zero, drops events past `duration_us` and
/// shrinks the sensor to the bounding extent of the events.
fn normalise_sample(stream: &EventStream, duration_us: u64) -> Result<EventStream, PipelineError> {
    let t0 = stream.events.first().map_or(0, |e| e.t);
    let events: Vec<Event> = stream
        .events
        .iter()
        .filter(|e| e.t - t0 < duration_us)
        .map(|e| Event { t: e.t - t0, ..*e })
        .collect();
    let w = events.iter().map(|e| e.x as u32 + 1).max().unwrap_or(1);
    let h = events.iter().map(|e| e.y as u32 + 1).max().unwrap_or(1);
    Ok(EventStream::new(events, w, h)?)
}

pub fn load_ncars(dir: &Path, split: &str, enc: &EncoderConfig, limit: Option<usize>) -> Result<ClassDataset, PipelineError> {
    let mut ds = ClassDataset {
        num_classes: 2,
        ..Default::default()
    };
    let mut files = Vec::new();
    for (label, class) in [(0usize, "background"), (1, "cars")] {
        for f in files_with_suffix(&dir.join(split).join(class), ".dat")? {
            files.push((f, label));
        }
    }
    // Interleave classes so that a limit keeps both.
    files.sort_by(|a, b| a.0.file_name().cmp(&b.0.file_name()).then(a.1.cmp(&b.1)));
    for (f, label) in files.into_iter().take(limit.unwrap_or(usize::MAX)) {
        let s = normalise_sample(&read_dat(&f)?, enc.duration_us)?;
        ds.cubes.push(encode_to(&s, enc)?);
        ds.labels.push(label);
    }
    Ok(ds)
}

pub fn load_gen1_recordings(dir: &Path, split: &str, limit: Option<usize>) -> Result<Vec<Recording>, PipelineError> {
    let mut out = Vec::new();
    for td in files_with_suffix(&dir.join(split), "_td.dat")?.into_iter().take(limit.unwrap_or(usize::MAX)) {
        let stem = td.to_string_lossy().trim_end_matches("_td.dat").to_string();
        let bbox = PathBuf::from(format!("{stem}_bbox.npy"));
        let bytes = fs::read(&bbox).map_err(|e| PipelineError::Io(format!("{}: {e}", bbox.display())))?;
        out.push(Recording {
            stream: read_dat(&td)?,
            boxes: parse_npy_boxes(&bytes)?,
        });
    }
    Ok(out)
}

/// One detection sample per distinct annotation time at least one window
/// after the recording start: the preceding window of events and the boxes
/// at that time.
pub fn gen1_detection_samples(recs: &[Recording], enc: &EncoderConfig, limit: Option<usize>) -> Result<DetDataset, PipelineError> {
    let mut ds = DetDataset {
        num_classes: 2,
        ..Default::default()
    };
    let cap = limit.unwrap_or(usize::MAX);
    'outer: for rec in recs {
        let (w, h) = (rec.stream.width as f64, rec.stream.height as f64);
        ds.image_size = (w, h);
        let mut times: Vec<u64> = rec.boxes.iter().map(|b| b.t).filter(|&t| t >= enc.duration_us).collect();
        times.dedup();
        for t in times {
            if ds.len() >= cap {
                break 'outer;
            }
            let window = slice_time(&rec.stream, t - enc.duration_us, t);
            let cube = encode_to(&window, enc)?;
            let gts = rec
                .boxes
                .iter()
                .filter(|b| b.t == t)
                .filter_map(|b| b.clipped(rec.stream.width, rec.stream.height))
                .map(|b| GtBox {
                    bbox: BoxF::new(b.x / w, b.y / h, b.w / w, b.h / h),
                    class_id: b.class_id as usize,
                })
                .collect();
            ds.cubes.push(cube);
            ds.boxes.push(gts);
        }
    }
    Ok(ds)
}
