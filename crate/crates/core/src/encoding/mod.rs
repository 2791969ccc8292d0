//! Binary voxel cubes: each timestep is split into micro time bins that
//! are stored as channels, one block of `n` channels per polarity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tensor;
use crate::event_io::EventStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("event {index} at t={t} lies outside [0, {duration})")]
    TimeRange { index: usize, t: u64, duration: u64 },
    #[error("event {index} at (x={x}, y={y}) lies outside the {width}x{height} grid")]
    Position {
        index: usize,
        x: u16,
        y: u16,
        width: usize,
        height: usize,
    },
    #[error("cube dump: {0}")]
    Dump(String),
    #[error("cube batch: {0}")]
    Batch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Sample length in microseconds.
    pub duration_us: u64,
    pub timesteps: usize,
    pub micro_bins: usize,
    pub height: usize,
    pub width: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncodingError> {
        let err = |m: &str| Err(EncodingError::Config(m.into()));
        if self.timesteps == 0 || self.micro_bins == 0 {
            return err("timesteps and micro_bins must be at least 1");
        }
        if self.height == 0 || self.width == 0 {
            return err("height and width must be positive");
        }
        let t = self.timesteps as u64;
        if self.duration_us == 0 || !self.duration_us.is_multiple_of(t) {
            return err("duration must be a positive multiple of timesteps");
        }
        if !(self.duration_us / t).is_multiple_of(self.micro_bins as u64) {
            return err("timestep length must be a multiple of micro_bins");
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        2 * self.micro_bins
    }

    /// Δt in microseconds.
    pub fn timestep_us(&self) -> u64 {
        self.duration_us / self.timesteps as u64
    }

    pub fn micro_bin_us(&self) -> u64 {
        self.timestep_us() / self.micro_bins as u64
    }

    /// `(c, k)` for an event at time `t` with polarity `p`.
    pub fn cell(&self, t: u64, p: u8) -> (usize, usize) {
        let dt = self.timestep_us();
        let k = (t / dt) as usize;
        let b = ((t - k as u64 * dt) / self.micro_bin_us()) as usize;
        (p as usize * self.micro_bins + b, k)
    }
}

/// Binary `(C, T, H, W)` tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelCube {
    pub channels: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl VoxelCube {
    pub fn zeros(channels: usize, timesteps: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            timesteps,
            height,
            width,
            data: vec![0; channels * timesteps * height * width],
        }
    }

    fn index(&self, c: usize, t: usize, y: usize, x: usize) -> usize {
        ((c * self.timesteps + t) * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, t: usize, y: usize, x: usize) -> u8 {
        self.data[self.index(c, t, y, x)]
    }

    pub fn set(&mut self, c: usize, t: usize, y: usize, x: usize) {
        let i = self.index(c, t, y, x);
        self.data[i] = 1;
    }

    /// Values in CTHW order.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v <= 1)
    }

    /// The `(C, H, W)` frame of timestep `t`, written into `out`.
    pub fn write_frame(&self, t: usize, out: &mut [f32]) {
        let hw = self.height * self.width;
        for c in 0..self.channels {
            let src = self.index(c, t, 0, 0);
            for (o, v) in out[c * hw..(c + 1) * hw].iter_mut().zip(&self.data[src..src + hw]) {
                *o = f32::from(*v);
            }
        }
    }

    /// Packed dump: ASCII header `VXC C T H W\n`, then CTHW bits, least
    /// significant bit first within each byte.
    pub fn to_dump(&self) -> Vec<u8> {
        let mut out = format!("VXC {} {} {} {}\n", self.channels, self.timesteps, self.height, self.width).into_bytes();
        let mut packed = vec![0u8; self.data.len().div_ceil(8)];
        for (i, v) in self.data.iter().enumerate() {
            if *v != 0 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
        out
    }

    pub fn from_dump(bytes: &[u8]) -> Result<Self, EncodingError> {
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| EncodingError::Dump("missing header".into()))?;
        let head = std::str::from_utf8(&bytes[..nl]).map_err(|_| EncodingError::Dump("bad header".into()))?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "VXC" {
            return Err(EncodingError::Dump("expected 'VXC C T H W'".into()));
        }
        let dims: Vec<usize> = parts[1..]
            .iter()
            .map(|p| p.parse().map_err(|_| EncodingError::Dump(format!("bad dimension '{p}'"))))
            .collect::<Result<_, _>>()?;
        let mut cube = Self::zeros(dims[0], dims[1], dims[2], dims[3]);
        let packed = &bytes[nl + 1..];
        if packed.len() != cube.data.len().div_ceil(8) {
            return Err(EncodingError::Dump(format!(
                "expected {} packed bytes, found {}",
                cube.data.len().div_ceil(8),
                packed.len()
            )));
        }
        for (i, v) in cube.data.iter_mut().enumerate() {
            *v = (packed[i / 8] >> (i % 8)) & 1;
        }
        Ok(cube)
    }
}

/// Encodes a stream whose events lie in `[0, duration)` and inside the
/// `height × width` grid. Repeated events in one cell still give 1.
pub fn encode_voxel_cube(stream: &EventStream, cfg: &EncoderConfig) -> Result<VoxelCube, EncodingError> {
    cfg.validate()?;
    let mut cube = VoxelCube::zeros(cfg.channels(), cfg.timesteps, cfg.height, cfg.width);
    for (index, e) in stream.events.iter().enumerate() {
        if e.t >= cfg.duration_us {
            return Err(EncodingError::TimeRange {
                index,
                t: e.t,
                duration: cfg.duration_us,
            });
        }
        if e.x as usize >= cfg.width || e.y as usize >= cfg.height {
            return Err(EncodingError::Position {
                index,
                x: e.x,
                y: e.y,
                width: cfg.width,
                height: cfg.height,
            });
        }
        let (c, k) = cfg.cell(e.t, e.p.min(1));
        cube.set(c, k, e.y as usize, e.x as usize);
    }
    Ok(cube)
}

/// Nearest-neighbour resampling with source index `floor(i·H/H')` (the
/// convention of PyTorch's default `nearest` mode).
pub fn resize_nearest(cube: &VoxelCube, height: usize, width: usize) -> VoxelCube {
    assert!(height > 0 && width > 0, "target size must be positive");
    let rows: Vec<usize> = (0..height)
        .map(|i| ((i * cube.height) / height).min(cube.height - 1))
        .collect();
    let cols: Vec<usize> = (0..width)
        .map(|j| ((j * cube.width) / width).min(cube.width - 1))
        .collect();
    let mut out = VoxelCube::zeros(cube.channels, cube.timesteps, height, width);
    for c in 0..cube.channels {
        for t in 0..cube.timesteps {
            for (i, &si) in rows.iter().enumerate() {
                for (j, &sj) in cols.iter().enumerate() {
                    let v = cube.get(c, t, si, sj);
                    let idx = out.index(c, t, i, j);
                    out.data[idx] = v;
                }
            }
        }
    }
    out
}

/// Mirrors every plane: `x ← W − 1 − x`.
pub fn flip_cube_horizontal(cube: &VoxelCube) -> VoxelCube {
    let mut out = cube.clone();
    for row in out.data.chunks_exact_mut(cube.width) {
        row.reverse();
    }
    out
}

/// Stacks cubes into a time-major `(T·N, C, H, W)` tensor: row `t·N + i`
/// is timestep `t` of cube `i`.
pub fn cubes_to_tensor(cubes: &[&VoxelCube]) -> Result<Tensor, EncodingError> {
    let first = cubes.first().ok_or_else(|| EncodingError::Batch("empty batch".into()))?;
    let (c, t, h, w) = (first.channels, first.timesteps, first.height, first.width);
    if cubes.iter().any(|q| (q.channels, q.timesteps, q.height, q.width) != (c, t, h, w)) {
        return Err(EncodingError::Batch("cubes differ in shape".into()));
    }
    let n = cubes.len();
    let frame = c * h * w;
    let mut data = vec![0.0f32; t * n * frame];
    for step in 0..t {
        for (i, q) in cubes.iter().enumerate() {
            let off = (step * n + i) * frame;
            q.write_frame(step, &mut data[off..off + frame]);
        }
    }
    Ok(Tensor::new(vec![t * n, c, h, w], data).expect("sized above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::Event;

    fn cfg(t: usize, n: usize) -> EncoderConfig {
        EncoderConfig {
            duration_us: 100_000,
            timesteps: t,
            micro_bins: n,
            height: 4,
            width: 4,
        }
    }

    #[test]
    fn single_event_lands_in_expected_cell() {
        let s = EventStream::new(vec![Event::new(30_000, 1, 2, 1)], 4, 4).unwrap();
        let cube = encode_voxel_cube(&s, &cfg(5, 2)).unwrap();
        assert_eq!(cube.count_nonzero(), 1);
        assert_eq!(cube.get(3, 1, 2, 1), 1);
    }

    #[test]
    fn repeated_events_stay_binary() {
        let s = EventStream::new(vec![Event::new(21_000, 0, 0, 1), Event::new(29_000, 0, 0, 1)], 4, 4).unwrap();
        let cube = encode_voxel_cube(&s, &cfg(5, 2)).unwrap();
        assert_eq!(cube.count_nonzero(), 1);
        assert!(cube.is_binary());
    }

    #[test]
    fn rejects_time_at_duration() {
        let s = EventStream::new(vec![Event::new(100_000, 0, 0, 1)], 4, 4).unwrap();
        assert!(matches!(encode_voxel_cube(&s, &cfg(5, 2)), Err(EncodingError::TimeRange { .. })));
    }

    #[test]
    fn config_divisibility() {
        assert!(cfg(3, 1).validate().is_err());
        assert!(EncoderConfig { micro_bins: 3, ..cfg(5, 2) }.validate().is_err());
    }

    #[test]
    fn resize_and_flip() {
        let mut cube = VoxelCube::zeros(1, 1, 4, 4);
        cube.set(0, 0, 0, 0);
        let small = resize_nearest(&cube, 2, 2);
        assert_eq!(small.get(0, 0, 0, 0), 1);
        assert_eq!(resize_nearest(&cube, 4, 4), cube);
        let mut two = VoxelCube::zeros(1, 1, 1, 2);
        two.set(0, 0, 0, 0);
        assert_eq!(flip_cube_horizontal(&two).get(0, 0, 0, 1), 1);
    }

    #[test]
    fn dump_round_trip() {
        let mut cube = VoxelCube::zeros(2, 3, 2, 3);
        cube.set(1, 2, 1, 2);
        cube.set(0, 0, 0, 0);
        let bytes = cube.to_dump();
        assert!(bytes.starts_with(b"VXC 2 3 2 3\n"));
        assert_eq!(VoxelCube::from_dump(&bytes).unwrap(), cube);
    }
}
