//! Prophesee-style `.dat` files: `%` header lines, an event-type byte, an
//! event-size byte, then 8-byte records (`u32` timestamp, `u32` packed word
//! with x in bits 0–13, y in bits 14–27 and polarity in bit 28).

use super::{Event, EventError, EventStream};

pub const DEFAULT_GEN1_WIDTH: u32 = 304;
pub const DEFAULT_GEN1_HEIGHT: u32 = 240;

const RECORD: usize = 8;
const KNOWN_KEYS: &[&str] = &["Date", "Version", "Width", "Height", "end", "format", "geometry", "evt", "subtype"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeaderMode {
    /// Unknown header keys are an error.
    Strict,
    /// Unknown header keys are kept but otherwise ignored.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatFile {
    /// Header lines without the trailing newline, `%` included.
    pub header: Vec<String>,
    pub event_type: u8,
    pub event_size: u8,
    pub stream: EventStream,
}

fn header_dims(header: &[String], mode: HeaderMode) -> Result<(u32, u32), EventError> {
    let (mut w, mut h) = (DEFAULT_GEN1_WIDTH, DEFAULT_GEN1_HEIGHT);
    let num = |key: &str, v: Option<&str>| -> Result<u32, EventError> {
        v.and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| EventError::Header(format!("bad value for {key}")))
    };
    for line in header {
        let body = line.trim_start_matches('%').trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = match body.split_once(char::is_whitespace) {
            Some((k, v)) => (k, Some(v)),
            None => (body, None),
        };
        match key {
            "Width" => w = num(key, value)?,
            "Height" => h = num(key, value)?,
            "geometry" => {
                let (gw, gh) = value
                    .and_then(|v| v.trim().split_once('x'))
                    .ok_or_else(|| EventError::Header("bad geometry".into()))?;
                w = num(key, Some(gw))?;
                h = num(key, Some(gh))?;
            }
            k if mode == HeaderMode::Strict && !KNOWN_KEYS.contains(&k) => {
                return Err(EventError::Header(format!("unknown key '{k}'")));
            }
            _ => {}
        }
    }
    Ok((w, h))
}

pub fn parse_dat(bytes: &[u8], mode: HeaderMode) -> Result<DatFile, EventError> {
    let mut pos = 0;
    let mut header = Vec::new();
    while bytes.get(pos) == Some(&b'%') {
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| EventError::Header("unterminated header line".into()))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| EventError::Header(format!("non-ASCII header at byte {pos}")))?;
        header.push(line.trim_end_matches('\r').to_string());
        pos = end + 1;
    }
    let (width, height) = header_dims(&header, mode)?;
    if pos == bytes.len() {
        return Ok(DatFile {
            header,
            event_type: 0,
            event_size: RECORD as u8,
            stream: EventStream::empty(width, height),
        });
    }
    if bytes.len() < pos + 2 {
        return Err(EventError::Truncated { offset: pos });
    }
    let (event_type, event_size) = (bytes[pos], bytes[pos + 1]);
    if event_size as usize != RECORD {
        return Err(EventError::Header(format!("unsupported event size {event_size}")));
    }
    pos += 2;
    let body = &bytes[pos..];
    if !body.len().is_multiple_of(RECORD) {
        return Err(EventError::Truncated {
            offset: pos + body.len() / RECORD * RECORD,
        });
    }
    let events = body
        .chunks_exact(RECORD)
        .map(|r| {
            let t = u32::from_le_bytes([r[0], r[1], r[2], r[3]]);
            let word = u32::from_le_bytes([r[4], r[5], r[6], r[7]]);
            Event {
                t: t.into(),
                x: (word & 0x3FFF) as u16,
                y: ((word >> 14) & 0x3FFF) as u16,
                p: ((word >> 28) & 1) as u8,
            }
        })
        .collect();
    let stream = EventStream::new(events, width, height)?;
    Ok(DatFile {
        header,
        event_type,
        event_size,
        stream,
    })
}

/// Serialises a file. Headers are written verbatim; if none are given a
/// minimal one carrying the sensor size is emitted.
pub fn write_dat(file: &DatFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + file.stream.len() * RECORD);
    if file.header.is_empty() {
        out.extend_from_slice(
            format!("% Width {}\n% Height {}\n", file.stream.width, file.stream.height).as_bytes(),
        );
    }
    for line in &file.header {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out.push(file.event_type);
    out.push(RECORD as u8);
    for e in &file.stream.events {
        let word = u32::from(e.x) & 0x3FFF | (u32::from(e.y) & 0x3FFF) << 14 | (u32::from(e.p) & 1) << 28;
        out.extend_from_slice(&(e.t as u32).to_le_bytes());
        out.extend_from_slice(&word.to_le_bytes());
    }
    out
}
