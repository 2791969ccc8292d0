//! Portable event formats.
//!
//! Text (`.evt`): a header line `EVT1 <width> <height> <count>` followed by
//! one `t x y p` line per event.
//!
//! Binary (`.evb`): magic `EVB1`, `u16` width, `u16` height, `u64` count,
//! then per event `u64 t, u16 x, u16 y, u8 p`, all little-endian.

use std::fmt::Write as _;
use std::path::Path;

use super::dat::{parse_dat, write_dat, DatFile, HeaderMode};
use super::{Event, EventError, EventStream};

const EVB_MAGIC: &[u8; 4] = b"EVB1";
const EVB_RECORD: usize = 13;

pub fn write_evt(stream: &EventStream) -> String {
    let mut out = format!("EVT1 {} {} {}\n", stream.width, stream.height, stream.len());
    for e in &stream.events {
        let _ = writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p);
    }
    out
}

pub fn parse_evt(text: &str) -> Result<EventStream, EventError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or(EventError::Text {
        line: 1,
        detail: "missing header".into(),
    })?;
    let parts: Vec<&str> = head.split_whitespace().collect();
    let bad_header = || EventError::Text {
        line: 1,
        detail: "expected 'EVT1 <width> <height> <count>'".into(),
    };
    if parts.len() != 4 || parts[0] != "EVT1" {
        return Err(bad_header());
    }
    let num = |s: &str| s.parse::<u64>().map_err(|_| bad_header());
    let (width, height, count) = (num(parts[1])? as u32, num(parts[2])? as u32, num(parts[3])? as usize);
    let mut events = Vec::with_capacity(count.min(1 << 24));
    for (i, line) in lines {
        let err = |detail: &str| EventError::Text {
            line: i + 1,
            detail: detail.into(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err("expected 't x y p'"));
        }
        let t = f[0].parse().map_err(|_| err("bad timestamp"))?;
        let x = f[1].parse().map_err(|_| err("bad x"))?;
        let y = f[2].parse().map_err(|_| err("bad y"))?;
        let p = f[3].parse().map_err(|_| err("bad polarity"))?;
        events.push(Event { t, x, y, p });
    }
    if events.len() != count {
        return Err(EventError::Text {
            line: 1,
            detail: format!("header announces {} events, found {}", count, events.len()),
        });
    }
    EventStream::new(events, width, height)
}

pub fn write_evb(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + stream.len() * EVB_RECORD);
    out.extend_from_slice(EVB_MAGIC);
    out.extend_from_slice(&(stream.width as u16).to_le_bytes());
    out.extend_from_slice(&(stream.height as u16).to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p);
    }
    out
}

pub fn parse_evb(bytes: &[u8]) -> Result<EventStream, EventError> {
    if bytes.len() < 16 || &bytes[..4] != EVB_MAGIC {
        return Err(EventError::Header("missing EVB1 magic".into()));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]) as u32;
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as u32;
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() / EVB_RECORD < count {
        return Err(EventError::Truncated {
            offset: 16 + body.len() / EVB_RECORD * EVB_RECORD,
        });
    }
    if body.len() != count * EVB_RECORD {
        return Err(EventError::Header(format!("{} trailing bytes", body.len() - count * EVB_RECORD)));
    }
    let events = body
        .chunks_exact(EVB_RECORD)
        .map(|r| Event {
            t: u64::from_le_bytes(r[..8].try_into().expect("8 bytes")),
            x: u16::from_le_bytes([r[8], r[9]]),
            y: u16::from_le_bytes([r[10], r[11]]),
            p: r[12],
        })
        .collect();
    EventStream::new(events, width, height)
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

/// Reads `.evt`, `.evb` or `.dat` (lenient headers) by extension.
pub fn read_events(path: impl AsRef<Path>) -> Result<EventStream, EventError> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "evt" => parse_evt(&std::fs::read_to_string(path)?),
        "evb" => parse_evb(&std::fs::read(path)?),
        "dat" => Ok(parse_dat(&std::fs::read(path)?, HeaderMode::Lenient)?.stream),
        other => Err(EventError::Extension(other.to_string())),
    }
}

/// Writes `.evt`, `.evb` or `.dat` by extension.
pub fn write_events(path: impl AsRef<Path>, stream: &EventStream) -> Result<(), EventError> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "evt" => std::fs::write(path, write_evt(stream))?,
        "evb" => std::fs::write(path, write_evb(stream))?,
        "dat" => std::fs::write(
            path,
            write_dat(&DatFile {
                header: Vec::new(),
                event_type: 0,
                event_size: 8,
                stream: stream.clone(),
            }),
        )?,
        other => return Err(EventError::Extension(other.to_string())),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EventStream {
        EventStream::new(vec![Event::new(1, 2, 3, 0), Event::new(1, 0, 0, 1), Event::new(9, 3, 1, 1)], 4, 4).unwrap()
    }

    #[test]
    fn text_round_trip() {
        let s = sample();
        let txt = write_evt(&s);
        assert!(txt.starts_with("EVT1 4 4 3\n1 2 3 0\n"));
        assert_eq!(parse_evt(&txt).unwrap(), s);
    }

    #[test]
    fn binary_round_trip() {
        let s = sample();
        let b = write_evb(&s);
        assert_eq!(b.len(), 16 + 3 * EVB_RECORD);
        assert_eq!(parse_evb(&b).unwrap(), s);
        assert!(matches!(parse_evb(&b[..b.len() - 1]), Err(EventError::Truncated { .. })));
    }

    #[test]
    fn count_mismatch_is_error() {
        assert!(parse_evt("EVT1 4 4 2\n1 0 0 1\n").is_err());
    }
}
