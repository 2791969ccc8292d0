//! Reader for NPY v1/v2/v3 structured arrays of box annotations, and a
//! writer producing the layout used by the GEN1 detection dataset.

use super::{BoxAnnotation, EventError};

const MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Debug, Clone, PartialEq)]
enum Py {
    Str(String),
    Int(i64),
    Bool(bool),
    List(Vec<Py>),
    Dict(Vec<(Py, Py)>),
}

struct Lexer<'a> {
    s: &'a [u8],
    pos: usize,
}

fn npy_err(msg: impl Into<String>) -> EventError {
    EventError::Npy(msg.into())
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && (self.s[self.pos] as char).is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), EventError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(npy_err(format!("expected '{}' at header offset {}", c as char, self.pos)))
        }
    }

    fn seq(&mut self, close: u8) -> Result<Vec<Py>, EventError> {
        let mut items = Vec::new();
        loop {
            if self.peek() == Some(close) {
                self.pos += 1;
                return Ok(items);
            }
            items.push(self.value()?);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(c) if c == close => {}
                _ => return Err(npy_err(format!("malformed sequence at header offset {}", self.pos))),
            }
        }
    }

    fn value(&mut self) -> Result<Py, EventError> {
        match self.peek().ok_or_else(|| npy_err("unexpected end of header"))? {
            b'{' => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    if self.peek() == Some(b'}') {
                        self.pos += 1;
                        return Ok(Py::Dict(items));
                    }
                    let k = self.value()?;
                    self.expect(b':')?;
                    let v = self.value()?;
                    items.push((k, v));
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b'}') => {}
                        _ => return Err(npy_err("malformed dict")),
                    }
                }
            }
            b'[' => {
                self.pos += 1;
                Ok(Py::List(self.seq(b']')?))
            }
            b'(' => {
                self.pos += 1;
                Ok(Py::List(self.seq(b')')?))
            }
            q @ (b'\'' | b'"') => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.s.len() && self.s[self.pos] != q {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.s[start..self.pos]).map_err(|_| npy_err("non-UTF-8 header"))?;
                self.pos += 1;
                Ok(Py::Str(text.to_string()))
            }
            _ => {
                let start = self.pos;
                while self.pos < self.s.len() && (self.s[self.pos].is_ascii_alphanumeric() || self.s[self.pos] == b'-') {
                    self.pos += 1;
                }
                match &self.s[start..self.pos] {
                    b"True" => Ok(Py::Bool(true)),
                    b"False" => Ok(Py::Bool(false)),
                    tok => std::str::from_utf8(tok)
                        .ok()
                        .and_then(|t| t.parse().ok())
                        .map(Py::Int)
                        .ok_or_else(|| npy_err(format!("unexpected token at header offset {start}"))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Unsigned,
    Signed,
    Float,
    Bool,
    Void,
}

struct Field {
    name: String,
    kind: Kind,
    size: usize,
    offset: usize,
}

fn parse_dtype(s: &str) -> Result<(Kind, usize), EventError> {
    let (order, rest) = match s.chars().next() {
        Some(c @ ('<' | '>' | '|' | '=')) => (c, &s[1..]),
        _ => ('|', s),
    };
    let kind = match rest.chars().next() {
        Some('u') => Kind::Unsigned,
        Some('i') => Kind::Signed,
        Some('f') => Kind::Float,
        Some('b') => Kind::Bool,
        Some('V') => Kind::Void,
        _ => return Err(npy_err(format!("unsupported dtype '{s}'"))),
    };
    let size: usize = rest[1..].parse().map_err(|_| npy_err(format!("unsupported dtype '{s}'")))?;
    if order == '>' && size > 1 {
        return Err(npy_err(format!("big-endian dtype '{s}' not supported")));
    }
    let ok = match kind {
        Kind::Unsigned | Kind::Signed => matches!(size, 1 | 2 | 4 | 8),
        Kind::Float => matches!(size, 4 | 8),
        Kind::Bool => size == 1,
        Kind::Void => true,
    };
    if !ok {
        return Err(npy_err(format!("unsupported dtype '{s}'")));
    }
    Ok((kind, size))
}

fn read_value(raw: &[u8], kind: Kind) -> f64 {
    let mut b = [0u8; 8];
    b[..raw.len()].copy_from_slice(raw);
    match (kind, raw.len()) {
        (Kind::Float, 4) => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        (Kind::Float, _) => f64::from_le_bytes(b),
        (Kind::Signed, n) => {
            let shift = 64 - 8 * n as u32;
            ((i64::from_le_bytes(b) << shift) >> shift) as f64
        }
        _ => u64::from_le_bytes(b) as f64,
    }
}

/// Parses a 1-D structured NPY array with at least the fields
/// `t` (or `ts`), `x`, `y`, `w`, `h` and `class_id`. `track_id` defaults to 0
/// and `confidence` (or `class_confidence`) to 1.0.
pub fn parse_npy_boxes(bytes: &[u8]) -> Result<Vec<BoxAnnotation>, EventError> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(EventError::NotNpy);
    }
    let major = bytes[6];
    let (header_len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(npy_err("truncated header"));
            }
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        v => return Err(npy_err(format!("unsupported version {v}"))),
    };
    let header = bytes
        .get(start..start + header_len)
        .ok_or_else(|| npy_err("truncated header"))?;
    let dict = match (Lexer { s: header, pos: 0 }).value()? {
        Py::Dict(d) => d,
        _ => return Err(npy_err("header is not a dict")),
    };
    let get = |key: &str| {
        dict.iter()
            .find(|(k, _)| *k == Py::Str(key.into()))
            .map(|(_, v)| v)
            .ok_or_else(|| npy_err(format!("header lacks '{key}'")))
    };
    let descr = match get("descr")? {
        Py::List(items) => items,
        _ => return Err(npy_err("expected a structured dtype")),
    };
    let rows = match get("shape")? {
        Py::List(dims) if dims.len() == 1 => match dims[0] {
            Py::Int(n) if n >= 0 => n as usize,
            _ => return Err(npy_err("bad shape")),
        },
        _ => return Err(npy_err("expected a 1-D array")),
    };
    let mut fields = Vec::new();
    let mut offset = 0;
    for item in descr {
        let (name, dtype) = match item {
            Py::List(parts) if parts.len() == 2 => match (&parts[0], &parts[1]) {
                (Py::Str(n), Py::Str(d)) => (n.clone(), d.clone()),
                _ => return Err(npy_err("bad field descriptor")),
            },
            _ => return Err(npy_err("sub-array or nested fields are not supported")),
        };
        let (kind, size) = parse_dtype(&dtype)?;
        fields.push(Field {
            name,
            kind,
            size,
            offset,
        });
        offset += size;
    }
    let itemsize = offset;
    let data = &bytes[start + header_len..];
    if data.len() < rows * itemsize {
        return Err(npy_err(format!(
            "data section holds {} bytes, {} rows need {}",
            data.len(),
            rows,
            rows * itemsize
        )));
    }
    let find = |names: &[&str]| fields.iter().find(|f| names.contains(&f.name.as_str()) && f.kind != Kind::Void);
    let required = |names: &[&str]| find(names).ok_or_else(|| EventError::MissingField(names[0].to_string()));
    let ft = required(&["t", "ts"])?;
    let fx = required(&["x"])?;
    let fy = required(&["y"])?;
    let fw = required(&["w"])?;
    let fh = required(&["h"])?;
    let fc = required(&["class_id"])?;
    let ftrack = find(&["track_id"]);
    let fconf = find(&["confidence", "class_confidence"]);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * itemsize..(r + 1) * itemsize];
        let val = |f: &Field| read_value(&row[f.offset..f.offset + f.size], f.kind);
        out.push(BoxAnnotation {
            t: val(ft).max(0.0) as u64,
            x: val(fx),
            y: val(fy),
            w: val(fw),
            h: val(fh),
            class_id: val(fc).max(0.0) as u32,
            track_id: ftrack.map(|f| val(f).max(0.0) as u32).unwrap_or(0),
            confidence: fconf.map(val).unwrap_or(1.0),
        });
    }
    Ok(out)
}

/// Writes boxes as an NPY v1.0 array with dtype
/// `[('t','<u8'),('x','<f4'),('y','<f4'),('w','<f4'),('h','<f4'),('class_id','u1'),('confidence','<f4'),('track_id','<u4')]`.
pub fn write_npy_boxes(boxes: &[BoxAnnotation]) -> Vec<u8> {
    let descr = "[('t', '<u8'), ('x', '<f4'), ('y', '<f4'), ('w', '<f4'), ('h', '<f4'), ('class_id', 'u1'), ('confidence', '<f4'), ('track_id', '<u4')]";
    let mut header = format!("{{'descr': {descr}, 'fortran_order': False, 'shape': ({},), }}", boxes.len());
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for b in boxes {
        out.extend_from_slice(&b.t.to_le_bytes());
        for v in [b.x, b.y, b.w, b.h] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.push(b.class_id.min(255) as u8);
        out.extend_from_slice(&(b.confidence as f32).to_le_bytes());
        out.extend_from_slice(&b.track_id.to_le_bytes());
    }
    out
}
