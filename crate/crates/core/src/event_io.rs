//! Event streams, ground-truth labels and fixed-duration windowing.
//!
//! Binary event files (`EVT1`) are little-endian:
//!
//! ```text
//! magic "EVT1" | width u16 | height u16 | reserved u32 | count u64
//! count x { t_us u64 | x u16 | y u16 | p i8 (-1 or +1) | 3 zero bytes }
//! ```
//!
//! CSV event files start with the header `t_us,x,y,p`; the sensor geometry
//! is supplied by the caller. Label files are JSON lines with keys `t_us`,
//! `x`, `y`, `w`, `h`, `class_id` and optional `track_id`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EmfError, Location, Result};
use crate::fsutil::write_atomic;

pub const EVENT_MAGIC: &[u8; 4] = b"EVT1";
pub const EVENT_HEADER_BYTES: usize = 20;
pub const EVENT_RECORD_BYTES: usize = 16;
pub const CSV_HEADER: &str = "t_us,x,y,p";

/// Default window duration: 50 ms.
pub const DEFAULT_WINDOW_US: u64 = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// -1 or +1.
    pub p: i8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: i8) -> Self {
        Event { t, x, y, p }
    }

    fn check(&self, width: u16, height: u16) -> std::result::Result<(), String> {
        if self.x >= width || self.y >= height {
            return Err(format!(
                "event ({}, {}) outside {width}x{height} sensor",
                self.x, self.y
            ));
        }
        if self.p != 1 && self.p != -1 {
            return Err(format!("polarity {} is not -1 or +1", self.p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

impl EventStream {
    /// Validates every event against the geometry and stably sorts by time.
    pub fn new(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            e.check(width, height)
                .map_err(|message| EmfError::Validation {
                    location: Location::Record(i),
                    message,
                })?;
        }
        events.sort_by_key(|e| e.t);
        Ok(EventStream {
            width,
            height,
            events,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Binary,
    /// CSV files carry no geometry, so it is given here.
    Csv {
        width: u16,
        height: u16,
    },
}

impl EventFormat {
    /// Picks the format from the file extension (`.csv` or anything else).
    pub fn from_path(path: &Path, geometry: Option<(u16, u16)>) -> Result<Self> {
        let is_csv = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        match (is_csv, geometry) {
            (false, _) => Ok(EventFormat::Binary),
            (true, Some((width, height))) => Ok(EventFormat::Csv { width, height }),
            (true, None) => Err(EmfError::Argument(format!(
                "{} is CSV; sensor width and height must be given",
                path.display()
            ))),
        }
    }
}

pub fn read_events(path: &Path, format: EventFormat) -> Result<EventStream> {
    match format {
        EventFormat::Binary => {
            let mut bytes = Vec::new();
            File::open(path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| EmfError::io(path, e))?;
            decode_events(&bytes).map_err(|e| with_path(e, path))
        }
        EventFormat::Csv { width, height } => {
            let file = File::open(path).map_err(|e| EmfError::io(path, e))?;
            parse_csv(BufReader::new(file), width, height).map_err(|e| with_path(e, path))
        }
    }
}

fn with_path(err: EmfError, path: &Path) -> EmfError {
    match err {
        EmfError::Format {
            path: None,
            location,
            message,
        } => EmfError::Format {
            path: Some(path.to_path_buf()),
            location,
            message,
        },
        EmfError::Io { path: None, source } => EmfError::io(path, source),
        other => other,
    }
}

fn format_err(location: Location, message: impl Into<String>) -> EmfError {
    EmfError::Format {
        path: None,
        location,
        message: message.into(),
    }
}

/// Parses an in-memory `EVT1` file.
pub fn decode_events(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < EVENT_HEADER_BYTES {
        return Err(format_err(
            Location::Byte(bytes.len() as u64),
            format!(
                "truncated header ({} of {EVENT_HEADER_BYTES} bytes)",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != EVENT_MAGIC {
        return Err(format_err(
            Location::Byte(0),
            "bad magic, expected \"EVT1\"",
        ));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body = &bytes[EVENT_HEADER_BYTES..];
    let expected = count
        .checked_mul(EVENT_RECORD_BYTES as u64)
        .ok_or_else(|| format_err(Location::Byte(12), "record count overflows"))?;
    if body.len() as u64 != expected {
        return Err(format_err(
            Location::Byte(EVENT_HEADER_BYTES as u64 + body.len().min(expected as usize) as u64),
            format!(
                "header declares {count} records ({expected} bytes) but body has {} bytes",
                body.len()
            ),
        ));
    }
    let mut events = Vec::with_capacity(count as usize);
    for (i, rec) in body.chunks_exact(EVENT_RECORD_BYTES).enumerate() {
        let offset = (EVENT_HEADER_BYTES + i * EVENT_RECORD_BYTES) as u64;
        if rec[13..16] != [0, 0, 0] {
            return Err(format_err(
                Location::Byte(offset + 13),
                format!("record {i}: non-zero padding"),
            ));
        }
        let e = Event {
            t: u64::from_le_bytes(rec[0..8].try_into().unwrap()),
            x: u16::from_le_bytes([rec[8], rec[9]]),
            y: u16::from_le_bytes([rec[10], rec[11]]),
            p: rec[12] as i8,
        };
        e.check(width, height).map_err(|m| EmfError::Validation {
            location: Location::Byte(offset),
            message: format!("record {i}: {m}"),
        })?;
        events.push(e);
    }
    EventStream::new(width, height, events)
}

pub fn encode_events(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVENT_HEADER_BYTES + stream.len() * EVENT_RECORD_BYTES);
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
        out.extend_from_slice(&[0, 0, 0]);
    }
    out
}

pub fn write_events(path: &Path, stream: &EventStream, format: EventFormat) -> Result<()> {
    let bytes = match format {
        EventFormat::Binary => encode_events(stream),
        EventFormat::Csv { .. } => {
            let mut s = String::with_capacity(16 * stream.len() + 16);
            s.push_str(CSV_HEADER);
            s.push('\n');
            for e in &stream.events {
                s.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
            }
            s.into_bytes()
        }
    };
    write_atomic(path, &bytes)
}

fn parse_csv(reader: impl BufRead, width: u16, height: u16) -> Result<EventStream> {
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let line = line.trim();
        if idx == 0 {
            if line != CSV_HEADER {
                return Err(format_err(
                    Location::Line(1),
                    format!("expected header \"{CSV_HEADER}\", found \"{line}\""),
                ));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(format_err(
                Location::Line(lineno),
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let bad = |name: &str| format_err(Location::Line(lineno), format!("invalid {name} value"));
        let t: u64 = fields[0].parse().map_err(|_| bad("t_us"))?;
        let x: u16 = fields[1].parse().map_err(|_| bad("x"))?;
        let y: u16 = fields[2].parse().map_err(|_| bad("y"))?;
        let p: i8 = fields[3].parse().map_err(|_| bad("p"))?;
        let e = Event { t, x, y, p };
        e.check(width, height)
            .map_err(|message| EmfError::Validation {
                location: Location::Line(lineno),
                message,
            })?;
        events.push(e);
    }
    EventStream::new(width, height, events)
}

/// Parses CSV event text (header included).
pub fn parse_events_csv(text: &str, width: u16, height: u16) -> Result<EventStream> {
    parse_csv(text.as_bytes(), width, height)
}

/// A ground-truth box: top-left corner and extent in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(rename = "t_us")]
    pub t: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<i64>,
}

impl LabeledBox {
    pub fn intersects_frame(&self, width: f64, height: f64) -> bool {
        self.x < width && self.y < height && self.x + self.w > 0.0 && self.y + self.h > 0.0
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledBox>> {
    let file = File::open(path).map_err(|e| EmfError::io(path, e))?;
    parse_labels(BufReader::new(file)).map_err(|e| with_path(e, path))
}

pub fn parse_labels(reader: impl BufRead) -> Result<Vec<LabeledBox>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let b: LabeledBox = serde_json::from_str(&line)
            .map_err(|e| format_err(Location::Line(idx + 1), e.to_string()))?;
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(EmfError::Validation {
                location: Location::Line(idx + 1),
                message: format!("box extent must be positive, got w={} h={}", b.w, b.h),
            });
        }
        out.push(b);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[LabeledBox]) -> Result<()> {
    let mut buf = BufWriter::new(Vec::new());
    for b in labels {
        serde_json::to_writer(&mut buf, b).map_err(|e| EmfError::Value(e.to_string()))?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf.into_inner().map_err(|e| e.into_error())?)
}

/// How labels are associated with windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelAlignment {
    /// Label at `t` belongs to the window with `t0 < t <= t0 + dt`.
    #[default]
    WindowEnd,
    /// Label at `t` belongs to the window with `t0 <= t < t0 + dt`.
    WindowStart,
}

/// Index `k` of the window `[k dt, (k + 1) dt)` a label at `t` belongs to.
/// `None` for `t = 0` under [`LabelAlignment::WindowEnd`], which has no
/// window ending at or after it with a start before it.
pub fn label_window(t: u64, dt: u64, alignment: LabelAlignment) -> Option<u64> {
    match alignment {
        LabelAlignment::WindowStart => Some(t / dt),
        // (t0, t0 + dt] contains t  <=>  k = ceil(t / dt) - 1
        LabelAlignment::WindowEnd => t.checked_sub(1).map(|t| t / dt),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow<'a> {
    pub t0: u64,
    pub dt: u64,
    pub width: u16,
    pub height: u16,
    /// Events with `t0 <= t < t0 + dt`.
    pub events: &'a [Event],
    pub labels: Vec<LabeledBox>,
}

pub fn window_events<'a>(
    stream: &'a EventStream,
    dt: u64,
    labels: &[LabeledBox],
) -> Result<Vec<EventWindow<'a>>> {
    window_events_aligned(stream, dt, labels, LabelAlignment::WindowEnd)
}

/// Tiles the stream into consecutive `dt`-long windows starting at
/// `floor(t_min / dt) * dt` and ending with the window holding the last
/// event. Windows without events are still emitted so that downstream
/// recurrent state advances at a constant rate.
pub fn window_events_aligned<'a>(
    stream: &'a EventStream,
    dt: u64,
    labels: &[LabeledBox],
    alignment: LabelAlignment,
) -> Result<Vec<EventWindow<'a>>> {
    if dt == 0 {
        return Err(EmfError::Argument("window duration must be > 0".into()));
    }
    let (first, last) = match (stream.events.first(), stream.events.last()) {
        (Some(f), Some(l)) => (f.t / dt, l.t / dt),
        _ => return Ok(Vec::new()),
    };
    let mut windows = Vec::with_capacity((last - first + 1) as usize);
    let mut start = 0usize;
    for k in first..=last {
        let t0 = k * dt;
        let end = start + stream.events[start..].partition_point(|e| e.t < t0 + dt);
        windows.push(EventWindow {
            t0,
            dt,
            width: stream.width,
            height: stream.height,
            events: &stream.events[start..end],
            labels: Vec::new(),
        });
        start = end;
    }
    debug_assert_eq!(start, stream.events.len());
    for b in labels {
        let Some(k) = label_window(b.t, dt, alignment) else {
            continue;
        };
        if (first..=last).contains(&k) {
            windows[(k - first) as usize].labels.push(b.clone());
        }
    }
    Ok(windows)
}
