//! Event-camera data: events, validated streams, the `t,x,y,p` text format,
//! the `EVS1` binary container and sparsity statistics.
//!
//! Polarity is stored as a channel index (`0` = OFF, `1` = ON). Timestamps
//! are integer microseconds.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Magic bytes of the binary stream container.
pub const EVS_MAGIC: &[u8; 4] = b"EVS1";
/// Size of the `EVS1` header in bytes.
pub const EVS_HEADER_LEN: usize = 16;
/// Size of one `EVS1` event record in bytes.
pub const EVS_RECORD_LEN: usize = 16;
const EVS_TRAILER_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("{location}: event ({x}, {y}, p={p}) outside {width}x{height} sensor")]
    OutOfBounds {
        location: Location,
        x: u64,
        y: u64,
        p: u64,
        width: u16,
        height: u16,
    },
    #[error("{location}: timestamp {t} precedes previous timestamp {previous}")]
    NonMonotonicTimestamp {
        location: Location,
        previous: u64,
        t: u64,
    },
    #[error("bad magic: expected \"EVS1\"")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{extra} unexpected bytes after checksum")]
    TrailingData { extra: usize },
    #[error("sensor size must be non-zero, got {width}x{height}")]
    EmptySensor { width: u64, height: u64 },
}

/// Where an invalid event was found: a text line (1-based) or a record index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Index(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(n) => write!(f, "line {n}"),
            Location::Index(i) => write!(f, "event {i}"),
        }
    }
}

/// Sensor resolution in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
pub struct SensorSize {
    pub width: u16,
    pub height: u16,
}

impl SensorSize {
    pub fn new(width: u16, height: u16) -> Self {
        Self { width, height }
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Number of `(x, y, p)` bins: one neuron per pixel and polarity.
    pub fn bins(&self) -> usize {
        2 * self.pixels()
    }

    /// Flat `(p, y, x)` index used by every polarity-major tensor in the crate.
    #[inline]
    pub fn bin_index(&self, x: u16, y: u16, p: u8) -> usize {
        (p as usize * self.height as usize + y as usize) * self.width as usize + x as usize
    }
}

/// A single change-detection event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: u8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: u8) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-ordered, bounds-checked events from one sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    sensor: SensorSize,
}

impl EventStream {
    /// Validates bounds, polarity and timestamp order.
    pub fn new(events: Vec<Event>, sensor: SensorSize) -> Result<Self, EventError> {
        check_sensor(sensor)?;
        let mut previous = 0u64;
        for (i, e) in events.iter().enumerate() {
            check_event(e.x as u64, e.y as u64, e.p as u64, sensor, Location::Index(i))?;
            if i > 0 && e.t < previous {
                return Err(EventError::NonMonotonicTimestamp {
                    location: Location::Index(i),
                    previous,
                    t: e.t,
                });
            }
            previous = e.t;
        }
        Ok(Self { events, sensor })
    }

    pub fn empty(sensor: SensorSize) -> Self {
        Self {
            events: Vec::new(),
            sensor,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time span covered, measured from t = 0 to the last event.
    pub fn duration(&self) -> u64 {
        self.events.last().map_or(0, |e| e.t)
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

fn check_sensor(sensor: SensorSize) -> Result<(), EventError> {
    if sensor.width == 0 || sensor.height == 0 {
        return Err(EventError::EmptySensor {
            width: sensor.width as u64,
            height: sensor.height as u64,
        });
    }
    Ok(())
}

fn check_event(
    x: u64,
    y: u64,
    p: u64,
    sensor: SensorSize,
    location: Location,
) -> Result<(), EventError> {
    if x >= sensor.width as u64 || y >= sensor.height as u64 || p > 1 {
        return Err(EventError::OutOfBounds {
            location,
            x,
            y,
            p,
            width: sensor.width,
            height: sensor.height,
        });
    }
    Ok(())
}

fn parse_decimal(field: &str, name: &str, line: usize) -> Result<u64, EventError> {
    if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
        return Err(EventError::MalformedLine {
            line,
            reason: format!("{name} field {field:?} is not a decimal integer"),
        });
    }
    field.parse::<u64>().map_err(|_| EventError::MalformedLine {
        line,
        reason: format!("{name} field {field:?} overflows 64 bits"),
    })
}

/// Parses line-delimited `t,x,y,p` records. Lines starting with `#` and blank
/// lines are skipped; both LF and CRLF endings are accepted.
pub fn parse_text_stream(bytes: &[u8], sensor: SensorSize) -> Result<EventStream, EventError> {
    check_sensor(sensor)?;
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        EventError::MalformedLine {
            line,
            reason: "invalid UTF-8".to_string(),
        }
    })?;

    let mut events = Vec::new();
    let mut previous: Option<u64> = None;
    for (i, raw) in text.split('\n').enumerate() {
        let line = i + 1;
        let record = raw.strip_suffix('\r').unwrap_or(raw);
        if record.is_empty() || record.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = record.split(',').collect();
        if fields.len() != 4 {
            return Err(EventError::MalformedLine {
                line,
                reason: format!("expected 4 comma-separated fields, found {}", fields.len()),
            });
        }
        let t = parse_decimal(fields[0], "t", line)?;
        let x = parse_decimal(fields[1], "x", line)?;
        let y = parse_decimal(fields[2], "y", line)?;
        let p = parse_decimal(fields[3], "p", line)?;
        if p > 1 {
            return Err(EventError::MalformedLine {
                line,
                reason: format!("polarity must be 0 or 1, found {p}"),
            });
        }
        check_event(x, y, p, sensor, Location::Line(line))?;
        if let Some(prev) = previous {
            if t < prev {
                return Err(EventError::NonMonotonicTimestamp {
                    location: Location::Line(line),
                    previous: prev,
                    t,
                });
            }
        }
        previous = Some(t);
        events.push(Event::new(t, x as u16, y as u16, p as u8));
    }
    Ok(EventStream { events, sensor })
}

/// Renders a stream in the text format parsed by [`parse_text_stream`].
pub fn write_text_stream(stream: &EventStream) -> String {
    let mut out = String::with_capacity(stream.len() * 16);
    for e in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
    }
    out
}

/// Encodes a stream as `EVS1`: a 16-byte header (magic, u16 width, u16 height,
/// u64 count), 16-byte records (u64 t, u16 x, u16 y, u8 p, u8 pad, u16
/// reserved) and a trailing CRC32 of the record payload. All little-endian.
pub fn write_binary_stream(stream: &EventStream) -> Vec<u8> {
    let n = stream.len();
    let mut out = Vec::with_capacity(EVS_HEADER_LEN + n * EVS_RECORD_LEN + EVS_TRAILER_LEN);
    out.extend_from_slice(EVS_MAGIC);
    out.extend_from_slice(&stream.sensor.width.to_le_bytes());
    out.extend_from_slice(&stream.sensor.height.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p);
        out.push(0);
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[EVS_HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decodes an `EVS1` container, verifying length, checksum and event validity.
pub fn read_binary_stream(bytes: &[u8]) -> Result<EventStream, EventError> {
    if bytes.len() < EVS_MAGIC.len() || &bytes[..4] != EVS_MAGIC {
        return Err(EventError::BadMagic);
    }
    if bytes.len() < EVS_HEADER_LEN {
        return Err(EventError::TruncatedPayload {
            expected: EVS_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let expected = (count as u128) * EVS_RECORD_LEN as u128
        + (EVS_HEADER_LEN + EVS_TRAILER_LEN) as u128;
    if (bytes.len() as u128) < expected {
        return Err(EventError::TruncatedPayload {
            expected: usize::try_from(expected).unwrap_or(usize::MAX),
            found: bytes.len(),
        });
    }
    let expected = expected as usize;
    if bytes.len() > expected {
        return Err(EventError::TrailingData {
            extra: bytes.len() - expected,
        });
    }
    let payload = &bytes[EVS_HEADER_LEN..expected - EVS_TRAILER_LEN];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4-byte slice"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(EventError::ChecksumMismatch { stored, computed });
    }
    let sensor = SensorSize::new(width, height);
    check_sensor(sensor)?;
    let events = payload
        .chunks_exact(EVS_RECORD_LEN)
        .map(|r| {
            Event::new(
                u64::from_le_bytes(r[0..8].try_into().expect("8-byte slice")),
                u16::from_le_bytes([r[8], r[9]]),
                u16::from_le_bytes([r[10], r[11]]),
                r[12],
            )
        })
        .collect();
    EventStream::new(events, sensor)
}

/// Sparsity summary of a stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub event_count: usize,
    pub duration: u64,
    pub on_count: usize,
    pub off_count: usize,
    /// Fraction of `(x, y, p)` bins that received no event.
    pub zero_bin_fraction: f64,
    /// Fraction of `(x, y)` pixels that received no event of either polarity.
    pub silent_pixel_fraction: f64,
}

pub fn stream_stats(stream: &EventStream) -> StatsReport {
    let sensor = stream.sensor();
    let mut bins = vec![false; sensor.bins()];
    let mut on_count = 0;
    for e in stream.events() {
        bins[sensor.bin_index(e.x, e.y, e.p)] = true;
        if e.p == 1 {
            on_count += 1;
        }
    }
    let empty_bins = bins.iter().filter(|&&b| !b).count();
    let (off_plane, on_plane) = bins.split_at(sensor.pixels());
    let silent = off_plane
        .iter()
        .zip(on_plane)
        .filter(|(a, b)| !**a && !**b)
        .count();
    StatsReport {
        event_count: stream.len(),
        duration: stream.duration(),
        on_count,
        off_count: stream.len() - on_count,
        zero_bin_fraction: empty_bins as f64 / sensor.bins() as f64,
        silent_pixel_fraction: silent as f64 / sensor.pixels() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S8: SensorSize = SensorSize {
        width: 8,
        height: 8,
    };

    #[test]
    fn single_record() {
        let s = parse_text_stream(b"1000,3,2,1\n", S8).unwrap();
        assert_eq!(s.events(), &[Event::new(1000, 3, 2, 1)]);
    }

    #[test]
    fn empty_input() {
        let s = parse_text_stream(b"", S8).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.duration(), 0);
    }

    #[test]
    fn comments_and_crlf() {
        let s = parse_text_stream(b"# header\r\n5,0,0,0\r\n\r\n7,1,1,1", S8).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.events()[1], Event::new(7, 1, 1, 1));
    }

    #[test]
    fn malformed_reports_line() {
        let err = parse_text_stream(b"1,1,1,1\n2,1,1\n", S8).unwrap_err();
        assert!(matches!(err, EventError::MalformedLine { line: 2, .. }));
        for bad in ["x,1,1,1", "1,-1,1,1", "1,+1,1,1", "1,1,1,2", "1, 1,1,1", "1,1,1,1,"] {
            let err = parse_text_stream(bad.as_bytes(), S8).unwrap_err();
            assert!(
                matches!(err, EventError::MalformedLine { line: 1, .. }),
                "{bad}: {err:?}"
            );
        }
    }

    #[test]
    fn out_of_bounds_and_order() {
        assert!(matches!(
            parse_text_stream(b"1,8,0,0", S8),
            Err(EventError::OutOfBounds { .. })
        ));
        assert!(matches!(
            parse_text_stream(b"5,0,0,0\n4,0,0,0", S8),
            Err(EventError::NonMonotonicTimestamp {
                location: Location::Line(2),
                ..
            })
        ));
        // equal timestamps keep file order
        let s = parse_text_stream(b"5,1,0,0\n5,0,0,0", S8).unwrap();
        assert_eq!(s.events()[0].x, 1);
    }

    #[test]
    fn binary_sizes() {
        let empty = EventStream::empty(S8);
        let bytes = write_binary_stream(&empty);
        assert_eq!(bytes.len(), EVS_HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"EVS1");
        assert_eq!(read_binary_stream(&bytes).unwrap(), empty);

        let one = EventStream::new(vec![Event::new(42, 1, 2, 1)], S8).unwrap();
        let bytes = write_binary_stream(&one);
        assert_eq!(bytes.len(), EVS_HEADER_LEN + EVS_RECORD_LEN + 4);
        assert_eq!(read_binary_stream(&bytes).unwrap(), one);
    }

    #[test]
    fn binary_errors() {
        let one = EventStream::new(vec![Event::new(42, 1, 2, 1)], S8).unwrap();
        let bytes = write_binary_stream(&one);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(read_binary_stream(&bad), Err(EventError::BadMagic));
        assert!(matches!(
            read_binary_stream(&bytes[..bytes.len() - 1]),
            Err(EventError::TruncatedPayload { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[EVS_HEADER_LEN] ^= 1;
        assert!(matches!(
            read_binary_stream(&flipped),
            Err(EventError::ChecksumMismatch { .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            read_binary_stream(&long),
            Err(EventError::TrailingData { extra: 1 })
        ));
    }

    #[test]
    fn stats_single_event() {
        let s = EventStream::new(vec![Event::new(0, 0, 0, 1)], SensorSize::new(2, 2)).unwrap();
        let r = stream_stats(&s);
        assert_eq!(r.zero_bin_fraction, 7.0 / 8.0);
        assert_eq!(r.silent_pixel_fraction, 3.0 / 4.0);
        assert_eq!((r.on_count, r.off_count), (1, 0));
        let r = stream_stats(&EventStream::empty(S8));
        assert_eq!(r.event_count, 0);
        assert_eq!(r.zero_bin_fraction, 1.0);
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        (1u16..40, 1u16..40).prop_flat_map(|(w, h)| {
            prop::collection::vec((0u64..1000, 0..w, 0..h, 0u8..2), 0..200).prop_map(
                move |raw| {
                    let mut t = 0;
                    let events = raw
                        .into_iter()
                        .map(|(dt, x, y, p)| {
                            t += dt;
                            Event::new(t, x, y, p)
                        })
                        .collect();
                    EventStream::new(events, SensorSize::new(w, h)).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn binary_round_trip(s in arb_stream()) {
            prop_assert_eq!(read_binary_stream(&write_binary_stream(&s)).unwrap(), s);
        }

        #[test]
        fn text_round_trip(s in arb_stream()) {
            let text = write_text_stream(&s);
            prop_assert_eq!(parse_text_stream(text.as_bytes(), s.sensor()).unwrap(), s);
        }

        #[test]
        fn polarity_partition(s in arb_stream()) {
            let r = stream_stats(&s);
            prop_assert_eq!(r.on_count + r.off_count, r.event_count);
        }
    }
}
