//! Dense event representations: fixed-window slicing, event-count frames,
//! early aggregation into `T_m` steps, and the voxel grid / time surface /
//! voxel cube baselines.
//!
//! Tensors are polarity-major: channel `p * bins + b` for binned layouts,
//! channel `p` for plain count frames. Binning is half-open `[start, end)`
//! except that the last bin of a window also takes events at exactly `end`.

use thiserror::Error;

use crate::event::{Event, EventStream, SensorSize};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReprError {
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("degenerate window [{start}, {end}] with {events} events")]
    DegenerateWindow { start: u64, end: u64, events: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("bad magic: expected \"FRM1\"")]
    BadMagic,
    #[error("truncated frame: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Closed time interval `[start, end]` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TimeWindow {
    pub start: u64,
    pub end: u64,
}

impl TimeWindow {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    /// The global window `[t - T, t]` ending at an annotation time.
    pub fn ending_at(t: u64, span: u64) -> Result<Self, ReprError> {
        if t < span {
            return Err(ReprError::InvalidWindow(format!(
                "window of {span} us cannot end at t = {t}"
            )));
        }
        Ok(Self::new(t - span, t))
    }

    pub fn duration(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn contains(&self, t: u64) -> bool {
        t >= self.start && t <= self.end
    }
}

/// `(C, H, W)` frame over one time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    pub channels: usize,
    pub sensor: SensorSize,
    pub data: Vec<f64>,
    pub slice_index: usize,
    pub window: TimeWindow,
}

impl FrameTensor {
    pub fn zeros(channels: usize, sensor: SensorSize, window: TimeWindow) -> Self {
        Self {
            channels,
            sensor,
            data: vec![0.0; channels * sensor.pixels()],
            slice_index: 0,
            window,
        }
    }

    #[inline]
    pub fn index(&self, c: usize, x: u16, y: u16) -> usize {
        (c * self.sensor.height as usize + y as usize) * self.sensor.width as usize + x as usize
    }

    pub fn get(&self, c: usize, x: u16, y: u16) -> f64 {
        self.data[self.index(c, x, y)]
    }

    pub fn shape(&self) -> [usize; 3] {
        [
            self.channels,
            self.sensor.height as usize,
            self.sensor.width as usize,
        ]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape(), self.data.clone())
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `T_m` count frames covering the global window, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<FrameTensor>,
    /// Step duration `Δt_m` in microseconds.
    pub step_us: u64,
    pub window: TimeWindow,
}

impl FrameSequence {
    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    pub fn sensor(&self) -> SensorSize {
        self.frames[0].sensor
    }

    /// 0-based step that an event at `t` falls into, using the same binning
    /// as [`early_aggregate`].
    pub fn step_of(&self, t: u64) -> Option<usize> {
        bin_of(t, self.window, self.steps())
    }
}

/// Index of the `[start, end)` bin among `bins` equal bins; `end` maps to the last.
pub(crate) fn bin_of(t: u64, window: TimeWindow, bins: usize) -> Option<usize> {
    if !window.contains(t) {
        return None;
    }
    let span = window.duration();
    if span == 0 {
        return Some(bins - 1);
    }
    let b = ((t - window.start) as u128 * bins as u128 / span as u128) as usize;
    Some(b.min(bins - 1))
}

/// Events in `[start, end]` as a contiguous slice of a sorted stream.
pub fn events_in(stream: &EventStream, window: TimeWindow) -> &[Event] {
    let ev = stream.events();
    let lo = ev.partition_point(|e| e.t < window.start);
    let hi = ev.partition_point(|e| e.t <= window.end);
    &ev[lo..hi]
}

/// Fixed-window sampling: slice `j` holds the indices of events with
/// `t - (j+1)Δt ≤ t_i < t - jΔt`, for `j` in `0..T/Δt` (slice 0 is newest).
pub fn fixed_window_sample(
    stream: &EventStream,
    t: u64,
    span: u64,
    dt: u64,
) -> Result<Vec<Vec<usize>>, ReprError> {
    if dt == 0 || span == 0 || !span.is_multiple_of(dt) {
        return Err(ReprError::InvalidWindow(format!(
            "slice length {dt} must be positive and divide the window {span}"
        )));
    }
    if t < span {
        return Err(ReprError::InvalidWindow(format!(
            "window of {span} us cannot end at t = {t}"
        )));
    }
    let n = (span / dt) as usize;
    let mut slices = vec![Vec::new(); n];
    let ev = stream.events();
    let lo = ev.partition_point(|e| e.t < t - span);
    for (i, e) in ev.iter().enumerate().skip(lo) {
        if e.t >= t {
            break;
        }
        let j = ((t - 1 - e.t) / dt) as usize;
        slices[j].push(i);
    }
    Ok(slices)
}

/// Event-count histogram `f(x, y, p)` as a 2-channel frame.
pub fn event_count<'a>(
    events: impl IntoIterator<Item = &'a Event>,
    sensor: SensorSize,
    window: TimeWindow,
) -> FrameTensor {
    let mut frame = FrameTensor::zeros(2, sensor, window);
    for e in events {
        frame.data[sensor.bin_index(e.x, e.y, e.p)] += 1.0;
    }
    frame
}

/// Early aggregation: `steps` count frames of `span / steps` microseconds
/// over `[t - span, t]`, oldest first.
pub fn early_aggregate(
    stream: &EventStream,
    t: u64,
    span: u64,
    steps: usize,
) -> Result<FrameSequence, ReprError> {
    if steps == 0 || span == 0 || !span.is_multiple_of(steps as u64) {
        return Err(ReprError::InvalidWindow(format!(
            "{steps} steps must be positive and divide the window {span}"
        )));
    }
    let window = TimeWindow::ending_at(t, span)?;
    let step_us = span / steps as u64;
    let sensor = stream.sensor();
    let mut frames: Vec<FrameTensor> = (0..steps)
        .map(|j| {
            let start = window.start + j as u64 * step_us;
            let mut f = FrameTensor::zeros(2, sensor, TimeWindow::new(start, start + step_us));
            f.slice_index = j;
            f
        })
        .collect();
    for e in events_in(stream, window) {
        let j = bin_of(e.t, window, steps).expect("event inside window");
        frames[j].data[sensor.bin_index(e.x, e.y, e.p)] += 1.0;
    }
    Ok(FrameSequence {
        frames,
        step_us,
        window,
    })
}

/// Voxel grid with a bilinear temporal kernel: each event deposits
/// `max(0, 1 - |b - t*|)` into bin `b`, `t* = (t - start) / (end - start) · (B - 1)`.
pub fn voxel_grid(
    events: &[Event],
    sensor: SensorSize,
    window: TimeWindow,
    bins: usize,
) -> Result<FrameTensor, ReprError> {
    if bins == 0 {
        return Err(ReprError::InvalidParameter("voxel grid needs at least one bin".into()));
    }
    if window.end <= window.start && !events.is_empty() {
        return Err(ReprError::DegenerateWindow {
            start: window.start,
            end: window.end,
            events: events.len(),
        });
    }
    let mut frame = FrameTensor::zeros(2 * bins, sensor, window);
    let span = window.duration() as f64;
    for e in events {
        let t_star = (e.t as f64 - window.start as f64) / span * (bins - 1) as f64;
        let lo = t_star.floor().max(0.0) as usize;
        for b in lo..(lo + 2).min(bins) {
            let w = (1.0 - (b as f64 - t_star).abs()).max(0.0);
            if w > 0.0 {
                let idx = frame.index(e.p as usize * bins + b, e.x, e.y);
                frame.data[idx] += w;
            }
        }
    }
    Ok(frame)
}

/// Exponential-decay time surface `exp(-(end - t_last) / tau)` per `(x, y, p)`.
/// `tau_us` defaults to half the window.
pub fn time_surface(
    events: &[Event],
    sensor: SensorSize,
    window: TimeWindow,
    tau_us: Option<f64>,
) -> Result<FrameTensor, ReprError> {
    let tau = tau_us.unwrap_or(window.duration() as f64 / 2.0);
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ReprError::InvalidParameter(format!(
            "time surface decay must be positive, got {tau}"
        )));
    }
    let mut last: Vec<Option<u64>> = vec![None; sensor.bins()];
    for e in events {
        let slot = &mut last[sensor.bin_index(e.x, e.y, e.p)];
        *slot = Some(slot.map_or(e.t, |prev| prev.max(e.t)));
    }
    let mut frame = FrameTensor::zeros(2, sensor, window);
    for (v, t) in frame.data.iter_mut().zip(last) {
        if let Some(t) = t {
            let age = window.end.saturating_sub(t) as f64;
            *v = (-age / tau).exp();
        }
    }
    Ok(frame)
}

/// Voxel cube: `bins` equal micro-intervals, one count frame per interval
/// and polarity, channel `p * bins + c`.
pub fn voxel_cube(
    events: &[Event],
    sensor: SensorSize,
    window: TimeWindow,
    bins: usize,
) -> Result<FrameTensor, ReprError> {
    if bins == 0 {
        return Err(ReprError::InvalidWindow("voxel cube needs at least one bin".into()));
    }
    if window.end < window.start || (window.end == window.start && bins > 1 && !events.is_empty())
    {
        return Err(ReprError::InvalidWindow(format!(
            "cannot split [{}, {}] into {bins} intervals",
            window.start, window.end
        )));
    }
    let mut frame = FrameTensor::zeros(2 * bins, sensor, window);
    for e in events {
        let c = bin_of(e.t, window, bins).ok_or_else(|| {
            ReprError::InvalidWindow(format!("event at t = {} outside the window", e.t))
        })?;
        let idx = frame.index(e.p as usize * bins + c, e.x, e.y);
        frame.data[idx] += 1.0;
    }
    Ok(frame)
}

pub const FRM_MAGIC: &[u8; 4] = b"FRM1";
const FRM_HEADER_LEN: usize = 4 + 3 * 2 + 2 * 8;

/// `FRM1`: magic, u16 C/H/W, u64 t_start/t_end, then row-major f32 payload,
/// all little-endian.
pub fn write_frame(frame: &FrameTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRM_HEADER_LEN + 4 * frame.data.len());
    out.extend_from_slice(FRM_MAGIC);
    out.extend_from_slice(&(frame.channels as u16).to_le_bytes());
    out.extend_from_slice(&frame.sensor.height.to_le_bytes());
    out.extend_from_slice(&frame.sensor.width.to_le_bytes());
    out.extend_from_slice(&frame.window.start.to_le_bytes());
    out.extend_from_slice(&frame.window.end.to_le_bytes());
    for v in &frame.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Reads an `FRM1` frame. The slice index is not stored and comes back as 0.
pub fn read_frame(bytes: &[u8]) -> Result<FrameTensor, ReprError> {
    if bytes.len() < 4 || &bytes[..4] != FRM_MAGIC {
        return Err(ReprError::BadMagic);
    }
    if bytes.len() < FRM_HEADER_LEN {
        return Err(ReprError::Truncated {
            expected: FRM_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let channels = u16_at(4) as usize;
    let sensor = SensorSize::new(u16_at(8), u16_at(6));
    let window = TimeWindow::new(u64_at(10), u64_at(18));
    let n = channels * sensor.pixels();
    let expected = FRM_HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(ReprError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[FRM_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(FrameTensor {
        channels,
        sensor,
        data,
        slice_index: 0,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(ts: &[u64]) -> EventStream {
        EventStream::new(
            ts.iter().map(|&t| Event::new(t, 0, 0, 1)).collect(),
            SensorSize::new(4, 4),
        )
        .unwrap()
    }

    #[test]
    fn fixed_window_example() {
        let s = stream(&[10, 25, 40]);
        let slices = fixed_window_sample(&s, 50, 40, 20).unwrap();
        assert_eq!(slices, vec![vec![2], vec![0, 1]]);
        // upper bound is exclusive, lower inclusive
        let s = stream(&[10, 50]);
        assert_eq!(
            fixed_window_sample(&s, 50, 40, 20).unwrap(),
            vec![vec![], vec![0]]
        );
    }

    #[test]
    fn fixed_window_errors() {
        let s = stream(&[]);
        assert!(fixed_window_sample(&s, 50, 40, 0).is_err());
        assert!(fixed_window_sample(&s, 50, 40, 30).is_err());
        assert!(fixed_window_sample(&s, 30, 40, 20).is_err());
        assert_eq!(fixed_window_sample(&s, 50, 40, 10).unwrap().len(), 4);
    }

    #[test]
    fn count_frame() {
        let sensor = SensorSize::new(3, 2);
        let ev = [Event::new(0, 2, 1, 0), Event::new(1, 2, 1, 0)];
        let f = event_count(&ev, sensor, TimeWindow::new(0, 1));
        assert_eq!(f.get(0, 2, 1), 2.0);
        assert_eq!(f.total(), 2.0);
        assert_eq!(event_count(&[], sensor, TimeWindow::default()).total(), 0.0);
    }

    #[test]
    fn early_aggregation_layout() {
        let s = stream(&[7_500, 7_999, 8_000]);
        let seq = early_aggregate(&s, 8_000, 8_000, 8).unwrap();
        assert_eq!(seq.steps(), 8);
        assert_eq!(seq.step_us, 1_000);
        for f in &seq.frames[..7] {
            assert_eq!(f.total(), 0.0);
        }
        assert_eq!(seq.frames[7].total(), 3.0);
        assert!(early_aggregate(&s, 8_000, 8_000, 3).is_err());
    }

    #[test]
    fn voxel_grid_kernel() {
        let sensor = SensorSize::new(2, 2);
        let w = TimeWindow::new(0, 100);
        // B = 5 -> bin centres at t = 0, 25, 50, 75, 100
        let f = voxel_grid(&[Event::new(50, 1, 0, 1)], sensor, w, 5).unwrap();
        assert_eq!(f.get(5 + 2, 1, 0), 1.0);
        assert_eq!(f.total(), 1.0);
        let f = voxel_grid(&[Event::new(25 + 12, 0, 0, 0)], sensor, TimeWindow::new(0, 100), 5)
            .unwrap();
        assert!((f.get(1, 0, 0) - 0.52).abs() < 1e-12);
        assert!((f.get(2, 0, 0) - 0.48).abs() < 1e-12);
        let f = voxel_grid(&[Event::new(50, 0, 0, 0)], sensor, TimeWindow::new(0, 200), 3).unwrap();
        assert_eq!(f.get(0, 0, 0), 0.5);
        assert_eq!(f.get(1, 0, 0), 0.5);
        assert!(matches!(
            voxel_grid(&[Event::new(5, 0, 0, 0)], sensor, TimeWindow::new(5, 5), 2),
            Err(ReprError::DegenerateWindow { .. })
        ));
    }

    #[test]
    fn time_surface_values() {
        let sensor = SensorSize::new(2, 1);
        let w = TimeWindow::new(0, 100);
        let ev = [Event::new(10, 0, 0, 0), Event::new(100, 0, 0, 0)];
        let f = time_surface(&ev, sensor, w, Some(20.0)).unwrap();
        assert_eq!(f.get(0, 0, 0), 1.0);
        assert_eq!(f.get(0, 1, 0), 0.0);
        let f = time_surface(&[Event::new(50, 1, 0, 1)], sensor, w, None).unwrap();
        assert!((f.get(1, 1, 0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!(time_surface(&ev, sensor, w, Some(0.0)).is_err());
    }

    #[test]
    fn voxel_cube_degenerate_is_count() {
        let sensor = SensorSize::new(3, 3);
        let w = TimeWindow::new(0, 90);
        let ev = [Event::new(0, 1, 1, 1), Event::new(89, 2, 0, 0), Event::new(90, 2, 0, 0)];
        let cube = voxel_cube(&ev, sensor, w, 1).unwrap();
        assert_eq!(cube.data, event_count(&ev, sensor, w).data);
        let cube = voxel_cube(&ev, sensor, w, 3).unwrap();
        assert_eq!(cube.get(3, 1, 1), 1.0); // p = 1, interval 0
        assert_eq!(cube.get(2, 2, 0), 2.0); // p = 0, interval 2
    }

    #[test]
    fn frame_round_trip() {
        let sensor = SensorSize::new(3, 2);
        let mut f = FrameTensor::zeros(4, sensor, TimeWindow::new(3, 99));
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = i as f64 * 0.25 - 1.0;
        }
        let bytes = write_frame(&f);
        assert_eq!(bytes.len(), 26 + 4 * 24);
        assert_eq!(read_frame(&bytes).unwrap(), f);
        assert_eq!(read_frame(b"FRM0"), Err(ReprError::BadMagic));
        assert!(read_frame(&bytes[..30]).is_err());
    }

    proptest! {
        #[test]
        fn fixed_window_partition(
            raw in prop::collection::vec(0u64..500, 0..100),
            dt in 1u64..50,
            n in 1u64..10,
            extra in 0u64..100,
        ) {
            let mut ts = raw;
            ts.sort_unstable();
            let s = stream(&ts);
            let span = dt * n;
            let t = span + extra;
            let slices = fixed_window_sample(&s, t, span, dt).unwrap();
            let mut seen: Vec<usize> = slices.iter().flatten().copied().collect();
            seen.sort_unstable();
            let expected: Vec<usize> = (0..ts.len()).filter(|&i| ts[i] + span >= t && ts[i] < t).collect();
            prop_assert_eq!(seen, expected);
            for (j, slice) in slices.iter().enumerate() {
                for &i in slice {
                    prop_assert!(t - (j as u64 + 1) * dt <= ts[i] && ts[i] < t - j as u64 * dt);
                }
            }
        }

        #[test]
        fn voxel_grid_mass(raw in prop::collection::vec(0u64..=1000, 0..50), bins in 1usize..8) {
            let mut ts = raw;
            ts.sort_unstable();
            let ev: Vec<Event> = ts.iter().map(|&t| Event::new(t, 0, 0, 0)).collect();
            let f = voxel_grid(&ev, SensorSize::new(1, 1), TimeWindow::new(0, 1000), bins).unwrap();
            prop_assert!((f.total() - ev.len() as f64).abs() < 1e-9);
        }
    }
}
