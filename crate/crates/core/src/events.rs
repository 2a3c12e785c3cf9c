//! Converts raw event streams and RGB frames into the network's 80x80
//! inputs: windowed polarity-difference accumulation with 4x4 spatial
//! binning, box-filter RGB downscaling to [-1,1], symmetric count
//! normalization, and channel stacking of consecutive windows.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Side length of the event sensor, in pixels.
pub const SENSOR_SIZE: u16 = 320;
/// Side length of the accumulated grid and of network inputs.
pub const GRID_SIZE: usize = 80;
/// Sensor pixels per grid cell along each axis.
pub const BIN: u16 = (SENSOR_SIZE as usize / GRID_SIZE) as u16;
/// Default symmetric clamp for event-count normalization.
pub const DEFAULT_CLIP: i32 = 8;

/// One sensor event. Timestamps are microseconds from the recording start
/// and non-decreasing within a stream; polarity is +1 or -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: i8,
}

/// Per-cell positive-minus-negative event counts over one time window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFrame {
    /// Row-major [y][x], 80x80.
    pub grid: Vec<i32>,
    pub window_start_us: u64,
    pub window_len_us: u64,
}

impl EventFrame {
    pub fn zero(window_start_us: u64, window_len_us: u64) -> Self {
        EventFrame { grid: vec![0; GRID_SIZE * GRID_SIZE], window_start_us, window_len_us }
    }

    pub fn count(&self, cx: usize, cy: usize) -> i32 {
        self.grid[cy * GRID_SIZE + cx]
    }
}

/// Resized RGB frame with values in [-1,1], stored channels-first [3,80,80].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    pub pixels: Vec<f32>,
    pub timestamp_us: u64,
}

/// Windowing parameters: window duration in milliseconds and how many
/// consecutive windows are stacked as input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub t_ms: u32,
    pub stack_k: u16,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { t_ms: 20, stack_k: 1 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_ms == 0 {
            return Err(Error::invalid("window_config", "T_ms must be positive"));
        }
        if self.stack_k == 0 {
            return Err(Error::invalid("window_config", "stack_k must be at least 1"));
        }
        Ok(())
    }

    pub fn window_len_us(&self) -> u64 {
        self.t_ms as u64 * 1_000
    }
}

/// Accumulates the events falling in [t0, t0 + T) into an 80x80
/// positive-minus-negative grid, binning sensor coordinates 4x4.
///
/// The stream must be sorted by timestamp; coordinates must lie on the
/// 320x320 sensor and polarities must be +1 or -1.
pub fn accumulate_events(events: &[Event], t0_us: u64, config: &WindowConfig) -> Result<EventFrame> {
    config.validate()?;
    let len_us = config.window_len_us();
    let mut frame = EventFrame::zero(t0_us, len_us);
    let t_end = t0_us.saturating_add(len_us);
    // Validate ordering over the whole stream, not just the window, so a
    // corrupted recording cannot silently misroute events between windows.
    for pair in events.windows(2) {
        if pair[1].t_us < pair[0].t_us {
            return Err(Error::invalid(
                "accumulate_events",
                format!("event stream not sorted: {} follows {}", pair[1].t_us, pair[0].t_us),
            ));
        }
    }
    let start = events.partition_point(|e| e.t_us < t0_us);
    for e in &events[start..] {
        if e.t_us >= t_end {
            break;
        }
        if e.x >= SENSOR_SIZE || e.y >= SENSOR_SIZE {
            return Err(Error::invalid(
                "accumulate_events",
                format!("event at ({}, {}) outside the {SENSOR_SIZE}x{SENSOR_SIZE} sensor", e.x, e.y),
            ));
        }
        if e.polarity != 1 && e.polarity != -1 {
            return Err(Error::invalid(
                "accumulate_events",
                format!("polarity must be +1 or -1, got {}", e.polarity),
            ));
        }
        let cx = (e.x / BIN) as usize;
        let cy = (e.y / BIN) as usize;
        frame.grid[cy * GRID_SIZE + cx] += e.polarity as i32;
    }
    Ok(frame)
}

/// Box (area-average) resampling of an H x W x 3 interleaved 8-bit image to
/// 80x80, then affine mapping of [0,255] onto [-1,1]. H and W must be at
/// least 80. Accumulation is in f64 so constant images stay exact.
pub fn resize_rgb(raw: &[u8], h: usize, w: usize, timestamp_us: u64) -> Result<RgbFrame> {
    if h < GRID_SIZE || w < GRID_SIZE {
        return Err(Error::invalid(
            "resize_rgb",
            format!("input must be at least {GRID_SIZE}x{GRID_SIZE}, got {h}x{w}"),
        ));
    }
    if raw.len() != h * w * 3 {
        return Err(Error::shape(
            "resize_rgb",
            format!("expected {h}x{w}x3 = {} bytes, got {}", h * w * 3, raw.len()),
        ));
    }
    let row_spans = box_spans(h, GRID_SIZE);
    let col_spans = box_spans(w, GRID_SIZE);
    let mut pixels = vec![0.0f32; 3 * GRID_SIZE * GRID_SIZE];
    for (oy, (y0, yw)) in row_spans.iter().enumerate() {
        for (ox, (x0, xw)) in col_spans.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            let mut area = 0.0f64;
            for (dy, wy) in yw.iter().enumerate() {
                let sy = y0 + dy;
                for (dx, wx) in xw.iter().enumerate() {
                    let sx = x0 + dx;
                    let wgt = wy * wx;
                    let base = (sy * w + sx) * 3;
                    for c in 0..3 {
                        acc[c] += wgt * raw[base + c] as f64;
                    }
                    area += wgt;
                }
            }
            for c in 0..3 {
                let mean = acc[c] / area;
                pixels[c * GRID_SIZE * GRID_SIZE + oy * GRID_SIZE + ox] = (mean / 127.5 - 1.0) as f32;
            }
        }
    }
    Ok(RgbFrame { pixels, timestamp_us })
}

/// Per-output-index source span for 1-D box resampling: (first source index,
/// fractional weight of each covered source pixel).
fn box_spans(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i as f64 + 1.0) * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let weights = (first..last)
                .map(|j| (hi.min(j as f64 + 1.0) - lo.max(j as f64)).max(0.0))
                .collect();
            (first, weights)
        })
        .collect()
}

/// Maps signed counts onto [-1,1] by symmetric clamping at +/-clip and
/// dividing by clip. Returns a [1,80,80] tensor.
pub fn normalize_event_frame(f: &EventFrame, clip: i32) -> Result<Tensor> {
    if clip <= 0 {
        return Err(Error::invalid("normalize_event_frame", format!("clip must be positive, got {clip}")));
    }
    let c = clip as f32;
    let data = f.grid.iter().map(|&v| v.clamp(-clip, clip) as f32 / c).collect();
    Tensor::from_vec(&[1, GRID_SIZE, GRID_SIZE], data)
}

/// A network-ready [C,80,80] tensor tagged with the time window it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct Windowed {
    pub tensor: Tensor,
    pub start_us: u64,
    pub len_us: u64,
}

impl Windowed {
    /// Normalized event window, one channel.
    pub fn from_event_frame(f: &EventFrame, clip: i32) -> Result<Self> {
        Ok(Windowed {
            tensor: normalize_event_frame(f, clip)?,
            start_us: f.window_start_us,
            len_us: f.window_len_us,
        })
    }

    /// RGB window: the frame captured at the window start, three channels.
    pub fn from_rgb_frame(f: &RgbFrame, len_us: u64) -> Self {
        Windowed {
            tensor: Tensor::from_vec(&[3, GRID_SIZE, GRID_SIZE], f.pixels.clone())
                .expect("RgbFrame carries exactly 3*80*80 values"),
            start_us: f.timestamp_us,
            len_us,
        }
    }
}

/// Concatenates k temporally contiguous, equally long windows along the
/// channel axis, oldest first. The effective prediction rate drops to
/// 1/(k*T). Gaps or overlaps between consecutive windows are errors.
pub fn stack_windows(frames: &[Windowed]) -> Result<Windowed> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("stack_windows", "need at least one window"))?;
    if frames.len() == 1 {
        return Ok(first.clone());
    }
    let (h, w) = match first.tensor.shape[..] {
        [_, h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "stack_windows",
                format!("windows must be [C,H,W], got {:?}", first.tensor.shape),
            ))
        }
    };
    let mut channels = 0usize;
    let mut data = Vec::new();
    let mut expected_start = first.start_us;
    for f in frames {
        if f.tensor.shape.len() != 3 || f.tensor.shape[1] != h || f.tensor.shape[2] != w {
            return Err(Error::shape(
                "stack_windows",
                format!("window shapes disagree: {:?} vs [C,{h},{w}]", f.tensor.shape),
            ));
        }
        if f.len_us != first.len_us {
            return Err(Error::invalid(
                "stack_windows",
                format!("windows must be equally long: {} us vs {} us", f.len_us, first.len_us),
            ));
        }
        if f.start_us != expected_start {
            return Err(Error::invalid(
                "stack_windows",
                format!(
                    "windows must be contiguous oldest-first: expected start {} us, got {} us",
                    expected_start, f.start_us
                ),
            ));
        }
        expected_start += f.len_us;
        channels += f.tensor.shape[0];
        data.extend_from_slice(&f.tensor.data);
    }
    Ok(Windowed {
        tensor: Tensor::from_vec(&[channels, h, w], data)?,
        start_us: first.start_us,
        len_us: first.len_us * frames.len() as u64,
    })
}
