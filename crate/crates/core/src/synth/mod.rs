//! Synthetic ball-throw dataset generator.
//!
//! A static drone at the origin watches balls thrown toward it from behind a
//! protective wall plane. Each recording couples a 1 kHz ballistic
//! trajectory with 50 Hz RGB frames and a brightness-change event stream
//! rendered through two pinhole cameras, plus a ground-truth
//! closest-approach label and a stratified split assignment. Submodules:
//! trajectory math ([`ballistics`]), rasterization and the event model
//! ([`render`]), split stratification ([`splits`]), and the on-disk format
//! ([`format`]). This root holds the shared scene types, the end-to-end
//! generation pipeline, and per-window input assembly for training and
//! evaluation.

pub mod ballistics;
pub mod format;
pub mod render;
pub mod splits;

pub use ballistics::{compute_label, sample_throw_params, simulate_trajectory, truncate_obstacles, TRAJ_DT_S};
pub use format::{file_size, load_recording, read_manifest, save_recording, write_manifest};
pub use render::{render_events, render_luminance, render_rgb, Backdrop};
pub use splits::{is_central, make_splits, CENTRAL_HALF_MM, SPLIT_RATIOS};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::events::{
    accumulate_events, resize_rgb, stack_windows, Event, RgbFrame, WindowConfig, Windowed,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// RGB camera resolution (stored frames are RGB_W x RGB_H x 3 bytes).
pub const RGB_W: usize = 160;
pub const RGB_H: usize = 160;
/// RGB frame period: 50 Hz cadence.
pub const RGB_PERIOD_MS: u64 = 20;
/// Luminance sampling period for event synthesis.
pub const LUM_STEP_MS: u64 = 4;
/// Log-luminance contrast threshold of the event model.
pub const EVENT_THRESHOLD: f32 = 0.2;

/// Ideal pinhole camera; +x right, +y down, +z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pinhole {
    pub width: u32,
    pub height: u32,
    pub focal_px: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Pinhole {
    /// Projects a camera-frame point to pixel coordinates; `None` behind or
    /// on the image plane.
    pub fn project(&self, rel: [f64; 3]) -> Option<(f64, f64)> {
        if rel[2] <= 1e-6 {
            return None;
        }
        Some((
            self.focal_px * rel[0] / rel[2] + self.cx,
            self.focal_px * rel[1] / rel[2] + self.cy,
        ))
    }
}

/// World geometry shared by every recording. The world frame coincides with
/// the camera frame (drone-mounted cameras, drone static): x right, y down
/// (gravity is +y), z forward toward the thrower. The floor is a horizontal
/// plane below the drone and the transparent protective wall is a z-plane in
/// front of it; trajectories freeze where they cross either one.
#[derive(Clone, Debug)]
pub struct Scene {
    pub drone_pos: [f64; 3],
    pub rgb_cam: Pinhole,
    pub lum_cam: Pinhole,
    pub ball_diameter_m: f64,
    /// Gravitational acceleration along +y (downward), m/s^2.
    pub gravity: f64,
    pub wall_z_m: f64,
    pub floor_y_m: f64,
}

impl Default for Scene {
    fn default() -> Self {
        Scene {
            drone_pos: [0.0, 0.0, 0.0],
            rgb_cam: Pinhole { width: 160, height: 160, focal_px: 160.0, cx: 80.0, cy: 80.0 },
            lum_cam: Pinhole { width: 320, height: 320, focal_px: 320.0, cx: 160.0, cy: 160.0 },
            ball_diameter_m: 0.15,
            gravity: 9.81,
            wall_z_m: 0.30,
            floor_y_m: 1.0,
        }
    }
}

/// One throw: initial state, recording length, and the seed that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThrowParams {
    pub launch_pos: [f64; 3],
    pub launch_vel: [f64; 3],
    pub duration_s: f64,
    pub seed: u64,
}

/// Ground truth at closest approach: relative ball position in the image
/// plane (mm) and the closest-approach time. `t_ms` is stored relative to
/// the recording start; window assembly rebases it to each window end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionLabel {
    pub x_mm: f32,
    pub y_mm: f32,
    pub t_ms: f32,
}

/// Dataset split, stratified on whether the collision point falls inside the
/// central square around the drone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test1 = 2,
    Test2 = 3,
}

impl Split {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test1),
            3 => Some(Split::Test2),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test1 => "test1",
            Split::Test2 => "test2",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test1" => Ok(Split::Test1),
            "test2" => Ok(Split::Test2),
            other => Err(format!("unknown split `{other}`, expected train|val|test1|test2")),
        }
    }
}

/// An RGB frame as stored on disk: 8-bit HWC pixels at native resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFrame {
    pub t_us: u64,
    pub pixels: Vec<u8>,
}

/// One complete recording. Trajectories are sampled at 1 kHz and cover the
/// full duration; the event stream is time-sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: u32,
    pub duration_us: u64,
    pub events: Vec<Event>,
    pub rgb_frames: Vec<RawFrame>,
    pub ball_traj: Vec<[f32; 3]>,
    pub drone_traj: Vec<[f32; 3]>,
    pub label: CollisionLabel,
    pub split: Split,
}

pub use crate::seed::derive_seed;

/// Samples the throw for recording `id` and simulates its truncated ball
/// trajectory. Shared by label-only and full generation so both see the
/// exact same throw.
fn throw_and_ball(id: u32, base_seed: u64, scene: &Scene) -> (ThrowParams, Vec<[f64; 3]>) {
    let seed = derive_seed(base_seed, id as u64, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 2.0 to 2.6 s, always a whole number of RGB frame periods.
    let duration_ms = RGB_PERIOD_MS * rng.random_range(100..=130);
    let params = sample_throw_params(&mut rng, scene, duration_ms as f64 / 1000.0, seed);
    let mut ball = simulate_trajectory(&params, scene.gravity);
    truncate_obstacles(&mut ball, scene.wall_z_m, scene.floor_y_m - scene.ball_diameter_m / 2.0);
    (params, ball)
}

/// Renders one full recording deterministically from `(base_seed, id)`.
/// The split is set to `Train`; dataset generation overwrites it from
/// [`make_splits`].
pub fn generate_recording(id: u32, base_seed: u64, scene: &Scene) -> Result<Recording> {
    let (_, ball) = throw_and_ball(id, base_seed, scene);
    let duration_ms = (ball.len() - 1) as u64;
    let drone = vec![scene.drone_pos; ball.len()];
    let label = compute_label(&ball, &drone)?;
    let backdrop = Backdrop::new(derive_seed(base_seed, id as u64, 1), scene);

    let mut rgb_frames = Vec::with_capacity((duration_ms / RGB_PERIOD_MS) as usize + 1);
    for i in 0..=duration_ms / RGB_PERIOD_MS {
        let t_ms = i * RGB_PERIOD_MS;
        rgb_frames.push(RawFrame {
            t_us: t_ms * 1000,
            pixels: render_rgb(scene, &backdrop, ball[t_ms as usize]),
        });
    }

    let mut events = Vec::new();
    let mut prev_t_ms = 0u64;
    let mut prev_pos = ball[0];
    let mut prev_lum = render_luminance(scene, &backdrop, prev_pos);
    for s in 1..=duration_ms / LUM_STEP_MS {
        let t_ms = s * LUM_STEP_MS;
        let pos = ball[t_ms as usize];
        if pos == prev_pos {
            // Frozen ball, static scene: nothing changes, no events.
            continue;
        }
        let cur = render_luminance(scene, &backdrop, pos);
        events.extend(render_events(
            &prev_lum,
            &cur,
            scene.lum_cam.width as usize,
            prev_t_ms * 1000,
            t_ms * 1000,
            EVENT_THRESHOLD,
        ));
        prev_lum = cur;
        prev_pos = pos;
        prev_t_ms = t_ms;
    }

    let to_f32 = |t: &[[f64; 3]]| -> Vec<[f32; 3]> {
        t.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect()
    };
    Ok(Recording {
        id,
        duration_us: duration_ms * 1000,
        events,
        rgb_frames,
        ball_traj: to_f32(&ball),
        drone_traj: to_f32(&drone),
        label,
        split: Split::Train,
    })
}

/// Generates `count` recordings under `dir` and writes a manifest next to
/// them. Runs in two passes so splits can be assigned before any rendering:
/// first trajectories and labels only, then parallel render-and-save.
/// Returns the manifest path.
pub fn generate_dataset(dir: &Path, count: usize, seed: u64, scene: &Scene) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = (0..count)
        .map(|id| {
            let (_, ball) = throw_and_ball(id as u32, seed, scene);
            let drone = vec![scene.drone_pos; ball.len()];
            compute_label(&ball, &drone)
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = make_splits(&labels, derive_seed(seed, u64::MAX, 2))?;

    let entries: Vec<(String, Split)> = (0..count)
        .into_par_iter()
        .map(|id| {
            let mut rec = generate_recording(id as u32, seed, scene)?;
            rec.split = splits[id];
            let name = format!("rec_{id:04}.bin");
            save_recording(&rec, &dir.join(&name))?;
            Ok((name, splits[id]))
        })
        .collect::<Result<_>>()?;

    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// A recording preprocessed for window assembly: RGB frames resized to the
/// network's input grid, events and trajectory kept as-is.
#[derive(Clone, Debug)]
pub struct PreparedRecording {
    pub id: u32,
    pub duration_us: u64,
    pub label: CollisionLabel,
    pub split: Split,
    pub events: Vec<Event>,
    /// One resized frame per RGB period, in time order.
    pub rgb: Vec<RgbFrame>,
    pub ball_traj: Vec<[f32; 3]>,
}

impl PreparedRecording {
    pub fn from_recording(rec: &Recording) -> Result<Self> {
        let rgb = rec
            .rgb_frames
            .iter()
            .map(|f| resize_rgb(&f.pixels, RGB_H, RGB_W, f.t_us))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedRecording {
            id: rec.id,
            duration_us: rec.duration_us,
            label: rec.label,
            split: rec.split,
            events: rec.events.clone(),
            rgb,
            ball_traj: rec.ball_traj.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_recording(&load_recording(path)?)
    }

    /// Closest-approach time in microseconds from the recording start.
    pub fn t_star_us(&self) -> u64 {
        (self.label.t_ms as f64 * 1000.0).round() as u64
    }

    /// Window end times on the sub-window grid. A window is eligible when
    /// its full stacked span fits inside the recording and its end does not
    /// pass the closest approach (so the time-to-collision target stays
    /// non-negative).
    pub fn eligible_window_ends(&self, cfg: &WindowConfig) -> Vec<u64> {
        let t = cfg.window_len_us();
        let span = t * cfg.stack_k as u64;
        let limit = self.duration_us.min(self.t_star_us());
        let mut out = Vec::new();
        let mut end = span;
        while end <= limit {
            out.push(end);
            end += t;
        }
        out
    }

    /// Event-frame input ending at `t_end_us`: `stack_k` consecutive
    /// windows, oldest first, shape [stack_k, 80, 80].
    pub fn evs_input(&self, t_end_us: u64, cfg: &WindowConfig, clip: i32) -> Result<Tensor> {
        let t = cfg.window_len_us();
        let span = t * cfg.stack_k as u64;
        if t_end_us < span {
            return Err(Error::invalid("evs_input", format!("window end {t_end_us} us precedes the stacked span {span} us")));
        }
        let mut frames = Vec::with_capacity(cfg.stack_k as usize);
        for j in (1..=cfg.stack_k as u64).rev() {
            let f = accumulate_events(&self.events, t_end_us - j * t, cfg)?;
            frames.push(Windowed::from_event_frame(&f, clip)?);
        }
        Ok(stack_windows(&frames)?.tensor)
    }

    /// RGB input ending at `t_end_us`: for each sub-window, the latest frame
    /// at or before the sub-window start (zero-order hold), stacked oldest
    /// first into [3*stack_k, 80, 80].
    pub fn rgb_input(&self, t_end_us: u64, cfg: &WindowConfig) -> Result<Tensor> {
        let t = cfg.window_len_us();
        let span = t * cfg.stack_k as u64;
        if t_end_us < span {
            return Err(Error::invalid("rgb_input", format!("window end {t_end_us} us precedes the stacked span {span} us")));
        }
        let mut frames = Vec::with_capacity(cfg.stack_k as usize);
        for j in (1..=cfg.stack_k as u64).rev() {
            let start = t_end_us - j * t;
            let idx = (start / (RGB_PERIOD_MS * 1000)) as usize;
            let frame = self.rgb.get(idx).ok_or_else(|| {
                Error::invalid("rgb_input", format!("no frame covers window start {start} us"))
            })?;
            let mut w = Windowed::from_rgb_frame(frame, t);
            w.start_us = start;
            frames.push(w);
        }
        Ok(stack_windows(&frames)?.tensor)
    }

    /// Regression target for a window ending at `t_end_us`: relative XY at
    /// closest approach (mm) and time from the window end to closest
    /// approach (ms).
    pub fn target(&self, t_end_us: u64) -> [f32; 3] {
        [self.label.x_mm, self.label.y_mm, self.label.t_ms - t_end_us as f32 / 1000.0]
    }

    /// 3D distance (m) from the ball at the window end to the collision
    /// point, from the stored trajectory.
    pub fn distance_at(&self, t_end_us: u64) -> f32 {
        let last = self.ball_traj.len() - 1;
        let at = |us: u64| self.ball_traj[(us as usize / 1000).min(last)];
        let (a, b) = (at(t_end_us), at(self.t_star_us()));
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// Assembles the network inputs a `modality` model needs for the window
    /// ending at `t_end_us`.
    pub fn model_inputs(
        &self,
        t_end_us: u64,
        cfg: &WindowConfig,
        clip: i32,
        modality: crate::model::Modality,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        use crate::model::Modality;
        Ok(match modality {
            Modality::Evs => (Some(self.evs_input(t_end_us, cfg, clip)?), None),
            Modality::Rgb => (None, Some(self.rgb_input(t_end_us, cfg)?)),
            Modality::Fusion => {
                (Some(self.evs_input(t_end_us, cfg, clip)?), Some(self.rgb_input(t_end_us, cfg)?))
            }
        })
    }
}
