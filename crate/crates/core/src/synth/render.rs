//! Pinhole rendering of the ball over a static textured backdrop, plus the
//! brightness-change event camera model.
//!
//! Both cameras sit at the drone and share a field of view; the backdrop is
//! a smooth value-noise field indexed by viewing direction, so the RGB and
//! luminance cameras see the same wall at their own resolutions. Because the
//! backdrop is static, every event originates from the ball's disk covering
//! or uncovering background.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Pinhole, Scene};
use crate::events::Event;

/// Linear-space ball albedo (bright foam), per RGB channel.
const BALL_RGB: [f64; 3] = [0.93, 0.93, 0.88];
/// Side of the value-noise control grid.
const NOISE_GRID: usize = 8;

/// Per-recording static backdrop: value-noise control points per channel,
/// plus prerendered background images for both cameras.
pub struct Backdrop {
    bg_rgb: Vec<f64>,
    bg_rgb_u8: Vec<u8>,
    bg_lum: Vec<f32>,
}

impl Backdrop {
    /// Smooth random backdrop with channel values in [0.3, 0.7].
    pub fn new(seed: u64, scene: &Scene) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = [[0.0f64; NOISE_GRID * NOISE_GRID]; 3];
        for c in 0..3 {
            for v in grid[c].iter_mut() {
                *v = rng.random_range(0.3..0.7);
            }
        }
        Self::from_grids(&grid, scene)
    }

    /// Uniform backdrop, used by rendering tests that need a flat field.
    pub fn constant(value: f64, scene: &Scene) -> Self {
        let grid = [[value; NOISE_GRID * NOISE_GRID]; 3];
        Self::from_grids(&grid, scene)
    }

    fn from_grids(grid: &[[f64; NOISE_GRID * NOISE_GRID]; 3], scene: &Scene) -> Self {
        let sample = |g: &[f64; NOISE_GRID * NOISE_GRID], dx: f64, dy: f64| -> f64 {
            // Map direction tangent [-0.5, 0.5] onto the control grid.
            let sx = ((dx + 0.5).clamp(0.0, 1.0)) * (NOISE_GRID - 1) as f64;
            let sy = ((dy + 0.5).clamp(0.0, 1.0)) * (NOISE_GRID - 1) as f64;
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(NOISE_GRID - 1), (y0 + 1).min(NOISE_GRID - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let top = g[y0 * NOISE_GRID + x0] * (1.0 - fx) + g[y0 * NOISE_GRID + x1] * fx;
            let bot = g[y1 * NOISE_GRID + x0] * (1.0 - fx) + g[y1 * NOISE_GRID + x1] * fx;
            top * (1.0 - fy) + bot * fy
        };
        let cam = &scene.rgb_cam;
        let (w, h) = (cam.width as usize, cam.height as usize);
        let mut bg_rgb = vec![0.0f64; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cam.cx) / cam.focal_px;
                let dy = (y as f64 + 0.5 - cam.cy) / cam.focal_px;
                for c in 0..3 {
                    bg_rgb[(y * w + x) * 3 + c] = sample(&grid[c], dx, dy);
                }
            }
        }
        let bg_rgb_u8 = bg_rgb.iter().map(|v| quantize(*v)).collect();
        let lcam = &scene.lum_cam;
        let (lw, lh) = (lcam.width as usize, lcam.height as usize);
        let mut bg_lum = vec![0.0f32; lw * lh];
        for y in 0..lh {
            for x in 0..lw {
                let dx = (x as f64 + 0.5 - lcam.cx) / lcam.focal_px;
                let dy = (y as f64 + 0.5 - lcam.cy) / lcam.focal_px;
                let mean = (0..3).map(|c| sample(&grid[c], dx, dy)).sum::<f64>() / 3.0;
                bg_lum[y * lw + x] = mean as f32;
            }
        }
        Backdrop { bg_rgb, bg_rgb_u8, bg_lum }
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Projected disk footprint: center, radius, and covered pixel bounds.
fn disk(cam: &Pinhole, rel: [f64; 3], ball_radius_m: f64) -> Option<(f64, f64, f64, (usize, usize, usize, usize))> {
    let (u, v) = cam.project(rel)?;
    let r = cam.focal_px * ball_radius_m / rel[2];
    let (w, h) = (cam.width as f64, cam.height as f64);
    let x0 = (u - r - 1.0).floor().clamp(0.0, w - 1.0) as usize;
    let x1 = (u + r + 1.0).ceil().clamp(0.0, w - 1.0) as usize;
    let y0 = (v - r - 1.0).floor().clamp(0.0, h - 1.0) as usize;
    let y1 = (v + r + 1.0).ceil().clamp(0.0, h - 1.0) as usize;
    if u + r < 0.0 || u - r > w || v + r < 0.0 || v - r > h {
        return None;
    }
    Some((u, v, r, (x0, x1, y0, y1)))
}

/// Anti-aliased pixel coverage of a disk: 1 inside, 0 outside, linear ramp
/// across the one-pixel rim.
fn coverage(dist: f64, r: f64) -> f64 {
    (r + 0.5 - dist).clamp(0.0, 1.0)
}

/// Renders the RGB camera view (interleaved 8-bit, 160x160x3) of the ball at
/// `ball_pos` (world frame). A ball behind the camera leaves the plain
/// backdrop.
pub fn render_rgb(scene: &Scene, backdrop: &Backdrop, ball_pos: [f64; 3]) -> Vec<u8> {
    let cam = &scene.rgb_cam;
    let w = cam.width as usize;
    let mut out = backdrop.bg_rgb_u8.clone();
    let rel = [
        ball_pos[0] - scene.drone_pos[0],
        ball_pos[1] - scene.drone_pos[1],
        ball_pos[2] - scene.drone_pos[2],
    ];
    let Some((u, v, r, (x0, x1, y0, y1))) = disk(cam, rel, scene.ball_diameter_m / 2.0) else {
        return out;
    };
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 + 0.5 - u).powi(2) + (y as f64 + 0.5 - v).powi(2)).sqrt();
            let c = coverage(d, r);
            if c > 0.0 {
                for ch in 0..3 {
                    let bg = backdrop.bg_rgb[(y * w + x) * 3 + ch];
                    out[(y * w + x) * 3 + ch] = quantize(bg + (BALL_RGB[ch] - bg) * c);
                }
            }
        }
    }
    out
}

/// Renders the event camera's linear luminance view (320x320 f32 in [0,1]).
pub fn render_luminance(scene: &Scene, backdrop: &Backdrop, ball_pos: [f64; 3]) -> Vec<f32> {
    let cam = &scene.lum_cam;
    let w = cam.width as usize;
    let mut out = backdrop.bg_lum.clone();
    let rel = [
        ball_pos[0] - scene.drone_pos[0],
        ball_pos[1] - scene.drone_pos[1],
        ball_pos[2] - scene.drone_pos[2],
    ];
    let Some((u, v, r, (x0, x1, y0, y1))) = disk(cam, rel, scene.ball_diameter_m / 2.0) else {
        return out;
    };
    let ball_lum = (BALL_RGB.iter().sum::<f64>() / 3.0) as f32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 + 0.5 - u).powi(2) + (y as f64 + 0.5 - v).powi(2)).sqrt();
            let c = coverage(d, r) as f32;
            if c > 0.0 {
                let bg = out[y * w + x];
                out[y * w + x] = bg + (ball_lum - bg) * c;
            }
        }
    }
    out
}

/// Brightness-change event model: per pixel, emit floor(|delta log
/// luminance| / threshold) events with the sign of the change, timestamps
/// spread uniformly over (t_prev, t_cur]. Luminance is floored at 1e-4
/// before the log. The returned stream is sorted by (t, y, x).
pub fn render_events(
    prev: &[f32],
    cur: &[f32],
    width: usize,
    t_prev_us: u64,
    t_cur_us: u64,
    threshold: f32,
) -> Vec<Event> {
    debug_assert_eq!(prev.len(), cur.len());
    let dt = t_cur_us - t_prev_us;
    let mut events = Vec::new();
    for (i, (&lp, &lc)) in prev.iter().zip(cur).enumerate() {
        if lp == lc {
            continue;
        }
        let d = (lc.max(1e-4)).ln() - (lp.max(1e-4)).ln();
        let n = (d.abs() / threshold).floor() as u64;
        if n == 0 {
            continue;
        }
        let polarity = if d > 0.0 { 1i8 } else { -1 };
        let x = (i % width) as u16;
        let y = (i / width) as u16;
        for j in 0..n {
            events.push(Event {
                t_us: t_prev_us + (j + 1) * dt / n,
                x,
                y,
                polarity,
            });
        }
    }
    events.sort_by_key(|e| (e.t_us, e.y, e.x));
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};

    #[test]
    fn projection_matches_hand_formula_for_random_poses() {
        let scene = Scene::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = [
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.4..2.5),
            ];
            let (u, v) = scene.rgb_cam.project(p).unwrap();
            let want_u = scene.rgb_cam.focal_px * p[0] / p[2] + scene.rgb_cam.cx;
            let want_v = scene.rgb_cam.focal_px * p[1] / p[2] + scene.rgb_cam.cy;
            assert!((u - want_u).abs() < 0.5 && (v - want_v).abs() < 0.5);
        }
    }

    #[test]
    fn axis_ball_renders_centered_at_the_principal_point() {
        let scene = Scene::default();
        let backdrop = Backdrop::constant(0.4, &scene);
        let frame = render_rgb(&scene, &backdrop, [0.0, 0.0, 1.0]);
        // The disk must be symmetric about the principal point (80, 80):
        // pixel centers x+0.5 and 159-x+0.5 are mirror images.
        for y in 0..160 {
            for x in 0..160 {
                assert_eq!(
                    frame[(y * 160 + x) * 3],
                    frame[((159 - y) * 160 + (159 - x)) * 3],
                    "asymmetry at ({x},{y})"
                );
            }
        }
        // And the center pixel is ball-colored, corners are backdrop.
        assert_eq!(frame[(80 * 160 + 80) * 3], quantize(BALL_RGB[0]));
        assert_eq!(frame[0], quantize(0.4));
    }

    #[test]
    fn doubling_depth_halves_the_disk_radius() {
        let scene = Scene::default();
        let backdrop = Backdrop::constant(0.4, &scene);
        let radius_of = |depth: f64| -> f64 {
            let frame = render_rgb(&scene, &backdrop, [0.0, 0.0, depth]);
            let bg = quantize(0.4);
            let area = frame.chunks(3).filter(|px| px[0] != bg).count() as f64;
            (area / std::f64::consts::PI).sqrt()
        };
        let (r1, r2) = (radius_of(0.8), radius_of(1.6));
        assert!((r1 - 2.0 * r2).abs() <= 1.0, "r(0.8m) = {r1}, r(1.6m) = {r2}");
        // Absolute scale: r = f * 0.075 / z.
        assert!((r1 - scene.rgb_cam.focal_px * 0.075 / 0.8).abs() <= 1.0);
    }

    #[test]
    fn ball_behind_camera_leaves_plain_backdrop() {
        let scene = Scene::default();
        let backdrop = Backdrop::constant(0.5, &scene);
        let frame = render_rgb(&scene, &backdrop, [0.0, 0.0, -1.0]);
        assert!(frame.iter().all(|v| *v == quantize(0.5)));
    }

    #[test]
    fn identical_frames_emit_no_events() {
        let f = vec![0.5f32; 16];
        assert!(render_events(&f, &f, 4, 0, 4000, 0.2).is_empty());
    }

    #[test]
    fn single_pixel_log_step_emits_floor_ratio_events() {
        let prev = vec![0.3f32; 16];
        let mut cur = prev.clone();
        cur[5] = 0.3 * 0.65f32.exp();
        let ev = render_events(&prev, &cur, 4, 1000, 5000, 0.2);
        assert_eq!(ev.len(), 3, "floor(0.65 / 0.2) = 3");
        assert!(ev.iter().all(|e| e.polarity == 1 && e.x == 1 && e.y == 1));
        // Timestamps fall in (t_prev, t_cur], last one exactly at t_cur.
        assert!(ev.iter().all(|e| e.t_us > 1000 && e.t_us <= 5000));
        assert_eq!(ev.last().unwrap().t_us, 5000);
        // Negative step mirrors with flipped polarity.
        let back = render_events(&cur, &prev, 4, 0, 4000, 0.2);
        assert!(back.len() == 3 && back.iter().all(|e| e.polarity == -1));
    }

    #[test]
    fn event_count_matches_pixelwise_recount_and_is_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 64 * 64;
        let prev: Vec<f32> = (0..n).map(|_| rng.random_range(0.05f32..0.95)).collect();
        let cur: Vec<f32> = (0..n).map(|_| rng.random_range(0.05f32..0.95)).collect();
        let ev = render_events(&prev, &cur, 64, 0, 20_000, 0.2);
        let mut want = 0usize;
        for i in 0..n {
            let d = (cur[i].max(1e-4)).ln() - (prev[i].max(1e-4)).ln();
            want += (d.abs() / 0.2).floor() as usize;
        }
        assert_eq!(ev.len(), want);
        assert!(ev.windows(2).all(|p| p[0].t_us <= p[1].t_us), "stream must be time-sorted");
        assert!(ev.iter().all(|e| e.polarity == 1 || e.polarity == -1));
    }
}
