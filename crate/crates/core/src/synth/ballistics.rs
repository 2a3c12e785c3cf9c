//! Drag-free ballistic trajectories, obstacle truncation, collision labels,
//! and rejection sampling of throw parameters.
//!
//! World frame equals the camera frame: x right, y down, z forward (depth
//! away from the camera). Gravity therefore points toward positive y and the
//! floor is a plane at positive y.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::{CollisionLabel, Scene, ThrowParams};
use crate::{Error, Result};

/// Trajectory sample period: 1 kHz.
pub const TRAJ_DT_S: f64 = 1e-3;

/// Closed-form ballistic path x(t) = x0 + v0 t + (0, g, 0) t^2 / 2, sampled
/// at 1 kHz over [0, duration]; exactly floor(duration*1000)+1 samples.
/// `gravity_y` is the downward acceleration (pass 0 to disable).
pub fn simulate_trajectory(p: &ThrowParams, gravity_y: f64) -> Vec<[f64; 3]> {
    let n = (p.duration_s * 1000.0).floor() as usize + 1;
    (0..n)
        .map(|i| {
            let t = i as f64 * TRAJ_DT_S;
            [
                p.launch_pos[0] + p.launch_vel[0] * t,
                p.launch_pos[1] + p.launch_vel[1] * t + 0.5 * gravity_y * t * t,
                p.launch_pos[2] + p.launch_vel[2] * t,
            ]
        })
        .collect()
}

/// Freezes the ball where it first meets the plexiglass wall plane (z =
/// wall_z, crossing point interpolated) or comes to rest on the floor
/// (y = floor_rest_y). Later samples repeat the freeze position so the
/// trajectory still covers the full duration.
pub fn truncate_obstacles(traj: &mut [[f64; 3]], wall_z: f64, floor_rest_y: f64) {
    let mut frozen: Option<[f64; 3]> = None;
    for i in 1..traj.len() {
        if let Some(p) = frozen {
            traj[i] = p;
            continue;
        }
        let (prev, cur) = (traj[i - 1], traj[i]);
        let a_wall = if cur[2] < wall_z && prev[2] >= wall_z {
            Some((wall_z - prev[2]) / (cur[2] - prev[2]))
        } else {
            None
        };
        let a_floor = if cur[1] > floor_rest_y && prev[1] <= floor_rest_y {
            Some((floor_rest_y - prev[1]) / (cur[1] - prev[1]))
        } else {
            None
        };
        let hit = match (a_wall, a_floor) {
            (Some(w), Some(f)) => Some((w.min(f), w <= f)),
            (Some(w), None) => Some((w, true)),
            (None, Some(f)) => Some((f, false)),
            (None, None) => None,
        };
        if let Some((alpha, is_wall)) = hit {
            let mut p = [
                prev[0] + alpha * (cur[0] - prev[0]),
                prev[1] + alpha * (cur[1] - prev[1]),
                prev[2] + alpha * (cur[2] - prev[2]),
            ];
            if is_wall {
                p[2] = wall_z;
            } else {
                p[1] = floor_rest_y;
            }
            traj[i] = p;
            frozen = Some(p);
        }
    }
}

/// Finds the closest approach between two time-aligned 1 kHz trajectories and
/// returns the in-plane relative offset (ball minus drone, millimeters) and
/// the approach time in milliseconds from the trajectory start. Distance ties
/// break toward the earliest sample.
pub fn compute_label(ball: &[[f64; 3]], drone: &[[f64; 3]]) -> Result<CollisionLabel> {
    if ball.is_empty() || drone.is_empty() {
        return Err(Error::invalid("compute_label", "trajectories must be non-empty"));
    }
    if ball.len() != drone.len() {
        return Err(Error::invalid(
            "compute_label",
            format!("trajectories must be time-aligned: {} vs {} samples", ball.len(), drone.len()),
        ));
    }
    let mut best_i = 0usize;
    let mut best_d2 = f64::INFINITY;
    for i in 0..ball.len() {
        let dx = ball[i][0] - drone[i][0];
        let dy = ball[i][1] - drone[i][1];
        let dz = ball[i][2] - drone[i][2];
        let d2 = dx * dx + dy * dy + dz * dz;
        if d2 < best_d2 {
            best_d2 = d2;
            best_i = i;
        }
    }
    Ok(CollisionLabel {
        x_mm: ((ball[best_i][0] - drone[best_i][0]) * 1000.0) as f32,
        y_mm: ((ball[best_i][1] - drone[best_i][1]) * 1000.0) as f32,
        t_ms: best_i as f32,
    })
}

/// Keep the ball center inside the camera frame (with margin) while it is at
/// least this far out; on the final approach it may drift out of the narrow
/// field of view, exactly as a near miss passes beside a real camera.
pub const VISIBLE_MIN_Z_M: f64 = 0.75;

/// Rejection-samples a throw aimed at the wall plane near the drone.
/// Guarantees, by construction and explicit checks, that launch speed,
/// launch height above the floor, and the launch-to-wall chord stay inside
/// the dataset's published ranges, that the ball stays above the floor and
/// inside both camera frusta until its final approach (beyond
/// [`VISIBLE_MIN_Z_M`]), and that the flight lasts long enough to yield
/// several pre-collision windows. Wall-plane crossings are drawn uniformly
/// from a square wider than the central stratum so both strata occur.
pub fn sample_throw_params(rng: &mut ChaCha8Rng, scene: &Scene, duration_s: f64, seed: u64) -> ThrowParams {
    let g = scene.gravity;
    for _ in 0..100_000 {
        let t_w = rng.random_range(0.40..1.0);
        let z0 = rng.random_range(1.0..2.3);
        let x0 = rng.random_range(-0.55..0.55);
        let elevation = rng.random_range(0.25..1.8);
        let y0 = scene.floor_y_m - elevation;
        let aim_x = rng.random_range(-0.45..0.45);
        let aim_y = rng.random_range(-0.45..0.45);
        // Solve v0 so the parabola crosses the wall plane at (aim_x, aim_y)
        // at time t_w.
        let v0 = [
            (aim_x - x0) / t_w,
            (aim_y - y0 - 0.5 * g * t_w * t_w) / t_w,
            (scene.wall_z_m - z0) / t_w,
        ];
        let speed = (v0[0] * v0[0] + v0[1] * v0[1] + v0[2] * v0[2]).sqrt();
        if !(1.5..=4.5).contains(&speed) {
            continue;
        }
        let chord = ((aim_x - x0).powi(2) + (aim_y - y0).powi(2) + (scene.wall_z_m - z0).powi(2)).sqrt();
        if !(0.8..=2.35).contains(&chord) {
            continue;
        }
        let pos = |t: f64| -> [f64; 3] {
            [x0 + v0[0] * t, y0 + v0[1] * t + 0.5 * g * t * t, z0 + v0[2] * t]
        };
        // Stay above the floor throughout, and keep the ball center inside
        // the frame during the approach (the cameras share a field of view,
        // so checking one suffices).
        let mut ok = true;
        for k in 0..=25 {
            let p = pos(t_w * k as f64 / 25.0);
            if p[1] > scene.floor_y_m - 0.1 {
                ok = false;
                break;
            }
            if p[2] - scene.drone_pos[2] < VISIBLE_MIN_Z_M {
                continue;
            }
            match scene.rgb_cam.project([p[0] - scene.drone_pos[0], p[1] - scene.drone_pos[1], p[2] - scene.drone_pos[2]]) {
                Some((u, v)) => {
                    let (w, h) = (scene.rgb_cam.width as f64, scene.rgb_cam.height as f64);
                    if !(2.0..=w - 2.0).contains(&u) || !(2.0..=h - 2.0).contains(&v) {
                        ok = false;
                        break;
                    }
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        return ThrowParams { launch_pos: [x0, y0, z0], launch_vel: v0, duration_s, seed };
    }
    unreachable!("throw sampler failed to accept after 100000 attempts; ranges are inconsistent");
}
