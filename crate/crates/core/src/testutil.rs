//! Hand-built miniature recordings for fast unit tests: random events, flat
//! random RGB frames, a linear trajectory, and a collision 10 ms before the
//! end of the recording.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::events::{Event, RgbFrame, GRID_SIZE};
use crate::seed::derive_seed;
use crate::synth::{CollisionLabel, PreparedRecording, Split};
use crate::train::TrainData;

pub fn tiny_recording(id: u32, split: Split, seed: u64, duration_us: u64) -> PreparedRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id as u64, 0x7e57));
    let mut events: Vec<Event> = (0..1500)
        .map(|_| Event {
            t_us: rng.random_range(0..duration_us),
            x: rng.random_range(0..320u16),
            y: rng.random_range(0..320u16),
            polarity: if rng.random::<f32>() < 0.5 { 1 } else { -1 },
        })
        .collect();
    events.sort_by_key(|e| e.t_us);
    let n_frames = (duration_us / 20_000 + 1) as usize;
    let rgb = (0..n_frames)
        .map(|i| {
            let pixels = (0..3 * GRID_SIZE * GRID_SIZE).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            RgbFrame { pixels, timestamp_us: i as u64 * 20_000 }
        })
        .collect();
    let t_ms = duration_us as f32 / 1000.0 - 10.0;
    let n_ms = (duration_us / 1000 + 1) as usize;
    let ball_traj = (0..n_ms)
        .map(|ms| {
            let f = ms as f32 / n_ms as f32;
            [2.0 - 2.0 * f, 1.0 - f, 3.0 - 3.0 * f]
        })
        .collect();
    PreparedRecording {
        id,
        duration_us,
        label: CollisionLabel { x_mm: 40.0 + 15.0 * id as f32, y_mm: -60.0 + 10.0 * id as f32, t_ms },
        split,
        events,
        rgb,
        ball_traj,
    }
}

pub fn tiny_data(n_train: usize, n_val: usize, duration_us: u64) -> TrainData {
    let mut recs = Vec::new();
    for i in 0..n_train {
        recs.push(tiny_recording(i as u32, Split::Train, 11, duration_us));
    }
    for i in 0..n_val {
        recs.push(tiny_recording((n_train + i) as u32, Split::Val, 11, duration_us));
    }
    TrainData::from_recordings(recs).unwrap()
}
