//! Stratified train/val/test splits balanced across central and peripheral
//! collision points.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CollisionLabel, Split};
use crate::{Error, Result};

/// Half-side of the central region around the drone, in millimeters.
pub const CENTRAL_HALF_MM: f32 = 300.0;

/// Split fractions for train/val/test1/test2.
pub const SPLIT_RATIOS: [f64; 4] = [0.60, 0.15, 0.125, 0.125];

/// True when the collision point lies in the central square
/// (|x| and |y| both at most 300 mm).
pub fn is_central(label: &CollisionLabel) -> bool {
    label.x_mm.abs() <= CENTRAL_HALF_MM && label.y_mm.abs() <= CENTRAL_HALF_MM
}

/// Assigns each recording a split, stratifying by central/peripheral
/// collision location so both strata are split 60/15/12.5/12.5 (largest-
/// remainder apportionment keeps every count within one recording of its
/// target). Deterministic for a given seed. Errors when a stratum has fewer
/// than 4 recordings.
pub fn make_splits(labels: &[CollisionLabel], seed: u64) -> Result<Vec<Split>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; labels.len()];
    for want_central in [true, false] {
        let mut idxs: Vec<usize> = (0..labels.len())
            .filter(|&i| is_central(&labels[i]) == want_central)
            .collect();
        if idxs.len() < 4 {
            return Err(Error::invalid(
                "make_splits",
                format!(
                    "{} stratum has only {} recordings; need at least 4",
                    if want_central { "central" } else { "peripheral" },
                    idxs.len()
                ),
            ));
        }
        idxs.shuffle(&mut rng);
        let counts = apportion(idxs.len(), &SPLIT_RATIOS);
        let mut cursor = 0usize;
        for (split, &count) in [Split::Train, Split::Val, Split::Test1, Split::Test2].iter().zip(&counts) {
            for &i in &idxs[cursor..cursor + count] {
                out[i] = *split;
            }
            cursor += count;
        }
    }
    Ok(out)
}

/// Largest-remainder apportionment of `n` items over `ratios`; each count is
/// within 1 of n * ratio and the counts sum to n exactly.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for k in 0..n - assigned {
        counts[order[k]] += 1;
    }
    counts
}
