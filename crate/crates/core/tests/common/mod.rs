#![allow(dead_code)]

use caetc_core::data::{Schema, Trajectory};
use caetc_core::sim::rng::stream;
use rand::Rng;

pub fn schema(dim_x: usize, k: usize) -> Schema {
    Schema {
        dim_v: 2,
        dim_y: 1,
        dim_x,
        num_treatments: k,
        max_len: 12,
    }
}

/// Random trajectories of varying length with a weak treatment-outcome link.
pub fn units(schema: &Schema, n: usize, seed: u64) -> Vec<Trajectory> {
    let mut rng = stream(seed, "fixture", 0);
    (0..n)
        .map(|i| {
            let len = rng.random_range(2..=schema.max_len);
            let a: Vec<usize> = (0..len).map(|_| rng.random_range(0..schema.num_treatments)).collect();
            let mut level: f64 = rng.random_range(-1.0..1.0);
            let y = a
                .iter()
                .map(|&ai| {
                    level = 0.8 * level + 0.3 * ai as f64 - 0.2 + rng.random_range(-0.1..0.1);
                    vec![level]
                })
                .collect();
            let x = (schema.dim_x > 0).then(|| {
                (0..len)
                    .map(|_| (0..schema.dim_x).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            });
            Trajectory {
                id: i as u64,
                v: vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                a,
                y,
                x,
                len,
                gamma: 0.0,
                seed,
            }
        })
        .collect()
}
