//! Seed derivation and small sampling helpers shared by the simulators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{CoreError, Result};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for a named sub-stream and index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix64(master);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index))
}

pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Normal(mean, sd) restricted to `[lo, hi]` by rejection; a zero `sd`
/// returns the mean clamped into the interval.
pub fn truncated_normal<R: Rng + ?Sized>(
    rng: &mut R,
    mean: f64,
    sd: f64,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    if !(sd >= 0.0) || !(lo < hi) {
        return Err(CoreError::Config(format!(
            "bad truncated normal ({mean}, {sd}) on [{lo}, {hi}]"
        )));
    }
    if sd == 0.0 {
        return Ok(mean.clamp(lo, hi));
    }
    for _ in 0..100_000 {
        let v = mean + sd * normal(rng);
        if v >= lo && v <= hi {
            return Ok(v);
        }
    }
    Err(CoreError::Config(format!(
        "truncated normal ({mean}, {sd}) on [{lo}, {hi}] has negligible mass"
    )))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_tag_and_index() {
        let a = derive_seed(7, "train", 0);
        assert_ne!(a, derive_seed(7, "train", 1));
        assert_ne!(a, derive_seed(7, "test", 0));
        assert_ne!(a, derive_seed(8, "train", 0));
        assert_eq!(a, derive_seed(7, "train", 0));
    }

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = stream(1, "t", 0);
        for _ in 0..1000 {
            let v = truncated_normal(&mut rng, 0.0, 1.0, 0.5, 2.0).unwrap();
            assert!((0.5..=2.0).contains(&v));
        }
        assert_eq!(truncated_normal(&mut rng, 3.0, 0.0, 0.0, 10.0).unwrap(), 3.0);
    }
}
