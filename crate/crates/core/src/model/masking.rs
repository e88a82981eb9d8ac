use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::visible_count;
use crate::error::{Error, Result};
use crate::frontend::PatchSet;

/// Hides `round(rho · N)` patches chosen uniformly by a generator seeded with
/// `seed`. Any mask flags already present on `p` are replaced.
pub fn mask_patches(p: &PatchSet, rho: f64, seed: u64) -> Result<PatchSet> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid(format!("mask ratio must lie in [0, 1), got {rho}")));
    }
    let n = p.len();
    let keep = visible_count(n, rho);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![true; n];
    for i in rand::seq::index::sample(&mut rng, n, keep) {
        masked[i] = false;
    }
    let mut out = p.clone();
    out.masked = masked;
    Ok(out)
}

/// Mixes a run seed with stream coordinates into an independent 64-bit seed
/// (splitmix64 finalizer over a running hash).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
