//! Deterministic substream RNG.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, domain, index)`: the domain separates stages (panel
//! generation, bootstrap, folds, trees, ...) and the index separates
//! units within a stage (worker, resample, tree). Units can therefore be
//! processed in any order, on any number of threads, with bit-identical
//! results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stage labels for substream derivation. The discriminant feeds the
/// stream key, so the order here is part of the determinism contract:
/// append new domains, never reorder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    PanelWorker = 1,
    Folds = 2,
    BootstrapPrice = 3,
    ForestTree = 4,
    GbmTree = 5,
    UlsifCenters = 6,
    UlsifBootstrap = 7,
    MonteCarloRep = 8,
    CrossFit = 9,
}

/// A ChaCha8 generator for the given substream.
pub fn substream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) ^ index);
    rng
}

/// Standard normal draw via Box-Muller. Self-contained so that normal
/// deviates are reproducible independent of any library's sampling
/// algorithm choices.
pub fn draw_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        return r * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Fisher-Yates shuffle of indices `0..n`, deterministic for a given rng.
pub fn shuffled_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
