//! Worker-level cross-validation folds, shared across all learner
//! families within a run.

use crate::error::{Error, Result};
use crate::rng::{shuffled_indices, substream, Domain};

#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Fold index per training row (= per worker).
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    /// Stable content hash used to assert that every family consumed the
    /// same assignment.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100000001b3);
        };
        mix(self.k as u64);
        mix(self.seed);
        for &f in &self.fold_of {
            mix(f as u64 + 1);
        }
        h
    }

    pub fn rows_in_fold(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn rows_not_in_fold(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Deterministic worker-level fold assignment: seeded shuffle, then
/// contiguous chunks whose sizes differ by at most one.
pub fn make_folds(n_workers: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid("make_folds: k must be at least 2"));
    }
    if k > n_workers {
        return Err(Error::TooManyFolds { k, n: n_workers });
    }
    let mut rng = substream(seed, Domain::Folds, 0);
    let order = shuffled_indices(n_workers, &mut rng);
    let base = n_workers / k;
    let extra = n_workers % k;
    let mut fold_of = vec![0usize; n_workers];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for _ in 0..size {
            fold_of[order[pos]] = fold;
            pos += 1;
        }
    }
    Ok(FoldAssignment { k, seed, fold_of })
}
