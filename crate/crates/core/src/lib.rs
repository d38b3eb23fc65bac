//! Estimation toolkit for latent worker skills from noisy panel wages.
//!
//! The crate covers the full estimation chain: weighted panel primitives,
//! a synthetic data generator with known ground truth, propensity
//! reweighting, skill-price estimation (flat-spot and hedonic), quadratic
//! experience profiles with worker fixed effects, a five-family learner
//! suite under shared cross-validation folds, direct density-ratio
//! selection rules (uLSIF), a probit/Robinson selection correction, a
//! cross-sectional-average factor extension, and the downstream weighted
//! regression suite.
//!
//! Everything is deterministic: randomness flows through named
//! substreams, and parallel reductions happen in fixed index order, so
//! results are identical across thread counts. Parallel execution uses
//! rayon behind the default `parallel` feature; without it every entry
//! point falls back to sequential loops.

pub mod cce;
pub mod density_ratio;
pub mod error;
pub mod heckman;
pub mod learners;
pub mod linalg;
pub mod panel;
pub mod par;
pub mod price;
pub mod profile;
pub mod propensity;
pub mod regressions;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
