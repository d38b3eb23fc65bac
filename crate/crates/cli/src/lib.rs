//! Pipeline orchestration: one JSON config drives synthetic generation
//! and every estimation stage in dependency order, with a manifest of
//! content-hashed outputs. Reruns with identical config and inputs are
//! byte-identical (manifest wall-times aside), on any thread count.

pub mod logging;
pub mod pipeline;
pub mod stages;

pub use pipeline::{run_pipeline, PipelineConfig, RunManifest};

/// Process exit codes: 0 success, 2 config error, 3 stage failure.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_STAGE: u8 = 3;
