//! Configuration, persistence and the stage orchestrator.

mod config;
mod digest;
mod pipeline;

pub use config::{AnalysisConfig, CohortOverrides, RadiomicsOverrides, Resolved, RunConfig, DEFAULT_SEED};
pub use digest::{file_sha256, sha256_hex};
pub use pipeline::{
    read_reports, Pipeline, Stage, StageError, StageMarker, StageOutcome, ERROR_REPORT_FILE, FEATURES_FILE, FEATURES_META_FILE, REPEAT_FEATURES_FILE, SPLIT_FILE, STABILITY_FILE,
    STABLE_FEATURES_FILE, STATE_DIR, TOOL_VERSION,
};
