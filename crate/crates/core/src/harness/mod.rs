//! Campaign runner: config loading, the parallel attack loop, success-rate
//! CDFs and their CSV and SVG renderings.

mod campaign;
mod config;
mod report;

pub use campaign::{derive_seed, read_records, run_campaign, run_experiment, write_records, AttackRecord, RecordStatus};
pub use config::{ExperimentConfig, ImageEntry, ImageSet, ModelRef, Target, TargetHandle, TargetProtocol};
pub use report::{
    compute_cdf, emit_outputs, group_cdfs, read_cdf_csv, render_svg, write_cdf_csv, write_plots, SuccessCdf,
};
