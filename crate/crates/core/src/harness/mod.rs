//! Experiment protocols, configuration and report output.

mod config;
mod experiments;
mod output;

pub use config::{ExperimentConfig, Method};
pub use experiments::{
    config_diff, method_systems, run_ablation, run_baseline_comparison, run_conflict_sweep, run_sipo_rounds,
    Ablation, AblationCell, AblationReport, CompareCell, CompareReport, Improvement, RatioSummary, SeedContext,
    SipoRun, SweepCell, SweepReport,
};
pub use output::{write_ablation, write_compare, write_sweep, Manifest, OutputDir, MANIFEST_NAME};
