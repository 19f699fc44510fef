//! Seeded end-to-end pipelines and their file outputs.

mod config;
mod pipelines;
mod runner;
mod world;

pub use config::{Arrangement, ConfounderSpec, DownstreamSpec, EvalSpec, ExperimentConfig, PretrainSpec};
pub use pipelines::{
    ablation_seed, analysis_seed, confounder_seed, msweep_seed, scenario_seed, scratch_seed,
    AblationOutcome, AnalysisOutcome, ScenarioOutcome, ScratchOutcome, SweepOutcome, SweepRow, MAX_SWEEP_MODELS,
};
pub use world::{balanced_split, build_foundation, downstream_counts, estimate_from_zero_shot, pretrain_counts, World};
pub use runner::{
    ablation_table, analysis_table, confounder_table, report_row, report_table, run_analysis, run_confounder_probe,
    run_gla_ablation, run_msweep, run_scenario, run_scratch_control, run_seeds, scenario_table, scratch_slopes,
    summarize, sweep_table, RunManifest, RunOutput, RunStatus, SeedRecord, ARTIFACT_VERSION, MANIFEST_FILE,
    REPORT_COLUMNS,
};
