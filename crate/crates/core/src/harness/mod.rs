//! Experiment orchestration: configs, training runs with alignment curves,
//! plot-data export and the self-check suite.

mod config;
mod dump;
mod export;
mod run;
mod verify;

pub use config::{num_walkers, AlignmentConfig, ExperimentConfig, WalkerConfig, SEED_BASE};
pub use dump::{read_activation_dump, write_activation_dump, DumpHeader, DUMP_MAGIC, DUMP_VERSION};
pub use export::{export_figure_data, export_ground_truth, latest_checkpoint, load_run_config, Figure};
pub use run::{
    align_checkpoint, build_distribution, checkpoint_path, hash_comment, run_experiment, write_alignment_files,
    write_config_snapshot, RunOptions, RunSummary, ACTIVATION_DIR, ALIGNMENT_CSV, ALIGNMENT_JSON, CHECKPOINT_DIR,
    CONFIG_FILE, ENVIRONMENT_FILE, FIGURE_DIR, METRICS_FILE,
};
pub use verify::{check_names, run_verify, CheckResult};
