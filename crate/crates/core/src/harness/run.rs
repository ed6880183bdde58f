//! One training run: tables, dataset, training loop, and alignment curves
//! captured at every checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::alignment::{append_report_rows, write_reports_json, AlignmentReport, PrefixTargets};
use crate::dataset::{build_joint, PrefixDistribution};
use crate::error::{Error, Result};
use crate::lattice::{table_bytes, BinomialCounts, GreensTable, WalkerSpec, DEFAULT_MEMORY_BUDGET};
use crate::nn::{forward_prefixes, save_checkpoint, MetricLog, MetricRow, Model, ModelState, TrainHooks};

use super::config::ExperimentConfig;
use super::dump::write_activation_dump;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ALIGNMENT_JSON: &str = "alignment.json";
pub const ALIGNMENT_CSV: &str = "alignment.csv";
pub const ENVIRONMENT_FILE: &str = "environment.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ACTIVATION_DIR: &str = "activations";
pub const FIGURE_DIR: &str = "figures";

/// Comment line tying a CSV to its run configuration.
pub fn hash_comment(hash: &str) -> String {
    format!("config_hash={hash}")
}

pub fn checkpoint_path(run: &Path, step: u64) -> PathBuf {
    run.join(CHECKPOINT_DIR).join(format!("step_{step:08}.gwck"))
}

/// Exact prefix distribution for a walker, from a DP table when it fits in
/// memory and from closed-form counts otherwise.
pub fn build_distribution(spec: &WalkerSpec) -> Result<PrefixDistribution> {
    if table_bytes(spec.horizon()) <= DEFAULT_MEMORY_BUDGET as u128 {
        build_joint(spec, &GreensTable::build(spec.horizon())?)
    } else {
        build_joint(spec, &BinomialCounts)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Validate the config and write the snapshot without training.
    pub dry_run: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub config_hash: String,
    pub final_metrics: Option<MetricRow>,
    /// Reports of the last checkpoint, one per capture point.
    pub final_alignment: Vec<AlignmentReport>,
    pub seconds: f64,
}

#[derive(Serialize)]
struct Environment<'a> {
    config_hash: &'a str,
    package: &'static str,
    version: &'static str,
    os: &'static str,
    arch: &'static str,
    debug_assertions: bool,
    float: &'static str,
}

#[derive(Serialize)]
struct AlignmentFile<'a> {
    config_hash: &'a str,
    reports: &'a [AlignmentReport],
}

struct RunHooks {
    dir: PathBuf,
    hash: String,
    targets: PrefixTargets,
    /// Class of every trie row, for activation dumps.
    row_classes: Vec<u32>,
    shape: Vec<Vec<(u32, u8)>>,
    dump: bool,
    metrics: MetricLog<BufWriter<File>>,
    alignment_csv: csv::Writer<BufWriter<File>>,
    reports: Vec<AlignmentReport>,
    last: Option<MetricRow>,
}

impl TrainHooks for RunHooks {
    fn on_validation(&mut self, row: &MetricRow) -> Result<()> {
        self.metrics.push(row)?;
        self.last = Some(row.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &ModelState) -> Result<()> {
        let step = state.step();
        save_checkpoint(state, &checkpoint_path(&self.dir, step))?;
        let out = forward_prefixes(&state.model, &self.shape, true)?;
        let acts = out.activations.expect("capture requested");
        let reports = self.targets.reports(&acts, step)?;
        append_report_rows(&mut self.alignment_csv, &reports)?;
        self.alignment_csv.flush()?;
        if let Some(f) = reports.iter().find(|r| r.point == "ln_final") {
            log::info!("step {step} ln_final cv_r2 {:.4} lcka {:.4} dims_99 {}", f.cv_r2, f.lcka, f.dims_99);
        }
        self.reports.extend(reports);
        let file = AlignmentFile { config_hash: &self.hash, reports: &self.reports };
        serde_json::to_writer_pretty(BufWriter::new(File::create(self.dir.join(ALIGNMENT_JSON))?), &file)?;
        if self.dump {
            let path = self.dir.join(ACTIVATION_DIR).join(format!("step_{step:08}.gwac"));
            write_activation_dump(&path, &self.hash, step, &self.row_classes, &acts)?;
        }
        Ok(())
    }
}

fn write_environment(dir: &Path, hash: &str) -> Result<()> {
    let env = Environment {
        config_hash: hash,
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        os: std::env::consts::OS,
        arch: std::env::consts::ARCH,
        debug_assertions: cfg!(debug_assertions),
        float: "f64",
    };
    serde_json::to_writer_pretty(File::create(dir.join(ENVIRONMENT_FILE))?, &env)?;
    Ok(())
}

/// Writes the config snapshot with its hash as a leading comment.
pub fn write_config_snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let mut f = File::create(dir.join(CONFIG_FILE))?;
    writeln!(f, "# {}", hash_comment(&cfg.hash()))?;
    f.write_all(cfg.to_toml().as_bytes())?;
    Ok(())
}

/// Runs one experiment into `dir`, which must not already hold a run.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let hash = cfg.hash();
    if dir.join(METRICS_FILE).exists() {
        return Err(Error::InvalidState(format!("{} already holds a run", dir.display())));
    }
    std::fs::create_dir_all(dir)?;
    write_config_snapshot(cfg, dir)?;
    write_environment(dir, &hash)?;
    let mut summary = RunSummary {
        dir: dir.to_path_buf(),
        config_hash: hash.clone(),
        final_metrics: None,
        final_alignment: Vec::new(),
        seconds: 0.0,
    };
    if opts.dry_run {
        log::info!("dry run: config {hash} validated");
        return Ok(summary);
    }
    std::fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    if cfg.alignment.dump_activations {
        std::fs::create_dir_all(dir.join(ACTIVATION_DIR))?;
    }

    let spec = cfg.walker.spec()?;
    let dist = build_distribution(&spec)?;
    log::info!(
        "walker p={} T={} tau={}: {} sequences, {} prefixes",
        spec.endpoint(),
        spec.horizon(),
        spec.prefix_len(),
        dist.num_sequences(),
        dist.num_prefixes()
    );
    let targets = PrefixTargets::new(&dist, cfg.alignment.min_t)?;
    if targets.skipped_forced > 0 {
        log::warn!(
            "{} prefixes with a forced next step are excluded from alignment",
            targets.skipped_forced
        );
    }
    let comments = [hash_comment(&hash)];
    let metrics = MetricLog::new(BufWriter::new(File::create(dir.join(METRICS_FILE))?), &comments)?;
    let mut alignment_out = BufWriter::new(File::create(dir.join(ALIGNMENT_CSV))?);
    writeln!(alignment_out, "# {}", comments[0])?;
    let mut alignment_csv = csv::Writer::from_writer(alignment_out);
    alignment_csv.write_record(["layer", "metric", "value", "checkpoint_step"])?;

    let mut hooks = RunHooks {
        dir: dir.to_path_buf(),
        hash,
        targets,
        row_classes: dist.levels().iter().flatten().map(|n| n.class).collect(),
        shape: dist.trie_shape(),
        dump: cfg.alignment.dump_activations,
        metrics,
        alignment_csv,
        reports: Vec::new(),
        last: None,
    };
    let t = &cfg.train;
    let mut state = ModelState::new(Model::init(cfg.model.clone(), cfg.seed)?, t.adam, t.scheduler, t.lr, cfg.seed);
    let mut train_cfg = t.clone();
    // alignment curves need at least the initial and final captures
    if train_cfg.checkpoint_every == 0 {
        train_cfg.checkpoint_every = train_cfg.epochs.max(1);
    }
    crate::nn::train(&mut state, &dist, &train_cfg, &mut hooks)?;

    let last_step = state.step();
    summary.final_alignment = hooks.reports.iter().filter(|r| r.step == last_step).cloned().collect();
    summary.final_metrics = hooks.last.take();
    summary.seconds = started.elapsed().as_secs_f64();
    Ok(summary)
}

/// Reports for an arbitrary checkpoint, outside a run.
pub fn align_checkpoint(state: &ModelState, dist: &PrefixDistribution, min_t: u64) -> Result<Vec<AlignmentReport>> {
    let targets = PrefixTargets::new(dist, min_t)?;
    let out = forward_prefixes(&state.model, &dist.trie_shape(), true)?;
    targets.reports(&out.activations.expect("capture requested"), state.step())
}

/// Writes alignment reports as JSON and long CSV into `dir`.
pub fn write_alignment_files(reports: &[AlignmentReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_reports_json(reports, BufWriter::new(File::create(dir.join(ALIGNMENT_JSON))?))?;
    crate::alignment::write_reports_csv(reports, BufWriter::new(File::create(dir.join(ALIGNMENT_CSV))?))
}
