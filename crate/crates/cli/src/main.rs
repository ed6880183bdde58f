//! `gridwalk`: build tables, train, validate, align, export plot data and
//! run the self-checks.
//!
//! Exit codes: 0 success, 1 failure (including failed checks), 2 bad
//! configuration or arguments.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridwalk::dataset::PrefixDistribution;
use gridwalk::geometry::SufficientVector;
use gridwalk::harness::{
    align_checkpoint, build_distribution, export_figure_data, export_ground_truth, latest_checkpoint,
    load_run_config, run_experiment, run_verify, write_alignment_files, ExperimentConfig, Figure, RunOptions,
    WalkerConfig, CONFIG_FILE,
};
use gridwalk::lattice::io::save_table;
use gridwalk::lattice::{enumerate_classes, GreensTable, Offset, WalkerSpec, DEFAULT_PREFIX_LEN};
use gridwalk::nn::{load_checkpoint, validate, ModelState};
use gridwalk::Error;

#[derive(Parser)]
#[command(name = "gridwalk", version, about = "Endpoint-constrained lattice walks and transformers trained on them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the path-count table for a walker and export its prefix classes.
    Tables(TablesArgs),
    /// Train a model, recording metrics, checkpoints and alignment curves.
    Train(TrainArgs),
    /// Exact validation loss of a checkpoint.
    Validate(CheckpointArgs),
    /// Alignment metrics of a checkpoint against the exact predictive targets.
    Align(AlignArgs),
    /// Plot data from a finished run, or ground truth alone.
    Export(ExportArgs),
    /// Run the self-check suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configured walker, 1 to 6.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
    walker: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reduced model and schedule (the default).
    #[arg(long, conflicts_with = "full_scale")]
    desk_scale: bool,
    /// Full-size model and 20 000-epoch schedule.
    #[arg(long)]
    full_scale: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                if self.desk_scale || self.full_scale {
                    return Err(Error::Config("--desk-scale/--full-scale cannot be combined with --config".into()));
                }
                ExperimentConfig::load(path).map_err(|e| match e {
                    Error::NotFound(p) => Error::Config(format!("config file {} not found", p.display())),
                    e => e,
                })?
            }
            None => {
                let w = self.walker.unwrap_or(1) as usize;
                if self.full_scale {
                    ExperimentConfig::full(w)
                } else {
                    ExperimentConfig::desk(w)
                }
            }
        };
        if let (Some(_), Some(w)) = (&self.config, self.walker) {
            cfg.walker = WalkerConfig { prefix_len: cfg.walker.prefix_len, ..WalkerConfig::indexed(w as usize) };
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TablesArgs {
    /// Endpoint as `X,Y`.
    #[arg(long, value_parser = parse_endpoint, allow_hyphen_values = true)]
    endpoint: Offset,
    #[arg(long)]
    horizon: u64,
    /// Prefix length of the exported classes.
    #[arg(long, default_value_t = DEFAULT_PREFIX_LEN)]
    prefix_len: u64,
    /// Table file; the class CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory; defaults to `runs/<config hash prefix>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<u64>,
    /// Validate the config and write the snapshot only.
    #[arg(long)]
    dry_run: bool,
    /// Write the resolved config to stdout and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory; uses its config and latest checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    source: CheckpointArgs,
    /// Shortest prefix included; defaults to the config value.
    #[arg(long)]
    min_t: Option<u64>,
    /// Directory for `alignment.json` and `alignment.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, required_unless_present = "ground_truth")]
    run: Option<PathBuf>,
    /// pc_scatter, metric_curves or pca_dims.
    #[arg(long, required_unless_present = "ground_truth")]
    figure: Option<Figure>,
    /// Ground-truth principal components only, no run needed.
    #[arg(long, conflicts_with_all = ["run", "figure"])]
    ground_truth: bool,
    /// Output directory for `--ground-truth`.
    #[arg(long, default_value = "figures")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only the named checks.
    #[arg(long = "check")]
    checks: Vec<String>,
}

fn parse_endpoint(s: &str) -> Result<Offset, String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let p = |v: &str| v.trim().parse::<i64>().map_err(|e| format!("{v:?}: {e}"));
    Ok(Offset::new(p(x)?, p(y)?))
}

enum Failure {
    Config(String),
    Failed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Failed(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Failed(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Failed(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tables(a) => tables(a),
        Command::Train(a) => train(a),
        Command::Validate(a) => validate_cmd(a),
        Command::Align(a) => align(a),
        Command::Export(a) => export(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Failed(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn tables(a: TablesArgs) -> Result<(), Failure> {
    let spec = WalkerSpec::new(a.endpoint, a.horizon, a.prefix_len.min(a.horizon))
        .map_err(|e| Failure::Config(e.to_string()))?;
    let table = GreensTable::build(a.horizon)?;
    save_table(&table, &a.out)?;
    let csv_path = a.out.with_extension("classes.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&csv_path)?));
    w.write_record(["t", "x", "y", "degeneracy", "log_prob", "p_L", "p_R", "p_D", "p_U", "u_x", "u_y", "v_x", "v_y"])?;
    for c in enumerate_classes(&table, &spec)? {
        let mut rec = vec![
            c.step.to_string(),
            c.position.x.to_string(),
            c.position.y.to_string(),
            c.degeneracy.to_string(),
            format!("{:e}", c.log_prob),
        ];
        rec.extend(c.next_step_logp.iter().map(|lp| format!("{:e}", lp.exp())));
        // undefined on the last step and where the next move is forced
        match SufficientVector::for_prefix(&spec, c.position, c.step) {
            Ok(sv) => rec.extend([sv.u[0], sv.u[1], sv.v[0], sv.v[1]].iter().map(|v| format!("{v:e}"))),
            Err(_) => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    println!("wrote {} and {}", a.out.display(), csv_path.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = a.config.resolve()?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        cfg.validate()?;
    }
    if a.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let dir = a.out.unwrap_or_else(|| Path::new("runs").join(&cfg.hash()[..12]));
    let s = run_experiment(&cfg, &dir, &RunOptions { dry_run: a.dry_run })?;
    println!("run {} (config {})", s.dir.display(), s.config_hash);
    if let Some(m) = &s.final_metrics {
        println!("step {} mean excess validation loss {:.4e}", m.step, m.mean_excess());
    }
    for r in &s.final_alignment {
        println!("{:<14} cv_r2 {:.4} lcka {:.4} dims_99 {}", r.point, r.cv_r2, r.lcka, r.dims_99);
    }
    if !a.dry_run {
        println!("{:.1} s", s.seconds);
    }
    Ok(())
}

fn load_source(a: &CheckpointArgs) -> Result<(ExperimentConfig, ModelState, PrefixDistribution), Failure> {
    let (cfg, ckpt) = match (&a.run, &a.checkpoint) {
        (Some(run), _) => (load_run_config(run)?.0, latest_checkpoint(run)?),
        (None, Some(c)) => (a.config.resolve()?, c.clone()),
        (None, None) => return Err(Failure::Config("need --run or --checkpoint".into())),
    };
    let state = load_checkpoint(&ckpt)?;
    if state.model.config() != &cfg.model {
        return Err(Failure::Config(format!(
            "checkpoint {} holds a different model than the config",
            ckpt.display()
        )));
    }
    let dist = build_distribution(&cfg.walker.spec()?)?;
    Ok((cfg, state, dist))
}

fn validate_cmd(a: CheckpointArgs) -> Result<(), Failure> {
    let (_, state, dist) = load_source(&a)?;
    let r = validate(&state.model, &dist)?;
    println!("step {}", state.step());
    for (k, e) in r.excess.iter().enumerate() {
        println!("position {:>2}  loss {:.6}  entropy {:.6}  excess {:.4e}", k + 2, r.loss[k], r.entropy[k], e);
    }
    println!("mean excess {:.4e}", r.mean_excess());
    Ok(())
}

fn align(a: AlignArgs) -> Result<(), Failure> {
    let (cfg, state, dist) = load_source(&a.source)?;
    let reports = align_checkpoint(&state, &dist, a.min_t.unwrap_or(cfg.alignment.min_t))?;
    for r in &reports {
        println!("{:<14} cv_r2 {:.4} lcka {:.4} dims_99 {}", r.point, r.cv_r2, r.lcka, r.dims_99);
    }
    if let Some(out) = a.out {
        write_alignment_files(&reports, &out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<(), Failure> {
    if a.ground_truth {
        let cfg = a.config.resolve()?;
        let (path, pca) = export_ground_truth(&cfg, &a.out)?;
        println!("wrote {} (dims_99 {})", path.display(), pca.dims_99);
        return Ok(());
    }
    let run = a.run.expect("required by clap");
    if !run.join(CONFIG_FILE).exists() {
        return Err(Error::NotFound(run.join(CONFIG_FILE)).into());
    }
    for p in export_figure_data(&run, a.figure.expect("required by clap"))? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), Failure> {
    let known = gridwalk::harness::check_names();
    if let Some(bad) = a.checks.iter().find(|c| !known.contains(&c.as_str())) {
        return Err(Failure::Config(format!("unknown check {bad:?}; known: {}", known.join(", "))));
    }
    let results = run_verify(&a.checks);
    let mut failed = 0;
    for r in &results {
        println!("{} {:<20} {:>7.2}s  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Failed(format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
