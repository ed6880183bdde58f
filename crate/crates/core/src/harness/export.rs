//! Plot-data export from finished runs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::alignment::{procrustes_align, weighted_pca, Pca, PrefixTargets};
use crate::dataset::PrefixDistribution;
use crate::error::{Error, Result};
use crate::nn::{forward_prefixes, load_checkpoint};

use super::config::ExperimentConfig;
use super::run::{
    build_distribution, hash_comment, ALIGNMENT_CSV, CHECKPOINT_DIR, CONFIG_FILE, FIGURE_DIR, METRICS_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Ground-truth and Procrustes-aligned final-LayerNorm principal
    /// components.
    PcScatter,
    /// Per-layer CV-R² and lCKA against training step.
    MetricCurves,
    /// Per-layer `dims_99` against training step.
    PcaDims,
}

impl std::str::FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pc_scatter" => Ok(Figure::PcScatter),
            "metric_curves" => Ok(Figure::MetricCurves),
            "pca_dims" => Ok(Figure::PcaDims),
            _ => Err(Error::arg(format!(
                "unknown figure {s:?}; expected pc_scatter, metric_curves or pca_dims"
            ))),
        }
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::NotFound(path))
    }
}

/// Reads the `# config_hash=` line heading a run CSV.
fn file_hash(path: &Path) -> Result<String> {
    let mut first = String::new();
    BufReader::new(File::open(require(path.to_path_buf())?)?).read_line(&mut first)?;
    first
        .trim()
        .strip_prefix("# config_hash=")
        .map(str::to_string)
        .ok_or_else(|| Error::Format(format!("{} has no config hash line", path.display())))
}

/// Loads a run's config and checks that every artifact carries its hash.
pub fn load_run_config(run: &Path) -> Result<(ExperimentConfig, String)> {
    let cfg = ExperimentConfig::load(&require(run.join(CONFIG_FILE))?)?;
    let hash = cfg.hash();
    for name in [CONFIG_FILE, METRICS_FILE, ALIGNMENT_CSV] {
        let found = file_hash(&run.join(name))?;
        if found != hash {
            return Err(Error::Corruption(format!(
                "{name} carries config hash {found}, config hashes to {hash}"
            )));
        }
    }
    Ok((cfg, hash))
}

/// Latest checkpoint in a run directory.
pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let dir = require(run.join(CHECKPOINT_DIR))?;
    let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gwck"))
        .collect();
    found.sort();
    found.pop().ok_or(Error::NotFound(dir))
}

struct CurvePoint {
    cv_r2: f64,
    lcka: f64,
    dims_99: f64,
}

/// `(step, layer order, layer) -> metrics` from a run's long-format CSV.
fn read_curves(path: &Path) -> Result<BTreeMap<(u64, usize), (String, CurvePoint)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut out: BTreeMap<(u64, usize), (String, CurvePoint)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = || Error::Format(format!("malformed row in {}: {rec:?}", path.display()));
        let (layer, metric, value, step) = (&rec[0], &rec[1], &rec[2], &rec[3]);
        let value: f64 = value.parse().map_err(|_| bad())?;
        let step: u64 = step.parse().map_err(|_| bad())?;
        let idx = match order.iter().position(|l| l == layer) {
            Some(i) => i,
            None => {
                order.push(layer.to_string());
                order.len() - 1
            }
        };
        let entry = out.entry((step, idx)).or_insert_with(|| {
            (layer.to_string(), CurvePoint { cv_r2: f64::NAN, lcka: f64::NAN, dims_99: f64::NAN })
        });
        match metric {
            "cv_r2" => entry.1.cv_r2 = value,
            "lcka" => entry.1.lcka = value,
            "dims_99" => entry.1.dims_99 = value,
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

fn hashed_writer(path: &Path, hash: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# {}", hash_comment(hash))?;
    Ok(csv::Writer::from_writer(out))
}

/// Writes the files for one figure under `run/figures`, returning their
/// paths.
pub fn export_figure_data(run: &Path, figure: Figure) -> Result<Vec<PathBuf>> {
    let (cfg, hash) = load_run_config(run)?;
    let out_dir = run.join(FIGURE_DIR);
    std::fs::create_dir_all(&out_dir)?;
    match figure {
        Figure::MetricCurves | Figure::PcaDims => {
            let curves = read_curves(&run.join(ALIGNMENT_CSV))?;
            let (name, header) = match figure {
                Figure::MetricCurves => ("metric_curves.csv", ["step", "layer", "cv_r2", "lcka"].as_slice()),
                _ => ("pca_dims.csv", ["step", "layer", "dims_99"].as_slice()),
            };
            let path = out_dir.join(name);
            let mut w = hashed_writer(&path, &hash)?;
            w.write_record(header)?;
            for ((step, _), (layer, p)) in &curves {
                let step = step.to_string();
                if figure == Figure::MetricCurves {
                    w.write_record([step.as_str(), layer, &format!("{:e}", p.cv_r2), &format!("{:e}", p.lcka)])?;
                } else {
                    w.write_record([step.as_str(), layer, &format!("{}", p.dims_99)])?;
                }
            }
            w.flush()?;
            Ok(vec![path])
        }
        Figure::PcScatter => {
            let state = load_checkpoint(&latest_checkpoint(run)?)?;
            let dist = build_distribution(&cfg.walker.spec()?)?;
            let targets = PrefixTargets::new(&dist, cfg.alignment.min_t)?;
            let out = forward_prefixes(&state.model, &dist.trie_shape(), true)?;
            let acts = targets.representation(&out.activations.expect("capture requested"), "ln_final")?;
            let (gt_scores, _) = pc_scores(&targets.targets, &targets.weights)?;
            let (model_scores, _) = pc_scores(&acts.data, &acts.weights)?;
            let fit = procrustes_align(&model_scores, &gt_scores, &targets.weights, true)?;
            let aligned = &model_scores * &fit.rotation * fit.scale;
            let gt_path = out_dir.join("pc_ground_truth.csv");
            let model_path = out_dir.join("pc_model.csv");
            write_pc_csv(&gt_path, &hash, &dist, &targets, &gt_scores)?;
            write_pc_csv(&model_path, &hash, &dist, &targets, &aligned)?;
            Ok(vec![gt_path, model_path])
        }
    }
}

/// Leading two principal-component scores.
fn pc_scores(data: &DMatrix<f64>, weights: &[f64]) -> Result<(DMatrix<f64>, Pca)> {
    let pca = weighted_pca(data, weights)?;
    let k = 2.min(data.ncols());
    Ok((pca.project(data, k), pca))
}

fn write_pc_csv(
    path: &Path,
    hash: &str,
    dist: &PrefixDistribution,
    targets: &PrefixTargets,
    scores: &DMatrix<f64>,
) -> Result<()> {
    let mut w = hashed_writer(path, hash)?;
    w.write_record(["class_x", "class_y", "t", "pc1", "pc2", "weight"])?;
    for i in 0..targets.rows.len() {
        let class = &dist.classes()[targets.classes[i] as usize];
        let pc2 = if scores.ncols() > 1 { scores[(i, 1)] } else { 0.0 };
        w.write_record([
            class.position.x.to_string(),
            class.position.y.to_string(),
            targets.steps[i].to_string(),
            format!("{:e}", scores[(i, 0)]),
            format!("{pc2:e}"),
            format!("{:e}", targets.weights[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth PCs alone, no model needed: writes `pc_ground_truth.csv`
/// under `out_dir` and returns the spectrum.
pub fn export_ground_truth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, Pca)> {
    cfg.validate()?;
    let dist = build_distribution(&cfg.walker.spec()?)?;
    let targets = PrefixTargets::new(&dist, cfg.alignment.min_t)?;
    let (scores, pca) = pc_scores(&targets.targets, &targets.weights)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("pc_ground_truth.csv");
    write_pc_csv(&path, &cfg.hash(), &dist, &targets, &scores)?;
    Ok((path, pca))
}
