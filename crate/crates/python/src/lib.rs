//! Python bindings: walker geometry, exact datasets, the transformer, the
//! alignment metrics, and experiment runs.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gridwalk::alignment;
use gridwalk::dataset::{entropy_baseline, TokenSequence};
use gridwalk::geometry;
use gridwalk::harness::{self, ExperimentConfig, RunOptions};
use gridwalk::lattice::{self, io as table_io, BinomialCounts, Offset, PathCounts};
use gridwalk::nn;
use gridwalk::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NotFound(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Argument(_) | Error::Config(_) | Error::Domain(_) | Error::Format(_) | Error::Corruption(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

#[pyclass(name = "WalkerSpec", frozen)]
struct PyWalkerSpec(lattice::WalkerSpec);

#[pymethods]
impl PyWalkerSpec {
    #[new]
    #[pyo3(signature = (endpoint, horizon, prefix_len = lattice::DEFAULT_PREFIX_LEN))]
    fn new(endpoint: (i64, i64), horizon: u64, prefix_len: u64) -> PyResult<Self> {
        lattice::WalkerSpec::new(Offset::new(endpoint.0, endpoint.1), horizon, prefix_len)
            .map(Self)
            .map_err(to_py)
    }

    /// One of the six configured walkers, numbered from 1.
    #[staticmethod]
    #[pyo3(signature = (index, prefix_len = lattice::DEFAULT_PREFIX_LEN))]
    fn walker(index: usize, prefix_len: u64) -> PyResult<Self> {
        lattice::WalkerSpec::walker(index, prefix_len).map(Self).map_err(to_py)
    }

    #[getter]
    fn endpoint(&self) -> (i64, i64) {
        let p = self.0.endpoint();
        (p.x, p.y)
    }

    #[getter]
    fn horizon(&self) -> u64 {
        self.0.horizon()
    }

    #[getter]
    fn prefix_len(&self) -> u64 {
        self.0.prefix_len()
    }

    /// Exact next-step probabilities `(L, R, D, U)` at `position` after `t` steps.
    fn next_step_probs(&self, position: (i64, i64), t: u64) -> PyResult<[f64; 4]> {
        let lp = lattice::next_step_log_probs(&BinomialCounts, &self.0, Offset::new(position.0, position.1), t)
            .map_err(to_py)?;
        Ok(lp.map(f64::exp))
    }

    /// Log probability of any single length-`t` prefix ending at `position`.
    fn prefix_log_prob(&self, position: (i64, i64), t: u64) -> PyResult<f64> {
        lattice::prefix_log_prob(&BinomialCounts, &self.0, Offset::new(position.0, position.1), t).map_err(to_py)
    }

    /// `(u, v)`: remaining-distance rate and sufficient vector.
    fn sufficient_vector(&self, position: (i64, i64), t: u64) -> PyResult<([f64; 2], [f64; 2])> {
        let sv = geometry::SufficientVector::for_prefix(&self.0, Offset::new(position.0, position.1), t)
            .map_err(to_py)?;
        Ok((sv.u, sv.v))
    }

    fn __repr__(&self) -> String {
        let p = self.0.endpoint();
        format!("WalkerSpec(endpoint=({}, {}), horizon={}, prefix_len={})", p.x, p.y, self.0.horizon(), self.0.prefix_len())
    }
}

/// Log path counts `log G_n(r)` by dynamic programming.
#[pyclass(name = "GreensTable", frozen)]
struct PyGreensTable(lattice::GreensTable);

#[pymethods]
impl PyGreensTable {
    #[new]
    fn new(horizon: u64) -> PyResult<Self> {
        lattice::GreensTable::build(horizon).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        table_io::load_table(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        table_io::save_table(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn horizon(&self) -> u64 {
        self.0.horizon()
    }

    fn log_count(&self, n: u64, offset: (i64, i64)) -> PyResult<f64> {
        if n > self.0.horizon() {
            return Err(PyValueError::new_err(format!("n {n} beyond table horizon {}", self.0.horizon())));
        }
        Ok(self.0.log_count(n, Offset::new(offset.0, offset.1)))
    }
}

/// Closed-form `log G_n(r)`.
#[pyfunction]
fn log_count_closed_form(n: u64, offset: (i64, i64)) -> f64 {
    lattice::log_count_closed_form(n, Offset::new(offset.0, offset.1))
}

#[pyfunction]
fn structure_map(q: [f64; 2]) -> [f64; 2] {
    geometry::structure_map(q)
}

#[pyfunction]
#[pyo3(signature = (u, tol = geometry::SADDLE_TOL))]
fn invert_saddle(u: [f64; 2], tol: f64) -> PyResult<[f64; 2]> {
    geometry::invert_saddle(u, tol).map_err(to_py)
}

#[pyfunction]
fn jacobian_det(q: [f64; 2]) -> f64 {
    geometry::jacobian(q).det
}

/// Centered log-probabilities of a next-step distribution.
#[pyfunction]
fn centered_logprobs(logp: [f64; 4]) -> PyResult<[f64; 4]> {
    geometry::centered_logprobs(&logp).map_err(to_py)
}

/// Exact distribution over all prefixes of a walker.
#[pyclass(name = "PrefixDistribution", frozen)]
struct PyPrefixDistribution(gridwalk::dataset::PrefixDistribution);

#[pymethods]
impl PyPrefixDistribution {
    #[new]
    fn new(spec: &PyWalkerSpec) -> PyResult<Self> {
        harness::build_distribution(&spec.0).map(Self).map_err(to_py)
    }

    #[getter]
    fn num_sequences(&self) -> usize {
        self.0.num_sequences()
    }

    #[getter]
    fn num_prefixes(&self) -> usize {
        self.0.num_prefixes()
    }

    /// Seeded minibatch of full-length prefixes as `LRDU` strings.
    fn sample(&self, batch_size: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.0.sample_batch(batch_size, &mut rng).iter().map(TokenSequence::to_string).collect()
    }

    /// Exact log probability of a prefix, `None` if impossible.
    fn log_prob(&self, prefix: &str) -> PyResult<Option<f64>> {
        let seq = TokenSequence::parse(prefix).map_err(to_py)?;
        Ok(self.0.find(seq.tokens()).map(|n| n.log_prob))
    }

    /// Conditional entropy of each token position `2..=τ`.
    fn entropy_baseline(&self) -> Vec<f64> {
        entropy_baseline(&self.0)
    }
}

#[pyclass(name = "Model")]
struct PyModel(nn::Model);

#[pymethods]
impl PyModel {
    /// A freshly initialized model; `scale` is `"desk"` or `"full"`.
    #[new]
    #[pyo3(signature = (seed, scale = "desk"))]
    fn new(seed: u64, scale: &str) -> PyResult<Self> {
        let cfg = match scale {
            "desk" => nn::ModelConfig::desk(),
            "full" => nn::ModelConfig::paper(),
            _ => return Err(PyValueError::new_err("scale must be \"desk\" or \"full\"")),
        };
        nn::Model::init(cfg, seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load_checkpoint(path: PathBuf) -> PyResult<Self> {
        nn::load_checkpoint(&path).map(|s| Self(s.model)).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.params().len()
    }

    fn capture_points(&self) -> Vec<String> {
        self.0.config().capture_points()
    }

    /// Next-token log-probabilities for equal-length `LRDU` strings, one
    /// `[seq_len][4]` block per sequence.
    fn forward(&self, sequences: Vec<String>) -> PyResult<Vec<Vec<[f64; 4]>>> {
        let seq_len = sequences.first().map_or(0, String::len);
        let mut tokens = Vec::with_capacity(sequences.len() * seq_len);
        for s in &sequences {
            if s.len() != seq_len {
                return Err(PyValueError::new_err("sequences must have equal length"));
            }
            tokens.extend_from_slice(TokenSequence::parse(s).map_err(to_py)?.tokens());
        }
        let out = nn::forward(&self.0, &tokens, seq_len).map_err(to_py)?;
        Ok(out.chunks(seq_len.max(1)).map(<[_]>::to_vec).collect())
    }

    /// Exact validation over every prefix: mean excess loss and its value
    /// per position.
    fn validate(&self, dist: &PyPrefixDistribution) -> PyResult<(f64, Vec<f64>)> {
        let r = nn::validate(&self.0, &dist.0).map_err(to_py)?;
        Ok((r.mean_excess(), r.excess))
    }
}

#[pyfunction]
fn lcka(acts: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<f64> {
    alignment::lcka(&matrix(acts)?, &matrix(targets)?, &weights).map_err(to_py)
}

#[pyfunction]
fn logo_cv_r2(acts: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, weights: Vec<f64>, groups: Vec<u32>) -> PyResult<f64> {
    let rep = alignment::RepresentationMatrix::new(matrix(acts)?, weights, groups).map_err(to_py)?;
    alignment::logo_cv_r2(&rep, &matrix(targets)?).map_err(to_py)
}

/// `(explained-variance ratios, dims_99)`.
#[pyfunction]
fn weighted_pca(acts: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<(Vec<f64>, usize)> {
    let pca = alignment::weighted_pca(&matrix(acts)?, &weights).map_err(to_py)?;
    Ok((pca.ratios, pca.dims_99))
}

/// Preset experiment config as TOML; `scale` is `"desk"` or `"full"`.
#[pyfunction]
#[pyo3(signature = (walker, scale = "desk"))]
fn preset_config(walker: usize, scale: &str) -> PyResult<String> {
    if !(1..=harness::num_walkers()).contains(&walker) {
        return Err(PyValueError::new_err(format!("walker {walker} not in 1..=6")));
    }
    match scale {
        "desk" => Ok(ExperimentConfig::desk(walker).to_toml()),
        "full" => Ok(ExperimentConfig::full(walker).to_toml()),
        _ => Err(PyValueError::new_err("scale must be \"desk\" or \"full\"")),
    }
}

/// Runs an experiment from TOML config text into `out_dir`. Returns the
/// config hash, final mean excess loss and final alignment reports as
/// `(point, cv_r2, lcka, dims_99)`.
#[pyfunction]
#[pyo3(signature = (config, out_dir, dry_run = false))]
#[allow(clippy::type_complexity)]
fn run_experiment(
    py: Python<'_>,
    config: &str,
    out_dir: PathBuf,
    dry_run: bool,
) -> PyResult<(String, Option<f64>, Vec<(String, f64, f64, usize)>)> {
    let cfg = ExperimentConfig::from_toml(config).map_err(to_py)?;
    let s = py
        .detach(|| harness::run_experiment(&cfg, &out_dir, &RunOptions { dry_run }))
        .map_err(to_py)?;
    let reports = s.final_alignment.into_iter().map(|r| (r.point, r.cv_r2, r.lcka, r.dims_99)).collect();
    Ok((s.config_hash, s.final_metrics.map(|m| m.mean_excess()), reports))
}

/// The self-check suite as `(name, passed, detail)` triples.
#[pyfunction]
fn verify(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(|| harness::run_verify(&[]))
        .into_iter()
        .map(|r| (r.name.to_string(), r.passed, r.detail))
        .collect()
}

#[pymodule]
fn gridwalk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWalkerSpec>()?;
    m.add_class::<PyGreensTable>()?;
    m.add_class::<PyPrefixDistribution>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(log_count_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(structure_map, m)?)?;
    m.add_function(wrap_pyfunction!(invert_saddle, m)?)?;
    m.add_function(wrap_pyfunction!(jacobian_det, m)?)?;
    m.add_function(wrap_pyfunction!(centered_logprobs, m)?)?;
    m.add_function(wrap_pyfunction!(lcka, m)?)?;
    m.add_function(wrap_pyfunction!(logo_cv_r2, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_pca, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
