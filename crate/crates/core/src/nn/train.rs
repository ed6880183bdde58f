//! Seeded training loop with exact validation.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{expected_cross_entropy_prefix, CrossEntropyReport, PrefixDistribution};
use crate::error::{Error, Result};

use super::prefix::forward_prefixes;
use super::transformer::loss_and_grads;
use super::{Adam, AdamConfig, Model, PlateauConfig, PlateauScheduler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub minibatches: u64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub scheduler: PlateauConfig,
    /// Epochs between exact validation rounds; the scheduler steps once per
    /// round.
    pub validate_every: u64,
    /// Epochs between checkpoint hooks; 0 disables them.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Full-scale schedule: 20 000 epochs of 200 minibatches of 256.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 20_000,
            minibatches: 200,
            batch_size: 256,
            lr: 5e-5,
            adam: AdamConfig::default(),
            scheduler: PlateauConfig::default(),
            validate_every: 1,
            checkpoint_every: 1000,
        }
    }

    /// Reduced schedule sized for a single CPU core: 20 000 steps at a
    /// higher learning rate, which is what lets the final LayerNorm compress
    /// to the two-dimensional predictive geometry within the budget.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 400,
            minibatches: 50,
            batch_size: 256,
            lr: 3e-3,
            adam: AdamConfig::default(),
            scheduler: PlateauConfig { patience: 10, cooldown: 2, ..PlateauConfig::default() },
            validate_every: 4,
            checkpoint_every: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatches == 0 || self.batch_size == 0 {
            return Err(Error::Config("minibatches and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validate_every must be positive".into()));
        }
        let s = &self.scheduler;
        if !(s.factor > 0.0 && s.factor < 1.0) || s.threshold < 0.0 || s.min_lr < 0.0 {
            return Err(Error::Config(format!("invalid scheduler settings {s:?}")));
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: Model,
    pub adam: Adam,
    pub scheduler: PlateauScheduler,
    /// Base seed of the minibatch streams.
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Training loss accumulated since the last validation round.
    pub pending_loss_sum: f64,
    pub pending_batches: u64,
}

impl ModelState {
    pub fn new(model: Model, adam: AdamConfig, scheduler: PlateauConfig, lr: f64, seed: u64) -> Self {
        let n = model.params().len();
        ModelState {
            model,
            adam: Adam::new(adam, n),
            scheduler: PlateauScheduler::new(scheduler, lr),
            seed,
            epoch: 0,
            pending_loss_sum: 0.0,
            pending_batches: 0,
        }
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u64,
    /// Mean minibatch loss since the previous row; NaN for the initial row.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Excess over the entropy baseline at token positions `2..=τ`.
    pub val_excess: Vec<f64>,
    pub lr: f64,
}

impl MetricRow {
    pub fn mean_excess(&self) -> f64 {
        self.val_excess.iter().sum::<f64>() / self.val_excess.len().max(1) as f64
    }
}

/// Callbacks invoked from the training loop.
pub trait TrainHooks {
    fn on_validation(&mut self, _row: &MetricRow) -> Result<()> {
        Ok(())
    }

    /// Called at step 0 and every `checkpoint_every` epochs, and after the
    /// final epoch.
    fn on_checkpoint(&mut self, _state: &ModelState) -> Result<()> {
        Ok(())
    }
}

impl TrainHooks for () {}

/// Exact expected cross-entropy of the model over the whole prefix trie.
pub fn validate(model: &Model, dist: &PrefixDistribution) -> Result<CrossEntropyReport> {
    let out = forward_prefixes(model, &dist.trie_shape(), false)?;
    expected_cross_entropy_prefix(dist, &out.logp)
}

fn validation_row(state: &ModelState, dist: &PrefixDistribution, train_loss: f64) -> Result<(MetricRow, f64)> {
    let report = validate(&state.model, dist)?;
    let val_loss = report.mean_loss();
    Ok((
        MetricRow {
            step: state.step(),
            epoch: state.epoch,
            train_loss,
            val_loss,
            val_excess: report.excess,
            lr: state.scheduler.lr,
        },
        val_loss,
    ))
}

/// Divergence threshold on the minibatch loss, ten times the uniform loss.
pub fn divergence_limit() -> f64 {
    10.0 * 4f64.ln()
}

/// Trains from `state.epoch` up to `cfg.epochs`, returning the metric rows
/// produced by this call.
///
/// Minibatch `k` (counted over the whole run) is drawn from ChaCha8 stream
/// `k` of `state.seed`, so a resumed run sees the same batches as an
/// uninterrupted one.
pub fn train(
    state: &mut ModelState,
    dist: &PrefixDistribution,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let tau = dist.prefix_len();
    if tau < 2 {
        return Err(Error::arg("training needs prefixes of length at least 2"));
    }
    if state.model.config().context < tau {
        return Err(Error::Config(format!(
            "model context {} shorter than prefix length {tau}",
            state.model.config().context
        )));
    }
    let mut rows = Vec::new();
    if state.step() == 0 && state.epoch == 0 {
        let (row, _) = validation_row(state, dist, f64::NAN)?;
        hooks.on_validation(&row)?;
        rows.push(row);
        if cfg.checkpoint_every > 0 {
            hooks.on_checkpoint(state)?;
        }
    }

    let mut tokens = Vec::with_capacity(cfg.batch_size * tau);
    while state.epoch < cfg.epochs {
        for _ in 0..cfg.minibatches {
            let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
            rng.set_stream(state.step());
            tokens.clear();
            dist.sample_into(cfg.batch_size, &mut rng, &mut tokens);
            let lg = loss_and_grads(&state.model, &tokens, tau)?;
            if !(lg.loss <= divergence_limit()) {
                let gnorm = lg.grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                return Err(Error::Numerical(format!(
                    "training diverged at step {} (epoch {}): loss {} exceeds {:.4}, grad norm {gnorm:e}, lr {:e}",
                    state.step(),
                    state.epoch,
                    lg.loss,
                    divergence_limit(),
                    state.scheduler.lr
                )));
            }
            let lr = state.scheduler.lr;
            state.adam.update(state.model.params_mut(), &lg.grads, lr);
            state.pending_loss_sum += lg.loss;
            state.pending_batches += 1;
        }
        state.epoch += 1;
        let last = state.epoch == cfg.epochs;
        if state.epoch.is_multiple_of(cfg.validate_every) || last {
            let train_loss = state.pending_loss_sum / state.pending_batches as f64;
            let (mut row, val_loss) = validation_row(state, dist, train_loss)?;
            state.scheduler.step(val_loss);
            row.lr = state.scheduler.lr;
            state.pending_loss_sum = 0.0;
            state.pending_batches = 0;
            log::info!(
                "epoch {} step {} train {:.6} excess {:.3e} lr {:.3e}",
                row.epoch,
                row.step,
                row.train_loss,
                row.mean_excess(),
                row.lr
            );
            hooks.on_validation(&row)?;
            rows.push(row);
        }
        if cfg.checkpoint_every > 0 && (state.epoch.is_multiple_of(cfg.checkpoint_every) || last) {
            hooks.on_checkpoint(state)?;
        }
    }
    Ok(rows)
}

/// Streaming metric log: `step, epoch, train_loss, val_loss, val_excess_mean,
/// excess_pos2..excess_posτ, lr`, preceded by optional `# ` comment lines.
/// The header is written with the first row.
pub struct MetricLog<W: Write> {
    w: csv::Writer<W>,
    positions: Option<usize>,
}

impl<W: Write> MetricLog<W> {
    pub fn new(mut out: W, comments: &[String]) -> Result<Self> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        Ok(MetricLog { w: csv::Writer::from_writer(out), positions: None })
    }

    pub fn push(&mut self, r: &MetricRow) -> Result<()> {
        match self.positions {
            None => {
                let mut header: Vec<String> = ["step", "epoch", "train_loss", "val_loss", "val_excess_mean"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                header.extend((0..r.val_excess.len()).map(|k| format!("excess_pos{}", k + 2)));
                header.push("lr".into());
                self.w.write_record(&header)?;
                self.positions = Some(r.val_excess.len());
            }
            Some(n) if n != r.val_excess.len() => {
                return Err(Error::arg(format!("row has {} positions, log has {n}", r.val_excess.len())));
            }
            Some(_) => {}
        }
        let mut rec = vec![
            r.step.to_string(),
            r.epoch.to_string(),
            format!("{:e}", r.train_loss),
            format!("{:e}", r.val_loss),
            format!("{:e}", r.mean_excess()),
        ];
        rec.extend(r.val_excess.iter().map(|v| format!("{v:e}")));
        rec.push(format!("{:e}", r.lr));
        self.w.write_record(&rec)?;
        self.w.flush()?;
        Ok(())
    }
}

/// Writes a whole metric log at once; see [`MetricLog`].
pub fn write_metric_csv<W: Write>(rows: &[MetricRow], comments: &[String], out: W) -> Result<()> {
    let mut log = MetricLog::new(out, comments)?;
    for r in rows {
        log.push(r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_joint;
    use crate::lattice::{GreensTable, Offset, WalkerSpec};
    use crate::nn::{decode_checkpoint, encode_checkpoint, ModelConfig};

    fn setup() -> (PrefixDistribution, ModelState, TrainConfig) {
        let spec = WalkerSpec::new(Offset::new(0, 0), 8, 4).unwrap();
        let dist = build_joint(&spec, &GreensTable::build(8).unwrap()).unwrap();
        let cfg = ModelConfig { layers: 1, heads: 2, d_model: 8, d_head: 4, d_mlp: 16, context: 4 };
        let tc = TrainConfig {
            epochs: 6,
            minibatches: 5,
            batch_size: 16,
            lr: 3e-3,
            adam: AdamConfig::default(),
            scheduler: PlateauConfig { patience: 1, cooldown: 0, ..Default::default() },
            validate_every: 2,
            checkpoint_every: 3,
        };
        let state = ModelState::new(Model::init(cfg, 7).unwrap(), tc.adam, tc.scheduler, tc.lr, 11);
        (dist, state, tc)
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let (dist, s0, tc) = setup();
        let mut a = s0.clone();
        let mut b = s0;
        let ra = train(&mut a, &dist, &tc, &mut ()).unwrap();
        let rb = train(&mut b, &dist, &tc, &mut ()).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_metric_csv(&ra, &[], &mut ca).unwrap();
        write_metric_csv(&rb, &[], &mut cb).unwrap();
        assert_eq!(ca, cb);
        // initial row + epochs 2, 4, 6
        assert_eq!(ra.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        assert!(ra[0].train_loss.is_nan());
        assert!(ra.last().unwrap().mean_excess() < ra[0].mean_excess());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        struct Grab(Vec<Vec<u8>>);
        impl TrainHooks for Grab {
            fn on_checkpoint(&mut self, s: &ModelState) -> Result<()> {
                self.0.push(encode_checkpoint(s)?);
                Ok(())
            }
        }
        let (dist, s0, tc) = setup();
        let mut full = s0;
        let mut grab = Grab(Vec::new());
        let rows = train(&mut full, &dist, &tc, &mut grab).unwrap();
        // checkpoints at epoch 0, 3, 6; resume from epoch 3 (mid validation period)
        let mut resumed = decode_checkpoint(&grab.0[1]).unwrap();
        assert_eq!(resumed.epoch, 3);
        let rest = train(&mut resumed, &dist, &tc, &mut ()).unwrap();
        assert_eq!(&rows[rows.len() - rest.len()..], &rest[..]);
        assert_eq!(resumed, full);
    }

    #[test]
    fn divergence_aborts() {
        let (dist, mut s, mut tc) = setup();
        s.scheduler.lr = 1e3;
        tc.epochs = 50;
        let err = train(&mut s, &dist, &tc, &mut ()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }
}
