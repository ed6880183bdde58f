//! Experiment configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{Offset, WalkerSpec, DEFAULT_PREFIX_LEN, WALKERS};
use crate::nn::{ModelConfig, TrainConfig};

/// Base of the per-walker default seeds: walker `k` trains with `SEED_BASE + k`.
pub const SEED_BASE: u64 = 1000;

/// Which walker to train on: a configured index or an explicit endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkerConfig {
    /// Index into the configured walkers, 1 to 6.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<[i64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    pub prefix_len: u64,
}

impl WalkerConfig {
    pub fn indexed(index: usize) -> Self {
        WalkerConfig { index: Some(index), endpoint: None, horizon: None, prefix_len: DEFAULT_PREFIX_LEN }
    }

    pub fn spec(&self) -> Result<WalkerSpec> {
        let bad = |e: Error| Error::Config(e.to_string());
        match (self.index, self.endpoint, self.horizon) {
            (Some(i), None, None) => WalkerSpec::walker(i, self.prefix_len).map_err(bad),
            (None, Some([x, y]), Some(t)) => WalkerSpec::new(Offset::new(x, y), t, self.prefix_len).map_err(bad),
            _ => Err(Error::Config(
                "walker needs either `index` or both `endpoint` and `horizon`".into(),
            )),
        }
    }
}

/// Alignment analysis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Shortest prefix included in the metrics.
    pub min_t: u64,
    /// Also write every capture point's activations at each checkpoint.
    pub dump_activations: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig { min_t: 1, dump_activations: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub walker: WalkerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
}

impl ExperimentConfig {
    /// Reduced model and schedule for a single CPU core.
    pub fn desk(walker: usize) -> Self {
        ExperimentConfig {
            seed: SEED_BASE + walker as u64,
            walker: WalkerConfig::indexed(walker),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            alignment: AlignmentConfig::default(),
        }
    }

    /// The full-size model and 20 000-epoch schedule.
    pub fn full(walker: usize) -> Self {
        ExperimentConfig {
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
            ..Self::desk(walker)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex sha256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.walker.spec()?;
        self.model.validate()?;
        self.train.validate()?;
        if (self.model.context as u64) < spec.prefix_len() {
            return Err(Error::Config(format!(
                "model context {} shorter than prefix length {}",
                self.model.context,
                spec.prefix_len()
            )));
        }
        if spec.prefix_len() < 2 {
            return Err(Error::Config("prefix length must be at least 2".into()));
        }
        if self.alignment.min_t == 0 || self.alignment.min_t > spec.prefix_len() {
            return Err(Error::Config(format!(
                "alignment min_t {} must lie in 1..={}",
                self.alignment.min_t,
                spec.prefix_len()
            )));
        }
        Ok(())
    }
}

/// Number of configured walkers.
pub fn num_walkers() -> usize {
    WALKERS.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for w in 1..=num_walkers() {
            for cfg in [ExperimentConfig::desk(w), ExperimentConfig::full(w)] {
                cfg.validate().unwrap();
                let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
                assert_eq!(back, cfg);
                assert_eq!(back.hash(), cfg.hash());
            }
        }
        assert_ne!(ExperimentConfig::desk(1).hash(), ExperimentConfig::desk(2).hash());
        assert_ne!(ExperimentConfig::desk(1).seed, ExperimentConfig::desk(4).seed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ExperimentConfig::desk(1).to_toml().replace("seed =", "sead =");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
        let text = ExperimentConfig::desk(1).to_toml() + "\n[extra]\nx = 1\n";
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn explicit_walker() {
        let mut cfg = ExperimentConfig::desk(1);
        cfg.walker = WalkerConfig { index: None, endpoint: Some([1, 1]), horizon: Some(10), prefix_len: 6 };
        let spec = cfg.walker.spec().unwrap();
        assert_eq!(spec.endpoint(), Offset::new(1, 1));
        cfg.validate().unwrap();
        cfg.walker.index = Some(2);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.walker = WalkerConfig { index: None, endpoint: Some([1, 0]), horizon: Some(10), prefix_len: 6 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_settings_are_config_errors() {
        let mut cfg = ExperimentConfig::desk(1);
        cfg.model.context = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::desk(1);
        cfg.alignment.min_t = 9;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::desk(1);
        cfg.walker.index = Some(7);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
