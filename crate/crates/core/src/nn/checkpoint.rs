//! `GWCK` training-state checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic     b"GWCK"
//! version   u32 (= 1)
//! config    u32 length + JSON {model, adam, scheduler}
//! seed, epoch, adam step                         u64 x 3
//! lr, best                                       f64 x 2
//! num_bad, cooldown_counter, reductions          u64 x 3
//! pending_loss_sum                               f64
//! pending_batches                                u64
//! n_params                                       u64
//! params, adam m, adam v                         f64 x n_params each
//! sha256 of every preceding byte                 32 bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{expect_header, read_file, Reader, Writer};
use crate::error::{Error, Result};

use super::train::ModelState;
use super::{Adam, AdamConfig, Model, ModelConfig, PlateauConfig, PlateauScheduler};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GWCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    model: ModelConfig,
    adam: AdamConfig,
    scheduler: PlateauConfig,
}

pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let block = ConfigBlock {
        model: state.model.config().clone(),
        adam: state.adam.config,
        scheduler: state.scheduler.config,
    };
    let mut w = Writer::new(Vec::new());
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.str(&serde_json::to_string(&block)?)?;
    w.u64(state.seed)?;
    w.u64(state.epoch)?;
    w.u64(state.adam.step)?;
    let s = &state.scheduler;
    w.f64(s.lr)?;
    w.f64(s.best)?;
    w.u64(s.num_bad)?;
    w.u64(s.cooldown_counter)?;
    w.u64(s.reductions)?;
    w.f64(state.pending_loss_sum)?;
    w.u64(state.pending_batches)?;
    w.u64(state.model.params().len() as u64)?;
    w.f64s(state.model.params())?;
    w.f64s(&state.adam.m)?;
    w.f64s(&state.adam.v)?;
    let mut buf = w.into_inner();
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader::new(bytes);
    expect_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    if bytes.len() < 8 + 32 {
        return Err(Error::Corruption("checkpoint shorter than its digest".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corruption("checkpoint digest mismatch".into()));
    }
    let mut r = Reader::new(body);
    r.take(8)?;
    let block: ConfigBlock = serde_json::from_str(&r.str()?)
        .map_err(|e| Error::Corruption(format!("checkpoint config block: {e}")))?;
    let seed = r.u64()?;
    let epoch = r.u64()?;
    let adam_step = r.u64()?;
    let lr = r.f64()?;
    let best = r.f64()?;
    let num_bad = r.u64()?;
    let cooldown_counter = r.u64()?;
    let reductions = r.u64()?;
    let pending_loss_sum = r.f64()?;
    let pending_batches = r.u64()?;
    let n = r.u64()?;
    let n = usize::try_from(n).map_err(|_| Error::Corruption("parameter count overflow".into()))?;
    if n.checked_mul(24).is_none_or(|b| b > r.remaining()) {
        return Err(Error::Corruption(format!("{n} parameters do not fit in the file")));
    }
    let params = r.f64s(n)?;
    let m = r.f64s(n)?;
    let v = r.f64s(n)?;
    r.finish()?;
    let model = Model::from_params(block.model, params)
        .map_err(|e| Error::Corruption(format!("checkpoint parameters: {e}")))?;
    Ok(ModelState {
        model,
        adam: Adam { config: block.adam, step: adam_step, m, v },
        scheduler: PlateauScheduler {
            config: block.scheduler,
            lr,
            best,
            num_bad,
            cooldown_counter,
            reductions,
        },
        seed,
        epoch,
        pending_loss_sum,
        pending_batches,
    })
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> ModelState {
        let cfg = ModelConfig { layers: 1, heads: 2, d_model: 8, d_head: 4, d_mlp: 8, context: 4 };
        let mut s = ModelState::new(Model::init(cfg, 1).unwrap(), AdamConfig::default(), PlateauConfig::default(), 1e-3, 42);
        let g: Vec<f64> = (0..s.model.params().len()).map(|i| (i as f64).sin()).collect();
        s.adam.update(s.model.params_mut(), &g, 1e-3);
        s.scheduler.step(1.25);
        s.epoch = 3;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let bytes = encode_checkpoint(&s).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_foreign_and_damaged_files() {
        let bytes = encode_checkpoint(&state()).unwrap();
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"GWGT");
        assert!(matches!(decode_checkpoint(&wrong), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[4] = 2;
        assert!(matches!(decode_checkpoint(&ver), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 10]), Err(Error::Corruption(_))));
        assert!(matches!(decode_checkpoint(&bytes[..3]), Err(Error::Corruption(_))));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Corruption(_))));
    }
}
