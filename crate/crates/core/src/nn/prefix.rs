//! Forward pass over a prefix trie.
//!
//! Every distinct prefix is evaluated once: a node attends to the cached
//! keys and values of its ancestors, so a trie of `N` nodes costs `N` rows
//! instead of one row per position of every full sequence. Deep levels are
//! processed in subtree chunks to bound the key/value cache.

use crate::error::{Error, Result};

use super::transformer::{attend, embed_row, layer_norm, linear, log_softmax_rows, ActivationSet};
use super::{Layout, Model, VOCAB};

/// Leaf rows per chunk below the split level.
const CHUNK_LEAVES: usize = 16384;

#[derive(Debug, Clone)]
pub struct PrefixForward {
    /// `logp[k][i]`: next-token log-probabilities after node `i` of level `k`
    /// (prefix length `k + 1`).
    pub logp: Vec<Vec<[f64; 4]>>,
    /// Activations with rows ordered level by level, then by node index.
    pub activations: Option<ActivationSet>,
    /// First activation row of each level.
    pub level_offsets: Vec<usize>,
}

struct LevelKv {
    start: usize,
    /// Full `[3 d_model]` projection rows.
    data: Vec<f64>,
}

struct Runner<'a> {
    model: &'a Model,
    layout: Layout,
    shape: &'a [Vec<(u32, u8)>],
    /// `kv[layer][level]`
    kv: Vec<Vec<LevelKv>>,
    logp: Vec<Vec<[f64; 4]>>,
    capture: Option<Vec<Vec<f64>>>,
    level_offsets: Vec<usize>,
}

impl Runner<'_> {
    fn ancestor(&self, k: usize, mut idx: usize, j: usize) -> usize {
        for level in (j + 1..=k).rev() {
            idx = self.shape[level][idx].0 as usize;
        }
        idx
    }

    fn process_level(&mut self, k: usize, lo: usize, hi: usize) {
        let cfg = self.model.config();
        let p = self.model.params();
        let (d, m, heads, dh) = (cfg.d_model, cfg.d_mlp, cfg.heads, cfg.d_head);
        let rows = hi - lo;
        if rows == 0 {
            return;
        }
        let mut resid = vec![0.0; rows * d];
        for (r, i) in (lo..hi).enumerate() {
            embed_row(self.model, &self.layout, self.shape[k][i].1, k, &mut resid[r * d..(r + 1) * d]);
        }
        // ancestor index at each shallower level, per row
        let mut anc = vec![0usize; rows * k];
        for (r, i) in (lo..hi).enumerate() {
            for j in 0..k {
                anc[r * k + j] = self.ancestor(k, i, j);
            }
        }
        let base = self.level_offsets[k] + lo;
        let mut point = 0;
        let put = |cap: &mut Option<Vec<Vec<f64>>>, point: &mut usize, data: &[f64]| {
            if let Some(bufs) = cap.as_mut() {
                bufs[*point][base * d..(base + rows) * d].copy_from_slice(data);
            }
            *point += 1;
        };
        put(&mut self.capture, &mut point, &resid);

        for l in 0..cfg.layers {
            let lo_off = self.layout.layers[l];
            let ln1 = layer_norm(&resid, &p[lo_off.ln1_g..][..d], &p[lo_off.ln1_b..][..d], d);
            put(&mut self.capture, &mut point, &ln1.y);
            let qkv = linear(&ln1.y, &p[lo_off.w_qkv..][..3 * d * d], &p[lo_off.b_qkv..][..3 * d], d, 3 * d);
            let mut z = vec![0.0; rows * d];
            let mut probs = vec![0.0; heads * (k + 1)];
            let mut kv_rows: Vec<&[f64]> = Vec::with_capacity(k + 1);
            let levels = &self.kv[l];
            for r in 0..rows {
                kv_rows.clear();
                for j in 0..k {
                    let lv = &levels[j];
                    let a = anc[r * k + j] - lv.start;
                    kv_rows.push(&lv.data[a * 3 * d..(a + 1) * 3 * d]);
                }
                let own = &qkv[r * 3 * d..(r + 1) * 3 * d];
                kv_rows.push(own);
                attend(own, &kv_rows, heads, dh, &mut probs, &mut z[r * d..(r + 1) * d]);
            }
            self.kv[l][k] = LevelKv { start: lo, data: qkv };
            let attn = linear(&z, &p[lo_off.w_o..][..d * d], &p[lo_off.b_o..][..d], d, d);
            for (x, a) in resid.iter_mut().zip(&attn) {
                *x += a;
            }
            let ln2 = layer_norm(&resid, &p[lo_off.ln2_g..][..d], &p[lo_off.ln2_b..][..d], d);
            let mut h = linear(&ln2.y, &p[lo_off.w_in..][..d * m], &p[lo_off.b_in..][..m], d, m);
            for v in &mut h {
                *v = v.max(0.0);
            }
            let mlp = linear(&h, &p[lo_off.w_out..][..m * d], &p[lo_off.b_out..][..d], m, d);
            for (x, a) in resid.iter_mut().zip(&mlp) {
                *x += a;
            }
            put(&mut self.capture, &mut point, &resid);
        }
        let lnf = layer_norm(&resid, &p[self.layout.lnf_g..][..d], &p[self.layout.lnf_b..][..d], d);
        put(&mut self.capture, &mut point, &lnf.y);
        let mut logits = linear(&lnf.y, &p[self.layout.w_u..][..d * VOCAB], &p[self.layout.b_u..][..VOCAB], d, VOCAB);
        log_softmax_rows(&mut logits);
        for (r, row) in logits.chunks_exact(VOCAB).enumerate() {
            self.logp[k][lo + r] = [row[0], row[1], row[2], row[3]];
        }
    }

    /// Node range at level `k + 1` whose parents lie in `lo..hi` of level `k`.
    fn children_range(&self, k: usize, lo: usize, hi: usize) -> (usize, usize) {
        let next = &self.shape[k + 1];
        let a = next.partition_point(|&(parent, _)| (parent as usize) < lo);
        let b = next.partition_point(|&(parent, _)| (parent as usize) < hi);
        (a, b)
    }
}

fn check_shape(shape: &[Vec<(u32, u8)>], context: usize) -> Result<()> {
    if shape.len() > context {
        return Err(Error::arg(format!(
            "trie depth {} exceeds model context {context}",
            shape.len()
        )));
    }
    for (k, level) in shape.iter().enumerate() {
        let mut last_parent = 0u32;
        for &(parent, token) in level {
            if token as usize >= VOCAB {
                return Err(Error::arg(format!("token id {token} outside vocabulary")));
            }
            if k > 0 {
                if parent as usize >= shape[k - 1].len() || parent < last_parent {
                    return Err(Error::arg(format!(
                        "level {k}: parent indices must be valid and non-decreasing"
                    )));
                }
                last_parent = parent;
            }
        }
    }
    Ok(())
}

/// Runs the model over every node of a prefix trie.
///
/// `shape[k]` lists `(parent index in level k-1, token)` for every prefix of
/// length `k + 1`; parents must be non-decreasing within a level, which
/// holds for lexicographically ordered tries.
pub fn forward_prefixes(
    model: &Model,
    shape: &[Vec<(u32, u8)>],
    capture: bool,
) -> Result<PrefixForward> {
    forward_chunked(model, shape, capture, CHUNK_LEAVES)
}

fn forward_chunked(
    model: &Model,
    shape: &[Vec<(u32, u8)>],
    capture: bool,
    chunk_leaves: usize,
) -> Result<PrefixForward> {
    let cfg = model.config();
    check_shape(shape, cfg.context)?;
    let depth = shape.len();
    let mut level_offsets = Vec::with_capacity(depth);
    let mut total = 0;
    for level in shape {
        level_offsets.push(total);
        total += level.len();
    }
    let names = cfg.capture_points();
    let mut runner = Runner {
        model,
        layout: Layout::new(cfg),
        shape,
        kv: (0..cfg.layers)
            .map(|_| (0..depth).map(|_| LevelKv { start: 0, data: Vec::new() }).collect())
            .collect(),
        logp: shape.iter().map(|l| vec![[0.0; 4]; l.len()]).collect(),
        capture: capture.then(|| vec![vec![0.0; total * cfg.d_model]; names.len()]),
        level_offsets: level_offsets.clone(),
    };

    let split = (0..depth).find(|&k| shape[k].len() >= 16).unwrap_or(depth.saturating_sub(1));
    for k in 0..depth.min(split + 1) {
        runner.process_level(k, 0, shape[k].len());
    }
    if split + 1 < depth {
        // group split-level nodes into chunks of bounded leaf count
        let leaf_span = |lo: usize, hi: usize| {
            let (mut a, mut b) = (lo, hi);
            for k in split..depth - 1 {
                (a, b) = runner.children_range(k, a, b);
            }
            b - a
        };
        let n_split = shape[split].len();
        let mut chunks = Vec::new();
        let mut start = 0;
        let mut acc = 0;
        for i in 0..n_split {
            let leaves = leaf_span(i, i + 1);
            if acc > 0 && acc + leaves > chunk_leaves {
                chunks.push((start, i));
                start = i;
                acc = 0;
            }
            acc += leaves;
        }
        chunks.push((start, n_split));
        for (lo, hi) in chunks {
            let (mut a, mut b) = (lo, hi);
            for k in split + 1..depth {
                (a, b) = runner.children_range(k - 1, a, b);
                runner.process_level(k, a, b);
            }
        }
    }

    let activations = runner.capture.take().map(|bufs| ActivationSet {
        d_model: cfg.d_model,
        rows: total,
        points: names.into_iter().zip(bufs).collect(),
    });
    Ok(PrefixForward { logp: runner.logp, activations, level_offsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_joint;
    use crate::lattice::{GreensTable, Offset, WalkerSpec};
    use crate::nn::{forward, forward_with_activations, ModelConfig};

    #[test]
    fn matches_dense_forward_on_every_prefix() {
        let spec = WalkerSpec::new(Offset::new(2, 0), 10, 6).unwrap();
        let dist = build_joint(&spec, &GreensTable::build(10).unwrap()).unwrap();
        let cfg = ModelConfig { layers: 2, heads: 2, d_model: 16, d_head: 8, d_mlp: 32, context: 6 };
        let model = Model::init(cfg, 9).unwrap();
        let out = forward_chunked(&model, &dist.trie_shape(), true, 40).unwrap();
        let whole = forward_prefixes(&model, &dist.trie_shape(), false).unwrap();
        assert_eq!(out.logp, whole.logp);
        let acts = out.activations.as_ref().unwrap();
        assert_eq!(acts.rows, dist.num_prefixes());

        let dense = forward(&model, dist.sequence_tokens(), 6).unwrap();
        let (_, dense_acts) = forward_with_activations(&model, dist.sequence_tokens(), 6).unwrap();
        for i in 0..dist.num_sequences() {
            let seq = dist.sequence(i);
            for k in 0..6 {
                let node = dist.find(&seq[..=k]).unwrap();
                let idx = dist
                    .level(k + 1)
                    .iter()
                    .position(|n| std::ptr::eq(n, node))
                    .unwrap();
                let want = dense[i * 6 + k];
                let got = out.logp[k][idx];
                for c in 0..4 {
                    assert!((want[c] - got[c]).abs() < 1e-12);
                }
                if i % 7 == 0 {
                    let row = out.level_offsets[k] + idx;
                    for name in cfg_names(&model) {
                        let a = &acts.get(&name).unwrap()[row * 16..(row + 1) * 16];
                        let b = &dense_acts.get(&name).unwrap()[(i * 6 + k) * 16..(i * 6 + k + 1) * 16];
                        for (x, y) in a.iter().zip(b) {
                            assert!((x - y).abs() < 1e-12, "{name}");
                        }
                    }
                }
            }
        }
    }

    fn cfg_names(model: &Model) -> Vec<String> {
        model.config().capture_points()
    }

    #[test]
    fn rejects_deep_or_malformed_tries() {
        let cfg = ModelConfig { layers: 1, heads: 1, d_model: 4, d_head: 4, d_mlp: 4, context: 2 };
        let model = Model::init(cfg, 0).unwrap();
        let deep = vec![vec![(0, 0)], vec![(0, 1)], vec![(0, 2)]];
        assert!(forward_prefixes(&model, &deep, false).is_err());
        let bad_parent = vec![vec![(0, 0)], vec![(3, 1)]];
        assert!(forward_prefixes(&model, &bad_parent, false).is_err());
        let bad_token = vec![vec![(0, 7)]];
        assert!(forward_prefixes(&model, &bad_token, false).is_err());
    }
}
