//! Dense-batch forward and backward passes.

use crate::error::{Error, Result};

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{Layout, Model, ModelConfig, LN_EPS, VOCAB};

pub(crate) struct LnOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Row-wise LayerNorm of `x[rows, d]`.
pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> LnOut {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for c in 0..d {
            let h = (xr[c] - mean) * s;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gain[c] + bias[c];
        }
    }
    LnOut { y, xhat, rstd }
}

/// Accumulates LayerNorm input gradients into `dx` and parameter gradients
/// into `dgain`/`dbias`.
fn layer_norm_backward(
    dy: &[f64],
    ln: &LnOut,
    gain: &[f64],
    d: usize,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let rows = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &ln.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let s = ln.rstd[r];
        for c in 0..d {
            dx[r * d + c] += s * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

/// `y[rows, n] = x[rows, k] W[k, n] + b`.
pub(crate) fn linear(x: &[f64], w: &[f64], b: &[f64], k: usize, n: usize) -> Vec<f64> {
    let rows = x.len() / k;
    let mut y = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm_nn(rows, k, n, x, w, 1.0, &mut y);
    y
}

fn col_sum_into(x: &[f64], n: usize, out: &mut [f64]) {
    for row in x.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Causal multi-head attention for one query.
///
/// `q_row` and each `kv_rows[j]` are full `[3 d_model]` projection rows; the
/// query attends to every row of `kv_rows`. Writes softmax weights to
/// `probs[h * kv_rows.len() + j]` and the concatenated head outputs to `z`.
pub(crate) fn attend(
    q_row: &[f64],
    kv_rows: &[&[f64]],
    heads: usize,
    d_head: usize,
    probs: &mut [f64],
    z: &mut [f64],
) {
    let d = heads * d_head;
    let n = kv_rows.len();
    let scale = (d_head as f64).powf(-0.5);
    for h in 0..heads {
        let q = &q_row[h * d_head..(h + 1) * d_head];
        let p = &mut probs[h * n..(h + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (j, kv) in kv_rows.iter().enumerate() {
            let k = &kv[d + h * d_head..d + (h + 1) * d_head];
            p[j] = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
            max = max.max(p[j]);
        }
        let mut norm = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            norm += *pj;
        }
        let zh = &mut z[h * d_head..(h + 1) * d_head];
        zh.fill(0.0);
        for (j, kv) in kv_rows.iter().enumerate() {
            p[j] /= norm;
            let v = &kv[2 * d + h * d_head..2 * d + (h + 1) * d_head];
            for (o, vv) in zh.iter_mut().zip(v) {
                *o += p[j] * vv;
            }
        }
    }
}

pub(crate) fn log_softmax_rows(logits: &mut [f64]) {
    for row in logits.chunks_exact_mut(VOCAB) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row {
            *v -= norm;
        }
    }
}

struct LayerCache {
    ln1: LnOut,
    qkv: Vec<f64>,
    /// `[rows, heads, seq_len]`, zero above the diagonal.
    att: Vec<f64>,
    z: Vec<f64>,
    ln2: LnOut,
    hpre: Vec<f64>,
    h: Vec<f64>,
    resid_out: Vec<f64>,
}

struct Cache {
    batch: usize,
    seq_len: usize,
    embed: Vec<f64>,
    layers: Vec<LayerCache>,
    lnf: LnOut,
    logp: Vec<f64>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u8], seq_len: usize) -> Result<usize> {
    if seq_len == 0 || seq_len > cfg.context {
        return Err(Error::arg(format!(
            "sequence length {seq_len} outside 1..={}",
            cfg.context
        )));
    }
    if !tokens.len().is_multiple_of(seq_len) {
        return Err(Error::arg(format!(
            "{} tokens is not a whole number of length-{seq_len} sequences",
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= VOCAB) {
        return Err(Error::arg(format!("token id {t} outside vocabulary")));
    }
    Ok(tokens.len() / seq_len)
}

pub(crate) fn embed_row(model: &Model, layout: &Layout, token: u8, pos: usize, out: &mut [f64]) {
    let d = model.config.d_model;
    let p = &model.params;
    let te = &p[layout.tok_emb + token as usize * d..][..d];
    let pe = &p[layout.pos_emb + pos * d..][..d];
    for c in 0..d {
        out[c] = te[c] + pe[c];
    }
}

fn run_forward(model: &Model, tokens: &[u8], seq_len: usize) -> Result<Cache> {
    let cfg = &model.config;
    let batch = check_tokens(cfg, tokens, seq_len)?;
    let layout = Layout::new(cfg);
    let p = &model.params;
    let (d, m, heads, dh) = (cfg.d_model, cfg.d_mlp, cfg.heads, cfg.d_head);
    let rows = batch * seq_len;

    let mut embed = vec![0.0; rows * d];
    for (r, &t) in tokens.iter().enumerate() {
        embed_row(model, &layout, t, r % seq_len, &mut embed[r * d..(r + 1) * d]);
    }

    let mut layers = Vec::with_capacity(cfg.layers);
    for lo in &layout.layers {
        let resid_in = layers.last().map_or(&embed, |l: &LayerCache| &l.resid_out);
        let ln1 = layer_norm(resid_in, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], d);
        let qkv = linear(&ln1.y, &p[lo.w_qkv..][..3 * d * d], &p[lo.b_qkv..][..3 * d], d, 3 * d);
        let mut att = vec![0.0; rows * heads * seq_len];
        let mut z = vec![0.0; rows * d];
        let mut kv_rows: Vec<&[f64]> = Vec::with_capacity(seq_len);
        for b in 0..batch {
            for i in 0..seq_len {
                let r = b * seq_len + i;
                kv_rows.clear();
                kv_rows.extend((0..=i).map(|j| &qkv[(b * seq_len + j) * 3 * d..][..3 * d]));
                let mut probs = vec![0.0; heads * (i + 1)];
                attend(&qkv[r * 3 * d..][..3 * d], &kv_rows, heads, dh, &mut probs, &mut z[r * d..(r + 1) * d]);
                for h in 0..heads {
                    att[(r * heads + h) * seq_len..][..=i].copy_from_slice(&probs[h * (i + 1)..(h + 1) * (i + 1)]);
                }
            }
        }
        let mut resid_mid = linear(&z, &p[lo.w_o..][..d * d], &p[lo.b_o..][..d], d, d);
        for (o, x) in resid_mid.iter_mut().zip(resid_in) {
            *o += x;
        }
        let ln2 = layer_norm(&resid_mid, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], d);
        let hpre = linear(&ln2.y, &p[lo.w_in..][..d * m], &p[lo.b_in..][..m], d, m);
        let h: Vec<f64> = hpre.iter().map(|&v| v.max(0.0)).collect();
        let mut resid_out = linear(&h, &p[lo.w_out..][..m * d], &p[lo.b_out..][..d], m, d);
        for (o, x) in resid_out.iter_mut().zip(&resid_mid) {
            *o += x;
        }
        layers.push(LayerCache { ln1, qkv, att, z, ln2, hpre, h, resid_out });
    }
    let resid_final = layers.last().map_or(&embed, |l| &l.resid_out);
    let lnf = layer_norm(resid_final, &p[layout.lnf_g..][..d], &p[layout.lnf_b..][..d], d);
    let mut logp = linear(&lnf.y, &p[layout.w_u..][..d * VOCAB], &p[layout.b_u..][..VOCAB], d, VOCAB);
    log_softmax_rows(&mut logp);
    Ok(Cache { batch, seq_len, embed, layers, lnf, logp })
}

fn rows_of(logp: &[f64]) -> Vec<[f64; 4]> {
    logp.chunks_exact(VOCAB).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

/// Next-token log-probabilities for every position of every sequence.
///
/// `tokens` holds whole sequences of length `seq_len` back to back; row
/// `b * seq_len + i` is the distribution after reading tokens `0..=i`.
pub fn forward(model: &Model, tokens: &[u8], seq_len: usize) -> Result<Vec<[f64; 4]>> {
    Ok(rows_of(&run_forward(model, tokens, seq_len)?.logp))
}

/// Per-capture-point activation matrices, `rows x d_model` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub d_model: usize,
    pub rows: usize,
    pub points: Vec<(String, Vec<f64>)>,
}

impl ActivationSet {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.points.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.points.iter().map(|(n, _)| n.as_str())
    }
}

/// [`forward`] plus the residual stream and LayerNorm outputs at every
/// capture point.
pub fn forward_with_activations(
    model: &Model,
    tokens: &[u8],
    seq_len: usize,
) -> Result<(Vec<[f64; 4]>, ActivationSet)> {
    let cache = run_forward(model, tokens, seq_len)?;
    let cfg = &model.config;
    let mut points = vec![("resid_pre.0".to_string(), cache.embed.clone())];
    for (l, lc) in cache.layers.iter().enumerate() {
        points.push((format!("ln1.{l}"), lc.ln1.y.clone()));
        points.push((format!("resid_post.{l}"), lc.resid_out.clone()));
    }
    points.push(("ln_final".into(), cache.lnf.y.clone()));
    let set = ActivationSet { d_model: cfg.d_model, rows: cache.batch * cache.seq_len, points };
    Ok((rows_of(&cache.logp), set))
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    /// Same layout as [`Model::params`].
    pub grads: Vec<f64>,
}

/// Mean next-token cross-entropy over all sequences and target positions
/// `1..seq_len`, with its gradient.
pub fn loss_and_grads(model: &Model, tokens: &[u8], seq_len: usize) -> Result<LossAndGrads> {
    if tokens.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if seq_len < 2 {
        return Err(Error::arg("sequences need at least two tokens to have a target"));
    }
    let cache = run_forward(model, tokens, seq_len)?;
    let cfg = &model.config;
    let layout = Layout::new(cfg);
    let p = &model.params;
    let (d, m, heads, dh) = (cfg.d_model, cfg.d_mlp, cfg.heads, cfg.d_head);
    let (batch, n) = (cache.batch, cache.seq_len);
    let rows = batch * n;
    let count = (batch * (n - 1)) as f64;

    let mut loss = 0.0;
    let mut dlogits = vec![0.0; rows * VOCAB];
    for b in 0..batch {
        for i in 0..n - 1 {
            let r = b * n + i;
            let target = tokens[r + 1] as usize;
            let lp = &cache.logp[r * VOCAB..(r + 1) * VOCAB];
            loss -= lp[target];
            for c in 0..VOCAB {
                dlogits[r * VOCAB + c] = (lp[c].exp() - (c == target) as u8 as f64) / count;
            }
        }
    }
    loss /= count;
    if !loss.is_finite() {
        let max_abs = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        return Err(Error::Numerical(format!(
            "non-finite loss {loss}; max |param| = {max_abs:e}, non-finite params: {}",
            p.iter().filter(|v| !v.is_finite()).count()
        )));
    }

    let mut g = vec![0.0; p.len()];
    gemm_tn(d, rows, VOCAB, &cache.lnf.y, &dlogits, 1.0, &mut g[layout.w_u..][..d * VOCAB]);
    col_sum_into(&dlogits, VOCAB, &mut g[layout.b_u..][..VOCAB]);
    let mut dy = vec![0.0; rows * d];
    gemm_nt(rows, VOCAB, d, &dlogits, &p[layout.w_u..][..d * VOCAB], 0.0, &mut dy);
    let mut dresid = vec![0.0; rows * d];
    {
        let (dg, db) = g[layout.lnf_g..][..2 * d].split_at_mut(d);
        layer_norm_backward(&dy, &cache.lnf, &p[layout.lnf_g..][..d], d, &mut dresid, dg, db);
    }

    let mut dh_buf = vec![0.0; rows * m];
    let mut dz = vec![0.0; rows * d];
    for (lc, lo) in cache.layers.iter().zip(&layout.layers).rev() {
        // MLP branch
        gemm_nt(rows, d, m, &dresid, &p[lo.w_out..][..m * d], 0.0, &mut dh_buf);
        gemm_tn(m, rows, d, &lc.h, &dresid, 1.0, &mut g[lo.w_out..][..m * d]);
        col_sum_into(&dresid, d, &mut g[lo.b_out..][..d]);
        for (dv, &pre) in dh_buf.iter_mut().zip(&lc.hpre) {
            if pre <= 0.0 {
                *dv = 0.0;
            }
        }
        gemm_nt(rows, m, d, &dh_buf, &p[lo.w_in..][..d * m], 0.0, &mut dy);
        gemm_tn(d, rows, m, &lc.ln2.y, &dh_buf, 1.0, &mut g[lo.w_in..][..d * m]);
        col_sum_into(&dh_buf, m, &mut g[lo.b_in..][..m]);
        {
            let (dg, db) = g[lo.ln2_g..][..2 * d].split_at_mut(d);
            layer_norm_backward(&dy, &lc.ln2, &p[lo.ln2_g..][..d], d, &mut dresid, dg, db);
        }

        // attention branch
        gemm_nt(rows, d, d, &dresid, &p[lo.w_o..][..d * d], 0.0, &mut dz);
        gemm_tn(d, rows, d, &lc.z, &dresid, 1.0, &mut g[lo.w_o..][..d * d]);
        col_sum_into(&dresid, d, &mut g[lo.b_o..][..d]);
        let dqkv = attention_backward(&dz, &lc.qkv, &lc.att, batch, n, heads, dh);
        gemm_nt(rows, 3 * d, d, &dqkv, &p[lo.w_qkv..][..3 * d * d], 0.0, &mut dy);
        gemm_tn(d, rows, 3 * d, &lc.ln1.y, &dqkv, 1.0, &mut g[lo.w_qkv..][..3 * d * d]);
        col_sum_into(&dqkv, 3 * d, &mut g[lo.b_qkv..][..3 * d]);
        {
            let (dg, db) = g[lo.ln1_g..][..2 * d].split_at_mut(d);
            layer_norm_backward(&dy, &lc.ln1, &p[lo.ln1_g..][..d], d, &mut dresid, dg, db);
        }
    }

    for (r, &t) in tokens.iter().enumerate() {
        let src = &dresid[r * d..(r + 1) * d];
        for (o, v) in g[layout.tok_emb + t as usize * d..][..d].iter_mut().zip(src) {
            *o += v;
        }
        for (o, v) in g[layout.pos_emb + (r % n) * d..][..d].iter_mut().zip(src) {
            *o += v;
        }
    }
    Ok(LossAndGrads { loss, grads: g })
}

fn attention_backward(
    dz: &[f64],
    qkv: &[f64],
    att: &[f64],
    batch: usize,
    n: usize,
    heads: usize,
    dh: usize,
) -> Vec<f64> {
    let d = heads * dh;
    let scale = (dh as f64).powf(-0.5);
    let mut dqkv = vec![0.0; qkv.len()];
    let mut ds = vec![0.0; n];
    for b in 0..batch {
        for i in 0..n {
            let r = b * n + i;
            for h in 0..heads {
                let a = &att[(r * heads + h) * n..][..=i];
                let dzh = &dz[r * d + h * dh..][..dh];
                let mut s = 0.0;
                for j in 0..=i {
                    let rj = (b * n + j) * 3 * d;
                    let v = &qkv[rj + 2 * d + h * dh..][..dh];
                    let da: f64 = dzh.iter().zip(v).map(|(x, y)| x * y).sum();
                    ds[j] = da;
                    s += a[j] * da;
                    let dv = &mut dqkv[rj + 2 * d + h * dh..][..dh];
                    for (o, x) in dv.iter_mut().zip(dzh) {
                        *o += a[j] * x;
                    }
                }
                let q_off = r * 3 * d + h * dh;
                for j in 0..=i {
                    let w = a[j] * (ds[j] - s) * scale;
                    if w == 0.0 {
                        continue;
                    }
                    let rj = (b * n + j) * 3 * d;
                    for c in 0..dh {
                        let k = qkv[rj + d + h * dh + c];
                        let q = qkv[q_off + c];
                        dqkv[q_off + c] += w * k;
                        dqkv[rj + d + h * dh + c] += w * q;
                    }
                }
            }
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { layers: 2, heads: 2, d_model: 16, d_head: 8, d_mlp: 32, context: 6 }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
        (0..n).map(|_| rng.random_range(0..4u8)).collect()
    }

    #[test]
    fn outputs_are_normalized_and_finite() {
        let model = Model::init(small(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let toks = random_tokens(&mut rng, 5 * 6);
        for row in forward(&model, &toks, 6).unwrap() {
            assert!(row.iter().all(|v| v.is_finite()));
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let model = Model::init(small(), 0).unwrap();
        assert!(matches!(forward(&model, &[0, 4], 2), Err(Error::Argument(_))));
        assert!(matches!(forward(&model, &[0; 7], 7), Err(Error::Argument(_))));
        assert!(matches!(forward(&model, &[0; 5], 2), Err(Error::Argument(_))));
        assert!(loss_and_grads(&model, &[], 2).is_err());
    }

    #[test]
    fn batch_order_and_causality() {
        let model = Model::init(small(), 1).unwrap();
        let a = [0u8, 1, 2, 3, 0, 1];
        let b = [0u8, 1, 2, 0, 0, 0];
        let ab: Vec<u8> = a.iter().chain(&b).copied().collect();
        let ba: Vec<u8> = b.iter().chain(&a).copied().collect();
        let out_ab = forward(&model, &ab, 6).unwrap();
        let out_ba = forward(&model, &ba, 6).unwrap();
        assert_eq!(&out_ab[..6], &out_ba[6..]);
        assert_eq!(&out_ab[6..], &out_ba[..6]);
        // shared length-3 prefix: positions 0..3 agree exactly
        assert_eq!(&out_ab[..3], &out_ab[6..9]);
        assert_ne!(out_ab[3], out_ab[9]);
        // a shorter sequence gives the same leading outputs
        let short = forward(&model, &a[..4], 4).unwrap();
        assert_eq!(&short[..], &out_ab[..4]);
    }

    #[test]
    fn uniform_model_loss_is_log4() {
        let mut model = Model::init(small(), 2).unwrap();
        let layout = model.layout();
        let d = model.config().d_model;
        model.params_mut()[layout.w_u..layout.w_u + d * VOCAB + VOCAB].fill(0.0);
        let r = loss_and_grads(&model, &[0, 1, 2, 3, 3, 2], 3).unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_grads() {
        let model = Model::init(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let toks = random_tokens(&mut rng, 3 * 6);
        let twice: Vec<u8> = toks.iter().chain(&toks).copied().collect();
        let a = loss_and_grads(&model, &toks, 6).unwrap();
        let b = loss_and_grads(&model, &twice, 6).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-14);
        for (x, y) in a.grads.iter().zip(&b.grads) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    fn max_fd_error(model: &Model, toks: &[u8], seq_len: usize, eps: f64) -> f64 {
        let analytic = loss_and_grads(model, toks, seq_len).unwrap().grads;
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.params_mut()[i] += eps;
            let mut minus = model.clone();
            minus.params_mut()[i] -= eps;
            let fp = loss_and_grads(&plus, toks, seq_len).unwrap().loss;
            let fm = loss_and_grads(&minus, toks, seq_len).unwrap().loss;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max((numeric - a).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig { layers: 2, heads: 2, d_model: 16, d_head: 8, d_mlp: 32, context: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let toks = random_tokens(&mut rng, 3 * 4);

        // At the default 0.02 embedding scale LayerNorm magnifies a 1e-4 nudge
        // enough to cross ReLU kinks, so the coarse step is checked with
        // embeddings at std 0.2 and the default init with a finer step.
        let base = Model::init(cfg, 5).unwrap();
        assert!(max_fd_error(&base, &toks, 4, 1e-5) < 1e-4);
        let mut wide = base;
        let layout = wide.layout();
        for v in &mut wide.params_mut()[layout.tok_emb..layout.layers[0].ln1_g] {
            *v *= 10.0;
        }
        let err = max_fd_error(&wide, &toks, 4, 1e-4);
        assert!(err < 1e-4, "max relative error {err:e}");
    }

    #[test]
    fn layer_norm_unit_scale() {
        let model = Model::init(small(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let toks = random_tokens(&mut rng, 4 * 6);
        let cache = run_forward(&model, &toks, 6).unwrap();
        let d = model.config().d_model;
        let x = &cache.layers.last().unwrap().resid_out;
        let ln = layer_norm(x, &vec![1.0; d], &vec![0.0; d], d);
        for (r, row) in ln.xhat.chunks_exact(d).enumerate() {
            let xr = &x[r * d..(r + 1) * d];
            let mu = xr.iter().sum::<f64>() / d as f64;
            let var_in = xr.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-12);
            // the eps in the denominator shrinks the variance by var/(var+eps)
            assert!((var - var_in / (var_in + LN_EPS)).abs() < 1e-12);
        }
    }
}
