//! Exact distribution over length-`τ` prefixes, samplers for training
//! batches, and exact-expectation validation losses.
//!
//! Prefixes are stored as a trie: `levels[k]` holds every prefix of length
//! `k + 1` with nonzero probability, in lexicographic order of the token
//! strings. The leaves (`levels[τ-1]`) are the training sequences.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::query::next_or_terminal;
use crate::lattice::{
    enumerate_classes, Offset, PathCounts, PrefixClass, Symbol, WalkerSpec,
    DISPLACEMENTS,
};

pub const NO_NODE: u32 = u32::MAX;

/// A token string over `{L, R, D, U}` encoded `0..4`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u8>);

impl TokenSequence {
    pub fn tokens(&self) -> &[u8] {
        &self.0
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| {
                Symbol::from_char(c)
                    .map(|s| s.index() as u8)
                    .ok_or_else(|| Error::arg(format!("invalid symbol {c:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &t in &self.0 {
            write!(f, "{}", Symbol::ALL[t as usize])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrieNode {
    /// Index into the previous level, [`NO_NODE`] at the first level.
    pub parent: u32,
    pub token: u8,
    pub position: Offset,
    /// Log probability of this exact prefix string.
    pub log_prob: f64,
    /// Exact next-step log-probabilities after this prefix.
    pub next_logp: [f64; 4],
    /// Child index per symbol in the next level, [`NO_NODE`] when impossible.
    pub children: [u32; 4],
    /// Index into [`PrefixDistribution::classes`].
    pub class: u32,
}

#[derive(Debug, Clone)]
pub struct PrefixDistribution {
    spec: WalkerSpec,
    root_next_logp: [f64; 4],
    root_children: [u32; 4],
    levels: Vec<Vec<TrieNode>>,
    classes: Vec<PrefixClass>,
    /// Row-major `num_sequences x τ` leaf tokens.
    leaf_tokens: Vec<u8>,
}

/// Enumerates every nonzero-probability prefix up to length `τ`, assembling
/// probabilities from consecutive exact next-step factors.
pub fn build_joint<C: PathCounts + ?Sized>(
    spec: &WalkerSpec,
    counts: &C,
) -> Result<PrefixDistribution> {
    let tau = spec.prefix_len() as usize;
    let classes = enumerate_classes(counts, spec)?;
    let class_index: HashMap<(u64, Offset), u32> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| ((c.step, c.position), i as u32))
        .collect();

    let root_next_logp = next_or_terminal(counts, spec, Offset::ORIGIN, 0)?;
    let mut levels: Vec<Vec<TrieNode>> = Vec::with_capacity(tau);
    let mut root_children = [NO_NODE; 4];

    // parents: (parent index, position, log_prob, next_logp)
    let mut frontier: Vec<(u32, Offset, f64, [f64; 4])> =
        vec![(NO_NODE, Offset::ORIGIN, 0.0, root_next_logp)];
    for k in 0..tau {
        let t = k as u64 + 1;
        let mut level = Vec::new();
        let mut next_frontier = Vec::new();
        for (pi, &(_, pos, lp, next)) in frontier.iter().enumerate() {
            for c in 0..4u8 {
                let step_lp = next[c as usize];
                if step_lp == f64::NEG_INFINITY {
                    continue;
                }
                let position = pos + DISPLACEMENTS[c as usize];
                let log_prob = lp + step_lp;
                let next_logp = next_or_terminal(counts, spec, position, t)?;
                let class = *class_index.get(&(t, position)).ok_or_else(|| {
                    Error::InvalidState(format!("no class for {position} at step {t}"))
                })?;
                let idx = level.len() as u32;
                if k == 0 {
                    root_children[c as usize] = idx;
                } else {
                    levels[k - 1][pi].children[c as usize] = idx;
                }
                level.push(TrieNode {
                    parent: if k == 0 { NO_NODE } else { pi as u32 },
                    token: c,
                    position,
                    log_prob,
                    next_logp,
                    children: [NO_NODE; 4],
                    class,
                });
                next_frontier.push((idx, position, log_prob, next_logp));
            }
        }
        levels.push(level);
        frontier = next_frontier;
    }

    let leaves = levels.last().map_or(0, Vec::len);
    let mut leaf_tokens = vec![0u8; leaves * tau];
    for (i, row) in leaf_tokens.chunks_exact_mut(tau).enumerate() {
        let mut node = i as u32;
        for k in (0..tau).rev() {
            let n = &levels[k][node as usize];
            row[k] = n.token;
            node = n.parent;
        }
    }

    Ok(PrefixDistribution {
        spec: *spec,
        root_next_logp,
        root_children,
        levels,
        classes,
        leaf_tokens,
    })
}

impl PrefixDistribution {
    pub fn spec(&self) -> &WalkerSpec {
        &self.spec
    }

    pub fn prefix_len(&self) -> usize {
        self.levels.len()
    }

    /// Prefix nodes of length `len` (1-based).
    pub fn level(&self, len: usize) -> &[TrieNode] {
        &self.levels[len - 1]
    }

    pub fn levels(&self) -> &[Vec<TrieNode>] {
        &self.levels
    }

    pub fn root_next_logp(&self) -> [f64; 4] {
        self.root_next_logp
    }

    pub fn classes(&self) -> &[PrefixClass] {
        &self.classes
    }

    pub fn num_sequences(&self) -> usize {
        self.levels.last().map_or(0, Vec::len)
    }

    /// Total number of distinct prefixes of length `1..=τ`.
    pub fn num_prefixes(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn sequence(&self, i: usize) -> &[u8] {
        let tau = self.prefix_len();
        &self.leaf_tokens[i * tau..(i + 1) * tau]
    }

    /// Row-major token matrix of all sequences.
    pub fn sequence_tokens(&self) -> &[u8] {
        &self.leaf_tokens
    }

    pub fn sequence_log_prob(&self, i: usize) -> f64 {
        self.levels[self.prefix_len() - 1][i].log_prob
    }

    /// `(parent, token)` per node per level, the shape needed to run a causal
    /// model over every prefix at once.
    pub fn trie_shape(&self) -> Vec<Vec<(u32, u8)>> {
        self.levels
            .iter()
            .map(|l| l.iter().map(|n| (n.parent, n.token)).collect())
            .collect()
    }

    /// Node for a token prefix, if it has nonzero probability.
    pub fn find(&self, tokens: &[u8]) -> Option<&TrieNode> {
        let (&first, rest) = tokens.split_first()?;
        let mut idx = *self.root_children.get(first as usize)?;
        for (k, &c) in rest.iter().enumerate() {
            if idx == NO_NODE || k + 1 >= self.levels.len() {
                return None;
            }
            idx = *self.levels[k][idx as usize].children.get(c as usize)?;
        }
        if idx == NO_NODE {
            return None;
        }
        self.levels.get(tokens.len() - 1)?.get(idx as usize)
    }

    /// Draws `batch_size` sequences by sampling each step from the exact
    /// next-step distribution.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<TokenSequence> {
        let mut flat = Vec::with_capacity(batch_size * self.prefix_len());
        self.sample_into(batch_size, rng, &mut flat);
        flat.chunks_exact(self.prefix_len().max(1))
            .map(|c| TokenSequence(c.to_vec()))
            .collect()
    }

    /// Appends `batch_size` sampled sequences to a flat token buffer.
    pub fn sample_into<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R, out: &mut Vec<u8>) {
        for _ in 0..batch_size {
            let mut next = &self.root_next_logp;
            let mut children = &self.root_children;
            for level in &self.levels {
                let c = sample_symbol(next, rng);
                let node = &level[children[c] as usize];
                out.push(node.token);
                next = &node.next_logp;
                children = &node.children;
            }
        }
    }

    /// Categorical sampler over whole sequences.
    pub fn joint_sampler(&self) -> Result<JointSampler> {
        let weights: Vec<f64> = (0..self.num_sequences())
            .map(|i| self.sequence_log_prob(i).exp())
            .collect();
        let index = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidState(format!("joint sampler: {e}")))?;
        Ok(JointSampler { index })
    }

    pub fn write_sequences_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sequence", "log_prob"])?;
        for i in 0..self.num_sequences() {
            let s = TokenSequence(self.sequence(i).to_vec());
            w.write_record([s.to_string(), format!("{:e}", self.sequence_log_prob(i))])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn sample_symbol<R: Rng + ?Sized>(logp: &[f64; 4], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (c, &lp) in logp.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = c;
        if u < acc {
            return c;
        }
    }
    last
}

pub struct JointSampler {
    index: WeightedIndex<f64>,
}

impl JointSampler {
    pub fn sample<R: Rng + ?Sized>(&self, dist: &PrefixDistribution, batch_size: usize, rng: &mut R) -> Vec<TokenSequence> {
        (0..batch_size)
            .map(|_| TokenSequence(dist.sequence(self.index.sample(rng)).to_vec()))
            .collect()
    }
}

/// Writes token-id rows, one sequence per line.
pub fn write_batch_dump<W: Write>(batch: &[TokenSequence], mut out: W) -> Result<()> {
    for s in batch {
        let row: Vec<String> = s.0.iter().map(u8::to_string).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Per-position expected cross-entropy of a model under the exact
/// distribution. Index `k` of every vector is token position `k + 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEntropyReport {
    pub loss: Vec<f64>,
    pub entropy: Vec<f64>,
    pub excess: Vec<f64>,
}

impl CrossEntropyReport {
    fn from_parts(loss: Vec<f64>, entropy: Vec<f64>) -> Self {
        let excess = loss.iter().zip(&entropy).map(|(l, h)| l - h).collect();
        CrossEntropyReport { loss, entropy, excess }
    }

    /// Mean of the per-position excess over positions `2..=τ`.
    pub fn mean_excess(&self) -> f64 {
        mean(&self.excess)
    }

    pub fn mean_loss(&self) -> f64 {
        mean(&self.loss)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Expected next-token cross-entropy over all length-`τ` sequences.
///
/// `model` receives one sequence and returns at least `τ - 1` rows; row `i`
/// holds log-probabilities for the token at index `i + 1`.
pub fn expected_cross_entropy<F>(dist: &PrefixDistribution, mut model: F) -> Result<CrossEntropyReport>
where
    F: FnMut(&[u8]) -> Vec<[f64; 4]>,
{
    let tau = dist.prefix_len();
    let positions = tau.saturating_sub(1);
    let mut loss = vec![0.0; positions];
    let mut entropy = vec![0.0; positions];
    for i in 0..dist.num_sequences() {
        let seq = dist.sequence(i);
        let p = dist.sequence_log_prob(i).exp();
        let rows = model(seq);
        if rows.len() < positions {
            return Err(Error::arg(format!(
                "model returned {} rows for a length-{tau} sequence",
                rows.len()
            )));
        }
        let mut next = &dist.root_next_logp;
        let mut children = &dist.root_children;
        for k in 0..tau {
            let node = &dist.levels[k][children[seq[k] as usize] as usize];
            if k > 0 {
                let c = seq[k] as usize;
                loss[k - 1] -= p * rows[k - 1][c];
                entropy[k - 1] -= p * next[c];
            }
            next = &node.next_logp;
            children = &node.children;
        }
    }
    Ok(CrossEntropyReport::from_parts(loss, entropy))
}

/// Same quantity as [`expected_cross_entropy`] from per-prefix model
/// outputs: `prefix_logp[k][n]` is the model's next-token distribution after
/// node `n` of prefix length `k + 1`. Levels beyond `τ - 1` are ignored.
pub fn expected_cross_entropy_prefix(
    dist: &PrefixDistribution,
    prefix_logp: &[Vec<[f64; 4]>],
) -> Result<CrossEntropyReport> {
    let positions = dist.prefix_len().saturating_sub(1);
    if prefix_logp.len() < positions {
        return Err(Error::arg("too few prefix levels for cross-entropy"));
    }
    let mut loss = Vec::with_capacity(positions);
    for (k, rows) in prefix_logp.iter().take(positions).enumerate() {
        let level = &dist.levels[k];
        if rows.len() != level.len() {
            return Err(Error::arg(format!(
                "level {} has {} nodes, model gave {}",
                k + 1,
                level.len(),
                rows.len()
            )));
        }
        let mut acc = 0.0;
        for (node, row) in level.iter().zip(rows) {
            let p = node.log_prob.exp();
            for c in 0..4 {
                if node.next_logp[c] > f64::NEG_INFINITY {
                    acc -= p * node.next_logp[c].exp() * row[c];
                }
            }
        }
        loss.push(acc);
    }
    Ok(CrossEntropyReport::from_parts(loss, entropy_baseline(dist)))
}

/// Conditional entropy `H(C_pos | S_{pos-1})` for positions `2..=τ`.
pub fn entropy_baseline(dist: &PrefixDistribution) -> Vec<f64> {
    let positions = dist.prefix_len().saturating_sub(1);
    dist.levels
        .iter()
        .take(positions)
        .map(|level| {
            level
                .iter()
                .map(|node| {
                    let h: f64 = node
                        .next_logp
                        .iter()
                        .filter(|lp| lp.is_finite())
                        .map(|lp| -lp.exp() * lp)
                        .sum();
                    node.log_prob.exp() * h
                })
                .sum()
        })
        .collect()
}
