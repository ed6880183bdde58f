use crate::error::{Error, Result};
use crate::numeric::{log_binomial, log_sum_exp};

use super::Offset;

/// Source of unconstrained log path counts `log G_n(r)`.
pub trait PathCounts {
    /// `log G_n(r)`; `-inf` for unreachable offsets.
    ///
    /// Implementations may panic when `n` exceeds [`PathCounts::max_steps`].
    fn log_count(&self, n: u64, r: Offset) -> f64;

    /// Largest `n` that can be queried, `None` when unbounded.
    fn max_steps(&self) -> Option<u64>;
}

/// Rotated-basis coordinates `(i, j)` of offset `r` after `n` steps, when
/// `r` is reachable.
#[inline]
pub(crate) fn rotate(n: u64, r: Offset) -> Option<(u64, u64)> {
    if !r.reachable_in(n) {
        return None;
    }
    let n = n as i64;
    let i = (r.x + r.y + n) / 2;
    let j = (r.x - r.y + n) / 2;
    Some((i as u64, j as u64))
}

/// `log G_n(r)` from the product of two binomials.
///
/// In rotated coordinates each step moves `(i, j)` by one of
/// `(0,0), (1,1), (0,1), (1,0)`, so the two coordinates are independent
/// binomial walks and `G_n(r) = C(n, i) C(n, j)`.
pub fn log_count_closed_form(n: u64, r: Offset) -> f64 {
    match rotate(n, r) {
        Some((i, j)) => log_binomial(n, i) + log_binomial(n, j),
        None => f64::NEG_INFINITY,
    }
}

/// Closed-form counts for arbitrary horizons without storing any levels.
#[derive(Debug, Clone, Copy, Default)]
pub struct BinomialCounts;

impl PathCounts for BinomialCounts {
    fn log_count(&self, n: u64, r: Offset) -> f64 {
        log_count_closed_form(n, r)
    }

    fn max_steps(&self) -> Option<u64> {
        None
    }
}

/// Log path counts `log G_n(r)` for every level `n = 0..=T`, built by the
/// four-corner recursion. Level `n` is a dense `(n+1) x (n+1)` row-major
/// array in rotated coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GreensTable {
    horizon: u64,
    levels: Vec<Vec<f64>>,
}

/// Default cap on table storage.
pub const DEFAULT_MEMORY_BUDGET: usize = 512 << 20;

/// Bytes needed to hold levels `0..=horizon`.
pub fn table_bytes(horizon: u64) -> u128 {
    let t = horizon as u128;
    // sum_{n=0}^{T} (n+1)^2
    (t + 1)
        .checked_mul(t + 2)
        .and_then(|a| a.checked_mul(2 * t + 3))
        .map_or(u128::MAX, |a| a / 6 * 8)
}

impl GreensTable {
    pub fn build(horizon: u64) -> Result<Self> {
        Self::build_with_budget(horizon, DEFAULT_MEMORY_BUDGET)
    }

    pub fn build_with_budget(horizon: u64, budget_bytes: usize) -> Result<Self> {
        let need = table_bytes(horizon);
        if need > budget_bytes as u128 {
            return Err(Error::Resource(format!(
                "path-count table for horizon {horizon} needs {need} bytes, budget is {budget_bytes}; \
                 use closed-form counts instead"
            )));
        }
        let mut levels: Vec<Vec<f64>> = Vec::with_capacity(horizon as usize + 1);
        levels.push(vec![0.0]);
        for n in 1..=horizon as usize {
            let prev = &levels[n - 1];
            let side = n + 1;
            let mut cur = vec![f64::NEG_INFINITY; side * side];
            // prev is n x n; corners (i,j), (i-1,j-1), (i,j-1), (i-1,j)
            let at = |i: usize, j: usize| prev[i * n + j];
            let mut terms = [f64::NEG_INFINITY; 4];
            for i in 0..side {
                for j in 0..side {
                    let mut k = 0;
                    if i < n && j < n {
                        terms[k] = at(i, j);
                        k += 1;
                    }
                    if i > 0 && j > 0 {
                        terms[k] = at(i - 1, j - 1);
                        k += 1;
                    }
                    if i < n && j > 0 {
                        terms[k] = at(i, j - 1);
                        k += 1;
                    }
                    if i > 0 && j < n {
                        terms[k] = at(i - 1, j);
                        k += 1;
                    }
                    cur[i * side + j] = log_sum_exp(&terms[..k]);
                }
            }
            levels.push(cur);
        }
        Ok(GreensTable { horizon, levels })
    }

    pub(crate) fn from_levels(horizon: u64, levels: Vec<Vec<f64>>) -> Self {
        GreensTable { horizon, levels }
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    /// Rotated-basis array of level `n`, row-major `(n+1) x (n+1)`.
    pub fn level(&self, n: u64) -> &[f64] {
        &self.levels[n as usize]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    /// Every reachable offset at level `n` with its log count.
    pub fn entries(&self, n: u64) -> impl Iterator<Item = (Offset, f64)> + '_ {
        let side = n as usize + 1;
        let ni = n as i64;
        self.levels[n as usize].iter().enumerate().map(move |(k, &v)| {
            let (i, j) = ((k / side) as i64, (k % side) as i64);
            // invert i = (x+y+n)/2, j = (x-y+n)/2
            (Offset::new(i + j - ni, i - j), v)
        })
    }
}

impl PathCounts for GreensTable {
    fn log_count(&self, n: u64, r: Offset) -> f64 {
        assert!(
            n <= self.horizon,
            "level {n} beyond table horizon {}",
            self.horizon
        );
        match rotate(n, r) {
            Some((i, j)) => self.levels[n as usize][i as usize * (n as usize + 1) + j as usize],
            None => f64::NEG_INFINITY,
        }
    }

    fn max_steps(&self) -> Option<u64> {
        Some(self.horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force count over all 4^n walks.
    fn enumerate_counts(n: u32) -> std::collections::HashMap<Offset, u64> {
        let mut map = std::collections::HashMap::new();
        for code in 0..4u64.pow(n) {
            let mut c = code;
            let mut pos = Offset::ORIGIN;
            for _ in 0..n {
                pos = pos + super::super::DISPLACEMENTS[(c % 4) as usize];
                c /= 4;
            }
            *map.entry(pos).or_insert(0) += 1;
        }
        map
    }

    #[test]
    fn initial_condition() {
        let t = GreensTable::build(0).unwrap();
        assert_eq!(t.level(0), &[0.0]);
        assert_eq!(t.log_count(0, Offset::ORIGIN), 0.0);
        assert_eq!(t.log_count(0, Offset::new(1, 0)), f64::NEG_INFINITY);
        assert_eq!(t.log_count(0, Offset::new(2, 0)), f64::NEG_INFINITY);
    }

    #[test]
    fn small_levels_match_enumeration() {
        let table = GreensTable::build(6).unwrap();
        assert!((table.log_count(2, Offset::ORIGIN) - 4f64.ln()).abs() < 1e-14);
        assert!((table.log_count(3, Offset::new(1, 0)) - 9f64.ln()).abs() < 1e-14);
        for n in 0..=6 {
            let counts = enumerate_counts(n);
            for (r, v) in table.entries(n as u64) {
                let want = counts.get(&r).copied().unwrap_or(0);
                assert!(want > 0, "rotated cell {r} at level {n} is unreachable");
                assert!(((want as f64).ln() - v).abs() < 1e-12);
            }
            assert_eq!(counts.len(), (n as usize + 1).pow(2));
        }
    }

    #[test]
    fn parity_and_range_give_neg_infinity() {
        let table = GreensTable::build(5).unwrap();
        assert_eq!(table.log_count(5, Offset::ORIGIN), f64::NEG_INFINITY);
        assert_eq!(table.log_count(4, Offset::new(5, 1)), f64::NEG_INFINITY);
        assert_eq!(log_count_closed_form(5, Offset::ORIGIN), f64::NEG_INFINITY);
    }

    #[test]
    fn budget_is_enforced() {
        assert!(matches!(
            GreensTable::build_with_budget(1000, DEFAULT_MEMORY_BUDGET),
            Err(Error::Resource(_))
        ));
        assert!(GreensTable::build_with_budget(10, table_bytes(10) as usize).is_ok());
    }

    #[test]
    fn table_bytes_matches_layout() {
        let t = GreensTable::build(9).unwrap();
        let n: usize = t.levels().iter().map(Vec::len).sum();
        assert_eq!(table_bytes(9), (n * 8) as u128);
    }
}
