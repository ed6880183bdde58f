//! Exact combinatorics of the endpoint-constrained square-lattice walker.
//!
//! A walker with endpoint `p` and horizon `T` emits uniformly one of the
//! length-`T` strings over `{L, R, D, U}` whose displacements sum to `p`.
//! Every probability the rest of the crate needs reduces to ratios of
//! unconstrained path counts `G_n(r)`, which live in [`GreensTable`] (dynamic
//! programming) or [`BinomialCounts`] (closed form).

mod greens;
pub mod io;
pub(crate) mod query;

use std::fmt;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use greens::{log_count_closed_form, table_bytes, BinomialCounts, GreensTable, PathCounts, DEFAULT_MEMORY_BUDGET};
pub use query::{enumerate_classes, next_step_log_probs, prefix_log_prob, PrefixClass};

/// Walk symbols in the fixed `(L, R, D, U)` order used by every 4-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    L,
    R,
    D,
    U,
}

impl Symbol {
    pub const ALL: [Symbol; 4] = [Symbol::L, Symbol::R, Symbol::D, Symbol::U];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Symbol> {
        Self::ALL.get(i as usize).copied()
    }

    #[inline]
    pub fn displacement(self) -> Offset {
        DISPLACEMENTS[self.index()]
    }

    pub fn as_char(self) -> char {
        match self {
            Symbol::L => 'L',
            Symbol::R => 'R',
            Symbol::D => 'D',
            Symbol::U => 'U',
        }
    }

    pub fn from_char(c: char) -> Option<Symbol> {
        match c {
            'L' => Some(Symbol::L),
            'R' => Some(Symbol::R),
            'D' => Some(Symbol::D),
            'U' => Some(Symbol::U),
            _ => None,
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Rows of the displacement matrix `D`, indexed by [`Symbol::index`].
pub const DISPLACEMENTS: [Offset; 4] = [
    Offset::new(-1, 0),
    Offset::new(1, 0),
    Offset::new(0, -1),
    Offset::new(0, 1),
];

/// An integer lattice vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Offset {
    pub x: i64,
    pub y: i64,
}

impl Offset {
    pub const ORIGIN: Offset = Offset { x: 0, y: 0 };

    pub const fn new(x: i64, y: i64) -> Self {
        Offset { x, y }
    }

    pub fn l1(self) -> u64 {
        self.x.unsigned_abs() + self.y.unsigned_abs()
    }

    pub fn norm_sq(self) -> i64 {
        self.x * self.x + self.y * self.y
    }

    /// True when `n` steps can end here: parity matches and the target is
    /// within L1 distance `n`.
    pub fn reachable_in(self, n: u64) -> bool {
        self.l1() <= n && (self.x + self.y).rem_euclid(2) as u64 == n % 2
    }
}

impl Add for Offset {
    type Output = Offset;
    fn add(self, o: Offset) -> Offset {
        Offset::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Offset {
    type Output = Offset;
    fn sub(self, o: Offset) -> Offset {
        Offset::new(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Offset {
    type Output = Offset;
    fn neg(self) -> Offset {
        Offset::new(-self.x, -self.y)
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Endpoint, horizon and training prefix length of one walker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkerSpec {
    endpoint: Offset,
    horizon: u64,
    prefix_len: u64,
}

/// Table of the six configured walkers: `(endpoint, horizon)`.
pub const WALKERS: [(Offset, u64); 6] = [
    (Offset::new(0, 0), 20),
    (Offset::new(0, 0), 200),
    (Offset::new(0, 0), 1000),
    (Offset::new(4, 0), 20),
    (Offset::new(4, 0), 200),
    (Offset::new(4, 0), 1000),
];

pub const DEFAULT_PREFIX_LEN: u64 = 8;

impl WalkerSpec {
    pub fn new(endpoint: Offset, horizon: u64, prefix_len: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::arg("horizon must be at least 1"));
        }
        if prefix_len == 0 || prefix_len > horizon {
            return Err(Error::arg(format!(
                "prefix length {prefix_len} must lie in 1..={horizon}"
            )));
        }
        if !endpoint.reachable_in(horizon) {
            return Err(Error::arg(format!(
                "endpoint {endpoint} has no valid paths of length {horizon}"
            )));
        }
        Ok(WalkerSpec { endpoint, horizon, prefix_len })
    }

    /// One of the six configured walkers, numbered from 1.
    pub fn walker(index: usize, prefix_len: u64) -> Result<Self> {
        let (p, t) = index
            .checked_sub(1)
            .and_then(|i| WALKERS.get(i))
            .ok_or_else(|| Error::arg(format!("walker index {index} not in 1..=6")))?;
        Self::new(*p, *t, prefix_len)
    }

    pub fn endpoint(&self) -> Offset {
        self.endpoint
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn prefix_len(&self) -> u64 {
        self.prefix_len
    }

    /// Remaining-distance vector `x_t - p`.
    pub fn offset_to_endpoint(&self, position: Offset) -> Offset {
        position - self.endpoint
    }
}

/// Position reached by a token sequence.
pub fn position_of(tokens: &[u8]) -> Offset {
    tokens
        .iter()
        .fold(Offset::ORIGIN, |acc, &c| acc + DISPLACEMENTS[c as usize])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn displacements_match_symbols_and_cancel() {
        assert_eq!(Symbol::L.displacement(), Offset::new(-1, 0));
        assert_eq!(Symbol::R.displacement(), Offset::new(1, 0));
        assert_eq!(Symbol::D.displacement(), Offset::new(0, -1));
        assert_eq!(Symbol::U.displacement(), Offset::new(0, 1));
        let total = DISPLACEMENTS.iter().fold(Offset::ORIGIN, |a, &d| a + d);
        assert_eq!(total, Offset::ORIGIN);
    }

    #[test]
    fn spec_validation() {
        assert!(WalkerSpec::new(Offset::new(0, 0), 20, 8).is_ok());
        // odd parity
        assert!(WalkerSpec::new(Offset::new(1, 0), 20, 8).is_err());
        // too far
        assert!(WalkerSpec::new(Offset::new(22, 0), 20, 8).is_err());
        assert!(WalkerSpec::new(Offset::new(0, 0), 20, 21).is_err());
        assert!(WalkerSpec::new(Offset::new(0, 0), 0, 0).is_err());
        for i in 1..=6 {
            assert!(WalkerSpec::walker(i, 8).is_ok());
        }
        assert!(WalkerSpec::walker(0, 8).is_err());
        assert!(WalkerSpec::walker(7, 8).is_err());
    }

    #[test]
    fn reachability() {
        assert!(Offset::new(1, 0).reachable_in(1));
        assert!(!Offset::new(1, 0).reachable_in(2));
        assert!(!Offset::new(2, 0).reachable_in(0));
        assert!(Offset::new(-2, 1).reachable_in(5));
    }

    #[test]
    fn position_of_sequence() {
        assert_eq!(position_of(&[1, 1, 3, 0]), Offset::new(1, 1));
    }
}
