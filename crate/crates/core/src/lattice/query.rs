use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{binomial_u128, log_sum_exp};

use super::greens::rotate;
use super::{Offset, PathCounts, WalkerSpec, DISPLACEMENTS};

/// All length-`t` prefixes that end at the same position share one
/// predictive distribution; this is that equivalence class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixClass {
    pub position: Offset,
    pub step: u64,
    /// Number of distinct length-`step` strings ending at `position`.
    pub degeneracy: u64,
    /// Log probability of any single member string.
    pub log_prob: f64,
    /// `log Pr(c | prefix)` in `(L, R, D, U)` order.
    pub next_step_logp: [f64; 4],
}

impl PrefixClass {
    /// Total probability of the class at its step.
    pub fn mass(&self) -> f64 {
        self.degeneracy as f64 * self.log_prob.exp()
    }
}

fn check_coverage<C: PathCounts + ?Sized>(counts: &C, spec: &WalkerSpec) -> Result<()> {
    match counts.max_steps() {
        Some(max) if max < spec.horizon() => Err(Error::arg(format!(
            "path counts cover {max} steps, walker horizon is {}",
            spec.horizon()
        ))),
        _ => Ok(()),
    }
}

/// Log probability of one specific length-`t` prefix ending at `position`:
/// the ratio of its completion count to the total number of valid paths.
///
/// `-inf` when no length-`t` string reaches `position` or when the prefix
/// cannot be completed.
pub fn prefix_log_prob<C: PathCounts + ?Sized>(
    counts: &C,
    spec: &WalkerSpec,
    position: Offset,
    t: u64,
) -> Result<f64> {
    let horizon = spec.horizon();
    if t > horizon {
        return Err(Error::arg(format!("step {t} beyond horizon {horizon}")));
    }
    check_coverage(counts, spec)?;
    if !position.reachable_in(t) {
        return Ok(f64::NEG_INFINITY);
    }
    let completions = counts.log_count(horizon - t, spec.endpoint() - position);
    if completions == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(completions - counts.log_count(horizon, spec.endpoint()))
}

/// Exact `log Pr(c | x_t, t)` for the four symbols.
///
/// The denominator `G_{T-t}(p - x_t)` is by the recursion the sum of the four
/// numerators, so the vector is normalized by their log-sum-exp.
pub fn next_step_log_probs<C: PathCounts + ?Sized>(
    counts: &C,
    spec: &WalkerSpec,
    position: Offset,
    t: u64,
) -> Result<[f64; 4]> {
    let horizon = spec.horizon();
    if t >= horizon {
        return Err(Error::arg(format!(
            "next step undefined at step {t} of horizon {horizon}"
        )));
    }
    check_coverage(counts, spec)?;
    let remaining = spec.endpoint() - position;
    if counts.log_count(horizon - t, remaining) == f64::NEG_INFINITY {
        return Err(Error::InvalidState(format!(
            "position {position} at step {t} has no completion to {}",
            spec.endpoint()
        )));
    }
    let mut out = [0.0; 4];
    for (o, d) in out.iter_mut().zip(DISPLACEMENTS) {
        *o = counts.log_count(horizon - t - 1, remaining - d);
    }
    let norm = log_sum_exp(&out);
    for o in &mut out {
        *o -= norm;
    }
    Ok(out)
}

/// Like [`next_step_log_probs`], but all `-inf` once the walk is complete.
pub(crate) fn next_or_terminal<C: PathCounts + ?Sized>(
    counts: &C,
    spec: &WalkerSpec,
    position: Offset,
    t: u64,
) -> Result<[f64; 4]> {
    if t == spec.horizon() {
        Ok([f64::NEG_INFINITY; 4])
    } else {
        next_step_log_probs(counts, spec, position, t)
    }
}

/// Exact number of length-`t` walks from the origin ending at `position`.
pub(crate) fn exact_count(t: u64, position: Offset) -> Option<u64> {
    let (i, j) = rotate(t, position)?;
    let c = binomial_u128(t, i)?.checked_mul(binomial_u128(t, j)?)?;
    u64::try_from(c).ok()
}

/// Every prefix class `(x_t, t)` with `1 <= t <= prefix_len` and nonzero
/// probability, ordered by step then position.
pub fn enumerate_classes<C: PathCounts + ?Sized>(
    counts: &C,
    spec: &WalkerSpec,
) -> Result<Vec<PrefixClass>> {
    let tau = spec.prefix_len();
    if tau > 31 {
        return Err(Error::arg("prefix length above 31 overflows class degeneracy"));
    }
    check_coverage(counts, spec)?;
    let mut classes = Vec::new();
    for t in 1..=tau {
        let ti = t as i64;
        for x in -ti..=ti {
            let span = ti - x.abs();
            for y in (-span..=span).step_by(2) {
                let position = Offset::new(x, y);
                let log_prob = prefix_log_prob(counts, spec, position, t)?;
                if log_prob == f64::NEG_INFINITY {
                    continue;
                }
                let degeneracy = exact_count(t, position)
                    .ok_or_else(|| Error::Numerical(format!("degeneracy overflow at {position}")))?;
                classes.push(PrefixClass {
                    position,
                    step: t,
                    degeneracy,
                    log_prob,
                    next_step_logp: next_or_terminal(counts, spec, position, t)?,
                });
            }
        }
    }
    Ok(classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{BinomialCounts, GreensTable};

    fn spec(p: (i64, i64), t: u64, tau: u64) -> WalkerSpec {
        WalkerSpec::new(Offset::new(p.0, p.1), t, tau).unwrap()
    }

    #[test]
    fn prefix_probabilities_small() {
        let s = spec((0, 0), 2, 1);
        let g = GreensTable::build(2).unwrap();
        let lp = prefix_log_prob(&g, &s, Offset::new(1, 0), 1).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-14);
        assert_eq!(prefix_log_prob(&g, &s, Offset::ORIGIN, 0).unwrap(), 0.0);
        assert_eq!(
            prefix_log_prob(&g, &s, Offset::new(2, 0), 1).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(matches!(
            prefix_log_prob(&g, &s, Offset::ORIGIN, 3),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn next_step_small() {
        let s = spec((0, 0), 2, 1);
        let g = GreensTable::build(2).unwrap();
        let lp = next_step_log_probs(&g, &s, Offset::ORIGIN, 0).unwrap();
        for v in lp {
            assert!((v - 0.25f64.ln()).abs() < 1e-14);
        }
        let forced = next_step_log_probs(&g, &s, Offset::new(1, 0), 1).unwrap();
        assert_eq!(forced[0], 0.0);
        assert!(forced[1..].iter().all(|&v| v == f64::NEG_INFINITY));
        assert!(matches!(
            next_step_log_probs(&g, &s, Offset::new(3, 0), 1),
            Err(Error::InvalidState(_))
        ));
        assert!(matches!(
            next_step_log_probs(&g, &s, Offset::ORIGIN, 2),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn short_table_is_rejected() {
        let s = spec((0, 0), 20, 8);
        let g = GreensTable::build(10).unwrap();
        assert!(matches!(
            next_step_log_probs(&g, &s, Offset::ORIGIN, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn classes_first_step_and_degeneracy() {
        let s = spec((0, 0), 20, 8);
        let g = GreensTable::build(20).unwrap();
        let classes = enumerate_classes(&g, &s).unwrap();
        let first: Vec<_> = classes.iter().filter(|c| c.step == 1).collect();
        assert_eq!(first.len(), 4);
        for c in &first {
            assert_eq!(c.degeneracy, 1);
            assert!((c.mass() - 0.25).abs() < 1e-12);
        }
        let origin2 = classes
            .iter()
            .find(|c| c.step == 2 && c.position == Offset::ORIGIN)
            .unwrap();
        assert_eq!(origin2.degeneracy, 4);
        for t in 1..=8 {
            let at_t: Vec<_> = classes.iter().filter(|c| c.step == t).collect();
            assert!(at_t.len() as u64 <= (t + 1) * (t + 1));
            let mass: f64 = at_t.iter().map(|c| c.mass()).sum();
            assert!((mass - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn classes_exclude_dead_ends() {
        // T=4, p=(2,0): after L,L at t=2 the walker is 4 away with 2 steps left.
        let s = spec((2, 0), 4, 3);
        let classes = enumerate_classes(&BinomialCounts, &s).unwrap();
        assert!(classes
            .iter()
            .all(|c| !(c.step == 2 && c.position == Offset::new(-2, 0))));
        for t in 1..=3 {
            let mass: f64 = classes.iter().filter(|c| c.step == t).map(|c| c.mass()).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_length_prefix_ends_at_endpoint() {
        let s = spec((2, 0), 4, 4);
        let classes = enumerate_classes(&BinomialCounts, &s).unwrap();
        let last: Vec<_> = classes.iter().filter(|c| c.step == 4).collect();
        assert_eq!(last.len(), 1);
        assert_eq!(last[0].position, Offset::new(2, 0));
        assert!(last[0].next_step_logp.iter().all(|&v| v == f64::NEG_INFINITY));
        assert!((last[0].mass() - 1.0).abs() < 1e-12);
    }
}
