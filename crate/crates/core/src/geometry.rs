//! Predictive geometry of the walker: sufficient vectors, centered
//! log-probability targets, the saddle-point structure map and its inverse,
//! and the Gaussian count approximation.
//!
//! All 4-vectors use the `(L, R, D, U)` order of [`crate::lattice::Symbol`].
//! The softmax parameterization is `Pr(c) ∝ exp(-v · Δ_c)`, so the centered
//! log-probabilities are `-D v` where `D` stacks the displacement rows.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{next_step_log_probs, Offset, PathCounts, WalkerSpec, DISPLACEMENTS};

pub type Vec2 = [f64; 2];

/// Default residual tolerance for [`invert_saddle`].
pub const SADDLE_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 100;

fn check_finite(logp: &[f64; 4]) -> Result<()> {
    if let Some(i) = logp.iter().position(|v| !v.is_finite()) {
        return Err(Error::DegenerateDistribution(format!(
            "entry {i} of log-probabilities is {}",
            logp[i]
        )));
    }
    Ok(())
}

/// Minimum-norm least-squares `v` with `logp = -D v + λ 1`:
/// `v = ½ (log p_L - log p_R, log p_D - log p_U)`.
pub fn suff_vec_from_logprobs(logp: &[f64; 4]) -> Result<Vec2> {
    check_finite(logp)?;
    Ok([0.5 * (logp[0] - logp[1]), 0.5 * (logp[2] - logp[3])])
}

/// Mean-centered log-probabilities.
pub fn centered_logprobs(logp: &[f64; 4]) -> Result<[f64; 4]> {
    check_finite(logp)?;
    let mean = logp.iter().sum::<f64>() / 4.0;
    Ok(logp.map(|l| l - mean))
}

/// `-D v`, the centered log-probabilities a sufficient vector induces.
pub fn logits_from_v(v: Vec2) -> [f64; 4] {
    DISPLACEMENTS.map(|d| -(v[0] * d.x as f64 + v[1] * d.y as f64))
}

/// Next-step probabilities `Pr(c) ∝ exp(-v · Δ_c)`.
pub fn softmax_from_v(v: Vec2) -> [f64; 4] {
    let logits = logits_from_v(v);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - max).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

/// Log of [`softmax_from_v`].
pub fn log_softmax_from_v(v: Vec2) -> [f64; 4] {
    let logits = logits_from_v(v);
    let norm = crate::numeric::log_sum_exp(&logits);
    logits.map(|l| l - norm)
}

/// Saddle-point structure map `u_c = sinh q_c / (cosh q_x + cosh q_y)`.
pub fn structure_map(q: Vec2) -> Vec2 {
    let denom = q[0].cosh() + q[1].cosh();
    [q[0].sinh() / denom, q[1].sinh() / denom]
}

/// Jacobian of [`structure_map`] with its determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobian {
    /// `m[a][b] = ∂F_a / ∂q_b`
    pub m: [[f64; 2]; 2],
    pub det: f64,
}

/// Analytic Jacobian of the structure map.
///
/// `∂F_x/∂q_x = (1 + cosh q_x cosh q_y) / s²`, `∂F_x/∂q_y = -sinh q_x sinh q_y / s²`
/// with `s = cosh q_x + cosh q_y`, symmetric in `x ↔ y`; `det = s⁻²`.
pub fn jacobian(q: Vec2) -> Jacobian {
    let (cx, cy) = (q[0].cosh(), q[1].cosh());
    let (sx, sy) = (q[0].sinh(), q[1].sinh());
    let s = cx + cy;
    let s2 = s * s;
    let off = -sx * sy / s2;
    Jacobian {
        m: [[(1.0 + cx * cy) / s2, off], [off, (1.0 + cx * cy) / s2]],
        det: 1.0 / s2,
    }
}

/// Inverts the structure map by Newton iteration from the diffusive guess
/// `q₀ = 2u`.
///
/// Requires `|u_x| + |u_y| < 1`. Stops once `‖F(q) - u‖∞ < tol` and takes
/// one more step to polish the root.
pub fn invert_saddle(u: Vec2, tol: f64) -> Result<Vec2> {
    if !(u[0].is_finite() && u[1].is_finite()) || u[0].abs() + u[1].abs() >= 1.0 {
        return Err(Error::Domain(format!(
            "u = ({}, {}) outside |u_x| + |u_y| < 1",
            u[0], u[1]
        )));
    }
    let residual = |q: Vec2| {
        let f = structure_map(q);
        [f[0] - u[0], f[1] - u[1]]
    };
    let newton = |q: Vec2, r: Vec2| {
        let j = jacobian(q);
        // J^{-1} r by Cramer's rule
        let dx = (j.m[1][1] * r[0] - j.m[0][1] * r[1]) / j.det;
        let dy = (j.m[0][0] * r[1] - j.m[1][0] * r[0]) / j.det;
        [q[0] - dx, q[1] - dy]
    };
    let mut q = [2.0 * u[0], 2.0 * u[1]];
    for _ in 0..NEWTON_MAX_ITERS {
        let r = residual(q);
        let norm = r[0].abs().max(r[1].abs());
        if !norm.is_finite() {
            break;
        }
        if norm < tol {
            let polished = newton(q, r);
            let rp = residual(polished);
            if rp[0].abs().max(rp[1].abs()) <= norm {
                q = polished;
            }
            return Ok(q);
        }
        q = newton(q, r);
    }
    Err(Error::Numerical(format!(
        "Newton inversion of the structure map did not converge for u = ({}, {})",
        u[0], u[1]
    )))
}

/// Gaussian (diffusive) approximation `n log 4 - log(π n) - ‖r‖²/n` of
/// `log G_n(r)`.
///
/// Only ratios are meaningful: the absolute value misses a factor of about 2
/// because only half the lattice sites share the parity of `n`.
pub fn gaussian_log_count(n: u64, r: Offset) -> f64 {
    let nf = n as f64;
    nf * 4f64.ln() - (PI * nf).ln() - r.norm_sq() as f64 / nf
}

/// Remaining-distance rate `u = (x_t - p)/(T - t - 1)` and its sufficient
/// vector `v = q(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SufficientVector {
    pub u: Vec2,
    pub v: Vec2,
}

impl SufficientVector {
    pub fn for_prefix(spec: &WalkerSpec, position: Offset, t: u64) -> Result<Self> {
        let horizon = spec.horizon();
        if t + 1 >= horizon {
            return Err(Error::Domain(format!(
                "sufficient vector undefined at step {t} of horizon {horizon}"
            )));
        }
        let r = spec.offset_to_endpoint(position);
        let left = (horizon - t - 1) as f64;
        let u = [r.x as f64 / left, r.y as f64 / left];
        Ok(SufficientVector { u, v: invert_saddle(u, SADDLE_TOL)? })
    }
}

/// Linear map from beliefs over positions at step `t` to next-step
/// predictions. Row `k` is the exact next-step distribution at
/// `positions[k]`.
#[derive(Debug, Clone)]
pub struct PredictiveMap {
    pub step: u64,
    pub positions: Vec<Offset>,
    pub rows: Vec<[f64; 4]>,
}

impl PredictiveMap {
    /// Rows for every position reachable at step `t` with a valid completion.
    pub fn at_step<C: PathCounts + ?Sized>(counts: &C, spec: &WalkerSpec, t: u64) -> Result<Self> {
        let mut positions = Vec::new();
        let mut rows = Vec::new();
        let ti = t as i64;
        for x in -ti..=ti {
            let span = ti - x.abs();
            for y in (-span..=span).step_by(2) {
                let pos = Offset::new(x, y);
                match next_step_log_probs(counts, spec, pos, t) {
                    Ok(lp) => {
                        positions.push(pos);
                        rows.push(lp.map(f64::exp));
                    }
                    Err(Error::InvalidState(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(PredictiveMap { step: t, positions, rows })
    }

    /// `Σ_x μ(x) Pr(· | x)` for a belief given as `(position, weight)` pairs.
    pub fn apply(&self, belief: &[(Offset, f64)]) -> Result<[f64; 4]> {
        let mut out = [0.0; 4];
        for &(pos, w) in belief {
            let k = self
                .positions
                .iter()
                .position(|&p| p == pos)
                .ok_or_else(|| {
                    Error::Domain(format!("position {pos} is not a valid state at step {}", self.step))
                })?;
            for (o, r) in out.iter_mut().zip(self.rows[k]) {
                *o += w * r;
            }
        }
        Ok(out)
    }
}

/// Next-step distribution from a point-mass belief at `position`.
pub fn belief_to_predictive<C: PathCounts + ?Sized>(
    position: Offset,
    t: u64,
    spec: &WalkerSpec,
    counts: &C,
) -> Result<[f64; 4]> {
    if !position.reachable_in(t) {
        return Err(Error::Domain(format!(
            "position {position} is not reachable in {t} steps"
        )));
    }
    PredictiveMap::at_step(counts, spec, t)?.apply(&[(position, 1.0)])
}
