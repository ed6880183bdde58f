//! Self-checks run by the `verify` command. Failures are reported, never
//! thrown.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::alignment::{lcka, logo_cv_r2, RepresentationMatrix};
use crate::dataset::{build_joint, expected_cross_entropy_prefix};
use crate::error::Result;
use crate::geometry::{invert_saddle, jacobian, structure_map};
use crate::lattice::io::{decode_table, write_table};
use crate::lattice::{
    log_count_closed_form, next_step_log_probs, position_of, prefix_log_prob, GreensTable, Offset, PathCounts,
    WalkerSpec,
};
use crate::nn::{decode_checkpoint, encode_checkpoint, loss_and_grads, AdamConfig, Model, ModelConfig, ModelState, PlateauConfig};
use crate::numeric::binomial_u128;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("enumeration_t8", enumeration),
    ("dp_closed_form", dp_closed_form),
    ("saddle_geometry", saddle_geometry),
    ("gradients", gradients),
    ("metric_invariances", metric_invariances),
    ("exact_model_zero", exact_model_zero),
    ("file_formats", file_formats),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check, or only those whose names are in `only` when nonempty.
pub fn run_verify(only: &[String]) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(name, _)| only.is_empty() || only.iter().any(|o| o == name))
        .map(|(name, check)| {
            let t = Instant::now();
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Every prefix and next-step probability of small walkers against brute
/// force over all `4^T` paths.
fn enumeration() -> Result<(bool, String)> {
    const T: u64 = 8;
    let table = GreensTable::build(T)?;
    let mut worst: f64 = 0.0;
    for p in [Offset::new(0, 0), Offset::new(2, 0), Offset::new(1, 1), Offset::new(4, 2)] {
        let spec = WalkerSpec::new(p, T, T)?;
        // completions[(t, tokens)] counted by walking every path
        let mut completions: HashMap<Vec<u8>, u64> = HashMap::new();
        let mut valid = 0u64;
        let mut path = [0u8; T as usize];
        for code in 0..4u32.pow(T as u32) {
            let mut c = code;
            for s in path.iter_mut() {
                *s = (c & 3) as u8;
                c >>= 2;
            }
            if position_of(&path) != p {
                continue;
            }
            valid += 1;
            for t in 0..=T as usize {
                *completions.entry(path[..t].to_vec()).or_default() += 1;
            }
        }
        for (prefix, &n) in &completions {
            let t = prefix.len() as u64;
            let pos = position_of(prefix);
            let want = n as f64 / valid as f64;
            let got = prefix_log_prob(&table, &spec, pos, t)?.exp();
            worst = worst.max(rel(got, want));
            if t < T {
                let next = next_step_log_probs(&table, &spec, pos, t)?;
                for (c, lp) in next.iter().enumerate() {
                    let mut child = prefix.clone();
                    child.push(c as u8);
                    let want = completions.get(&child).copied().unwrap_or(0) as f64 / n as f64;
                    worst = worst.max(rel(lp.exp(), want));
                }
            }
        }
    }
    Ok((worst <= 1e-12, format!("max relative error {worst:.2e}")))
}

fn dp_closed_form() -> Result<(bool, String)> {
    let table = GreensTable::build(30)?;
    let mut worst: f64 = 0.0;
    for n in 0..=30i64 {
        for x in -n..=n {
            for y in -n..=n {
                let r = Offset::new(x, y);
                if r.reachable_in(n as u64) {
                    worst = worst.max((table.log_count(n as u64, r) - log_count_closed_form(n as u64, r)).abs());
                }
            }
        }
    }
    let c10 = binomial_u128(20, 10).unwrap() as f64;
    let c12 = binomial_u128(20, 12).unwrap() as f64;
    let g0 = table.log_count(20, Offset::new(0, 0)).exp();
    let g4 = table.log_count(20, Offset::new(4, 0)).exp();
    let spot = rel(g0, c10 * c10).max(rel(g4, c12 * c12));
    Ok((
        worst <= 1e-10 && spot <= 1e-12,
        format!("max |log DP - log closed form| {worst:.2e}, G_20 spot values rel {spot:.2e}"),
    ))
}

fn saddle_geometry() -> Result<(bool, String)> {
    let mut round_trip: f64 = 0.0;
    let mut det_err: f64 = 0.0;
    for i in 0..41 {
        for j in 0..41 {
            let q = [-2.0 + 0.1 * i as f64, -2.0 + 0.1 * j as f64];
            let u = structure_map(q);
            let back = invert_saddle(u, 1e-12)?;
            let f = structure_map(back);
            round_trip = round_trip.max((f[0] - u[0]).abs().max((f[1] - u[1]).abs()));
            let want = (q[0].cosh() + q[1].cosh()).powi(-2);
            det_err = det_err.max((jacobian(q).det - want).abs());
        }
    }
    let mut diffusive: f64 = 0.0;
    for k in 0..16 {
        let a = k as f64 * std::f64::consts::TAU / 16.0;
        let u = [0.01 * a.cos(), 0.01 * a.sin()];
        let q = invert_saddle(u, 1e-12)?;
        diffusive = diffusive.max((q[0] - 2.0 * u[0]).abs().max((q[1] - 2.0 * u[1]).abs()));
    }
    Ok((
        round_trip <= 1e-10 && det_err <= 1e-12 && diffusive <= 1e-4,
        format!("round trip {round_trip:.1e}, det {det_err:.1e}, |q - 2u| {diffusive:.1e}"),
    ))
}

/// Central differences at `eps = 1e-4` on a reduced model. Embeddings are
/// scaled up so that a nudge of `eps` stays clear of ReLU kinks.
fn gradients() -> Result<(bool, String)> {
    let cfg = ModelConfig { layers: 2, heads: 2, d_model: 16, d_head: 8, d_mlp: 32, context: 4 };
    let mut model = Model::init(cfg, 5)?;
    let layout = model.layout();
    for g in layout.groups() {
        if g.name.ends_with("_emb") {
            for p in &mut model.params_mut()[g.range.clone()] {
                *p *= 10.0;
            }
        }
    }
    let tokens: Vec<u8> = [0u8, 1, 3, 2, 2, 3, 0, 1, 1, 1, 0, 2].to_vec();
    let seq_len = 4;
    let analytic = loss_and_grads(&model, &tokens, seq_len)?.grads;
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + eps;
        let up = loss_and_grads(&model, &tokens, seq_len)?.loss;
        model.params_mut()[i] = orig - eps;
        let down = loss_and_grads(&model, &tokens, seq_len)?.loss;
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok((worst < 1e-4, format!("{} parameters, max relative error {worst:.2e}", analytic.len())))
}

fn metric_invariances() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let a = gauss(120, 6);
    let w: Vec<f64> = (0..120).map(|i| 1.0 / (1 + i % 4) as f64).collect();
    let groups: Vec<u32> = (0..120).map(|i| (i / 5) as u32).collect();
    let rot = gauss(6, 6).qr().q();
    let self_sim = (lcka(&a, &a, &w)? - 1.0).abs();
    let invariance = (lcka(&a, &(&a * &rot * 2.5), &w)? - 1.0).abs();
    let rep = RepresentationMatrix::new(a.clone(), w.clone(), groups)?;
    let realizable = (logo_cv_r2(&rep, &(&a * gauss(6, 3)))? - 1.0).abs();
    let noise = logo_cv_r2(&rep, &gauss(120, 3))?;
    Ok((
        self_sim <= 1e-12 && invariance <= 1e-10 && realizable <= 1e-6 && noise <= 0.1,
        format!("lCKA self {self_sim:.1e}, rotation {invariance:.1e}; R² realizable {realizable:.1e}, noise {noise:.3}"),
    ))
}

fn exact_model_zero() -> Result<(bool, String)> {
    let spec = WalkerSpec::walker(1, 8)?;
    let dist = build_joint(&spec, &GreensTable::build(spec.horizon())?)?;
    let exact: Vec<Vec<[f64; 4]>> = dist.levels().iter().map(|l| l.iter().map(|n| n.next_logp).collect()).collect();
    let report = expected_cross_entropy_prefix(&dist, &exact)?;
    let worst = report.excess.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    Ok((worst <= 1e-12, format!("max |excess| {worst:.1e} over {} positions", report.excess.len())))
}

fn file_formats() -> Result<(bool, String)> {
    let mut bytes = Vec::new();
    write_table(&GreensTable::build(6)?, &mut bytes)?;
    let table_ok = decode_table(&bytes).is_ok();
    let mut foreign = bytes.clone();
    foreign[0] = b'X';
    let truncated_rejected = decode_table(&bytes[..bytes.len() - 3]).is_err();
    let foreign_rejected = decode_table(&foreign).is_err();

    let cfg = ModelConfig { layers: 1, heads: 1, d_model: 4, d_head: 4, d_mlp: 4, context: 2 };
    let state = ModelState::new(Model::init(cfg, 1)?, AdamConfig::default(), PlateauConfig::default(), 1e-3, 1);
    let ck = encode_checkpoint(&state)?;
    let ck_ok = decode_checkpoint(&ck)? == state;
    let mut flipped = ck.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let flip_rejected = decode_checkpoint(&flipped).is_err();
    let all = table_ok && truncated_rejected && foreign_rejected && ck_ok && flip_rejected;
    Ok((
        all,
        format!(
            "table round trip {table_ok}, truncated rejected {truncated_rejected}, foreign rejected {foreign_rejected}, \
             checkpoint round trip {ck_ok}, bit flip rejected {flip_rejected}"
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run_verify(&[]);
        assert_eq!(results.len(), check_names().len());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(run_verify(&["gradients".to_string()]).len(), 1);
    }
}
