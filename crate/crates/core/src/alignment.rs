//! Weighted representational-similarity metrics: affine probes with
//! leave-one-group-out cross-validation, linear CKA, PCA and Procrustes.
//!
//! Every metric takes per-row weights; they are normalized to sum to one
//! internally, so only their ratios matter.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::PrefixDistribution;
use crate::error::{Error, Result};
use crate::geometry::centered_logprobs;
use crate::nn::ActivationSet;

/// Relative ridge added to probe normal equations.
pub const RIDGE_JITTER: f64 = 1e-10;
/// Cumulative explained-variance target for [`Pca::dims_99`].
pub const VARIANCE_TARGET: f64 = 0.99;

/// Rows of activations with per-row weights and group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    pub data: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub groups: Vec<u32>,
}

impl RepresentationMatrix {
    /// `data` is row-major `weights.len() x cols`.
    pub fn from_row_major(data: &[f64], cols: usize, weights: Vec<f64>, groups: Vec<u32>) -> Result<Self> {
        let rows = weights.len();
        if data.len() != rows * cols {
            return Err(Error::arg(format!(
                "{} values do not form {rows} rows of {cols}",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, data), weights, groups)
    }

    pub fn new(data: DMatrix<f64>, weights: Vec<f64>, groups: Vec<u32>) -> Result<Self> {
        if data.nrows() != weights.len() || groups.len() != weights.len() {
            return Err(Error::arg("rows, weights and groups must have equal length"));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::arg(format!("weights must be positive and finite, got {w}")));
        }
        Ok(RepresentationMatrix { data, weights, groups })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    /// Same weights and groups, different features.
    pub fn with_data(&self, data: DMatrix<f64>) -> Result<Self> {
        Self::new(data, self.weights.clone(), self.groups.clone())
    }
}

fn normalized_weights(w: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) || w.iter().any(|v| *v < 0.0) {
        return Err(Error::arg("weights must be nonnegative with a positive finite sum"));
    }
    Ok(w.iter().map(|v| v / total).collect())
}

fn check_rows(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &[f64]) -> Result<()> {
    if a.nrows() != b.nrows() || a.nrows() != w.len() {
        return Err(Error::arg(format!(
            "row counts differ: {}, {}, {} weights",
            a.nrows(),
            b.nrows(),
            w.len()
        )));
    }
    Ok(())
}

fn weighted_mean(a: &DMatrix<f64>, w: &[f64]) -> DVector<f64> {
    let mut mean = DVector::zeros(a.ncols());
    for (i, wi) in w.iter().enumerate() {
        mean.axpy(*wi, &a.row(i).transpose(), 1.0);
    }
    mean
}

/// Subtracts the weighted mean, then scales row `i` by `sqrt(w_i)`, so that
/// `XᵀX` is the weighted covariance. `w` must already be normalized.
pub fn center_and_scale(a: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mean = weighted_mean(a, w);
    let mut out = a.clone();
    for (i, wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        for j in 0..a.ncols() {
            out[(i, j)] = (a[(i, j)] - mean[j]) * s;
        }
    }
    out
}

/// Affine map `t ≈ Wᵀ a + b`, with `W` stored `features x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineProbe {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl AffineProbe {
    pub fn predict(&self, acts: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = acts * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }
}

/// Solves `(S + λI) X = R` for symmetric positive semidefinite `S`, with `λ`
/// relative to the mean diagonal.
fn ridge_solve(mut s: DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let scale = (s.trace() / n.max(1) as f64).max(f64::MIN_POSITIVE);
    for i in 0..n {
        s[(i, i)] += RIDGE_JITTER * scale;
    }
    if let Some(ch) = s.clone().cholesky() {
        return Ok(ch.solve(r));
    }
    s.svd(true, true)
        .solve(r, 1e-14 * scale)
        .map_err(|e| Error::Numerical(format!("probe solve failed: {e}")))
}

/// Weighted least-squares affine probe from activations to targets.
pub fn fit_affine_probe(acts: &DMatrix<f64>, targets: &DMatrix<f64>, weights: &[f64]) -> Result<AffineProbe> {
    check_rows(acts, targets, weights)?;
    let w = normalized_weights(weights)?;
    let mu_a = weighted_mean(acts, &w);
    let mu_t = weighted_mean(targets, &w);
    let a = center_and_scale(acts, &w);
    let t = center_and_scale(targets, &w);
    let coef = ridge_solve(a.tr_mul(&a), &a.tr_mul(&t))?;
    let bias = &mu_t - coef.tr_mul(&mu_a);
    Ok(AffineProbe { weights: coef, bias })
}

/// Leave-one-group-out cross-validated weighted R² of an affine probe.
///
/// Each group is held out in turn, the probe is refit on the others, and
/// held-out residuals are pooled; the total sum of squares is taken about
/// the weighted global target mean.
pub fn logo_cv_r2(rep: &RepresentationMatrix, targets: &DMatrix<f64>) -> Result<f64> {
    let acts = &rep.data;
    check_rows(acts, targets, &rep.weights)?;
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, g) in rep.groups.iter().enumerate() {
        members.entry(*g).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::arg("leave-one-group-out needs at least two groups"));
    }
    let w = normalized_weights(&rep.weights)?;
    let (n, d, k) = (acts.nrows(), acts.ncols(), targets.ncols());

    // Global centering keeps the augmented normal equations well conditioned;
    // it does not change any fold's fit.
    let mu_a = weighted_mean(acts, &w);
    let mu_t = weighted_mean(targets, &w);
    let mut x = DMatrix::zeros(n, d + 1);
    let mut y = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = acts[(i, j)] - mu_a[j];
        }
        x[(i, d)] = 1.0;
        for j in 0..k {
            y[(i, j)] = targets[(i, j)] - mu_t[j];
        }
    }

    let group_stats = |rows: &[usize]| {
        let mut xs = DMatrix::zeros(rows.len(), d + 1);
        let mut ys = DMatrix::zeros(rows.len(), k);
        for (r, &i) in rows.iter().enumerate() {
            let s = w[i].sqrt();
            xs.row_mut(r).copy_from(&(x.row(i) * s));
            ys.row_mut(r).copy_from(&(y.row(i) * s));
        }
        (xs.tr_mul(&xs), xs.tr_mul(&ys))
    };
    let stats: Vec<_> = members.values().map(|rows| group_stats(rows)).collect();
    let mut sxx = DMatrix::zeros(d + 1, d + 1);
    let mut sxy = DMatrix::zeros(d + 1, k);
    for (a, b) in &stats {
        sxx += a;
        sxy += b;
    }

    let mut ss_res = 0.0;
    for (rows, (gxx, gxy)) in members.values().zip(&stats) {
        let mut s = &sxx - gxx;
        let r = &sxy - gxy;
        // ridge on the feature block only; the intercept stays free
        let scale = ((0..d).map(|j| s[(j, j)]).sum::<f64>() / d.max(1) as f64).max(f64::MIN_POSITIVE);
        for j in 0..d {
            s[(j, j)] += RIDGE_JITTER * scale;
        }
        let coef = match s.clone().cholesky() {
            Some(ch) => ch.solve(&r),
            None => s
                .svd(true, true)
                .solve(&r, 1e-14 * scale)
                .map_err(|e| Error::Numerical(format!("fold solve failed: {e}")))?,
        };
        for &i in rows {
            let pred = x.row(i) * &coef;
            ss_res += w[i] * (y.row(i) - pred).norm_squared();
        }
    }
    let ss_tot: f64 = (0..n).map(|i| w[i] * y.row(i).norm_squared()).sum();
    if ss_tot <= 0.0 {
        return Err(Error::UndefinedMetric("targets have zero weighted variance".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Weighted linear CKA, `‖AᵀL‖²_F / (‖AᵀA‖_F ‖LᵀL‖_F)` on centered,
/// weight-scaled rows.
pub fn lcka(acts: &DMatrix<f64>, targets: &DMatrix<f64>, weights: &[f64]) -> Result<f64> {
    check_rows(acts, targets, weights)?;
    let w = normalized_weights(weights)?;
    let a = center_and_scale(acts, &w);
    let l = center_and_scale(targets, &w);
    let cross = a.tr_mul(&l).norm_squared();
    let denom = a.tr_mul(&a).norm() * l.tr_mul(&l).norm();
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::UndefinedMetric("lCKA of a zero-variance representation".into()));
    }
    Ok(cross / denom)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// Weighted covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Explained-variance ratios, summing to one.
    pub ratios: Vec<f64>,
    /// Eigenvectors as columns, in eigenvalue order.
    pub components: DMatrix<f64>,
    pub dims_99: usize,
}

impl Pca {
    /// Scores on the first `k` components.
    pub fn project(&self, acts: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        let mut centered = acts.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centered * self.components.columns(0, k)
    }
}

/// Principal components of the weighted covariance.
pub fn weighted_pca(acts: &DMatrix<f64>, weights: &[f64]) -> Result<Pca> {
    if acts.nrows() < 2 {
        return Err(Error::arg("PCA needs at least two rows"));
    }
    if acts.nrows() != weights.len() {
        return Err(Error::arg("one weight per row required"));
    }
    let w = normalized_weights(weights)?;
    let mean = weighted_mean(acts, &w);
    let x = center_and_scale(acts, &w);
    let eig = SymmetricEigen::new(x.tr_mul(&x));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedMetric("activations have zero weighted variance".into()));
    }
    let ratios: Vec<f64> = eigenvalues.iter().map(|e| e / total).collect();
    let mut components = DMatrix::zeros(acts.ncols(), order.len());
    for (c, &i) in order.iter().enumerate() {
        components.set_column(c, &eig.eigenvectors.column(i));
    }
    let mut cum = 0.0;
    let mut dims_99 = ratios.len();
    for (k, r) in ratios.iter().enumerate() {
        cum += r;
        // tolerate round-off for exactly low-rank data
        if cum >= VARIANCE_TARGET - 1e-12 {
            dims_99 = k + 1;
            break;
        }
    }
    Ok(Pca { mean, eigenvalues, ratios, components, dims_99 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Procrustes {
    /// Orthogonal map applied on the right: `source * rotation ≈ target`.
    pub rotation: DMatrix<f64>,
    pub scale: f64,
    /// True when the optimal orthogonal map has determinant -1.
    pub reflection: bool,
    /// Weighted RMS distance after alignment.
    pub residual: f64,
}

/// Orthogonal (optionally scaled) alignment of `source` onto `target`
/// minimizing the weighted Frobenius distance. Reflections are allowed.
pub fn procrustes_align(
    source: &DMatrix<f64>,
    target: &DMatrix<f64>,
    weights: &[f64],
    with_scale: bool,
) -> Result<Procrustes> {
    check_rows(source, target, weights)?;
    if source.ncols() != target.ncols() {
        return Err(Error::arg("source and target must have equal width"));
    }
    let w = normalized_weights(weights)?;
    let mut ws = source.clone();
    for (i, wi) in w.iter().enumerate() {
        ws.row_mut(i).scale_mut(*wi);
    }
    let cross = ws.tr_mul(target);
    let src_norm: f64 = (0..source.nrows()).map(|i| w[i] * source.row(i).norm_squared()).sum();
    let tgt_norm: f64 = (0..target.nrows()).map(|i| w[i] * target.row(i).norm_squared()).sum();
    if src_norm <= 0.0 || tgt_norm <= 0.0 {
        return Err(Error::UndefinedMetric("Procrustes alignment of a zero matrix".into()));
    }
    let svd = cross.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let rotation = &u * &vt;
    let reflection = rotation.determinant() < 0.0;
    if reflection {
        log::info!("Procrustes solution includes a reflection");
    }
    let scale = if with_scale { svd.singular_values.sum() / src_norm } else { 1.0 };
    let aligned = source * &rotation * scale;
    let residual = (0..source.nrows())
        .map(|i| w[i] * (aligned.row(i) - target.row(i)).norm_squared())
        .sum::<f64>()
        .sqrt();
    Ok(Procrustes { rotation, scale, reflection, residual })
}

/// Ground-truth rows for every prefix of a distribution, in trie order:
/// centered next-step log-probabilities, inverse-degeneracy weights and
/// class groups.
#[derive(Debug, Clone)]
pub struct PrefixTargets {
    /// Row of each kept prefix in trie (level-major) order.
    pub rows: Vec<usize>,
    /// Prefix length of each kept row.
    pub steps: Vec<u64>,
    pub classes: Vec<u32>,
    pub targets: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// Prefixes dropped because a next step is impossible, so the centered
    /// log-probabilities are not finite.
    pub skipped_forced: usize,
}

impl PrefixTargets {
    /// Keeps prefixes of length at least `min_t`.
    pub fn new(dist: &PrefixDistribution, min_t: u64) -> Result<Self> {
        let mut rows = Vec::new();
        let mut steps = Vec::new();
        let mut classes = Vec::new();
        let mut flat = Vec::new();
        let mut weights = Vec::new();
        let mut skipped_forced = 0;
        let mut row = 0;
        for (k, level) in dist.levels().iter().enumerate() {
            let t = k as u64 + 1;
            for node in level {
                let here = row;
                row += 1;
                if t < min_t {
                    continue;
                }
                if node.next_logp.iter().any(|v| !v.is_finite()) {
                    skipped_forced += 1;
                    continue;
                }
                let class = &dist.classes()[node.class as usize];
                flat.extend_from_slice(&centered_logprobs(&node.next_logp)?);
                rows.push(here);
                steps.push(t);
                classes.push(node.class);
                weights.push(1.0 / class.degeneracy as f64);
            }
        }
        if rows.len() < 2 {
            return Err(Error::arg(format!("only {} prefixes have finite targets", rows.len())));
        }
        let targets = DMatrix::from_row_slice(rows.len(), 4, &flat);
        Ok(PrefixTargets { rows, steps, classes, targets, weights, skipped_forced })
    }

    /// Ground truth as its own representation.
    pub fn ground_truth(&self) -> Result<RepresentationMatrix> {
        RepresentationMatrix::new(self.targets.clone(), self.weights.clone(), self.classes.clone())
    }

    /// Selects the kept rows of one capture point.
    pub fn representation(&self, acts: &ActivationSet, point: &str) -> Result<RepresentationMatrix> {
        let data = acts
            .get(point)
            .ok_or_else(|| Error::arg(format!("no capture point {point}")))?;
        let d = acts.d_model;
        if acts.rows <= self.rows.last().copied().unwrap_or(0) {
            return Err(Error::arg(format!(
                "activations have {} rows, targets need {}",
                acts.rows,
                self.rows.last().unwrap() + 1
            )));
        }
        let m = DMatrix::from_fn(self.rows.len(), d, |i, j| data[self.rows[i] * d + j]);
        RepresentationMatrix::new(m, self.weights.clone(), self.classes.clone())
    }

    /// Reports for every named capture point.
    pub fn reports(&self, acts: &ActivationSet, step: u64) -> Result<Vec<AlignmentReport>> {
        acts.names()
            .map(|name| AlignmentReport::compute(name, step, &self.representation(acts, name)?, &self.targets))
            .collect()
    }
}

/// Alignment metrics of one capture point at one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub point: String,
    pub step: u64,
    pub cv_r2: f64,
    pub lcka: f64,
    pub pca_spectrum: Vec<f64>,
    pub dims_99: usize,
}

impl AlignmentReport {
    pub fn compute(point: &str, step: u64, rep: &RepresentationMatrix, targets: &DMatrix<f64>) -> Result<Self> {
        let pca = weighted_pca(&rep.data, &rep.weights)?;
        Ok(AlignmentReport {
            point: point.to_string(),
            step,
            cv_r2: logo_cv_r2(rep, targets)?,
            lcka: lcka(&rep.data, targets, &rep.weights)?,
            pca_spectrum: pca.ratios,
            dims_99: pca.dims_99,
        })
    }
}

pub fn write_reports_json<W: Write>(reports: &[AlignmentReport], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, reports)?;
    Ok(())
}

/// Long-format CSV: `layer, metric, value, checkpoint_step`.
pub fn write_reports_csv<W: Write>(reports: &[AlignmentReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "metric", "value", "checkpoint_step"])?;
    append_report_rows(&mut w, reports)?;
    w.flush()?;
    Ok(())
}

/// Body rows of [`write_reports_csv`], for logs that grow over a run.
pub fn append_report_rows<W: Write>(w: &mut csv::Writer<W>, reports: &[AlignmentReport]) -> Result<()> {
    for r in reports {
        let step = r.step.to_string();
        w.write_record([r.point.as_str(), "cv_r2", &format!("{:e}", r.cv_r2), &step])?;
        w.write_record([r.point.as_str(), "lcka", &format!("{:e}", r.lcka), &step])?;
        w.write_record([r.point.as_str(), "dims_99", &r.dims_99.to_string(), &step])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn rotation(dim: usize, seed: u64) -> DMatrix<f64> {
        gaussian(dim, dim, seed).qr().q()
    }

    fn weights(n: usize) -> Vec<f64> {
        (0..n).map(|i| 1.0 / (1 + i % 5) as f64).collect()
    }

    fn groups(n: usize, per: usize) -> Vec<u32> {
        (0..n).map(|i| (i / per) as u32).collect()
    }

    #[test]
    fn probe_recovers_affine_map() {
        let a = gaussian(60, 5, 1);
        let true_w = gaussian(5, 3, 2);
        let b = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let t = AffineProbe { weights: true_w.clone(), bias: b.clone() }.predict(&a);
        let w = weights(60);
        let probe = fit_affine_probe(&a, &t, &w).unwrap();
        assert!((probe.predict(&a) - &t).amax() < 1e-8);
        let doubled: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let again = fit_affine_probe(&a, &t, &doubled).unwrap();
        assert!((again.weights - probe.weights).amax() < 1e-12);
        assert!(matches!(fit_affine_probe(&a, &t, &vec![0.0; 60]), Err(Error::Argument(_))));
    }

    #[test]
    fn probe_tolerates_constant_column() {
        let mut a = gaussian(40, 4, 3);
        a.column_mut(2).fill(1.5);
        let t = gaussian(40, 2, 4);
        let probe = fit_affine_probe(&a, &t, &weights(40)).unwrap();
        assert!(probe.weights.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cv_r2_realizable_and_noise() {
        let a = gaussian(120, 6, 5);
        let t = AffineProbe { weights: gaussian(6, 4, 6), bias: DVector::from_element(4, 0.3) }.predict(&a);
        let rep = RepresentationMatrix::new(a.clone(), weights(120), groups(120, 4)).unwrap();
        assert!((logo_cv_r2(&rep, &t).unwrap() - 1.0).abs() < 1e-6);
        let noise = gaussian(120, 4, 7);
        assert!(logo_cv_r2(&rep, &noise).unwrap() <= 0.1);
        let single = RepresentationMatrix::new(a, weights(120), vec![0; 120]).unwrap();
        assert!(matches!(logo_cv_r2(&single, &t), Err(Error::Argument(_))));
    }

    #[test]
    fn cv_r2_invariant_to_affine_transforms() {
        let a = gaussian(90, 4, 8);
        let t = gaussian(90, 2, 9) * 0.3 + a.columns(0, 2) * 0.8;
        let rep = RepresentationMatrix::new(a.clone(), weights(90), groups(90, 3)).unwrap();
        let base = logo_cv_r2(&rep, &t).unwrap();
        let m = gaussian(4, 4, 10) + DMatrix::identity(4, 4) * 3.0;
        let mut moved = &a * m;
        for mut row in moved.row_iter_mut() {
            row.add_scalar_mut(7.0);
        }
        let r2 = logo_cv_r2(&rep.with_data(moved).unwrap(), &t).unwrap();
        assert!((r2 - base).abs() < 1e-8);
        let shifted = t.add_scalar(-4.0);
        assert!((logo_cv_r2(&rep, &shifted).unwrap() - base).abs() < 1e-8);
    }

    #[test]
    fn lcka_properties() {
        let a = gaussian(80, 5, 11);
        let w = weights(80);
        assert!((lcka(&a, &a, &w).unwrap() - 1.0).abs() < 1e-12);
        let rotated = &a * rotation(5, 12) * 3.5;
        assert!((lcka(&a, &rotated, &w).unwrap() - 1.0).abs() < 1e-10);
        let noise = gaussian(80, 5, 13);
        assert!(lcka(&a, &noise, &w).unwrap() < 0.2);
        let b = gaussian(80, 3, 14);
        assert!((lcka(&a, &b, &w).unwrap() - lcka(&b, &a, &w).unwrap()).abs() < 1e-12);
        assert!(matches!(lcka(&DMatrix::zeros(80, 2), &a, &w), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn pca_rank_and_weight_semantics() {
        let basis = gaussian(2, 6, 15);
        let a = gaussian(50, 2, 16) * &basis;
        let w = weights(50);
        let pca = weighted_pca(&a, &w).unwrap();
        assert_eq!(pca.dims_99, 2);
        assert!((pca.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // duplicate row 0 with half weight each
        let mut dup = DMatrix::zeros(51, 6);
        dup.rows_mut(0, 50).copy_from(&a);
        dup.row_mut(50).copy_from(&a.row(0));
        let mut wd = w.clone();
        wd[0] /= 2.0;
        wd.push(w[0] / 2.0);
        let pd = weighted_pca(&dup, &wd).unwrap();
        for (x, y) in pca.eigenvalues.iter().zip(&pd.eigenvalues) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(weighted_pca(&DMatrix::zeros(3, 2), &[1.0; 3]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn pca_isotropic_gaussian() {
        let d = 10;
        let a = gaussian(20000, d, 17);
        let pca = weighted_pca(&a, &vec![1.0; 20000]).unwrap();
        // 99% of an isotropic spectrum needs all but a sliver of the last axis
        assert!(pca.dims_99 >= d - 1 && pca.dims_99 <= d);
    }

    #[test]
    fn procrustes_recovers_rotation() {
        let s = gaussian(40, 3, 18);
        let r = rotation(3, 19);
        let w = weights(40);
        let fit = procrustes_align(&s, &(&s * &r), &w, false).unwrap();
        assert!(fit.residual < 1e-10);
        assert!((fit.rotation - r).amax() < 1e-10);
        let id = procrustes_align(&s, &s, &w, true).unwrap();
        assert!((id.rotation - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!(!id.reflection);

        let mut flip = DMatrix::identity(3, 3);
        flip[(2, 2)] = -1.0;
        let refl = procrustes_align(&s, &(&s * &flip), &w, false).unwrap();
        assert!(refl.reflection);
        assert!((refl.rotation.determinant() + 1.0).abs() < 1e-12);
        assert!(refl.residual < 1e-10);
        assert!(procrustes_align(&DMatrix::zeros(40, 3), &s, &w, false).is_err());
    }

    fn small_dist() -> PrefixDistribution {
        use crate::dataset::build_joint;
        use crate::lattice::{GreensTable, Offset, WalkerSpec};
        let spec = WalkerSpec::new(Offset::new(2, 0), 12, 4).unwrap();
        build_joint(&spec, &GreensTable::build(12).unwrap()).unwrap()
    }

    #[test]
    fn ground_truth_aligns_with_itself() {
        let dist = small_dist();
        let pt = PrefixTargets::new(&dist, 1).unwrap();
        assert_eq!(pt.skipped_forced, 0);
        assert_eq!(pt.rows.len(), dist.num_prefixes());
        let gt = pt.ground_truth().unwrap();
        assert!((logo_cv_r2(&gt, &pt.targets).unwrap() - 1.0).abs() < 1e-9);
        assert!((lcka(&gt.data, &pt.targets, &gt.weights).unwrap() - 1.0).abs() < 1e-12);
        // centered rows sum to zero, so at most three directions carry variance
        assert!(weighted_pca(&gt.data, &gt.weights).unwrap().dims_99 <= 3);
        // class weights sum to the number of classes at each step
        let total: f64 = pt.weights.iter().sum();
        assert!((total - dist.classes().len() as f64).abs() < 1e-9);
    }

    #[test]
    fn forced_prefixes_are_skipped() {
        use crate::dataset::build_joint;
        use crate::lattice::{GreensTable, Offset, WalkerSpec};
        // after three steps left the remaining three must all go right
        let spec = WalkerSpec::new(Offset::new(0, 0), 6, 3).unwrap();
        let dist = build_joint(&spec, &GreensTable::build(6).unwrap()).unwrap();
        let pt = PrefixTargets::new(&dist, 1).unwrap();
        assert!(pt.skipped_forced > 0);
        assert_eq!(pt.rows.len() + pt.skipped_forced, dist.num_prefixes());
        let later = PrefixTargets::new(&dist, 2).unwrap();
        assert!(later.steps.iter().all(|&t| t >= 2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn lcka_is_symmetric_and_bounded(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let a = gaussian(30, 4, seed);
            let b = gaussian(30, 3, seed + 1) + a.columns(0, 3) * scale;
            let w = weights(30);
            let ab = lcka(&a, &b, &w).unwrap();
            let ba = lcka(&b, &a, &w).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            let rot = &a * rotation(4, seed + 2) * scale;
            prop_assert!((lcka(&rot, &b, &w).unwrap() - ab).abs() < 1e-10);
        }
    }
}
