//! Score functions, detection metrics, feature-separation degree, and the
//! projection pipeline for visualization.
//!
//! Scores are oriented so that higher means more in-distribution. The
//! detection threshold is set on in-distribution scores so that a target
//! fraction of them (default 95%) is kept, with ties classified as
//! in-distribution; FPR95 is the fraction of outlier scores at or above
//! that threshold. AUROC is computed as the Mann-Whitney rank statistic
//! (ties count half), which equals the trapezoidal area under the ROC
//! curve and is exact: it is an integer pair count divided once.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{kernels, Tensor, NORM_EPS};

/// Residual threshold below which a Gram-Schmidt direction is dropped as
/// linearly dependent.
pub const BASIS_DROP_TOL: f64 = 1e-10;

/// Relative eigenvalue convergence target for power iteration.
pub const POWER_ITER_TOL: f64 = 1e-10;
/// Iteration cap for power iteration.
pub const POWER_ITER_CAP: usize = 10_000;

/// Which score function produced a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Maximum softmax probability.
    Msp,
    /// MSP plus the mean absolute cosine between the feature and the
    /// class weights.
    Combined,
}

impl ScoreKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::Combined => "combined",
        }
    }
}

/// Scores of both populations under one score function.
#[derive(Debug, Clone)]
pub struct ScoreSeries {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub kind: ScoreKind,
}

/// Detection quality at the 95% true-positive operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionReport {
    pub score_kind: ScoreKind,
    pub fpr95: f64,
    pub auroc: f64,
    pub threshold: f64,
}

/// Maximum softmax probability of one logit row; in (1/C, 1].
pub fn msp_score(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|x| (x - max).exp()).sum();
    1.0 / denom
}

/// Mean absolute cosine between a feature and the class-weight rows, both
/// l2-normalized; degenerate vectors contribute 0.
pub fn orth_term(feature: &[f64], class_weights: &Tensor) -> f64 {
    let norm = feature.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        return 0.0;
    }
    let c = class_weights.rows();
    let mut acc = 0.0;
    for i in 0..c {
        let row = class_weights.row(i);
        let wnorm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wnorm <= NORM_EPS {
            continue;
        }
        let dot: f64 = feature.iter().zip(row).map(|(a, b)| a * b).sum();
        acc += (dot / (norm * wnorm)).abs();
    }
    acc / c as f64
}

/// Combined score: MSP plus the orthogonality term. Higher reads as more
/// in-distribution.
pub fn combined_score(logits: &[f64], feature: &[f64], class_weights: &Tensor) -> f64 {
    msp_score(logits) + orth_term(feature, class_weights)
}

/// Scores every row of both feature sets through the model.
pub fn score_series(
    model: &Model,
    id_inputs: &Tensor,
    ood_inputs: &Tensor,
    kind: ScoreKind,
) -> Result<ScoreSeries> {
    let score_all = |inputs: &Tensor| -> Result<Vec<f64>> {
        let (logits, features) = model.forward(inputs)?;
        let w = model.class_weights();
        Ok((0..inputs.rows())
            .map(|i| match kind {
                ScoreKind::Msp => msp_score(logits.row(i)),
                ScoreKind::Combined => combined_score(logits.row(i), features.row(i), w),
            })
            .collect())
    };
    Ok(ScoreSeries {
        id_scores: score_all(id_inputs)?,
        ood_scores: score_all(ood_inputs)?,
        kind,
    })
}

/// The largest threshold keeping at least `ceil(tpr * n)` in-distribution
/// scores at or above it: the `ceil(tpr * n)`-th largest score.
pub fn threshold_at_tpr(id_scores: &[f64], tpr: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::Data("threshold_at_tpr: no scores".into()));
    }
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Config(format!("tpr must be in (0, 1], got {tpr}")));
    }
    let n = id_scores.len();
    // small backoff so 0.95 * 20 = 19.000000000000004 still counts as 19
    let k = ((tpr * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    Ok(sorted[k - 1])
}

/// Fraction of outlier scores classified as in-distribution (score at or
/// above the threshold) when the threshold keeps `tpr` of the
/// in-distribution population.
pub fn fpr_at_tpr(series: &ScoreSeries, tpr: f64) -> Result<f64> {
    if series.ood_scores.is_empty() {
        return Err(Error::Data("fpr_at_tpr: no outlier scores".into()));
    }
    let lambda = threshold_at_tpr(&series.id_scores, tpr)?;
    let fp = series.ood_scores.iter().filter(|&&s| s >= lambda).count();
    Ok(fp as f64 / series.ood_scores.len() as f64)
}

/// Probability that a random in-distribution score exceeds a random
/// outlier score, ties counting half. Exact rank computation.
pub fn auroc(series: &ScoreSeries) -> Result<f64> {
    let (id, ood) = (&series.id_scores, &series.ood_scores);
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Data("auroc: empty population".into()));
    }
    let mut sorted = ood.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let mut twice_wins: u128 = 0;
    for &s in id {
        let below = sorted.partition_point(|&x| x < s);
        let below_or_eq = sorted.partition_point(|&x| x <= s);
        twice_wins += 2 * below as u128 + (below_or_eq - below) as u128;
    }
    Ok(twice_wins as f64 / (2 * id.len() * ood.len()) as f64)
}

/// Builds the detection report for one score series.
pub fn evaluate(series: &ScoreSeries, tpr: f64) -> Result<DetectionReport> {
    Ok(DetectionReport {
        score_kind: series.kind,
        fpr95: fpr_at_tpr(series, tpr)?,
        auroc: auroc(series)?,
        threshold: threshold_at_tpr(&series.id_scores, tpr)?,
    })
}

/// Per-population means of the three separation metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationStats {
    /// Mean euclidean distance between the normalized feature and the
    /// normalized weight of the predicted class; in [0, 2].
    pub euclidean: f64,
    /// Mean cosine between the normalized feature and the predicted
    /// class weight; in [-1, 1].
    pub cosine: f64,
    /// Mean norm of the residual after projecting the normalized feature
    /// onto the span of the class weights; in [0, 1].
    pub reconstruction: f64,
}

/// Separation degree of both populations plus their absolute difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationTriplet {
    pub id: SeparationStats,
    pub ood: SeparationStats,
}

impl SeparationTriplet {
    pub fn diff(&self) -> SeparationStats {
        SeparationStats {
            euclidean: (self.id.euclidean - self.ood.euclidean).abs(),
            cosine: (self.id.cosine - self.ood.cosine).abs(),
            reconstruction: (self.id.reconstruction - self.ood.reconstruction).abs(),
        }
    }
}

fn normalize_row(row: &[f64]) -> Vec<f64> {
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        vec![0.0; row.len()]
    } else {
        row.iter().map(|x| x / norm).collect()
    }
}

/// Orthonormal basis of the row span via modified Gram-Schmidt with one
/// re-orthogonalization pass. Directions whose residual falls below
/// `drop_tol` are dropped. Errors when nothing survives (rank 0).
pub fn orthonormal_basis(rows: &Tensor, drop_tol: f64) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..rows.rows() {
        let mut v = normalize_row(rows.row(i));
        for _pass in 0..2 {
            for e in &basis {
                let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
                for (x, b) in v.iter_mut().zip(e) {
                    *x -= dot * b;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm >= drop_tol {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    if basis.is_empty() {
        return Err(Error::Numeric(
            "orthonormal_basis: all rows degenerate or dependent (rank 0)".into(),
        ));
    }
    Ok(basis)
}

/// Separation metrics of one population: features are compared against the
/// weight of their predicted class and against the weight span, all on
/// normalized vectors.
pub fn separation_stats(
    features: &Tensor,
    predicted: &[usize],
    class_weights: &Tensor,
) -> Result<SeparationStats> {
    let m = features.rows();
    if predicted.len() != m {
        return Err(Error::Shape(format!(
            "separation_stats: {} predictions for {m} rows",
            predicted.len()
        )));
    }
    let c = class_weights.rows();
    if let Some(&bad) = predicted.iter().find(|&&p| p >= c) {
        return Err(Error::Data(format!(
            "separation_stats: predicted class {bad} out of range for {c} classes"
        )));
    }
    let wn: Vec<Vec<f64>> = (0..c).map(|i| normalize_row(class_weights.row(i))).collect();
    let basis = orthonormal_basis(class_weights, BASIS_DROP_TOL)?;

    let (mut eucl, mut cos, mut recon) = (0.0, 0.0, 0.0);
    for i in 0..m {
        let z = normalize_row(features.row(i));
        let w = &wn[predicted[i]];
        let dot: f64 = z.iter().zip(w).map(|(a, b)| a * b).sum();
        let dist: f64 = z
            .iter()
            .zip(w)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let mut residual = z.clone();
        for e in &basis {
            let p: f64 = residual.iter().zip(e).map(|(a, b)| a * b).sum();
            for (r, b) in residual.iter_mut().zip(e) {
                *r -= p * b;
            }
        }
        let rnorm = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
        eucl += dist;
        cos += dot;
        recon += rnorm;
    }
    let mf = m as f64;
    Ok(SeparationStats {
        euclidean: eucl / mf,
        cosine: cos / mf,
        reconstruction: recon / mf,
    })
}

/// Separation degree of in-distribution vs outlier features under a model:
/// predictions come from argmax logits of each population.
pub fn separation_triplet(
    model: &Model,
    id_inputs: &Tensor,
    ood_inputs: &Tensor,
) -> Result<SeparationTriplet> {
    let stats = |inputs: &Tensor| -> Result<SeparationStats> {
        let (logits, features) = model.forward(inputs)?;
        let predicted = Model::predict(&logits);
        separation_stats(&features, &predicted, model.class_weights())
    };
    Ok(SeparationTriplet {
        id: stats(id_inputs)?,
        ood: stats(ood_inputs)?,
    })
}

/// Cosine between each feature row and the weight row of its (true) label,
/// on normalized vectors. Used as the collapse diagnostic during training.
pub fn class_alignment_cosines(
    features: &Tensor,
    labels: &[usize],
    class_weights: &Tensor,
) -> Result<Vec<f64>> {
    let c = class_weights.rows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!(
            "class_alignment_cosines: label {bad} out of range for {c} classes"
        )));
    }
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "class_alignment_cosines: {} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    let wn: Vec<Vec<f64>> = (0..c).map(|i| normalize_row(class_weights.row(i))).collect();
    Ok((0..features.rows())
        .map(|i| {
            let z = normalize_row(features.row(i));
            z.iter().zip(&wn[labels[i]]).map(|(a, b)| a * b).sum()
        })
        .collect())
}

/// Fraction of argmax predictions matching the labels.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let predicted = Model::predict(logits);
    let hits = predicted
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Top eigenvector of the mean-centered feature covariance, by power
/// iteration.
#[derive(Debug, Clone)]
pub struct PrincipalDirection {
    /// Unit vector, sign fixed so its largest-magnitude component is
    /// positive.
    pub direction: Vec<f64>,
    pub eigenvalue: f64,
    pub second_eigenvalue: f64,
    /// False when the top two eigenvalues are (numerically) tied and the
    /// direction is arbitrary within the top eigenspace.
    pub unique: bool,
    pub iterations: usize,
}

fn power_iterate(s: &[f64], d: usize, rng: &mut Rng) -> (Vec<f64>, f64, usize) {
    let scale = s.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut eig = 0.0f64;
    let mut iterations = 0;
    for it in 0..POWER_ITER_CAP {
        iterations = it + 1;
        let sv = kernels::matmul_nn(s, &v, d, d, 1);
        eig = v.iter().zip(&sv).map(|(a, b)| a * b).sum();
        // converged when the residual |Sv - eig v| is small relative to
        // the eigenvalue; the residual norm bounds the eigenvalue error
        // and (scaled by the gap) the eigenvector error
        let residual: f64 = sv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - eig * b) * (a - eig * b))
            .sum::<f64>()
            .sqrt();
        let floor = 1e-12 * scale.max(1e-300);
        if residual <= POWER_ITER_TOL * eig.abs().max(floor) {
            break;
        }
        let norm = sv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // v landed in the null space; restart from a fresh draw
            v = (0..d).map(|_| rng.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            continue;
        }
        v = sv.iter().map(|x| x / norm).collect();
    }
    (v, eig, iterations)
}

/// Principal direction of an outlier feature cloud (at least two rows).
/// Deterministic: the start vector comes from a fixed seed. Errors when
/// the centered covariance is numerically zero (all rows identical).
pub fn principal_ood_direction(ood_features: &Tensor) -> Result<PrincipalDirection> {
    let (m, d) = (ood_features.rows(), ood_features.cols());
    if m < 2 {
        return Err(Error::Data(format!(
            "principal_ood_direction: need at least 2 rows, got {m}"
        )));
    }
    let mut centered = ood_features.data().to_vec();
    let mut mean = vec![0.0; d];
    for row in centered.chunks(d) {
        for (s, v) in mean.iter_mut().zip(row) {
            *s += v;
        }
    }
    mean.iter_mut().for_each(|x| *x /= m as f64);
    for row in centered.chunks_mut(d) {
        for (v, mu) in row.iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    // scatter matrix X^T X; scale does not change eigenvectors
    let s = kernels::matmul_tn(&centered, &centered, m, d, d);
    let max_abs = s.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if max_abs / (m as f64 - 1.0) <= 1e-28 {
        return Err(Error::Numeric(
            "principal_ood_direction: zero covariance (all features identical)".into(),
        ));
    }

    let mut rng = Rng::seed_from(0x9e37_79b9_7f4a_7c15);
    let (mut v, eig, iterations) = power_iterate(&s, d, &mut rng);

    // deflate and estimate the runner-up eigenvalue for the gap flag
    let mut deflated = s.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= eig * v[i] * v[j];
        }
    }
    let (_, second, _) = power_iterate(&deflated, d, &mut rng);
    let second = second.min(eig);
    let unique = (eig - second) > 1e-9 * eig.abs().max(1e-300);

    let argmax = (0..d)
        .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).expect("finite"))
        .expect("nonempty");
    if v[argmax] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(PrincipalDirection {
        direction: v,
        eigenvalue: eig,
        second_eigenvalue: second,
        unique,
        iterations,
    })
}

/// Feature coordinates in the plane of the first two class weights,
/// optionally extended by a third axis from the outlier principal
/// direction (orthogonalized against the plane so the frame is
/// orthonormal).
pub fn project_features(
    features: &Tensor,
    class_weights: &Tensor,
    ood_direction: Option<&[f64]>,
) -> Result<Tensor> {
    if class_weights.rows() < 2 {
        return Err(Error::Config(
            "project_features: need at least 2 class weights".into(),
        ));
    }
    let d = class_weights.cols();
    if features.cols() != d {
        return Err(Error::Shape(format!(
            "project_features: feature width {} vs weight width {d}",
            features.cols()
        )));
    }
    let two = Tensor::matrix(
        2,
        d,
        [class_weights.row(0), class_weights.row(1)].concat(),
    )?;
    let basis = orthonormal_basis(&two, BASIS_DROP_TOL)?;
    if basis.len() < 2 {
        return Err(Error::Numeric(
            "project_features: w_1 and w_2 are parallel (cannot span a plane)".into(),
        ));
    }
    let mut axes = basis;
    if let Some(dir) = ood_direction {
        if dir.len() != d {
            return Err(Error::Shape(format!(
                "project_features: direction width {} vs {d}",
                dir.len()
            )));
        }
        let mut e3 = dir.to_vec();
        for _pass in 0..2 {
            for e in &axes {
                let dot: f64 = e3.iter().zip(e).map(|(a, b)| a * b).sum();
                for (x, b) in e3.iter_mut().zip(e) {
                    *x -= dot * b;
                }
            }
        }
        let norm = e3.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < BASIS_DROP_TOL {
            return Err(Error::Numeric(
                "project_features: outlier direction lies in the w_1/w_2 plane".into(),
            ));
        }
        e3.iter_mut().for_each(|x| *x /= norm);
        axes.push(e3);
    }

    let k = axes.len();
    let n = features.rows();
    let mut data = Vec::with_capacity(n * k);
    for i in 0..n {
        let z = features.row(i);
        for e in &axes {
            data.push(z.iter().zip(e).map(|(a, b)| a * b).sum());
        }
    }
    Tensor::matrix(n, k, data)
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes projection CSV: `population,c1,c2[,c3]`, one block per
/// population tag.
pub fn write_projection_csv(path: &Path, blocks: &[(String, Tensor)]) -> Result<()> {
    let k = blocks
        .first()
        .map(|(_, t)| t.cols())
        .ok_or_else(|| Error::Data("write_projection_csv: no blocks".into()))?;
    let mut out = String::from("population,c1,c2");
    if k == 3 {
        out.push_str(",c3");
    }
    out.push('\n');
    for (tag, coords) in blocks {
        if coords.cols() != k {
            return Err(Error::Shape(
                "write_projection_csv: mixed projection widths".into(),
            ));
        }
        for i in 0..coords.rows() {
            out.push_str(tag);
            for v in coords.row(i) {
                write!(out, ",{}", fmt_float(*v)).expect("string write");
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes detection reports: `score_kind,dataset,fpr95,auroc,threshold`.
pub fn write_reports_csv(path: &Path, rows: &[(String, DetectionReport)]) -> Result<()> {
    let mut out = String::from("score_kind,dataset,fpr95,auroc,threshold\n");
    for (dataset, r) in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.score_kind.name(),
            dataset,
            fmt_float(r.fpr95),
            fmt_float(r.auroc),
            fmt_float(r.threshold)
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the separation table: `metric,id,ood,diff`, one row per metric.
pub fn write_separation_csv(path: &Path, t: &SeparationTriplet) -> Result<()> {
    let d = t.diff();
    let mut out = String::from("metric,id,ood,diff\n");
    for (name, id, ood, diff) in [
        ("euclidean", t.id.euclidean, t.ood.euclidean, d.euclidean),
        ("cosine", t.id.cosine, t.ood.cosine, d.cosine),
        (
            "reconstruction_error",
            t.id.reconstruction,
            t.ood.reconstruction,
            d.reconstruction,
        ),
    ] {
        writeln!(
            out,
            "{name},{},{},{}",
            fmt_float(id),
            fmt_float(ood),
            fmt_float(diff)
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
