//! Synthetic datasets and the CSV interchange format.
//!
//! Generators are pure functions of their parameters and seed. The CSV
//! format is fixed: UTF-8, header `label,f0,...,f{d-1}`, one sample per
//! line, label first. A label of -1 marks an outlier row; a file mixes
//! labeled and outlier rows never. Floats are written with 17 significant
//! digits, which round-trips every finite f64 exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Where an outlier set is allowed to be used. Auxiliary sets feed
/// training; test sets only ever feed evaluation. The two are generated
/// from different distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierRole {
    Auxiliary,
    Test,
}

/// Classification samples: `n x d` features with labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset needs at least one sample".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            n_classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Copies the given rows into a batch.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::matrix(idx.len(), d, data).expect("batch shape"),
            labels,
        )
    }

    /// One epoch of shuffled batches, materialized.
    pub fn batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<(Tensor, Vec<usize>)> {
        epoch_batches(self.len(), batch_size, rng)
            .iter()
            .map(|idx| self.gather(idx))
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, self.dim(), self.features.data(), Some(&self.labels))
    }

    /// Splits the first `n_first` samples of every class (in order of
    /// appearance) into one dataset and the rest into another. Both halves
    /// must end up nonempty for every class. Used to carve a held-out test
    /// set from the same generated clusters.
    pub fn split_per_class(&self, n_first: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        if n_first == 0 {
            return Err(Error::Config("split_per_class: n_first must be positive".into()));
        }
        let mut counts = vec![0usize; self.n_classes];
        let mut first_idx = Vec::new();
        let mut rest_idx = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if counts[l] < n_first {
                first_idx.push(i);
            } else {
                rest_idx.push(i);
            }
            counts[l] += 1;
        }
        if let Some(short) = counts.iter().position(|&c| c <= n_first) {
            return Err(Error::Data(format!(
                "split_per_class: class {short} has {} samples, need more than {n_first}",
                counts[short]
            )));
        }
        let (fx, fl) = self.gather(&first_idx);
        let (rx, rl) = self.gather(&rest_idx);
        Ok((
            LabeledDataset::new(fx, fl, self.n_classes)?,
            LabeledDataset::new(rx, rl, self.n_classes)?,
        ))
    }
}

/// Unlabeled outlier samples plus the role they were generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierDataset {
    features: Tensor,
    role: OutlierRole,
}

impl OutlierDataset {
    pub fn new(features: Tensor, role: OutlierRole) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Data("dataset needs at least one sample".into()));
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(OutlierDataset { features, role })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn role(&self) -> OutlierRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::matrix(idx.len(), d, data).expect("batch shape")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, self.dim(), self.features.data(), None)
    }
}

/// A seeded permutation of `0..n` split into batches; the last batch may
/// be short. Two calls with the same rng state produce the same batches.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let perm = rng.permutation(n);
    perm.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Outlier generating distributions. Auxiliary and test sets should use
/// different modes (or at least different parameters) so the test set is
/// genuinely unseen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutlierMode {
    /// Isotropic gaussian centered `offset` away from the origin in a
    /// seed-chosen direction.
    ShiftedGaussian { offset: f64, sigma: f64 },
    /// Uniform directions at radii drawn uniformly from `[r_min, r_max]`.
    UniformShell { r_min: f64, r_max: f64 },
    /// Alternating rows of the two modes above.
    Mixture {
        offset: f64,
        sigma: f64,
        r_min: f64,
        r_max: f64,
    },
}

impl OutlierMode {
    /// Parses a mode name plus its parameter pool (CLI surface).
    pub fn parse(kind: &str, offset: f64, sigma: f64, r_min: f64, r_max: f64) -> Result<Self> {
        let mode = match kind {
            "shifted-gaussian" => OutlierMode::ShiftedGaussian { offset, sigma },
            "uniform-shell" => OutlierMode::UniformShell { r_min, r_max },
            "mixture" => OutlierMode::Mixture {
                offset,
                sigma,
                r_min,
                r_max,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown outlier mode '{other}' (expected shifted-gaussian|uniform-shell|mixture)"
                )))
            }
        };
        mode.validate()?;
        Ok(mode)
    }

    fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, nonneg: bool| -> Result<()> {
            if !v.is_finite() || (nonneg && v < 0.0) {
                return Err(Error::Config(format!("outlier mode: bad {name} = {v}")));
            }
            Ok(())
        };
        match *self {
            OutlierMode::ShiftedGaussian { offset, sigma } => {
                check("offset", offset, true)?;
                check("sigma", sigma, true)
            }
            OutlierMode::UniformShell { r_min, r_max } => {
                check("r_min", r_min, true)?;
                check("r_max", r_max, true)?;
                if r_min > r_max {
                    return Err(Error::Config(format!(
                        "outlier mode: r_min {r_min} exceeds r_max {r_max}"
                    )));
                }
                Ok(())
            }
            OutlierMode::Mixture {
                offset,
                sigma,
                r_min,
                r_max,
            } => {
                OutlierMode::ShiftedGaussian { offset, sigma }.validate()?;
                OutlierMode::UniformShell { r_min, r_max }.validate()
            }
        }
    }
}

fn random_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// `C` isotropic gaussian clusters in `d` dimensions. Cluster means are
/// random unit directions scaled by `mean_scale`, redrawn until every pair
/// of means is at least `mean_scale` apart. Requires `d > C` so the
/// class-weight span can leave room for an orthogonal complement
/// downstream.
pub fn gen_gaussian_id(
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    mean_scale: f64,
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    if dim <= n_classes {
        return Err(Error::Config(format!(
            "feature dim {dim} must exceed class count {n_classes}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be positive".into()));
    }
    if !(mean_scale.is_finite() && mean_scale > 0.0) || !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!(
            "bad cluster geometry: mean_scale={mean_scale}, sigma={sigma}"
        )));
    }

    let mut rng = Rng::seed_from(seed);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mut placed = false;
        for _ in 0..1000 {
            let candidate: Vec<f64> = random_unit(&mut rng, dim)
                .into_iter()
                .map(|x| x * mean_scale)
                .collect();
            let separated = means.iter().all(|m| {
                let dist2: f64 = m
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dist2.sqrt() >= mean_scale
            });
            if separated {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {n_classes} cluster means at pairwise distance \
                 {mean_scale} in {dim} dimensions (failed at class {c})"
            )));
        }
    }

    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            for &m in mean {
                data.push(m + sigma * rng.normal());
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::matrix(n, dim, data)?, labels, n_classes)
}

/// `count` outlier samples in `d` dimensions from `mode`, tagged with the
/// role they are generated for.
pub fn gen_outliers(
    dim: usize,
    count: usize,
    mode: OutlierMode,
    seed: u64,
    role: OutlierRole,
) -> Result<OutlierDataset> {
    if count == 0 {
        return Err(Error::Config("outlier count must be positive".into()));
    }
    if dim == 0 {
        return Err(Error::Config("outlier dim must be positive".into()));
    }
    mode.validate()?;

    let mut rng = Rng::seed_from(seed);
    let mut data = Vec::with_capacity(count * dim);
    match mode {
        OutlierMode::ShiftedGaussian { offset, sigma } => {
            let center: Vec<f64> = random_unit(&mut rng, dim)
                .into_iter()
                .map(|x| x * offset)
                .collect();
            for _ in 0..count {
                for &c in &center {
                    data.push(c + sigma * rng.normal());
                }
            }
        }
        OutlierMode::UniformShell { r_min, r_max } => {
            for _ in 0..count {
                let dir = random_unit(&mut rng, dim);
                let r = r_min + (r_max - r_min) * rng.next_f64();
                data.extend(dir.into_iter().map(|x| x * r));
            }
        }
        OutlierMode::Mixture {
            offset,
            sigma,
            r_min,
            r_max,
        } => {
            let center: Vec<f64> = random_unit(&mut rng, dim)
                .into_iter()
                .map(|x| x * offset)
                .collect();
            for i in 0..count {
                if i % 2 == 0 {
                    for &c in &center {
                        data.push(c + sigma * rng.normal());
                    }
                } else {
                    let dir = random_unit(&mut rng, dim);
                    let r = r_min + (r_max - r_min) * rng.next_f64();
                    data.extend(dir.into_iter().map(|x| x * r));
                }
            }
        }
    }
    OutlierDataset::new(Tensor::matrix(count, dim, data)?, role)
}

/// Result of loading a CSV file: labeled rows or outlier rows, never both.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetFile {
    Labeled(LabeledDataset),
    /// Outlier features; the caller assigns the role.
    Outliers(Tensor),
}

impl DatasetFile {
    pub fn into_labeled(self) -> Result<LabeledDataset> {
        match self {
            DatasetFile::Labeled(d) => Ok(d),
            DatasetFile::Outliers(_) => Err(Error::Data(
                "expected labeled data, file holds outliers (all labels -1)".into(),
            )),
        }
    }

    pub fn into_outliers(self, role: OutlierRole) -> Result<OutlierDataset> {
        match self {
            DatasetFile::Outliers(features) => OutlierDataset::new(features, role),
            DatasetFile::Labeled(_) => Err(Error::Data(
                "expected outlier data (labels -1), file holds labeled samples".into(),
            )),
        }
    }
}

fn write_csv(path: &Path, dim: usize, data: &[f64], labels: Option<&[usize]>) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..dim {
        write!(out, ",f{j}").expect("string write");
    }
    out.push('\n');
    for (i, row) in data.chunks(dim).enumerate() {
        match labels {
            Some(ls) => write!(out, "{}", ls[i]).expect("string write"),
            None => out.push_str("-1"),
        }
        for v in row {
            // 17 significant digits: exact f64 round-trip
            write!(out, ",{v:.16e}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a dataset CSV. Rows with label -1 form an outlier set, rows with
/// non-negative labels a labeled set (class count inferred as max+1);
/// mixing the two in one file is an error. Errors carry 1-based line
/// numbers.
pub fn load_csv(path: &Path) -> Result<DatasetFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::Data(format!(
            "{}: line 1: header must be label,f0,...,f{{d-1}}",
            path.display()
        )));
    }
    let dim = cols.len() - 1;
    for (j, col) in cols[1..].iter().enumerate() {
        if *col != format!("f{j}") {
            return Err(Error::Data(format!(
                "{}: line 1: expected column f{j}, found '{col}'",
                path.display()
            )));
        }
    }

    let mut data: Vec<f64> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for (lineno, line) in lines {
        let human = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Data(format!(
                "{}: line {human}: expected {} fields, found {}",
                path.display(),
                dim + 1,
                fields.len()
            )));
        }
        let label: i64 = fields[0].parse().map_err(|_| {
            Error::Data(format!(
                "{}: line {human}: label '{}' is not an integer",
                path.display(),
                fields[0]
            ))
        })?;
        if label < -1 {
            return Err(Error::Data(format!(
                "{}: line {human}: label {label} out of range (-1 or a class index)",
                path.display()
            )));
        }
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {human}: '{f}' is not a number",
                    path.display()
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: line {human}: non-finite feature value",
                    path.display()
                )));
            }
            data.push(v);
        }
    }

    if labels.is_empty() {
        return Err(Error::Data(format!(
            "{}: no samples after the header",
            path.display()
        )));
    }
    let n = labels.len();
    let features = Tensor::matrix(n, dim, data)?;

    let any_outlier = labels.contains(&-1);
    let any_labeled = labels.iter().any(|&l| l >= 0);
    if any_outlier && any_labeled {
        return Err(Error::Data(format!(
            "{}: mixes outlier rows (label -1) with labeled rows",
            path.display()
        )));
    }
    if any_outlier {
        Ok(DatasetFile::Outliers(features))
    } else {
        let labels: Vec<usize> = labels.into_iter().map(|l| l as usize).collect();
        let n_classes = labels.iter().max().map(|&m| m + 1).expect("nonempty");
        Ok(DatasetFile::Labeled(LabeledDataset::new(
            features, labels, n_classes,
        )?))
    }
}

#[cfg(test)]
mod tests;
