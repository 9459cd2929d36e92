//! Dataset ingestion and synthetic generators.
//!
//! Three on-disk formats are consumed: LIBSVM sparse text (`label idx:val
//! idx:val…`, 1-based indices, absent entries zero), delimited CSV with a
//! designated label column, and pre-downloaded IDX image/label pairs (the
//! classic handwritten-digit container). All ingestion densifies into a
//! [`Dataset`]: an `n×d` feature matrix, integer class labels, and
//! per-feature standardization statistics recorded at load time.
//!
//! The synthetic generators are the default data source for experiments:
//! a logistic-regression sampler with a known coefficient vector and a
//! multiclass sampler whose coefficient matrix has a planted low rank.
//! Both are deterministic in their seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Features with absolute value below this are written as exact zeros by
/// the LIBSVM writer (i.e. omitted), matching the read-side convention
/// that missing indices are zero.
const SPARSE_ZERO: f64 = 0.0;

/// Standard deviations below this floor are replaced by 1 in the
/// standardization metadata, so constant features pass through unscaled.
const STD_FLOOR: f64 = 1e-12;

/// Errors raised during ingestion or generation.
#[derive(Debug, Error)]
pub enum DataError {
    /// Malformed content at a specific line.
    #[error("{path}:{line}: {msg}")]
    Parse {
        /// Offending file.
        path: PathBuf,
        /// 1-based line number.
        line: usize,
        /// What was wrong.
        msg: String,
    },
    /// A file with no data rows.
    #[error("{0}: empty dataset")]
    EmptyDataset(PathBuf),
    /// Filesystem failure.
    #[error("{path}: {source}")]
    Io {
        /// Offending file.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },
    /// Structurally invalid inputs (dimension mismatches, bad parameters).
    #[error("invalid data: {0}")]
    Invalid(String),
}

/// Result alias for data operations.
pub type Result<T> = std::result::Result<T, DataError>;

/// A dense, fully validated dataset.
///
/// # Invariants
///
/// - `features` contains no NaN or infinity.
/// - `labels.len() == features.nrows()` and every label is `< n_classes`.
/// - `class_names.len() == n_classes`; entry `k` is the original label
///   text for class `k`.
/// - `feature_mean`/`feature_std` have length `d`; standard deviations
///   are strictly positive (constant features get 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Source tag (file stem or generator name).
    pub name: String,
    /// `n×d` feature matrix, unstandardized.
    pub features: DMatrix<f64>,
    /// Class labels, `0..n_classes`.
    pub labels: Vec<usize>,
    /// Number of classes.
    pub n_classes: usize,
    /// Original label text per class index.
    pub class_names: Vec<String>,
    /// Per-feature mean at ingestion.
    pub feature_mean: DVector<f64>,
    /// Per-feature standard deviation at ingestion (floored at 1 for
    /// constant features).
    pub feature_std: DVector<f64>,
}

impl Dataset {
    /// Validates the parts and computes standardization metadata.
    ///
    /// # Errors
    ///
    /// [`DataError::Invalid`] on non-finite features, label/row count
    /// mismatch, out-of-range labels, or a class-name count that differs
    /// from `n_classes`.
    pub fn new(
        name: impl Into<String>,
        features: DMatrix<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        if labels.len() != features.nrows() {
            return Err(DataError::Invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                features.nrows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside declared arity {n_classes}"
            )));
        }
        if class_names.len() != n_classes {
            return Err(DataError::Invalid(format!(
                "{} class names for {} classes",
                class_names.len(),
                n_classes
            )));
        }
        let (mean, std) = standardization_stats(&features);
        Ok(Self {
            name: name.into(),
            features,
            labels,
            n_classes,
            class_names,
            feature_mean: mean,
            feature_std: std,
        })
    }

    /// Number of rows.
    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    /// Number of features.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Features shifted and scaled by the stored statistics.
    pub fn standardized(&self) -> DMatrix<f64> {
        let mut x = self.features.clone();
        for j in 0..x.ncols() {
            let (m, s) = (self.feature_mean[j], self.feature_std[j]);
            for v in x.column_mut(j).iter_mut() {
                *v = (*v - m) / s;
            }
        }
        x
    }

    /// Labels as 0/1 floats; only defined for binary datasets.
    ///
    /// # Errors
    ///
    /// [`DataError::Invalid`] when the dataset is not binary.
    pub fn binary_labels(&self) -> Result<DVector<f64>> {
        if self.n_classes != 2 {
            return Err(DataError::Invalid(format!(
                "need a binary dataset, got {} classes",
                self.n_classes
            )));
        }
        Ok(DVector::from_iterator(
            self.labels.len(),
            self.labels.iter().map(|&l| l as f64),
        ))
    }

    /// Labels reinterpreted as real regression targets (the class index
    /// as a float), for models with a continuous response.
    pub fn real_labels(&self) -> DVector<f64> {
        DVector::from_iterator(self.labels.len(), self.labels.iter().map(|&l| l as f64))
    }
}

fn standardization_stats(x: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let (n, d) = (x.nrows(), x.ncols());
    let mut mean = DVector::zeros(d);
    let mut std = DVector::from_element(d, 1.0);
    if n == 0 {
        return (mean, std);
    }
    for j in 0..d {
        let col = x.column(j);
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        mean[j] = m;
        let s = var.sqrt();
        std[j] = if s > STD_FLOOR { s } else { 1.0 };
    }
    (mean, std)
}

// ---------------------------------------------------------------------------
// Label canonicalization
// ---------------------------------------------------------------------------

/// Maps raw label tokens to dense class indices. Tokens are ordered by
/// numeric value when every token parses as a number (so `-1/+1` maps to
/// `0/1`), otherwise lexicographically; the original text per class is
/// preserved.
fn canonicalize_labels(tokens: &[String]) -> (Vec<usize>, usize, Vec<String>) {
    let mut distinct: Vec<String> = Vec::new();
    for t in tokens {
        if !distinct.contains(t) {
            distinct.push(t.clone());
        }
    }
    let all_numeric: Option<Vec<f64>> = distinct
        .iter()
        .map(|t| t.parse::<f64>().ok().filter(|v| !v.is_nan()))
        .collect();
    match &all_numeric {
        Some(values) => {
            let mut order: Vec<usize> = (0..distinct.len()).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            distinct = order.iter().map(|&i| distinct[i].clone()).collect();
        }
        None => distinct.sort(),
    }
    let index = |t: &String| distinct.iter().position(|d| d == t).unwrap();
    let labels = tokens.iter().map(index).collect();
    (labels, distinct.len(), distinct)
}

// ---------------------------------------------------------------------------
// LIBSVM sparse text
// ---------------------------------------------------------------------------

/// Parses a LIBSVM-format file into a dense dataset.
///
/// Lines look like `label idx:val idx:val…` with 1-based, strictly
/// increasing-or-not indices; unmentioned indices are zero. The feature
/// dimension is the largest index observed unless `dim_override` raises
/// it. Binary label sets map to `{0, 1}` by numeric order with the
/// original tokens recorded in [`Dataset::class_names`].
///
/// # Errors
///
/// [`DataError::Parse`] with the 1-based line number on any malformed
/// token; [`DataError::EmptyDataset`] when no data lines exist;
/// [`DataError::Io`] on read failure.
pub fn parse_libsvm(path: &Path, dim_override: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut label_tokens: Vec<String> = Vec::new();
    let mut max_index = 0usize;
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line_no = line_no + 1;
        let mut parts = line.split_whitespace();
        let label = parts.next().expect("non-empty line has a first token");
        let mut entries = Vec::new();
        for token in parts {
            let (idx, val) = token.split_once(':').ok_or_else(|| DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected idx:val, got {token:?}"),
            })?;
            let idx: usize = idx.parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("bad feature index {idx:?}"),
            })?;
            if idx == 0 {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: "feature indices are 1-based".into(),
                });
            }
            let val: f64 = val.parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("non-numeric value {val:?}"),
            })?;
            if !val.is_finite() {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("non-finite value {val}"),
                });
            }
            max_index = max_index.max(idx);
            entries.push((idx, val));
        }
        label_tokens.push(label.to_string());
        rows.push(entries);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset(path.to_path_buf()));
    }
    let d = match dim_override {
        Some(d) if d < max_index => {
            return Err(DataError::Invalid(format!(
                "dimension override {d} below max observed index {max_index}"
            )))
        }
        Some(d) => d,
        None => max_index,
    };
    let mut features = DMatrix::zeros(rows.len(), d);
    for (i, entries) in rows.iter().enumerate() {
        for &(idx, val) in entries {
            features[(i, idx - 1)] = val;
        }
    }
    let (labels, n_classes, class_names) = canonicalize_labels(&label_tokens);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "libsvm".into());
    Dataset::new(name, features, labels, n_classes, class_names)
}

/// Writes a dataset in canonical LIBSVM form: the original label token,
/// then `idx:val` for every nonzero feature (1-based, ascending), one
/// line per row. Parsing the output reproduces the dataset, and a
/// write→parse→write cycle is byte-identical.
///
/// # Errors
///
/// [`DataError::Io`] on write failure.
pub fn write_libsvm(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..dataset.n() {
        out.push_str(&dataset.class_names[dataset.labels[i]]);
        for j in 0..dataset.dim() {
            let v = dataset.features[(i, j)];
            if v != SPARSE_ZERO {
                let _ = write!(out, " {}:{}", j + 1, v);
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Parses a delimited file (comma-separated, double-quote quoting) into a
/// dense dataset, extracting `label_column` as the class label and all
/// remaining columns, in order, as features.
///
/// # Errors
///
/// [`DataError::Parse`] with a line number on ragged rows or non-numeric
/// fields; [`DataError::EmptyDataset`] when no data rows exist;
/// [`DataError::Io`] on read failure.
pub fn parse_csv(path: &Path, label_column: usize, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut label_tokens = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(rows.len() + 1);
        if label_column >= record.len() {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!(
                    "label column {label_column} out of range for {} fields",
                    record.len()
                ),
            });
        }
        let mut row = Vec::with_capacity(record.len() - 1);
        for (idx, field) in record.iter().enumerate() {
            if idx == label_column {
                label_tokens.push(field.to_string());
                continue;
            }
            let v: f64 = field.parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("non-numeric field {field:?} in column {idx}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("non-finite field in column {idx}"),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset(path.to_path_buf()));
    }
    let d = rows[0].len();
    let features = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let (labels, n_classes, class_names) = canonicalize_labels(&label_tokens);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(name, features, labels, n_classes, class_names)
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or_default();
    match e.kind() {
        csv::ErrorKind::Io(_) => DataError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        },
        _ => DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        },
    }
}

/// Writes a dataset in canonical CSV form: header `label,x1,…,xd`, the
/// label as its original token, features in shortest round-trip decimal.
/// A write→parse→write cycle is byte-identical.
///
/// # Errors
///
/// [`DataError::Io`] on write failure.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..dataset.dim() {
        let _ = write!(out, ",x{}", j + 1);
    }
    out.push('\n');
    for i in 0..dataset.n() {
        out.push_str(&dataset.class_names[dataset.labels[i]]);
        for j in 0..dataset.dim() {
            let _ = write!(out, ",{}", dataset.features[(i, j)]);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// IDX (pre-downloaded image/label pairs)
// ---------------------------------------------------------------------------

/// Reads a pre-downloaded IDX image/label pair (the classic
/// handwritten-digit container: big-endian magic, u32 dimensions, raw u8
/// payload), keeping at most `limit` rows. Pixels scale to `[0, 1]`.
///
/// # Errors
///
/// [`DataError::Invalid`] on malformed magic/diffs, [`DataError::Io`] on
/// read failure, [`DataError::EmptyDataset`] when `limit` or the files
/// leave zero rows.
pub fn read_idx(images: &Path, labels: &Path, limit: usize) -> Result<Dataset> {
    let img = read_idx_payload(images, 3)?;
    let lab = read_idx_payload(labels, 1)?;
    let n_img = img.dims[0];
    let row_len: usize = img.dims[1..].iter().product();
    let n = n_img.min(lab.dims[0]).min(limit);
    if n == 0 {
        return Err(DataError::EmptyDataset(images.to_path_buf()));
    }
    let features = DMatrix::from_fn(n, row_len, |i, j| img.payload[i * row_len + j] as f64 / 255.0);
    let label_values: Vec<usize> = lab.payload[..n].iter().map(|&b| b as usize).collect();
    let n_classes = label_values.iter().copied().max().unwrap_or(0) + 1;
    let class_names = (0..n_classes).map(|k| k.to_string()).collect();
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, features, label_values, n_classes, class_names)
}

struct IdxPayload {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx_payload(path: &Path, expect_rank_at_most: usize) -> Result<IdxPayload> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(DataError::Invalid(format!(
            "{}: not an IDX file",
            path.display()
        )));
    }
    if bytes[2] != 0x08 {
        return Err(DataError::Invalid(format!(
            "{}: only u8 IDX payloads are supported, got type {:#x}",
            path.display(),
            bytes[2]
        )));
    }
    let rank = bytes[3] as usize;
    if rank == 0 || rank > expect_rank_at_most {
        return Err(DataError::Invalid(format!(
            "{}: unsupported IDX rank {rank}",
            path.display()
        )));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(DataError::Invalid(format!(
            "{}: truncated IDX header",
            path.display()
        )));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() < header + expected {
        return Err(DataError::Invalid(format!(
            "{}: truncated IDX payload",
            path.display()
        )));
    }
    Ok(IdxPayload {
        dims,
        payload: bytes[header..header + expected].to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Synthetic dataset family.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticKind {
    /// Logistic regression: standard-normal features, Bernoulli labels
    /// through a known coefficient vector.
    Logistic {
        /// Rows.
        n: usize,
        /// Features.
        d: usize,
        /// True coefficients; drawn from the seed when absent (scaled so
        /// the logit standard deviation is about 2).
        beta: Option<Vec<f64>>,
    },
    /// Multiclass logits with a planted rank-`r` coefficient matrix.
    MulticlassLowRank {
        /// Rows.
        n: usize,
        /// Features.
        d: usize,
        /// Classes.
        k: usize,
        /// Planted coefficient rank.
        r: usize,
    },
}

/// Generates a dataset deterministically from `(kind, seed)`.
///
/// `n = 0` yields an empty dataset with a valid schema (all declared
/// classes present in the metadata, no rows).
///
/// # Errors
///
/// [`DataError::Invalid`] on structurally impossible parameters
/// (`d = 0`, `k < 2`, `r` outside `1..=min(d, k−1)`, or a `beta` whose
/// length differs from `d`).
pub fn gen_synthetic(kind: &SyntheticKind, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SyntheticKind::Logistic { n, d, beta } => {
            if *d == 0 {
                return Err(DataError::Invalid("need at least one feature".into()));
            }
            let beta = match beta {
                Some(b) if b.len() != *d => {
                    return Err(DataError::Invalid(format!(
                        "beta has {} entries for {d} features",
                        b.len()
                    )))
                }
                Some(b) => DVector::from_column_slice(b),
                None => {
                    let scale = 2.0 / (*d as f64).sqrt();
                    DVector::from_fn(*d, |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                }
            };
            let x = DMatrix::from_fn(*n, *d, |_, _| StandardNormal.sample(&mut rng));
            let mut labels = Vec::with_capacity(*n);
            for i in 0..*n {
                let logit = x.row(i).transpose().dot(&beta);
                let p = 1.0 / (1.0 + (-logit).exp());
                labels.push(usize::from(rng.gen::<f64>() < p));
            }
            Dataset::new(
                "synthetic-logistic",
                x,
                labels,
                2,
                vec!["0".into(), "1".into()],
            )
        }
        SyntheticKind::MulticlassLowRank { n, d, k, r } => {
            if *d == 0 || *k < 2 {
                return Err(DataError::Invalid(
                    "need at least one feature and two classes".into(),
                ));
            }
            if *r == 0 || *r > (*d).min(*k - 1) {
                return Err(DataError::Invalid(format!(
                    "rank {r} outside 1..=min(d, k-1) = {}",
                    (*d).min(*k - 1)
                )));
            }
            let left: DMatrix<f64> =
                DMatrix::from_fn(*d, *r, |_, _| StandardNormal.sample(&mut rng));
            let right: DMatrix<f64> =
                DMatrix::from_fn(*r, *k - 1, |_, _| StandardNormal.sample(&mut rng));
            let b = left * right * (1.5 / (*r as f64).sqrt());
            let alpha = DVector::from_fn(*k - 1, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 0.2
            });
            let x = DMatrix::from_fn(*n, *d, |_, _| StandardNormal.sample(&mut rng));
            let mut labels = Vec::with_capacity(*n);
            for i in 0..*n {
                let eta = b.transpose() * x.row(i).transpose() + &alpha;
                let m = eta.iter().fold(0.0f64, |acc, &v| acc.max(v));
                let mut weights: Vec<f64> = eta.iter().map(|&v| (v - m).exp()).collect();
                weights.push((-m).exp());
                let total: f64 = weights.iter().sum();
                let draw: f64 = rng.gen::<f64>() * total;
                let mut cum = 0.0;
                let mut label = *k - 1;
                for (j, w) in weights.iter().enumerate() {
                    cum += w;
                    if draw < cum {
                        label = j;
                        break;
                    }
                }
                labels.push(label);
            }
            Dataset::new(
                "synthetic-multiclass",
                x,
                labels,
                *k,
                (0..*k).map(|c| c.to_string()).collect(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rngd_core::linalg::truncated_svd;
    use rngd_core::objectives::{MultinomialData, ReducedRankModel};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn libsvm_densifies_the_documented_line() {
        let dir = tmp();
        let path = dir.path().join("one.libsvm");
        std::fs::write(&path, "1 1:0.5 3:2.0\n").unwrap();
        let ds = parse_libsvm(&path, Some(3)).unwrap();
        assert_eq!(ds.n(), 1);
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.features[(0, 0)], 0.5);
        assert_eq!(ds.features[(0, 1)], 0.0);
        assert_eq!(ds.features[(0, 2)], 2.0);
        assert_eq!(ds.class_names[ds.labels[0]], "1");
    }

    #[test]
    fn libsvm_maps_signed_binary_labels_in_numeric_order() {
        let dir = tmp();
        let path = dir.path().join("signed.libsvm");
        std::fs::write(&path, "+1 1:1\n-1 2:1\n+1 1:2\n").unwrap();
        let ds = parse_libsvm(&path, None).unwrap();
        assert_eq!(ds.n_classes, 2);
        assert_eq!(ds.class_names, vec!["-1".to_string(), "+1".to_string()]);
        assert_eq!(ds.labels, vec![1, 0, 1]);
    }

    #[test]
    fn libsvm_rejects_empty_files_and_reports_bad_lines() {
        let dir = tmp();
        let empty = dir.path().join("empty.libsvm");
        std::fs::write(&empty, "\n\n").unwrap();
        assert!(matches!(
            parse_libsvm(&empty, None),
            Err(DataError::EmptyDataset(_))
        ));
        let bad = dir.path().join("bad.libsvm");
        std::fs::write(&bad, "1 1:0.5\n0 2:oops\n").unwrap();
        match parse_libsvm(&bad, None) {
            Err(DataError::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("oops"), "{msg}");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn libsvm_write_parse_write_is_byte_identical() {
        let dir = tmp();
        let ds = gen_synthetic(
            &SyntheticKind::Logistic {
                n: 100,
                d: 8,
                beta: None,
            },
            7,
        )
        .unwrap();
        let first = dir.path().join("first.libsvm");
        write_libsvm(&ds, &first).unwrap();
        let reread = parse_libsvm(&first, Some(ds.dim())).unwrap();
        let second = dir.path().join("second.libsvm");
        write_libsvm(&reread, &second).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
        assert_eq!(reread.features, ds.features);
        assert_eq!(reread.labels, ds.labels);
    }

    #[test]
    fn csv_parses_plain_and_quoted_fields() {
        let dir = tmp();
        let path = dir.path().join("tiny.csv");
        std::fs::write(&path, "1,0.5\n0,2.0\n").unwrap();
        let ds = parse_csv(&path, 0, false).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.dim(), 1);
        assert_eq!(ds.features[(0, 0)], 0.5);
        assert_eq!(ds.labels, vec![1, 0]);

        let quoted = dir.path().join("quoted.csv");
        std::fs::write(&quoted, "label,x1\n\"1\",\"0.25\"\n\"0\",\"-3.5\"\n").unwrap();
        let ds = parse_csv(&quoted, 0, true).unwrap();
        assert_eq!(ds.features[(1, 0)], -3.5);
        assert_eq!(ds.labels, vec![1, 0]);
    }

    #[test]
    fn csv_rejects_ragged_rows_with_a_line_number() {
        let dir = tmp();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "1,0.5,2.0\n0,1.0\n").unwrap();
        match parse_csv(&path, 0, false) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_write_parse_write_is_byte_identical() {
        let dir = tmp();
        let ds = gen_synthetic(
            &SyntheticKind::MulticlassLowRank {
                n: 60,
                d: 4,
                k: 3,
                r: 1,
            },
            11,
        )
        .unwrap();
        let first = dir.path().join("first.csv");
        write_csv(&ds, &first).unwrap();
        let reread = parse_csv(&first, 0, true).unwrap();
        let second = dir.path().join("second.csv");
        write_csv(&reread, &second).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
        assert_eq!(reread.features, ds.features);
        assert_eq!(reread.labels, ds.labels);
    }

    #[test]
    fn idx_pairs_round_trip_through_the_reader() {
        let dir = tmp();
        // 2 images of 2x2 pixels.
        let mut img = vec![0u8, 0, 0x08, 3];
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 255]);
        let mut lab = vec![0u8, 0, 0x08, 1];
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[3, 7]);
        let img_path = dir.path().join("images.idx");
        let lab_path = dir.path().join("labels.idx");
        std::fs::write(&img_path, img).unwrap();
        std::fs::write(&lab_path, lab).unwrap();
        let ds = read_idx(&img_path, &lab_path, 100).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.features[(0, 1)], 51.0 / 255.0);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.n_classes, 8);
        let capped = read_idx(&img_path, &lab_path, 1).unwrap();
        assert_eq!(capped.n(), 1);
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let kind = SyntheticKind::MulticlassLowRank {
            n: 50,
            d: 6,
            k: 4,
            r: 2,
        };
        let a = gen_synthetic(&kind, 3).unwrap();
        let b = gen_synthetic(&kind, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&kind, 4).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn empty_generation_has_a_valid_schema() {
        let ds = gen_synthetic(
            &SyntheticKind::Logistic {
                n: 0,
                d: 5,
                beta: None,
            },
            0,
        )
        .unwrap();
        assert_eq!(ds.n(), 0);
        assert_eq!(ds.dim(), 5);
        assert_eq!(ds.n_classes, 2);
        assert_eq!(ds.feature_mean.len(), 5);
        assert!(ds.feature_std.iter().all(|&s| s == 1.0));
    }

    /// Full-rank multinomial fit on planted rank-2 data: the top-2
    /// singular values of the fitted coefficient matrix must carry at
    /// least 90% of the squared singular mass.
    #[test]
    fn planted_rank_dominates_the_fitted_spectrum() {
        let ds = gen_synthetic(
            &SyntheticKind::MulticlassLowRank {
                n: 10_000,
                d: 20,
                k: 6,
                r: 2,
            },
            42,
        )
        .unwrap();
        let data = MultinomialData::new(ds.features.clone(), ds.labels.clone(), 6).unwrap();
        let model = ReducedRankModel::new(data);
        // Full-batch gradient descent to a near-stationary full-rank fit.
        let mut b = DMatrix::zeros(20, 5);
        let mut alpha = DVector::zeros(5);
        let idx: Vec<usize> = (0..ds.n()).collect();
        for _ in 0..400 {
            let (g_b, g_alpha) = model.mean_nll_grad(&b, &alpha, &idx);
            b -= 2.0 * g_b;
            alpha -= 2.0 * g_alpha;
        }
        let svd = truncated_svd(&b, 5).unwrap();
        let total: f64 = svd.sigma.iter().map(|s| s * s).sum();
        let top: f64 = svd.sigma.iter().take(2).map(|s| s * s).sum();
        let mass = top / total;
        assert!(mass >= 0.90, "top-2 squared singular mass {mass:.4}");
    }
}
