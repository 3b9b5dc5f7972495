//! Tabular dataset ingestion and preprocessing.
//!
//! Pipeline: load delimited text as typed columns, shuffle rows by seed,
//! split 60/20/20, then fit every statistic on the training split only:
//! categorical codes (first appearance), mean/mode imputation and per-feature
//! min/max scaling to `[-1, 1]`. Validation and test rows are transformed with
//! the training statistics.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Feature,
    Target,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    #[default]
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(default)]
    pub role: Role,
    #[serde(rename = "type", default)]
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExpectedCounts {
    pub instances: Option<usize>,
    pub features: Option<usize>,
    pub classes: Option<usize>,
}

fn default_delimiter() -> String {
    ",".to_string()
}

fn default_missing() -> Vec<String> {
    vec!["?".to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Data file; relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default)]
    pub has_header: bool,
    /// Lines starting with this character are skipped.
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub expected: ExpectedCounts,
}

impl DatasetManifest {
    /// Reads a TOML (or `.json`) manifest and resolves its data path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut manifest: DatasetManifest = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| KanError::Serde(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| KanError::Serde(format!("{}: {e}", path.display())))?
        };
        if manifest.path.is_relative() {
            if let Some(dir) = path.parent() {
                manifest.path = dir.join(&manifest.path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let targets = self.columns.iter().filter(|c| c.role == Role::Target).count();
        if targets != 1 {
            return Err(KanError::config(format!(
                "manifest `{}` needs exactly one target column, found {targets}",
                self.name
            )));
        }
        let features = self.feature_count();
        if features == 0 {
            return Err(KanError::config(format!("manifest `{}` has no feature columns", self.name)));
        }
        if let Some(expected) = self.expected.features {
            if expected != features {
                return Err(KanError::config(format!(
                    "manifest `{}` declares {features} feature columns but expects {expected}",
                    self.name
                )));
            }
        }
        if self.delimiter.len() != 1 {
            return Err(KanError::config("delimiter must be a single byte"));
        }
        if self.comment.as_ref().is_some_and(|c| c.len() != 1) {
            return Err(KanError::config("comment prefix must be a single byte"));
        }
        Ok(())
    }

    pub fn feature_count(&self) -> usize {
        self.columns.iter().filter(|c| c.role == Role::Feature).count()
    }

    fn target_index(&self) -> usize {
        self.columns
            .iter()
            .position(|c| c.role == Role::Target)
            .expect("validated manifest has a target")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RawColumn {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl RawColumn {
    fn missing_count(&self) -> usize {
        match self {
            RawColumn::Numeric(v) => v.iter().filter(|x| x.is_none()).count(),
            RawColumn::Categorical(v) => v.iter().filter(|x| x.is_none()).count(),
        }
    }
}

/// Typed columns as read from disk; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub names: Vec<String>,
    pub columns: Vec<RawColumn>,
    pub n_rows: usize,
}

impl RawTable {
    pub fn missing_count(&self) -> usize {
        self.columns.iter().map(RawColumn::missing_count).sum()
    }
}

pub fn load_table(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<RawTable> {
    let file = std::fs::File::open(path.as_ref())?;
    read_table(file, manifest)
}

/// Parses delimited text according to `manifest`. Errors carry the 1-based
/// line and column of the offending cell.
pub fn read_table<R: std::io::Read>(reader: R, manifest: &DatasetManifest) -> Result<RawTable> {
    manifest.validate()?;
    let mut builder = csv::ReaderBuilder::new();
    builder
        .delimiter(manifest.delimiter.as_bytes()[0])
        .has_headers(manifest.has_header)
        .flexible(true)
        .trim(csv::Trim::All);
    if let Some(c) = &manifest.comment {
        builder.comment(Some(c.as_bytes()[0]));
    }
    let mut rdr = builder.from_reader(reader);

    let width = manifest.columns.len();
    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); width];
    let mut lines = Vec::new();
    let mut n_rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| KanError::Ingestion {
            row: e.position().map_or(0, |p| p.line() as usize),
            column: 0,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(n_rows + 1, |p| p.line() as usize);
        if record.len() != width {
            return Err(KanError::Ingestion {
                row: line,
                column: record.len().min(width) + 1,
                message: format!("expected {width} columns, found {}", record.len()),
            });
        }
        for (c, field) in record.iter().enumerate() {
            let missing = field.is_empty() || manifest.missing.iter().any(|m| m == field);
            cells[c].push((!missing).then(|| field.to_string()));
        }
        lines.push(line);
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(KanError::Ingestion {
            row: 0,
            column: 0,
            message: "no data rows".into(),
        });
    }
    if let Some(expected) = manifest.expected.instances {
        if expected != n_rows {
            return Err(KanError::Ingestion {
                row: n_rows,
                column: 0,
                message: format!("expected {expected} instances, found {n_rows}"),
            });
        }
    }

    let mut columns = Vec::with_capacity(width);
    for (c, (spec, col)) in manifest.columns.iter().zip(cells).enumerate() {
        let typed = match spec.kind {
            ColumnKind::Categorical => RawColumn::Categorical(col),
            ColumnKind::Numeric => {
                let mut out = Vec::with_capacity(col.len());
                for (r, cell) in col.into_iter().enumerate() {
                    out.push(match cell {
                        None => None,
                        Some(s) => Some(s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                            KanError::Ingestion {
                                row: lines[r],
                                column: c + 1,
                                message: format!("`{s}` is not a number (column `{}`)", spec.name),
                            }
                        })?),
                    });
                }
                RawColumn::Numeric(out)
            }
        };
        columns.push(typed);
    }
    Ok(RawTable {
        names: manifest.columns.iter().map(|c| c.name.clone()).collect(),
        columns,
        n_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    /// Affinely map each feature to `[-1, 1]` using training min/max.
    pub scale: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { scale: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureEncoding {
    Numeric {
        /// Training-split mean used for missing cells.
        impute: f64,
    },
    Categorical {
        /// Category labels in code order; unseen values get `categories.len()`.
        categories: Vec<String>,
        /// Training-split mode, used for missing cells.
        mode: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub name: String,
    pub encoding: FeatureEncoding,
    /// Training min and max after encoding, when scaling is on.
    pub scale: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// One row per instance, in source order.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub stats: Vec<FeatureStats>,
    pub seed: u64,
    pub scaled: bool,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn n_instances(&self) -> usize {
        self.features.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| KanError::Serde(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| KanError::Serde(e.to_string()))
    }

    /// Splits and scales an already numeric feature matrix.
    pub fn from_numeric(
        name: impl Into<String>,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        n_classes: usize,
        seed: u64,
        options: PreprocessOptions,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(KanError::Preprocess("feature and label counts differ".into()));
        }
        let width = features.first().map_or(0, Vec::len);
        if width == 0 || features.iter().any(|r| r.len() != width) {
            return Err(KanError::Preprocess("feature rows must be non-empty and equal length".into()));
        }
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(KanError::Preprocess("label out of range".into()));
        }
        let (train, val, test) = split_indices(features.len(), seed)?;
        let mut data = Dataset {
            name: name.into(),
            stats: (0..width)
                .map(|j| FeatureStats {
                    name: format!("x{j}"),
                    encoding: FeatureEncoding::Numeric { impute: 0.0 },
                    scale: None,
                })
                .collect(),
            features,
            labels,
            n_classes,
            class_names: (0..n_classes).map(|c| c.to_string()).collect(),
            train,
            val,
            test,
            seed,
            scaled: options.scale,
        };
        if options.scale {
            data.apply_scaling();
        }
        Ok(data)
    }

    fn apply_scaling(&mut self) {
        for j in 0..self.n_features() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &r in &self.train {
                lo = lo.min(self.features[r][j]);
                hi = hi.max(self.features[r][j]);
            }
            for row in &mut self.features {
                row[j] = scale_value(row[j], lo, hi);
            }
            self.stats[j].scale = Some((lo, hi));
        }
    }
}

fn scale_value(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (v - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

/// Shuffles `0..n` by seed and cuts it 60/20/20. Validation and test get
/// `n / 5` rounded to nearest; the rest goes to train.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let n_val = (2 * n + 5) / 10;
    let n_test = n_val;
    if n_val == 0 {
        return Err(KanError::Preprocess(format!(
            "{n} instances are too few for a 60/20/20 split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n - n_val - n_test;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

/// Encodes, imputes, splits and scales a loaded table.
pub fn preprocess(raw: &RawTable, manifest: &DatasetManifest, seed: u64, options: PreprocessOptions) -> Result<Dataset> {
    manifest.validate()?;
    if raw.columns.len() != manifest.columns.len() {
        return Err(KanError::Preprocess("table and manifest column counts differ".into()));
    }
    let n = raw.n_rows;
    let (labels, class_names) = encode_target(&raw.columns[manifest.target_index()], &manifest.columns[manifest.target_index()].name)?;
    if class_names.len() < 2 {
        return Err(KanError::Preprocess(format!(
            "target of `{}` has a single class",
            manifest.name
        )));
    }
    if let Some(expected) = manifest.expected.classes {
        if expected != class_names.len() {
            return Err(KanError::Preprocess(format!(
                "expected {expected} classes, found {}",
                class_names.len()
            )));
        }
    }
    let (train, val, test) = split_indices(n, seed)?;
    let mut in_train = vec![false; n];
    train.iter().for_each(|&r| in_train[r] = true);

    let mut features = vec![Vec::with_capacity(manifest.feature_count()); n];
    let mut stats = Vec::with_capacity(manifest.feature_count());
    for (spec, col) in manifest.columns.iter().zip(&raw.columns) {
        if spec.role != Role::Feature {
            continue;
        }
        if col.missing_count() == n {
            return Err(KanError::Preprocess(format!("feature `{}` is entirely missing", spec.name)));
        }
        let (values, encoding) = match col {
            RawColumn::Numeric(v) => encode_numeric(v, &in_train, &spec.name)?,
            RawColumn::Categorical(v) => encode_categorical(v, &in_train, &spec.name)?,
        };
        for (row, v) in features.iter_mut().zip(values) {
            row.push(v);
        }
        stats.push(FeatureStats {
            name: spec.name.clone(),
            encoding,
            scale: None,
        });
    }

    let mut data = Dataset {
        name: manifest.name.clone(),
        features,
        labels,
        n_classes: class_names.len(),
        class_names,
        train,
        val,
        test,
        stats,
        seed,
        scaled: options.scale,
    };
    if options.scale {
        data.apply_scaling();
    }
    Ok(data)
}

/// Class indices follow the sorted order of the distinct target values.
fn encode_target(col: &RawColumn, name: &str) -> Result<(Vec<usize>, Vec<String>)> {
    let missing = || KanError::Preprocess(format!("target `{name}` has missing values"));
    match col {
        RawColumn::Numeric(v) => {
            let values: Vec<f64> = v.iter().map(|x| x.ok_or_else(missing)).collect::<Result<_>>()?;
            let mut distinct = values.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let labels = values
                .iter()
                .map(|x| distinct.binary_search_by(|d| d.total_cmp(x)).expect("value is present"))
                .collect();
            Ok((labels, distinct.iter().map(|d| d.to_string()).collect()))
        }
        RawColumn::Categorical(v) => {
            let values: Vec<&String> = v.iter().map(|x| x.as_ref().ok_or_else(missing)).collect::<Result<_>>()?;
            let mut distinct: Vec<&String> = values.clone();
            distinct.sort();
            distinct.dedup();
            let labels = values
                .iter()
                .map(|x| distinct.binary_search(x).expect("value is present"))
                .collect();
            Ok((labels, distinct.into_iter().cloned().collect()))
        }
    }
}

fn encode_numeric(v: &[Option<f64>], in_train: &[bool], name: &str) -> Result<(Vec<f64>, FeatureEncoding)> {
    let observed: Vec<f64> = v
        .iter()
        .zip(in_train)
        .filter_map(|(x, &t)| if t { *x } else { None })
        .collect();
    if observed.is_empty() {
        return Err(KanError::Preprocess(format!(
            "feature `{name}` has no observed values in the training split"
        )));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    Ok((v.iter().map(|x| x.unwrap_or(mean)).collect(), FeatureEncoding::Numeric { impute: mean }))
}

fn encode_categorical(v: &[Option<String>], in_train: &[bool], name: &str) -> Result<(Vec<f64>, FeatureEncoding)> {
    let mut categories: Vec<String> = Vec::new();
    let mut codes: HashMap<&str, usize> = HashMap::new();
    let mut counts: Vec<usize> = Vec::new();
    for (x, &t) in v.iter().zip(in_train) {
        if let (Some(s), true) = (x, t) {
            let code = *codes.entry(s.as_str()).or_insert_with(|| {
                categories.push(s.clone());
                counts.push(0);
                categories.len() - 1
            });
            counts[code] += 1;
        }
    }
    if categories.is_empty() {
        return Err(KanError::Preprocess(format!(
            "feature `{name}` has no observed values in the training split"
        )));
    }
    // lowest code wins ties
    let mode = counts
        .iter()
        .enumerate()
        .fold(0, |best, (i, &c)| if c > counts[best] { i } else { best });
    let reserved = categories.len();
    let values = v
        .iter()
        .map(|x| match x {
            None => mode as f64,
            Some(s) => codes.get(s.as_str()).copied().unwrap_or(reserved) as f64,
        })
        .collect();
    Ok((values, FeatureEncoding::Categorical { categories, mode }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SyntheticKind {
    /// Label is the sign agreement of the first two features; the rest is noise.
    Xor,
    /// Isotropic Gaussian clusters around well-separated random centres.
    Blobs { classes: usize },
}

impl std::str::FromStr for SyntheticKind {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xor" => Ok(SyntheticKind::Xor),
            "blobs" | "gaussian-blobs" => Ok(SyntheticKind::Blobs { classes: 3 }),
            other => match other.strip_prefix("blobs").and_then(|c| c.strip_prefix(':')) {
                Some(c) => c
                    .parse()
                    .map(|classes| SyntheticKind::Blobs { classes })
                    .map_err(|_| KanError::invalid(format!("bad class count in `{other}`"))),
                None => Err(KanError::invalid(format!("unknown synthetic dataset `{other}`"))),
            },
        }
    }
}

/// Deterministic labelled data, split and scaled like a loaded dataset.
pub fn synthetic_dataset(kind: SyntheticKind, n_features: usize, n_instances: usize, seed: u64) -> Result<Dataset> {
    if n_features < 2 {
        return Err(KanError::invalid("synthetic datasets need at least two features"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let (features, labels, n_classes, name) = match kind {
        SyntheticKind::Xor => {
            let mut features = Vec::with_capacity(n_instances);
            let mut labels = Vec::with_capacity(n_instances);
            for i in 0..n_instances {
                let label = i % 2;
                let s0: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let s1 = if label == 1 { s0 } else { -s0 };
                let mut row = vec![
                    s0 * rng.random_range(0.05..1.0),
                    s1 * rng.random_range(0.05..1.0),
                ];
                row.extend((2..n_features).map(|_| rng.random_range(-1.0..1.0)));
                features.push(row);
                labels.push(label);
            }
            (features, labels, 2, format!("xor-{n_features}"))
        }
        SyntheticKind::Blobs { classes } => {
            if classes < 2 {
                return Err(KanError::invalid("blobs need at least two classes"));
            }
            let centres: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..n_features).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let noise = Normal::new(0.0, 0.5).expect("valid normal parameters");
            let mut features = Vec::with_capacity(n_instances);
            let mut labels = Vec::with_capacity(n_instances);
            for i in 0..n_instances {
                let label = i % classes;
                features.push(centres[label].iter().map(|c| c + noise.sample(&mut rng)).collect());
                labels.push(label);
            }
            (features, labels, classes, format!("blobs{classes}-{n_features}"))
        }
    };
    Dataset::from_numeric(name, features, labels, n_classes, seed, PreprocessOptions::default())
}
