//! Labeled datasets, file ingestion, synthetic families and subsampling.

mod idx;
mod prep;
mod subsample;
mod synthetic;

pub use idx::{load_idx, parse_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use prep::{bilinear_resize, Preprocess};
pub use subsample::{subsample, train_test_split, Strategy, SubsampleSpec};
pub use synthetic::{make_synthetic, Family, SyntheticSpec};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: bad magic number {found:#010x}, expected {expected:#010x}")]
    WrongMagic { file: String, expected: u32, found: u32 },
    #[error("{file}: truncated, needed {needed} bytes but found {found}")]
    Truncated { file: String, needed: usize, found: usize },
    #[error("image file has {images} entries but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("line {line}: expected {expected} fields, found {found}")]
    Ragged { line: u64, expected: usize, found: usize },
    #[error("line {line}, column `{column}`: `{value}` is not a number")]
    NonNumeric { line: u64, column: String, value: String },
    #[error("label column `{0}` not found in header")]
    MissingLabelColumn(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid subsample: {0}")]
    Subsample(String),
}

/// Channel/height/width geometry carried by image-shaped datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples with dense class labels, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    name: String,
    feature_dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    image: Option<ImageShape>,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        feature_dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, DatasetError> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(DatasetError::Invalid(
                "feature dimension and class count must be positive".into(),
            ));
        }
        if labels.is_empty() || features.len() != labels.len() * feature_dim {
            return Err(DatasetError::Invalid(format!(
                "{} feature values for {} samples of dimension {feature_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DatasetError::Invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            feature_dim,
            num_classes,
            features,
            labels,
            image: None,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_image_shape(mut self, shape: ImageShape) -> Result<Self, DatasetError> {
        if shape.len() != self.feature_dim {
            return Err(DatasetError::Invalid(format!(
                "image shape {shape:?} does not match feature dimension {}",
                self.feature_dim
            )));
        }
        self.image = Some(shape);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.row(i), self.labels[i])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// Sample indices grouped by class, each group in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    /// True when every class index has at least one sample.
    pub fn is_complete(&self) -> bool {
        self.class_counts().iter().all(|&c| c > 0)
    }

    /// Rows at `indices` (in the given order), keeping the label space.
    pub fn select(&self, indices: &[usize]) -> Result<Self, DatasetError> {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let mut out = Self::new(self.name.clone(), self.feature_dim, self.num_classes, features, labels)?;
        out.image = self.image;
        Ok(out)
    }

    /// Stable 64-bit content fingerprint over geometry, features and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::rng::mix64(self.feature_dim as u64 ^ ((self.num_classes as u64) << 32));
        for v in &self.features {
            h = crate::rng::mix64(h ^ v.to_bits());
        }
        for &l in &self.labels {
            h = crate::rng::mix64(h ^ l as u64);
        }
        if let Some(s) = self.image {
            h = crate::rng::derive(h, &[s.channels as u64, s.height as u64, s.width as u64]);
        }
        h
    }
}

/// Read a CSV file with a header row. Features are all non-label columns in
/// header order; labels are re-indexed densely by first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<LabeledDataset, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    parse_csv(&name, &text, label_column)
}

pub fn parse_csv(name: &str, text: &str, label_column: &str) -> Result<LabeledDataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DatasetError::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DatasetError::MissingLabelColumn(label_column.to_owned()))?;
    let feature_dim = header.len() - 1;
    if feature_dim == 0 {
        return Err(DatasetError::Invalid("csv has no feature columns".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| DatasetError::Csv(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(DatasetError::Ragged {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                let next = label_ids.len();
                labels.push(*label_ids.entry(cell.to_owned()).or_insert(next));
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| DatasetError::NonNumeric {
                line,
                column: header[col].clone(),
                value: cell.to_owned(),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::NonNumeric {
                    line,
                    column: header[col].clone(),
                    value: cell.to_owned(),
                });
            }
            features.push(v);
        }
    }
    if labels.is_empty() {
        return Err(DatasetError::Invalid("csv has no data rows".into()));
    }
    LabeledDataset::new(name, feature_dim, label_ids.len(), features, labels)
}
