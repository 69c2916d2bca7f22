use serde::{Deserialize, Serialize};

use super::BaselineError;

/// Target-sample features with their labels, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl FeatureMatrix {
    pub fn new(cols: usize, values: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self, BaselineError> {
        let rows = labels.len();
        if cols == 0 || values.len() != rows * cols {
            return Err(BaselineError::Invalid(format!(
                "{} values for {rows} rows of width {cols}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BaselineError::Invalid("features must be finite".into()));
        }
        if num_classes == 0 || rows < num_classes {
            return Err(BaselineError::Invalid(format!(
                "{rows} rows cannot cover {num_classes} classes"
            )));
        }
        let mut seen = vec![false; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(BaselineError::Invalid(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(BaselineError::Invalid(format!("class {missing} has no samples")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            labels,
            num_classes,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Same labels, every feature multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// CSV with header `f0,...,f{d-1},label`.
    pub fn to_csv(&self) -> String {
        let mut out: Vec<String> = (0..self.cols).map(|j| format!("f{j}")).collect();
        out.push("label".into());
        let mut text = out.join(",");
        text.push('\n');
        for i in 0..self.rows {
            let mut cells: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            cells.push(self.labels[i].to_string());
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        text
    }

    /// Parse [`FeatureMatrix::to_csv`] output. The class count is
    /// `max(label) + 1`.
    pub fn from_csv(text: &str) -> Result<Self, BaselineError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| BaselineError::Csv(e.to_string()))?.clone();
        if header.iter().next_back() != Some("label") {
            return Err(BaselineError::Csv("last column must be `label`".into()));
        }
        let cols = header.len() - 1;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| BaselineError::Csv(e.to_string()))?;
            for (j, cell) in rec.iter().enumerate() {
                if j == cols {
                    labels.push(
                        cell.parse::<usize>()
                            .map_err(|e| BaselineError::Csv(format!("label `{cell}`: {e}")))?,
                    );
                } else {
                    values.push(
                        cell.parse::<f64>()
                            .map_err(|e| BaselineError::Csv(format!("`{cell}`: {e}")))?,
                    );
                }
            }
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(cols, values, labels, num_classes)
    }
}

/// Per-sample probability distributions over source classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl PseudoLabelMatrix {
    pub fn new(cols: usize, values: Vec<f64>) -> Result<Self, BaselineError> {
        if cols == 0 || values.is_empty() || !values.len().is_multiple_of(cols) {
            return Err(BaselineError::Invalid(format!(
                "{} values do not form rows of width {cols}",
                values.len()
            )));
        }
        for (i, row) in values.chunks_exact(cols).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(BaselineError::Invalid(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(BaselineError::Invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self {
            rows: values.len() / cols,
            cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Most probable source class per row (first index on ties).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                (0..self.cols).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    }
}
