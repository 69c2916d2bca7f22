//! Feature- and label-based transferability baselines.
//!
//! Unlike the gradient expectation, each of these needs a model trained on
//! the source first ([`pretrain_source`]); the scores are then computed from
//! that model's penultimate-layer features or class probabilities on the
//! target. All scores are oriented so that higher means a better source.

mod matrices;
mod metrics;

pub use matrices::{FeatureMatrix, PseudoLabelMatrix};
pub use metrics::{bhattacharyya_diag, gbc, hscore, leep, logme, logme_with_trace, nce, LogMeFit};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::LabeledDataset;
use crate::models::{
    init_params, Batch, GradScope, Head, InitDistribution, InitSpec, LossMode, ModelError, ModelSpec, ModelState,
};
use crate::optim::{accuracy, train_sgd, Schedule, SgdConfig, StepMeter};
use crate::rng;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("degenerate features: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Leep,
    Nce,
    Hscore,
    Logme,
    Gbc,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Leep, Metric::Nce, Metric::Hscore, Metric::Logme, Metric::Gbc];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Leep => "leep",
            Metric::Nce => "nce",
            Metric::Hscore => "hscore",
            Metric::Logme => "logme",
            Metric::Gbc => "gbc",
        }
    }

    /// Every baseline here ranks higher scores as better sources.
    pub fn higher_is_better(self) -> bool {
        true
    }

    /// Whether the metric consumes backbone features (as opposed to source
    /// class predictions).
    pub fn uses_features(self) -> bool {
        matches!(self, Metric::Hscore | Metric::Logme | Metric::Gbc)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
                BaselineError::Invalid(format!("unknown metric `{s}`; valid names are {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

fn default_pretrain_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pretrained {
    pub state: ModelState<f64>,
    pub train_accuracy: f64,
    pub steps: u64,
}

/// Train a classifier on `source` with plain SGD on cross-entropy. The head
/// of `spec` is replaced by a classifier over the source classes.
pub fn pretrain_source(
    source: &LabeledDataset,
    spec: &ModelSpec,
    cfg: &PretrainConfig,
    meter: &StepMeter,
) -> Result<Pretrained, BaselineError> {
    let spec = spec.with_head(Head::Classifier {
        num_classes: source.num_classes(),
    });
    let mut state = init_params::<f64>(
        &spec,
        InitSpec {
            distribution: InitDistribution::FanInGaussian,
            seed: rng::derive(cfg.seed, &[0]),
        },
    )?;
    let summary = train_sgd(
        &mut state,
        source,
        LossMode::Supervised,
        &SgdConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            schedule: Schedule::Constant,
            scope: GradScope::All,
            seed: rng::derive(cfg.seed, &[1]),
        },
        meter,
    )?;
    let train_accuracy = accuracy(&state, source)?;
    Ok(Pretrained {
        state,
        train_accuracy,
        steps: summary.steps,
    })
}

/// Penultimate-layer features of `state` on every target sample.
pub fn extract_features(state: &ModelState<f64>, target: &LabeledDataset) -> Result<FeatureMatrix, BaselineError> {
    let batch = Batch::<f64>::full(target)?;
    let feats = state.features(&batch.inputs)?;
    FeatureMatrix::new(
        feats.shape()[1],
        feats.into_data(),
        target.labels().to_vec(),
        target.num_classes(),
    )
}

/// Source-class probabilities of `state` on every target sample.
pub fn pseudo_labels(state: &ModelState<f64>, target: &LabeledDataset) -> Result<PseudoLabelMatrix, BaselineError> {
    let batch = Batch::<f64>::full(target)?;
    let rows = state.predict_proba(&batch.inputs)?;
    let cols = rows.first().map_or(0, Vec::len);
    PseudoLabelMatrix::new(cols, rows.into_iter().flatten().collect())
}

/// Score one pretrained source model on `target` with `metric`.
pub fn score_pretrained(
    metric: Metric,
    state: &ModelState<f64>,
    target: &LabeledDataset,
) -> Result<f64, BaselineError> {
    match metric {
        Metric::Leep => leep(&pseudo_labels(state, target)?, target.labels()),
        Metric::Nce => nce(&pseudo_labels(state, target)?.argmax(), target.labels()),
        Metric::Hscore => hscore(&extract_features(state, target)?),
        Metric::Logme => logme(&extract_features(state, target)?),
        Metric::Gbc => gbc(&extract_features(state, target)?),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub source: String,
    pub score: f64,
    pub source_train_accuracy: f64,
    pub pretrain_steps: u64,
}

/// Full baseline pipeline: pretrain on every source (in parallel), then score
/// the target. Output follows the order of `sources`.
pub fn baseline_pipeline(
    metric: Metric,
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    spec: &ModelSpec,
    cfg: &PretrainConfig,
    meter: &StepMeter,
) -> Result<Vec<BaselineScore>, BaselineError> {
    sources
        .par_iter()
        .map(|s| {
            let pre = pretrain_source(s, spec, cfg, meter)?;
            Ok(BaselineScore {
                source: s.name().to_owned(),
                score: score_pretrained(metric, &pre.state, target)?,
                source_train_accuracy: pre.train_accuracy,
                pretrain_steps: pre.steps,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names() {
        assert_eq!("LogMe".parse::<Metric>().unwrap(), Metric::Logme);
        let err = "fid".parse::<Metric>().unwrap_err().to_string();
        assert!(err.contains("leep, nce, hscore, logme, gbc"), "{err}");
        assert!(Metric::ALL.iter().all(|m| m.higher_is_better()));
    }
}
