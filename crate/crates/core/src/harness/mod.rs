//! Ground-truth transfer performance and the evaluation suites that compare
//! it with gradient-expectation rankings.

mod suites;

pub use suites::{
    evaluate_ablation, evaluate_efficiency, evaluate_reliability, evaluate_stability, AblationConfig, AblationReport,
    BaselineEfficiency, EfficiencyConfig, EfficiencyReport, EfficiencyTimings, ModeDispersion, ReliabilityConfig,
    SourceStability, SourceTransfer, StabilityCell, StabilityConfig, StabilityReport, TransferReport,
};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::datasets::{subsample, train_test_split, DatasetError, LabeledDataset, Strategy, SubsampleSpec};
use crate::models::{GradScope, Head, InitDistribution, InitSpec, LossMode, ModelError, ModelState};
use crate::optim::{accuracy, base_lr_rule, train_sgd, Schedule, SgdConfig, StepMeter};
use crate::pge::PgeError;
use crate::rng;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pge(#[from] PgeError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("performance curve: {0}")]
    Curve(String),
    #[error("kendall tau: {0}")]
    Tau(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMethod {
    /// Train only a fresh head on frozen backbone features.
    LinearProbe,
    /// Train every parameter, starting from the pretrained backbone.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: TransferMethod,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Peak learning rate; `0.1 * batch_size / 256` when absent.
    #[serde(default)]
    pub lr: Option<f64>,
    pub seed: u64,
}

fn default_epochs() -> usize {
    100
}

fn default_batch() -> usize {
    32
}

impl TrainConfig {
    pub fn new(method: TransferMethod, seed: u64) -> Self {
        Self {
            method,
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: None,
            seed,
        }
    }

    pub fn peak_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| base_lr_rule(self.batch_size))
    }
}

/// Fraction of the target held out for testing by [`transfer_train`].
pub const TEST_FRACTION: f64 = 0.2;

/// Transfer `pretrained` to `target` and return held-out accuracy on a
/// seeded stratified 80/20 split.
pub fn transfer_train(
    pretrained: &ModelState<f64>,
    target: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<f64, HarnessError> {
    let (train, test) = train_test_split(target, TEST_FRACTION, rng::derive(cfg.seed, &[0x5e]))?;
    transfer_train_split(pretrained, &train, &test, cfg, &StepMeter::new())
}

/// [`transfer_train`] on an explicit split. A new zero-initialized classifier
/// head is attached for the target classes; the learning rate is
/// cosine-annealed to zero.
pub fn transfer_train_split(
    pretrained: &ModelState<f64>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
    meter: &StepMeter,
) -> Result<f64, HarnessError> {
    if train.num_classes() != test.num_classes() {
        return Err(HarnessError::Config(format!(
            "train split has {} classes but test split has {}",
            train.num_classes(),
            test.num_classes()
        )));
    }
    let mut state = pretrained.with_head(
        Head::Classifier {
            num_classes: train.num_classes(),
        },
        InitSpec {
            distribution: InitDistribution::FanInGaussian,
            seed: 0,
        },
    )?;
    // A zero head passes no gradient into the backbone until it has learned
    // something, so fine-tuning does not start by distorting the pretrained
    // features with a random readout.
    let head = state.partition().head;
    state.params_mut()[head].fill(0.0);
    let scope = match cfg.method {
        TransferMethod::LinearProbe => GradScope::HeadOnly,
        TransferMethod::FineTune => GradScope::All,
    };
    train_sgd(
        &mut state,
        train,
        LossMode::Supervised,
        &SgdConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.peak_lr(),
            schedule: Schedule::Cosine,
            scope,
            seed: rng::derive(cfg.seed, &[0x7a]),
        },
        meter,
    )?;
    Ok(accuracy(&state, test)?)
}

/// Test accuracy as a function of the fraction of target training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceCurve {
    pub strategy: Strategy,
    points: Vec<(f64, f64)>,
}

impl PerformanceCurve {
    pub fn new(strategy: Strategy, points: Vec<(f64, f64)>) -> Result<Self, HarnessError> {
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(HarnessError::Curve(format!(
                    "ratios must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(r, a) in &points {
            if !(r > 0.0 && r <= 1.0) {
                return Err(HarnessError::Curve(format!("ratio {r} outside (0, 1]")));
            }
            if !(0.0..=1.0).contains(&a) {
                return Err(HarnessError::Curve(format!("accuracy {a} outside [0, 1]")));
            }
        }
        Ok(Self { strategy, points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Accuracy at the largest ratio.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,accuracy\n");
        for (r, a) in &self.points {
            out.push_str(&format!("{r:?},{a:?}\n"));
        }
        out
    }

    pub fn from_csv(strategy: Strategy, text: &str) -> Result<Self, HarnessError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut points = Vec::new();
        for rec in reader.deserialize::<(f64, f64)>() {
            points.push(rec.map_err(|e| HarnessError::Curve(e.to_string()))?);
        }
        Self::new(strategy, points)
    }
}

/// Trapezoidal area under the curve divided by the ratio span, so that the
/// value is a mean accuracy in `[0, 1]`.
pub fn performance_auc(curve: &PerformanceCurve) -> Result<f64, HarnessError> {
    let p = curve.points();
    if p.len() < 2 {
        return Err(HarnessError::Curve(format!(
            "area needs at least two points, got {}",
            p.len()
        )));
    }
    let area: f64 = p.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum();
    Ok(area / (p[p.len() - 1].0 - p[0].0))
}

/// Train on seeded subsets of `train` at each ratio and record accuracy on
/// the fixed `test` split.
pub fn performance_curve(
    pretrained: &ModelState<f64>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    strategy: Strategy,
    ratios: &[f64],
    cfg: &TrainConfig,
    meter: &StepMeter,
) -> Result<PerformanceCurve, HarnessError> {
    let mut points = Vec::with_capacity(ratios.len());
    for (k, &ratio) in ratios.iter().enumerate() {
        let spec = SubsampleSpec {
            strategy,
            ratio,
            seed: rng::derive(cfg.seed, &[0xc0, k as u64]),
        };
        let sub = subsample(train, &spec)?;
        // Class subsets are chosen from the seed and class count alone, so the
        // same spec keeps the same classes of the test split.
        let test_sub = match strategy {
            Strategy::Classes => subsample(test, &spec)?,
            Strategy::PerClass => test.clone(),
        };
        points.push((ratio, transfer_train_split(pretrained, &sub, &test_sub, cfg, meter)?));
    }
    PerformanceCurve::new(strategy, points)
}

fn sgn(a: f64, b: f64) -> i64 {
    match a.partial_cmp(&b) {
        Some(Ordering::Greater) => 1,
        Some(Ordering::Less) => -1,
        _ => 0,
    }
}

/// Kendall's tau-a: `2 / (n (n - 1)) * sum_{i<j} sgn(x_i - x_j) sgn(y_i - y_j)`.
/// Tied pairs contribute zero.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64, HarnessError> {
    if x.len() != y.len() {
        return Err(HarnessError::Tau(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(HarnessError::Tau("need at least two items".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(HarnessError::Tau("scores contain NaN".into()));
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += sgn(x[i], x[j]) * sgn(y[i], y[j]);
        }
    }
    Ok(2.0 * s as f64 / (n * (n - 1)) as f64)
}

/// Population coefficient of variation; `None` when the mean is zero.
pub(crate) fn coefficient_of_variation(v: &[f64]) -> Option<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 || v.is_empty() {
        return None;
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(var.sqrt() / mean.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(f64, f64)]) -> PerformanceCurve {
        PerformanceCurve::new(Strategy::PerClass, points.to_vec()).unwrap()
    }

    #[test]
    fn tau_hand_cases() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
        assert!(kendall_tau(&[1.0, 2.0], &[1.0]).is_err());
        assert!(kendall_tau(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn auc_cases() {
        assert!((performance_auc(&curve(&[(0.5, 0.4), (1.0, 0.6)])).unwrap() - 0.5).abs() < 1e-15);
        let flat = curve(&[(0.1, 0.7), (0.3, 0.7), (1.0, 0.7)]);
        assert!((performance_auc(&flat).unwrap() - 0.7).abs() < 1e-15);
        assert!(performance_auc(&curve(&[(1.0, 0.5)])).is_err());
    }

    #[test]
    fn curve_validation_and_csv() {
        assert!(PerformanceCurve::new(Strategy::Classes, vec![(0.5, 0.1), (0.5, 0.2)]).is_err());
        assert!(PerformanceCurve::new(Strategy::Classes, vec![(0.0, 0.1)]).is_err());
        assert!(PerformanceCurve::new(Strategy::Classes, vec![(0.5, 1.2)]).is_err());
        let c = curve(&[(0.1, 0.25), (1.0, 0.875)]);
        assert_eq!(PerformanceCurve::from_csv(Strategy::PerClass, &c.to_csv()).unwrap(), c);
    }

    #[test]
    fn cv() {
        assert_eq!(coefficient_of_variation(&[2.0, 2.0]), Some(0.0));
        assert_eq!(coefficient_of_variation(&[0.0, 0.0]), None);
        assert!((coefficient_of_variation(&[1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
    }
}
