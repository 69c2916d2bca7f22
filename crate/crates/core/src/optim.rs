//! Plain SGD (no momentum) with constant or cosine-annealed learning rate.
//!
//! Every parameter update goes through [`train_sgd`], which bumps a
//! [`StepMeter`]. Pipelines that must not train can therefore be audited by
//! handing them a fresh meter and reading it back.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::models::{Batch, GradScope, LossMode, ModelError, ModelState};
use crate::{rng, Scalar};

static TOTAL_STEPS: AtomicU64 = AtomicU64::new(0);

/// Optimizer steps taken by [`train_sgd`] anywhere in this process. Readings
/// can only be inflated by concurrent training, so an unchanged value across
/// a window proves that no update happened inside it.
pub fn process_steps() -> u64 {
    TOTAL_STEPS.load(Ordering::SeqCst)
}

/// Shared optimizer-step counter.
#[derive(Debug, Clone, Default)]
pub struct StepMeter(Arc<AtomicU64>);

impl StepMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    fn record(&self) {
        TOTAL_STEPS.fetch_add(1, Ordering::SeqCst);
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// `lr_t = lr * (1 + cos(pi * t / T)) / 2` over all `T` steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub scope: GradScope,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    /// Mean minibatch loss over the last epoch (`None` without training).
    pub final_loss: Option<f64>,
}

/// `lr = 0.1 * batch_size / 256`.
pub fn base_lr_rule(batch_size: usize) -> f64 {
    0.1 * batch_size as f64 / 256.0
}

pub fn train_sgd<T: Scalar>(
    state: &mut ModelState<T>,
    data: &LabeledDataset,
    mode: LossMode,
    cfg: &SgdConfig,
    meter: &StepMeter,
) -> Result<TrainSummary, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let batch_size = cfg.batch_size.clamp(1, data.len());
    let per_epoch = data.len().div_ceil(batch_size);
    let total = (cfg.epochs * per_epoch) as f64;
    let scope = state.partition();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0u64;
    let mut final_loss = None;

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(rng::derive(cfg.seed, &[epoch as u64])));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = Batch::<T>::from_dataset(data, chunk)?;
            let (loss, grad) = state.loss_and_grad(&batch, mode, cfg.scope)?;
            let lr = match cfg.schedule {
                Schedule::Constant => cfg.lr,
                Schedule::Cosine => cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * steps as f64 / total).cos()),
            };
            let lr = T::of(lr);
            let range = match cfg.scope {
                GradScope::All => 0..grad.len(),
                GradScope::HeadOnly => scope.head.clone(),
            };
            let params = state.params_mut();
            for i in range {
                params[i] = params[i] - lr * grad[i];
            }
            meter.record();
            steps += 1;
            epoch_loss += loss.to_f64_lossy();
        }
        let mean = epoch_loss / per_epoch as f64;
        if !mean.is_finite() || state.params().iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFiniteLoss { row: None });
        }
        final_loss = Some(mean);
    }
    Ok(TrainSummary { steps, final_loss })
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy<T: Scalar>(state: &ModelState<T>, data: &LabeledDataset) -> Result<f64, ModelError> {
    let batch = Batch::<T>::full(data)?;
    let logits = state.outputs(&batch.inputs)?;
    let k = logits.shape()[1];
    let correct = logits
        .data()
        .chunks_exact(k)
        .zip(data.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
