//! Models `M(w, h)` with an explicit backbone/head parameter split.
//!
//! Parameters live in one flat vector: all backbone layers first, then the
//! head. Initialization draws every coordinate from a counter-based generator
//! keyed by `(seed, index)`, so the backbone block of two models that differ
//! only in their head is bit-identical under the same seed.

mod spec;

pub use spec::{Backbone, Head, Layer, LayerKind, ModelSpec, Part, CONV_KERNEL, CONV_PADDING};

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::LabeledDataset;
use crate::diffcore::{ComputationRecord, DiffError, NodeId, Tensor};
use crate::{rng, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("{mode:?} loss needs a {needs} head")]
    HeadMismatch { mode: LossMode, needs: &'static str },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch feature dimension {got} does not match model input dimension {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("label {label} out of range for a {classes}-class head")]
    Label { label: usize, classes: usize },
    #[error("non-finite loss; first offending batch row: {row:?}")]
    NonFiniteLoss { row: Option<usize> },
    #[error("parameter vector has {got} entries, spec needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitDistribution {
    /// `N(0, 1)` for every weight.
    UnitGaussian,
    /// `N(0, 1 / fan_in)` for every weight.
    FanInGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub distribution: InitDistribution,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Softmax cross-entropy against class labels; needs a classifier head.
    Supervised,
    /// Mean-squared input reconstruction; needs a reconstructor head and
    /// ignores labels.
    Unsupervised,
}

/// Which parameters receive gradients during a loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradScope {
    All,
    HeadOnly,
}

/// Index ranges of the two parameter groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub backbone: Range<usize>,
    pub head: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T> {
    spec: ModelSpec,
    params: Vec<T>,
}

/// A batch of model inputs `[n, input_dim]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_dataset(ds: &LabeledDataset, indices: &[usize]) -> Result<Self, ModelError> {
        if indices.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let d = ds.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (row, label) = ds.sample(i);
            data.extend(row.iter().map(|&v| T::of(v)));
            labels.push(label);
        }
        Ok(Self {
            inputs: Tensor::new(vec![indices.len(), d], data)?,
            labels,
        })
    }

    pub fn full(ds: &LabeledDataset) -> Result<Self, ModelError> {
        let all: Vec<usize> = (0..ds.len()).collect();
        Self::from_dataset(ds, &all)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Initialize a model. Weights are i.i.d. Gaussian per `init`; biases are
/// zero under both distributions.
pub fn init_params<T: Scalar>(spec: &ModelSpec, init: InitSpec) -> Result<ModelState<T>, ModelError> {
    spec.validate()?;
    let layers = spec.layers();
    let mut params = vec![T::zero(); spec.param_count()];
    for layer in &layers {
        let std = match init.distribution {
            InitDistribution::UnitGaussian => 1.0,
            InitDistribution::FanInGaussian => 1.0 / (layer.kind.fan_in() as f64).sqrt(),
        };
        for i in layer.weight.clone() {
            params[i] = T::of(std * rng::normal_at(init.seed, i as u64));
        }
    }
    Ok(ModelState {
        spec: spec.clone(),
        params,
    })
}

/// A parameter block and the record node holding it.
type Leaf = (Range<usize>, NodeId);

impl<T: Scalar> ModelState<T> {
    pub fn from_params(spec: ModelSpec, params: Vec<T>) -> Result<Self, ModelError> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(ModelError::ParamCount {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn partition(&self) -> Partition {
        self.spec.partition()
    }

    pub fn backbone_params(&self) -> &[T] {
        &self.params[self.spec.partition().backbone]
    }

    /// Same backbone, freshly initialized `head`.
    pub fn with_head(&self, head: Head, init: InitSpec) -> Result<Self, ModelError> {
        let spec = ModelSpec {
            head,
            ..self.spec.clone()
        };
        let mut fresh = init_params::<T>(&spec, init)?;
        let bb = self.spec.partition().backbone;
        fresh.params[bb.clone()].copy_from_slice(&self.params[bb]);
        Ok(fresh)
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let got = batch.inputs.shape().get(1).copied().unwrap_or(0);
        if batch.inputs.shape().len() != 2 || got != self.spec.input_dim {
            return Err(ModelError::InputDim {
                expected: self.spec.input_dim,
                got,
            });
        }
        if let Some(row) = batch.inputs.first_non_finite() {
            return Err(ModelError::NonFiniteLoss {
                row: Some(row / self.spec.input_dim),
            });
        }
        Ok(())
    }

    /// Record the backbone on `r`; returns the `[n, feature_dim]` feature node
    /// and the parameter nodes of each layer.
    fn record_backbone(
        &self,
        r: &mut ComputationRecord<T>,
        x: NodeId,
        n: usize,
        trainable: bool,
        layers: &[Layer],
    ) -> Result<(NodeId, Vec<Leaf>), ModelError> {
        let mut leaves = Vec::new();
        let mut leaf = |r: &mut ComputationRecord<T>, range: Range<usize>, shape: Vec<usize>| {
            let t = Tensor::new(shape, self.params[range.clone()].to_vec())?;
            let id = if trainable { r.param(t)? } else { r.input(t)? };
            leaves.push((range, id));
            Ok::<_, ModelError>(id)
        };
        let mut h = x;
        match &self.spec.backbone {
            Backbone::Mlp { .. } => {
                for layer in layers.iter().filter(|l| l.part == Part::Backbone) {
                    let LayerKind::Dense { fan_in, fan_out } = layer.kind else {
                        unreachable!("mlp backbone holds dense layers only")
                    };
                    let w = leaf(r, layer.weight.clone(), vec![fan_in, fan_out])?;
                    let b = leaf(r, layer.bias.clone(), vec![fan_out])?;
                    let z = r.matmul(h, w)?;
                    let z = r.bias_add(z, b)?;
                    h = r.relu(z)?;
                }
            }
            Backbone::Cnn {
                channels_in,
                height,
                width,
                ..
            } => {
                h = r.reshape(h, vec![n, *channels_in, *height, *width])?;
                for layer in layers.iter().filter(|l| l.part == Part::Backbone) {
                    let LayerKind::Conv {
                        in_channels,
                        out_channels,
                    } = layer.kind
                    else {
                        unreachable!("cnn backbone holds conv layers only")
                    };
                    let w = leaf(
                        r,
                        layer.weight.clone(),
                        vec![out_channels, in_channels, CONV_KERNEL, CONV_KERNEL],
                    )?;
                    let b = leaf(r, layer.bias.clone(), vec![out_channels])?;
                    let z = r.conv2d(h, w, CONV_PADDING)?;
                    let z = r.bias_add(z, b)?;
                    h = r.relu(z)?;
                }
                h = r.reshape(h, vec![n, self.spec.feature_dim()])?;
            }
        }
        Ok((h, leaves))
    }

    /// Backbone features (the penultimate layer) for `inputs` `[n, input_dim]`.
    pub fn features(&self, inputs: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let batch = Batch {
            inputs: inputs.clone(),
            labels: vec![0; inputs.shape().first().copied().unwrap_or(0)],
        };
        self.check_batch(&batch)?;
        let mut r = ComputationRecord::new();
        let x = r.input(batch.inputs)?;
        let layers = self.spec.layers();
        let (h, _) = self.record_backbone(&mut r, x, batch.labels.len(), false, &layers)?;
        Ok(r.value(h).clone())
    }

    /// Head outputs for `inputs`: class logits or reconstructions.
    pub fn outputs(&self, inputs: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let feats = self.features(inputs)?;
        let layers = self.spec.layers();
        let head = layers.iter().find(|l| l.part == Part::Head).expect("head layer");
        let LayerKind::Dense { fan_in, fan_out } = head.kind else {
            unreachable!("head is dense")
        };
        let mut r = ComputationRecord::new();
        let f = r.input(feats)?;
        let w = r.input(Tensor::new(
            vec![fan_in, fan_out],
            self.params[head.weight.clone()].to_vec(),
        )?)?;
        let b = r.input(Tensor::new(vec![fan_out], self.params[head.bias.clone()].to_vec())?)?;
        let z = r.matmul(f, w)?;
        let z = r.bias_add(z, b)?;
        Ok(r.value(z).clone())
    }

    /// Row-wise softmax of the classifier logits.
    pub fn predict_proba(&self, inputs: &Tensor<T>) -> Result<Vec<Vec<T>>, ModelError> {
        if !matches!(self.spec.head, Head::Classifier { .. }) {
            return Err(ModelError::HeadMismatch {
                mode: LossMode::Supervised,
                needs: "classifier",
            });
        }
        let logits = self.outputs(inputs)?;
        let k = logits.shape()[1];
        Ok(logits
            .data()
            .chunks_exact(k)
            .map(|row| {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let e: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
                let z = e.iter().fold(T::zero(), |a, &v| a + v);
                e.into_iter().map(|v| v / z).collect()
            })
            .collect())
    }

    /// Mean batch loss and its gradient over the full parameter vector.
    /// Coordinates outside `scope` are zero.
    pub fn loss_and_grad(&self, batch: &Batch<T>, mode: LossMode, scope: GradScope) -> Result<(T, Vec<T>), ModelError> {
        self.check_mode(mode)?;
        self.check_batch(batch)?;
        match self.eval_loss(batch, mode, scope) {
            Err(ModelError::Diff(DiffError::NonFinite { .. })) => Err(ModelError::NonFiniteLoss {
                row: self.first_bad_row(batch, mode),
            }),
            other => other,
        }
    }

    fn eval_loss(&self, batch: &Batch<T>, mode: LossMode, scope: GradScope) -> Result<(T, Vec<T>), ModelError> {
        let n = batch.len();
        let layers = self.spec.layers();
        let mut r = ComputationRecord::new();
        let x = r.input(batch.inputs.clone())?;
        let (feat, mut leaves) = self.record_backbone(&mut r, x, n, scope == GradScope::All, &layers)?;

        let head = layers.iter().find(|l| l.part == Part::Head).expect("head layer");
        let LayerKind::Dense { fan_in, fan_out } = head.kind else {
            unreachable!("head is dense")
        };
        let w = r.param(Tensor::new(
            vec![fan_in, fan_out],
            self.params[head.weight.clone()].to_vec(),
        )?)?;
        let b = r.param(Tensor::new(vec![fan_out], self.params[head.bias.clone()].to_vec())?)?;
        leaves.push((head.weight.clone(), w));
        leaves.push((head.bias.clone(), b));
        let z = r.matmul(feat, w)?;
        let out = r.bias_add(z, b)?;
        let loss = match mode {
            LossMode::Supervised => {
                if let Some(&label) = batch.labels.iter().find(|&&l| l >= fan_out) {
                    return Err(ModelError::Label {
                        label,
                        classes: fan_out,
                    });
                }
                r.softmax_cross_entropy(out, &batch.labels)?
            }
            LossMode::Unsupervised => r.mse(out, x)?,
        };
        let value = r.value(loss).item().expect("loss is scalar");
        let mut grads = r.backward(loss, T::one())?;
        let mut flat = vec![T::zero(); self.params.len()];
        for (range, id) in leaves {
            if let Some(g) = grads.take(id) {
                flat[range].copy_from_slice(g.data());
            }
        }
        Ok((value, flat))
    }

    fn first_bad_row(&self, batch: &Batch<T>, mode: LossMode) -> Option<usize> {
        (0..batch.len()).find(|&i| {
            let d = self.spec.input_dim;
            let single = Batch {
                inputs: Tensor::from_parts(vec![1, d], batch.inputs.data()[i * d..(i + 1) * d].to_vec()),
                labels: vec![batch.labels[i]],
            };
            !matches!(self.eval_loss(&single, mode, GradScope::HeadOnly), Ok((v, _)) if v.is_finite())
        })
    }

    fn check_mode(&self, mode: LossMode) -> Result<(), ModelError> {
        match (mode, &self.spec.head) {
            (LossMode::Supervised, Head::Classifier { .. }) => Ok(()),
            (LossMode::Unsupervised, Head::Reconstructor) => Ok(()),
            (LossMode::Supervised, _) => Err(ModelError::HeadMismatch {
                mode,
                needs: "classifier",
            }),
            (LossMode::Unsupervised, _) => Err(ModelError::HeadMismatch {
                mode,
                needs: "reconstructor",
            }),
        }
    }
}

/// Mean batch loss and the gradient restricted to the backbone partition.
/// Head gradients are computed and discarded.
pub fn loss_and_backbone_grad<T: Scalar>(
    state: &ModelState<T>,
    batch: &Batch<T>,
    mode: LossMode,
) -> Result<(T, Vec<T>), ModelError> {
    let (loss, mut grad) = state.loss_and_grad(batch, mode, GradScope::All)?;
    grad.truncate(state.partition().backbone.end);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(input_dim: usize, hidden: &[usize], head: Head) -> ModelSpec {
        ModelSpec {
            input_dim,
            backbone: Backbone::Mlp {
                hidden: hidden.to_vec(),
            },
            head,
        }
    }

    fn fan_in(seed: u64) -> InitSpec {
        InitSpec {
            distribution: InitDistribution::FanInGaussian,
            seed,
        }
    }

    fn batch(n: usize, d: usize, classes: usize, seed: u64) -> Batch<f64> {
        let data = (0..n * d).map(|i| rng::normal_at(seed, i as u64)).collect();
        Batch {
            inputs: Tensor::new(vec![n, d], data).unwrap(),
            labels: (0..n).map(|i| i % classes).collect(),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = mlp(5, &[4, 3], Head::Classifier { num_classes: 2 });
        let a = init_params::<f64>(&spec, fan_in(3)).unwrap();
        let b = init_params::<f64>(&spec, fan_in(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_differ_almost_everywhere() {
        // biases are 0.5% of the coordinates here
        let spec = mlp(200, &[100], Head::Classifier { num_classes: 2 });
        let a = init_params::<f64>(&spec, fan_in(1)).unwrap();
        let b = init_params::<f64>(&spec, fan_in(2)).unwrap();
        let differ = a.params().iter().zip(b.params()).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * a.params().len() as f64, "{differ}");
    }

    #[test]
    fn fan_in_variance() {
        let spec = mlp(100, &[100], Head::Classifier { num_classes: 2 });
        let s = init_params::<f64>(&spec, fan_in(8)).unwrap();
        let layer = &spec.layers()[0];
        let w = &s.params()[layer.weight.clone()];
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - 0.01).abs() < 0.001, "{var}");
        assert!(s.params()[layer.bias.clone()].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn head_swap_keeps_backbone() {
        let cls = mlp(6, &[5, 4], Head::Classifier { num_classes: 3 });
        let rec = ModelSpec {
            head: Head::Reconstructor,
            ..cls.clone()
        };
        assert_eq!(cls.partition().backbone, rec.partition().backbone);
        let a = init_params::<f64>(&cls, fan_in(4)).unwrap();
        let b = init_params::<f64>(&rec, fan_in(4)).unwrap();
        assert_eq!(a.backbone_params(), b.backbone_params());
        let c = a.with_head(Head::Classifier { num_classes: 7 }, fan_in(9)).unwrap();
        assert_eq!(c.backbone_params(), a.backbone_params());
        assert_eq!(c.params().len(), c.spec().param_count());
    }

    #[test]
    fn zero_params_reconstruction_has_zero_backbone_grad() {
        let spec = mlp(4, &[3, 2], Head::Reconstructor);
        let state = ModelState::from_params(spec.clone(), vec![0.0; spec.param_count()]).unwrap();
        let (loss, g) = loss_and_backbone_grad(&state, &batch(5, 4, 1, 2), LossMode::Unsupervised).unwrap();
        assert!(loss > 0.0);
        assert_eq!(g.len(), spec.partition().backbone.len());
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_length_is_backbone_count_for_any_head() {
        for head in [Head::Reconstructor, Head::Classifier { num_classes: 4 }] {
            let spec = mlp(4, &[6, 5], head.clone());
            let mode = if head == Head::Reconstructor {
                LossMode::Unsupervised
            } else {
                LossMode::Supervised
            };
            let s = init_params::<f64>(&spec, fan_in(1)).unwrap();
            let (_, g) = loss_and_backbone_grad(&s, &batch(3, 4, 4, 1), mode).unwrap();
            assert_eq!(g.len(), 4 * 6 + 6 + 6 * 5 + 5);
        }
    }

    #[test]
    fn supervised_and_unsupervised_gradients_differ() {
        let cls = mlp(6, &[8, 5], Head::Classifier { num_classes: 3 });
        let rec = ModelSpec {
            head: Head::Reconstructor,
            ..cls.clone()
        };
        let b = batch(16, 6, 3, 5);
        let (_, gs) = loss_and_backbone_grad(&init_params(&cls, fan_in(2)).unwrap(), &b, LossMode::Supervised).unwrap();
        let (_, gu) =
            loss_and_backbone_grad(&init_params(&rec, fan_in(2)).unwrap(), &b, LossMode::Unsupervised).unwrap();
        let dot: f64 = gs.iter().zip(&gu).map(|(a, b)| a * b).sum();
        let cos = dot / (crate::scalar::l2_norm(&gs) * crate::scalar::l2_norm(&gu));
        assert!(cos < 0.99, "{cos}");
    }

    #[test]
    fn mode_head_mismatch_and_batch_errors() {
        let spec = mlp(3, &[2], Head::Reconstructor);
        let s = init_params::<f64>(&spec, fan_in(1)).unwrap();
        assert!(matches!(
            s.loss_and_grad(&batch(2, 3, 2, 0), LossMode::Supervised, GradScope::All),
            Err(ModelError::HeadMismatch { .. })
        ));
        assert!(matches!(
            s.loss_and_grad(&batch(2, 4, 2, 0), LossMode::Unsupervised, GradScope::All),
            Err(ModelError::InputDim { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn non_finite_input_names_row() {
        let spec = mlp(2, &[2], Head::Reconstructor);
        let s = init_params::<f64>(&spec, fan_in(1)).unwrap();
        let mut b = batch(3, 2, 1, 0);
        let mut data = b.inputs.clone().into_data();
        data[5] = f64::INFINITY;
        b.inputs = Tensor::new(vec![3, 2], data).unwrap_or_else(|_| unreachable!());
        assert_eq!(
            s.loss_and_grad(&b, LossMode::Unsupervised, GradScope::All),
            Err(ModelError::NonFiniteLoss { row: Some(2) })
        );
    }

    #[test]
    fn overflowing_activations_name_row() {
        let spec = mlp(1, &[1], Head::Reconstructor);
        let s = ModelState::from_params(spec, vec![1e200, 0.0, 1e200, 0.0]).unwrap();
        let b = Batch {
            inputs: Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap(),
            labels: vec![0, 0],
        };
        assert_eq!(
            s.loss_and_grad(&b, LossMode::Unsupervised, GradScope::All),
            Err(ModelError::NonFiniteLoss { row: Some(1) })
        );
    }

    #[test]
    fn head_only_scope_zeroes_backbone() {
        let spec = mlp(3, &[4], Head::Classifier { num_classes: 2 });
        let s = init_params::<f64>(&spec, fan_in(5)).unwrap();
        let b = batch(4, 3, 2, 1);
        let (l1, all) = s.loss_and_grad(&b, LossMode::Supervised, GradScope::All).unwrap();
        let (l2, head) = s.loss_and_grad(&b, LossMode::Supervised, GradScope::HeadOnly).unwrap();
        assert_eq!(l1, l2);
        let p = spec.partition();
        assert!(head[p.backbone.clone()].iter().all(|&v| v == 0.0));
        assert_eq!(&head[p.head.clone()], &all[p.head]);
    }

    #[test]
    fn cnn_backbone_runs() {
        let spec = ModelSpec {
            input_dim: 2 * 4 * 4,
            backbone: Backbone::Cnn {
                channels_in: 2,
                height: 4,
                width: 4,
                channels: vec![3, 2],
            },
            head: Head::Classifier { num_classes: 3 },
        };
        let s = init_params::<f64>(&spec, fan_in(1)).unwrap();
        let (loss, g) = loss_and_backbone_grad(&s, &batch(2, 32, 3, 9), LossMode::Supervised).unwrap();
        assert!(loss.is_finite());
        assert_eq!(g.len(), (3 * 2 * 9 + 3) + (2 * 3 * 9 + 2));
        assert_eq!(spec.feature_dim(), 2 * 16);
        let f = s.features(&batch(2, 32, 3, 9).inputs).unwrap();
        assert_eq!(f.shape(), &[2, 32]);
    }

    #[test]
    fn predict_proba_rows_sum_to_one() {
        let spec = mlp(3, &[4], Head::Classifier { num_classes: 5 });
        let s = init_params::<f64>(&spec, fan_in(5)).unwrap();
        for row in s.predict_proba(&batch(6, 3, 5, 2).inputs).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
