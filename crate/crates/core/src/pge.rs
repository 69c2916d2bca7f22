//! Principal gradient expectation and the transferability gap.
//!
//! For a dataset, the model is initialized `I` times from a seed schedule;
//! each restart draws one batch, computes the backbone gradient at the fresh
//! initialization and folds it into a running mean. No parameter is ever
//! updated. Two expectations are compared with
//!
//! ```text
//! gap(s, t) = ||E_t - E_s||_2 / (||E_t||_2 * ||E_s||_2)
//! ```
//!
//! Lower gap means a better source. Sources and target share one seed
//! schedule (common random numbers), so a dataset compared with itself has
//! gap exactly zero.

use std::cmp::Ordering;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::LabeledDataset;
use crate::models::{
    init_params, loss_and_backbone_grad, Batch, Head, InitDistribution, InitSpec, LossMode, ModelError, ModelSpec,
};
use crate::{rng, Scalar};

pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_BATCH: usize = 256;
const BATCH_TAG: u64 = 0xba7c;

#[derive(Debug, Error)]
pub enum PgeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset `{dataset}`: non-finite gradient at restart {restart}")]
    NonFiniteGradient { dataset: String, restart: usize },
    #[error("{0}")]
    Config(String),
    #[error(
        "gradient expectation of `{0}` has zero norm, so the gap is undefined; \
         raise the number of restarts or the batch size, or check for degenerate inputs"
    )]
    ZeroNorm(String),
    #[error("gradient expectations have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("Schwarz bound violated: ||g_t o g_s|| = {hadamard} > ||g_t|| ||g_s|| = {product}")]
    SchwarzViolation { hadamard: f64, product: f64 },
    #[error("PGE artifact: {0}")]
    Artifact(String),
}

/// Estimation settings shared by every dataset in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgeConfig {
    pub mode: LossMode,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Per-restart batch size; `min(256, dataset size)` when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub master_seed: u64,
    #[serde(default = "default_init")]
    pub init: InitDistribution,
}

fn default_restarts() -> usize {
    DEFAULT_RESTARTS
}

fn default_init() -> InitDistribution {
    InitDistribution::FanInGaussian
}

impl PgeConfig {
    pub fn new(mode: LossMode, restarts: usize, master_seed: u64) -> Self {
        Self {
            mode,
            restarts,
            batch_size: None,
            master_seed,
            init: default_init(),
        }
    }

    pub fn seed_schedule(&self) -> Vec<u64> {
        seed_schedule(self.master_seed, self.restarts)
    }

    pub fn batch_size_for(&self, ds: &LabeledDataset) -> usize {
        self.batch_size.unwrap_or(DEFAULT_MAX_BATCH).min(ds.len())
    }
}

/// One initialization seed per restart, derived from `master_seed`.
pub fn seed_schedule(master_seed: u64, restarts: usize) -> Vec<u64> {
    (0..restarts as u64).map(|i| rng::derive(master_seed, &[i])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientExpectation<T> {
    pub dataset: String,
    pub vector: Vec<T>,
    pub restarts: usize,
    pub mode: LossMode,
    pub batch_size: usize,
    pub seed_schedule: Vec<u64>,
}

/// The model `spec` with its head set for `mode` on `ds`.
pub fn spec_for(spec: &ModelSpec, ds: &LabeledDataset, mode: LossMode) -> ModelSpec {
    match mode {
        LossMode::Supervised => spec.with_head(Head::Classifier {
            num_classes: ds.num_classes(),
        }),
        LossMode::Unsupervised => spec.with_head(Head::Reconstructor),
    }
}

/// Backbone gradient at one fresh initialization on one seeded batch.
pub fn restart_gradient<T: Scalar>(
    ds: &LabeledDataset,
    spec: &ModelSpec,
    mode: LossMode,
    init: InitDistribution,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<T>, PgeError> {
    let state = init_params::<T>(
        spec,
        InitSpec {
            distribution: init,
            seed,
        },
    )?;
    let mut picks = index::sample(&mut rng::stream(rng::derive(seed, &[BATCH_TAG])), ds.len(), batch_size).into_vec();
    picks.sort_unstable();
    let batch = Batch::<T>::from_dataset(ds, &picks)?;
    let (_, grad) = loss_and_backbone_grad(&state, &batch, mode)?;
    Ok(grad)
}

/// Running mean of equal-length vectors, updated as
/// `E <- ((i - 1) E + g_i) / i`.
#[derive(Debug, Clone, Default)]
pub struct IncrementalMean<T> {
    mean: Vec<T>,
    count: usize,
}

impl<T: Scalar> IncrementalMean<T> {
    pub fn new() -> Self {
        Self {
            mean: Vec::new(),
            count: 0,
        }
    }

    pub fn push(&mut self, g: &[T]) -> Result<(), PgeError> {
        if self.count == 0 {
            self.mean = g.to_vec();
        } else {
            if g.len() != self.mean.len() {
                return Err(PgeError::LengthMismatch(self.mean.len(), g.len()));
            }
            let prev = T::of_usize(self.count);
            let count = T::of_usize(self.count + 1);
            for (m, &v) in self.mean.iter_mut().zip(g) {
                *m = (prev * *m + v) / count;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn into_vec(self) -> Vec<T> {
        self.mean
    }
}

/// Restart-averaged backbone gradient of `ds`.
///
/// Restarts may run in parallel; the mean is folded in restart order with
/// `E <- ((i - 1) E + g_i) / i`, so the result does not depend on the thread
/// count.
pub fn estimate_pge<T: Scalar>(
    ds: &LabeledDataset,
    spec: &ModelSpec,
    mode: LossMode,
    init: InitDistribution,
    batch_size: usize,
    seed_schedule: &[u64],
) -> Result<GradientExpectation<T>, PgeError> {
    if seed_schedule.is_empty() {
        return Err(PgeError::Config("at least one restart is required".into()));
    }
    if batch_size == 0 || batch_size > ds.len() {
        return Err(PgeError::Config(format!(
            "batch size {batch_size} must be in 1..={} for `{}`",
            ds.len(),
            ds.name()
        )));
    }
    let spec = spec_for(spec, ds, mode);
    spec.validate()?;
    if spec.input_dim != ds.feature_dim() {
        return Err(ModelError::InputDim {
            expected: spec.input_dim,
            got: ds.feature_dim(),
        }
        .into());
    }

    let grads: Vec<Result<Vec<T>, PgeError>> = seed_schedule
        .par_iter()
        .map(|&seed| restart_gradient(ds, &spec, mode, init, batch_size, seed))
        .collect();

    let mut mean = IncrementalMean::new();
    for (i, g) in grads.into_iter().enumerate() {
        let g = g?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(PgeError::NonFiniteGradient {
                dataset: ds.name().to_owned(),
                restart: i,
            });
        }
        mean.push(&g)?;
    }
    Ok(GradientExpectation {
        dataset: ds.name().to_owned(),
        vector: mean.into_vec(),
        restarts: seed_schedule.len(),
        mode,
        batch_size,
        seed_schedule: seed_schedule.to_vec(),
    })
}

/// [`estimate_pge`] with the schedule and batch size taken from `cfg`.
pub fn estimate_with<T: Scalar>(
    ds: &LabeledDataset,
    spec: &ModelSpec,
    cfg: &PgeConfig,
) -> Result<GradientExpectation<T>, PgeError> {
    estimate_pge(
        ds,
        spec,
        cfg.mode,
        cfg.init,
        cfg.batch_size_for(ds),
        &cfg.seed_schedule(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapScore {
    pub value: f64,
    pub source: String,
    pub target: String,
}

fn norm_sq<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x)
}

/// `||t - s|| / (||t|| ||s||)`. Symmetric in its arguments.
pub fn gap_value<T: Scalar>(source: &[T], target: &[T]) -> Result<T, PgeError> {
    if source.len() != target.len() {
        return Err(PgeError::LengthMismatch(source.len(), target.len()));
    }
    let diff = source
        .iter()
        .zip(target)
        .fold(T::zero(), |acc, (&s, &t)| acc + (t - s) * (t - s));
    let ns = norm_sq(source).sqrt();
    let nt = norm_sq(target).sqrt();
    if ns == T::zero() {
        return Err(PgeError::ZeroNorm("source".into()));
    }
    if nt == T::zero() {
        return Err(PgeError::ZeroNorm("target".into()));
    }
    Ok(diff.sqrt() / (nt * ns))
}

pub fn transfer_gap<T: Scalar>(
    source: &GradientExpectation<T>,
    target: &GradientExpectation<T>,
) -> Result<GapScore, PgeError> {
    let value = gap_value(&source.vector, &target.vector).map_err(|e| match e {
        PgeError::ZeroNorm(which) => PgeError::ZeroNorm(if which == "source" {
            source.dataset.clone()
        } else {
            target.dataset.clone()
        }),
        other => other,
    })?;
    Ok(GapScore {
        value: value.to_f64_lossy(),
        source: source.dataset.clone(),
        target: target.dataset.clone(),
    })
}

/// Both quotients of the Schwarz deflation step for one gradient pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchwarzCheck {
    /// `||g_t o g_s||` (elementwise product).
    pub hadamard_norm: f64,
    /// `||g_t|| * ||g_s||`.
    pub norm_product: f64,
    /// `||g_t - g_s|| / ||g_t o g_s||`; infinite when the supports are disjoint.
    pub hadamard_quotient: f64,
    /// `||g_t - g_s|| / (||g_t|| ||g_s||)`.
    pub product_quotient: f64,
}

impl SchwarzCheck {
    pub fn holds(&self) -> bool {
        self.hadamard_quotient >= self.product_quotient
    }
}

pub fn schwarz_check<T: Scalar>(source: &[T], target: &[T]) -> Result<SchwarzCheck, PgeError> {
    if source.len() != target.len() {
        return Err(PgeError::LengthMismatch(source.len(), target.len()));
    }
    let mut had = T::zero();
    let mut diff = T::zero();
    for (&s, &t) in source.iter().zip(target) {
        had = had + (t * s) * (t * s);
        diff = diff + (t - s) * (t - s);
    }
    let (ns, nt) = (norm_sq(source).sqrt(), norm_sq(target).sqrt());
    if ns == T::zero() || nt == T::zero() {
        return Err(PgeError::ZeroNorm(
            if ns == T::zero() { "source" } else { "target" }.into(),
        ));
    }
    let hadamard_norm = had.sqrt().to_f64_lossy();
    let norm_product = (nt * ns).to_f64_lossy();
    let numer = diff.sqrt().to_f64_lossy();
    // Rounding slack: the two sides are accumulated independently.
    let slack = 4.0 * f64::EPSILON * source.len() as f64;
    if hadamard_norm > norm_product * (1.0 + slack) {
        return Err(PgeError::SchwarzViolation {
            hadamard: hadamard_norm,
            product: norm_product,
        });
    }
    let quotient = |den: f64| {
        if numer == 0.0 {
            0.0
        } else if den == 0.0 {
            f64::INFINITY
        } else {
            numer / den
        }
    };
    let hadamard_quotient = quotient(hadamard_norm);
    let product_quotient = quotient(norm_product);
    Ok(SchwarzCheck {
        hadamard_norm,
        norm_product,
        // equal denominators up to rounding give equal quotients
        hadamard_quotient: hadamard_quotient.max(product_quotient),
        product_quotient,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSource {
    pub gap: GapScore,
    pub schwarz: SchwarzCheck,
}

impl RankedSource {
    pub fn name(&self) -> &str {
        &self.gap.source
    }
}

/// Sources ordered from best (lowest gap) to worst.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub target: String,
    pub entries: Vec<RankedSource>,
}

impl Ranking {
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(RankedSource::name).collect()
    }

    pub fn gap_of(&self, source: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name() == source).map(|e| e.gap.value)
    }
}

/// Rank precomputed source expectations against a target expectation.
pub fn rank_expectations<T: Scalar>(
    sources: &[GradientExpectation<T>],
    target: &GradientExpectation<T>,
) -> Result<Ranking, PgeError> {
    let mut entries = sources
        .iter()
        .map(|s| {
            Ok(RankedSource {
                gap: transfer_gap(s, target)?,
                schwarz: schwarz_check(&s.vector, &target.vector)?,
            })
        })
        .collect::<Result<Vec<_>, PgeError>>()?;
    entries.sort_by(|a, b| {
        a.gap
            .value
            .partial_cmp(&b.gap.value)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.gap.source.cmp(&b.gap.source))
    });
    Ok(Ranking {
        target: target.dataset.clone(),
        entries,
    })
}

/// Estimate every expectation with a shared seed schedule and rank the
/// sources by ascending gap (ties broken by name).
pub fn rank_sources<T: Scalar>(
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    spec: &ModelSpec,
    cfg: &PgeConfig,
) -> Result<Ranking, PgeError> {
    if sources.len() < 2 {
        return Err(PgeError::Config("ranking needs at least two sources".into()));
    }
    let mut names: Vec<&str> = sources.iter().map(LabeledDataset::name).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(PgeError::Config(format!("duplicate source name `{}`", w[0])));
    }
    let target_pge = estimate_with::<T>(target, spec, cfg)?;
    let source_pges = sources
        .par_iter()
        .map(|s| estimate_with::<T>(s, spec, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    rank_expectations(&source_pges, &target_pge)
}

const MAGIC: &[u8; 4] = b"PGE1";

/// Decoded binary artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct PgeArtifact {
    pub restarts: u32,
    pub vector: Vec<f64>,
}

impl<T: Scalar> GradientExpectation<T> {
    /// `"PGE1"`, vector length (u64 LE), restarts (u32 LE), then the vector
    /// as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.vector.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.vector.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.restarts as u32).to_le_bytes());
        for v in &self.vector {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out
    }
}

impl PgeArtifact {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PgeError> {
        if bytes.len() < 16 {
            return Err(PgeError::Artifact(format!(
                "{} bytes is shorter than the 16-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(PgeError::Artifact("bad magic".into()));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let restarts = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
        let body = &bytes[16..];
        if Some(body.len()) != len.checked_mul(8) {
            return Err(PgeError::Artifact(format!(
                "header declares {len} values but body has {} bytes",
                body.len()
            )));
        }
        let vector = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { restarts, vector })
    }

    /// Rebuild a [`GradientExpectation`] around the stored vector.
    pub fn into_expectation(
        self,
        dataset: &str,
        mode: LossMode,
        batch_size: usize,
        seed_schedule: Vec<u64>,
    ) -> Result<GradientExpectation<f64>, PgeError> {
        if seed_schedule.len() != self.restarts as usize {
            return Err(PgeError::Artifact(format!(
                "artifact holds {} restarts, schedule has {}",
                self.restarts,
                seed_schedule.len()
            )));
        }
        Ok(GradientExpectation {
            dataset: dataset.to_owned(),
            vector: self.vector,
            restarts: self.restarts as usize,
            mode,
            batch_size,
            seed_schedule,
        })
    }
}
