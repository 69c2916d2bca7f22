//! Transferability estimation from restart-averaged initial gradients.
//!
//! A candidate source dataset is compared with a target dataset by averaging
//! the backbone gradient of a randomly initialized model over many restarts
//! (the principal gradient expectation) and measuring the normalized distance
//! between the two averages. No model is ever trained on the estimation path.
//!
//! The crate also contains the pieces needed to check that claim at desk
//! scale: a small reverse-mode differentiation kernel, MLP/CNN models with an
//! explicit backbone/head split, dataset ingestion and subsampling, five
//! feature-based baseline metrics, and an evaluation harness that trains
//! transfer models and correlates rankings with Kendall's tau.
//!
//! Numeric code is generic over [`Scalar`]; the `*64` and `*32` aliases below
//! fix the precision. Everything defaults to `f64`.

pub mod baselines;
pub mod datasets;
pub mod diffcore;
pub mod harness;
pub mod models;
pub mod optim;
pub mod pge;
pub mod rng;
pub mod scalar;

pub use scalar::Scalar;

pub type Tensor64 = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Record64 = diffcore::ComputationRecord<f64>;
pub type Record32 = diffcore::ComputationRecord<f32>;
pub type ModelState64 = models::ModelState<f64>;
pub type ModelState32 = models::ModelState<f32>;
pub type Batch64 = models::Batch<f64>;
pub type Batch32 = models::Batch<f32>;
pub type GradientExpectation64 = pge::GradientExpectation<f64>;
pub type GradientExpectation32 = pge::GradientExpectation<f32>;
