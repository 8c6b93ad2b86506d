//! Hypersphere metric learning built around the nearest-neighbour proxy
//! triplet (NPT) loss.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases at the bottom of this file pin the double-precision versions that
//! training, evaluation and gradient verification use by default.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod scalar;
pub mod training;

pub use error::{NptError, Result};
pub use geometry::{
    cosine_similarity, euclidean_distance, normalize_to_sphere, sphere_distance, HypersphereVector,
};
pub use losses::{
    loss_dispatch, loss_forward, nearest_negative_proxy, LabeledBatch, LossKind, LossResult,
    MarginConfig, ProxyBank,
};
pub use matrix::Matrix;
pub use model::{EmbedderModel, Sgd};
pub use scalar::Scalar;

pub type Vector = HypersphereVector<f64>;
pub type Bank = ProxyBank<f64>;
pub type Batch = LabeledBatch<f64>;
pub type Model = EmbedderModel<f64>;
pub type Dataset = data::Dataset<f64>;

pub type Vector32 = HypersphereVector<f32>;
pub type Bank32 = ProxyBank<f32>;
pub type Model32 = EmbedderModel<f32>;
