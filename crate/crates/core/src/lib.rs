//! Ipsilateral two-view fusion networks.
//!
//! A residual backbone is cut into a per-view Coarse Layer with shared
//! weights and a Fine Layer that runs on the fused feature. Five split
//! positions (pre, early, middle, last, post fusion) and two aggregation
//! functions (average, concatenate) span the model family.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use backbone::{plan_network, BackboneSpec, BlockId, Depth, FusionSite, NetworkPlan};
pub use config::{FusionConfig, FusionType};
pub use error::{Error, Result};
pub use fusion::{AggregationKind, SkipFlags};
pub use loss::FocalLossParams;
pub use metrics::MetricsReport;
pub use model::FusionNet;
pub use tensor::FeatureMap;
pub use train::{evaluate, lr_at, train_model, TrainConfig, TrainingHistory};
