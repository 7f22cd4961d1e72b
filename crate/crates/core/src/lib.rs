//! Spatio-temporal graph forecasting with auxiliary contrastive learning.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! sensor graph ([`graph`]), dataset windowing ([`data`]), the four
//! spatio-temporal augmentations ([`augment`]), a gated-TCN / diffusion-GCN
//! encoder ([`model`]), node- and graph-level InfoNCE with negative filtering
//! ([`contrast`]) and the training schemes ([`train`]).

pub mod augment;
pub mod config;
pub mod contrast;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{Error, ErrorClass, Result};
pub use graph::SensorGraph;
pub use model::{Level, ModelConfig, StgModel};
pub use tensor::{Mode, ParamStore, Tape, Tensor, Var};
pub use train::{RunReport, Scheme, TrainConfig};
