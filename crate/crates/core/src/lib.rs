//! Multi-stream attention-enhanced adaptive graph convolutional network for
//! skeleton-based action recognition.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]) carries every layer, so all gradients can be audited with
//! [`gradcheck`].

pub mod agcl;
pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod params;
pub mod skeleton;
pub mod tensor;
pub mod train;

pub use agcl::GraphInit;
pub use attention::Arrangement;
pub use autodiff::{ConvGeom, Graph, Var};
pub use data::{Dataset, Modality, SkeletonSample};
pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore};
pub use network::{BlockSpec, Model, ModelConfig, TopologyConfig};
pub use nn::Mode;
pub use skeleton::{Preset, SkeletonTopology};
pub use tensor::Tensor;
pub use train::{Checkpoint, EpochLog, Schedule, StreamScores, TrainConfig};
