//! Volumetric lesion segmentation with spatial gating.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`graph`], [`kernels`]: a small reverse-mode tensor core
//! * [`models`]: SG-Net and the U-Net, Attention U-Net and ResU-Net baselines
//! * [`objective`]: Dice + binary cross-entropy training loss
//! * [`metrics`], [`stats`]: evaluation and cohort statistics
//! * [`data`]: volume I/O, preprocessing, sliding windows and phantoms
//! * [`trainer`]: Adam, early stopping and sliding-window prediction

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod objective;
pub mod param;
pub mod parallel;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
