//! Deterministic single-process simulator of layer-wise federated
//! self-supervised learning, built on a minimal reverse-mode autodiff core,
//! with an analytic ledger for communication, computation, and memory costs.
//!
//! Modules, bottom up:
//!
//! - [`scalar`], [`tensor`], [`graph`]: dense tensors and the autodiff tape.
//! - [`gradcheck`]: central-finite-difference oracle over every registered op.
//! - [`model`], [`checkpoint`], [`optim`]: encoder/head parameters, the
//!   checkpoint wire format, AdamW and learning-rate schedules.
//! - [`ssl`]: two-view augmentation, InfoNCE, the momentum target branch, and
//!   the representation-alignment auxiliary loss.
//! - [`data`]: synthetic datasets, CIFAR-10 binary loading, uniform and
//!   Dirichlet partitioning, auxiliary-set sampling.
//! - [`fed`]: stage schedules, FedAvg aggregation, server-side calibration,
//!   and the four training strategies.
//! - [`resource`]: analytic FLOPs/bytes/memory accounting.
//! - [`eval`]: linear probe and fine-tuning on frozen features.
//! - [`config`]: TOML run configuration with validation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod fed;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod resource;
pub mod rng;
pub mod scalar;
pub mod ssl;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};
