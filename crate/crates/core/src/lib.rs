//! Federated training with learned feature masks for out-of-distribution
//! generalization, plus the FedAvg, FedProx, ERM and invariant-feature
//! baselines it is compared against.
//!
//! The crate is organised bottom-up:
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` tensors.
//! - [`model`]: the MLP, the three-term local objective and SGD.
//! - [`masking`]: per-feature EMA statistics and mask logits.
//! - [`datasets`]: synthetic environments, CSV loading and client partitioning.
//! - [`fedcore`]: client updates, aggregation and the round loop.
//! - [`theorychecks`]: runtime estimates for the descent bound.
//! - [`experiment`]: TOML configs and the files each command writes.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod fedcore;
pub mod masking;
pub mod model;
pub mod seed;
pub mod theorychecks;

pub use autodiff::{Graph, NodeId, Op, Tensor};
pub use datasets::{gen_synthetic, partition_clients, Dataset, DatasetSpec, Environment, PartitionScheme};
pub use error::{Error, Result};
pub use masking::{MaskSettings, MaskState, VarianceReduction};
pub use model::{fedgen_loss, sgd_step, Batch, LossBreakdown, ModelParams};
pub use experiment::ExperimentConfig;
pub use fedcore::{run_training, Ablation, Algorithm, RunConfig, RunData, RunResult};
