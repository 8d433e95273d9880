//! Desk-scale, deterministic simulator of federated tuning for a split
//! multimodal model: clients train low-rank adapters against a frozen
//! server-hosted core via boundary activation/gradient exchange, and the
//! server merges adapter updates either by dataset-size weighting or by
//! diagonal-Fisher weighting.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with reverse-mode autodiff and a
//!   finite-difference oracle.
//! - [`model`]: the frozen pipeline/core, the trainable adapters, and the
//!   split execution contract.
//! - [`fisher`]: diagonal empirical Fisher estimation (exact and
//!   training-time accumulation modes).
//! - [`aggregation`]: server-side merge strategies over round updates.
//! - [`data`]: synthetic multimodal task generation and Dirichlet
//!   non-IID partitioning.
//! - [`federation`]: the synchronous round loop, accounting, checkpoints.
//!
//! Every random draw flows through [`rng`]'s documented stream-splitting
//! rule, so runs are reproducible from a single seed.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod federation;
pub mod fisher;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tensor;

pub use aggregation::{fedavg_merge, fisher_merge, proximal_gradient, RoundUpdate};
pub use data::{
    dirichlet_partition, generate_synthetic_task, split_train_val_test, ClientDataset, Sample,
    SplitRatios, TaskSpec,
};
pub use error::{Error, Result};
pub use federation::{
    communication_report, run_federation, FederationConfig, FederationRun, LocalSteps,
    RoundHistory, Strategy,
};
pub use fisher::{estimate_fisher_exact, FisherAccumulator, FisherDiagonal, PassCounter};
pub use model::{
    init_adapters, init_frozen, AdapterParams, BoundaryActivation, BoundaryGradient, FrozenCore,
    FrozenPipeline, ModelDims, NanoAdapter,
};
pub use tensor::{finite_difference_gradient, Bindings, Graph, NodeId, Tensor};
