//! Desk-scale federated learning simulator with lottery-ticket pruning and
//! differential privacy.
//!
//! The pipeline: winning tickets are pretrained on a public pool
//! (train-prune-reset) and one is picked by a softmax over validation
//! scores; the server broadcasts either that single sparse structure
//! (one-shot) or a nested family of progressively sparser structures
//! (iterative); clients run clipped, Gaussian-noised momentum SGD on their
//! private non-IID shards and upload model deltas; every client releases a
//! Laplace-noised validation count each round and the server keeps the
//! round with the highest noisy total as the final model. A Rényi/zCDP
//! accountant tracks cumulative privacy loss and can stop training at a
//! budget. A dense DP-FedAvg baseline shares the same loop.
//!
//! Everything is deterministic given the experiment config: random streams
//! are derived from the master seed plus a purpose label and coordinates,
//! never from global state.

pub mod config;
pub mod data;
pub mod dp;
pub mod error;
pub mod lth;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod pruning;
pub mod rng;

pub mod cli;

pub use config::{ExperimentConfig, Scheme};
pub use error::{Error, Result};
pub use orchestrator::{run_experiment, Experiment, RunOutput, RunSummary, StopReason};
