//! DAG-based decentralized federated learning.
//!
//! Clients publish trained models as transactions of an append-only DAG.
//! Each transaction approves the two tips it was averaged from. Tips are
//! found by a random walk that is biased by each client's local accuracy,
//! which lets clients with similar data implicitly form communities.
//!
//! The crate contains the ledger ([`dag`]), the biased walk ([`walk`]),
//! a small MLP substrate ([`learning`]), synthetic data ([`datasets`]),
//! the round-based protocol driver ([`simulation`]), centralized
//! FedAvg/FedProx baselines ([`baselines`]) and specialization metrics
//! ([`metrics`]).

pub mod baselines;
pub mod dag;
pub mod datasets;
pub mod error;
pub mod learning;
pub mod metrics;
pub mod rng;
pub mod simulation;
pub mod walk;

pub use dag::{Dag, Transaction, TransactionId};
pub use error::{Error, Result};
pub use learning::{Architecture, Evaluation, ModelParams, TrainConfig};
