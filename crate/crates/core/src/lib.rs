//! Desk-scale simulator for federated learning with inequitable
//! teacher/student aggregation.
//!
//! Each round a random subset of clients trains locally from the student
//! (global) model while distilling from a teacher. The server aggregates the
//! student from the round's participants only, and the teacher from every
//! client's most recent upload, weighted by participation recency,
//! participation count and data volume. A server-trained conditional
//! generator supplies class-balanced synthetic features for auxiliary local
//! training.
//!
//! Module map:
//!
//! * [`nn`] - dense network engine with analytic gradients
//! * [`data`] - Gaussian blobs and Dirichlet client partitioning
//! * [`ledger`] - participation bookkeeping and aggregation weights
//! * [`aggregate`] - stored client models and weighted averaging
//! * [`generator`] - conditional feature generator
//! * [`local`] - client-side training objective
//! * [`orchestrator`] - the server round loop
//! * [`fedavg`] - an independent plain FedAvg loop used as a reference
//! * [`harness`] - configuration, metrics files, sweeps and analyses

pub mod aggregate;
pub mod data;
pub mod error;
pub mod fedavg;
pub mod generator;
pub mod harness;
pub mod ledger;
pub mod local;
pub mod nn;
pub mod orchestrator;
pub mod seed;

pub use error::{Error, Result};
