//! Deterministic desk-scale simulator of federated contrastive learning for
//! semantic communication.
//!
//! Personalized client-side encoders and a server-side decoder train
//! collaboratively by exchanging features and boundary gradients over a
//! simulated noisy wireless link, while a contrastively trained centroid
//! generator regularizes the clients' heterogeneous feature spaces. Every
//! run is a pure function of its configuration and seed.

pub mod channel;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
