//! Ensembled candidate generation for a simulated ads-serving funnel.
//!
//! The crate is organised along the serving pipeline:
//!
//! - [`world`]: synthetic users, ads and the ground-truth engagement model.
//! - [`graph`]: heterogeneous engagement graphs and Δ-edge sets between snapshots.
//! - [`embed`]: translation embeddings, tic/toc refresh cycles, time-decayed and
//!   propagated user vectors.
//! - [`ann`]: exact and HNSW inner-product retrieval.
//! - [`sourcing`]: rankscore and graph candidate sourcing, blending, serving filter.
//! - [`funnel`]: targeting, light ranker, heavy ranker, GSP auction, counterfactual
//!   logging and the A/B simulation harness.
//! - [`metrics`]: recall, auction recall, rNCG, T1PS, ads value, utility and
//!   multiple-comparison adjustment.

pub mod ann;
pub mod embed;
pub mod error;
pub mod funnel;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod sourcing;
pub mod world;

pub use error::{Error, Result};
