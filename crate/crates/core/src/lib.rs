//! Few-shot node classification over families of graphs.
//!
//! This crate meta-trains a transferable metric space for node classification:
//! a GCN encoder embeds nodes, class prototypes are built by running a small
//! GNN over a similarity structure of each class's support nodes, and a
//! hierarchical graph representation modulates the prototype network's
//! parameters per graph through a sigmoid gate. Training is episodic across a
//! family of graphs; evaluation measures few-shot accuracy on held-out graphs
//! against label-propagation, k-NN and mean-prototype baselines.
//!
//! Everything runs on a small dense `f64` autodiff engine ([`tensor`]) with a
//! finite-difference gradient checker. Work that is data-parallel (evaluation
//! episodes, batch gradients, gradient-check coordinates) fans out over rayon
//! when the `parallel` feature (default) is enabled and a worker count above
//! one is requested; results are identical either way.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod hierarchy;
pub mod metrics;
pub mod models;
pub mod parallel;
pub mod proto;
pub mod rng;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
