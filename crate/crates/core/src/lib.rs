//! Desk-scale training stack for latent auxiliary-construction reasoning.
//!
//! The crate wires together a small `f64` autodiff substrate, a toy
//! decoder-only multimodal transformer with a latent-token vocabulary,
//! a three-stage supervised curriculum, and a group-decoupled
//! reinforcement-learning procedure, all exercised on a synthetic
//! geometric-construction task family with a deterministic answer oracle.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod advantage;
pub mod error;
pub mod curriculum;
pub mod encoding;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod rewards;
pub mod policy;
pub mod rl;
pub mod rng;
pub mod run;
pub mod rollout;
pub mod taskgen;
pub mod tensor;
pub mod vision;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
