//! Hierarchical multi-label classification with taxonomy-aware class tokens,
//! graph refinement over the label hierarchy, gated fusion and a
//! level-aware objective.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion_head;
pub mod graph_refine;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod registry;
pub mod semantic_init;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
