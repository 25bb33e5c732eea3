//! Hierarchy-aware image embeddings at desk scale.
//!
//! * [`data`]: bounding-box annotations to entailment pairs and label trees.
//! * [`geometry`]: Lorentz-model primitives and exterior angles.
//! * [`loss`]: bidirectional contrastive entailment-angle loss with gradients.
//! * [`trainer`]: free embedding table optimized with that loss.
//! * [`eval`]: retrieval metrics, optimal-transport label alignment and
//!   precision/recall sweeps over angle thresholds.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
