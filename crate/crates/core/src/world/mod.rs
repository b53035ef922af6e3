//! Synthetic ground-truth worlds.
//!
//! A world is a small structural causal model over named factors plus a
//! deterministic renderer mapping factor vectors to grayscale images.
//! Datasets generated here keep every sample's exogenous draws, so exact
//! ground-truth counterfactuals can be recomputed later for evaluation.

mod dataset;
mod render;
mod scm;

pub use dataset::{generate_dataset, load_dataset, world_by_id, read_pgm, write_pgm, Dataset, DatasetMeta};
pub use render::render;
pub use scm::{
    pendulum_world, toy_bars_world, GroundTruthScm, Intervention, Range, SampleRecord, ScmNode,
    StructuralFn,
};
