//! Decomposes posed multi-view images of a synthetic scene into per-object
//! voxel radiance fields without mask supervision.
//!
//! The crate covers the whole loop: procedural scene synthesis with exact
//! ground truth (`synth`), hand-rolled reverse-mode gradients and Adam
//! (`diffopt`), differentiable voxel field rendering and fitting (`fields`),
//! filter-bank features and coarse foreground clustering (`percept`), a small
//! self-labeling segmentation network (`segnet`), the iterative mask
//! refinement loop (`refine`), scene editing on trained fields (`edit`), and
//! evaluation metrics (`metrics`).

pub mod config;
pub mod dataset;
pub mod diffopt;
pub mod edit;
pub mod error;
pub mod fields;
pub mod geom;
pub mod img;
pub mod metrics;
pub mod percept;
pub mod refine;
pub mod runlog;
pub mod seed;
pub mod segnet;
pub mod synth;

pub use error::{Error, Result};
