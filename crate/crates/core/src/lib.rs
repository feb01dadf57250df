//! Tree-crown semantic segmentation on multi-date aerial tiles: a small
//! autodiff tensor core, a temporal-collapse frontend over a compact U-Net,
//! hierarchy-aware losses, synthetic data generation, and a deterministic
//! training loop. f32 is the training element type; every gradient path can
//! also run in f64 for finite-difference verification.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod synth;
pub mod taxonomy;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::{Dtype, Element, Tensor};
