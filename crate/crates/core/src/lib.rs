//! Multi-expert classification for highly imbalanced image data.
//!
//! The crate is organized by stage of the pipeline:
//!
//! - [`losses`]: balanced softmax, the ARB / hard-category-mining /
//!   contrastive / center / distillation losses and the weighted objective.
//! - [`attention`]: channel attention and its regional (quadrant-wise) variant.
//! - [`nn`]: convolution, batch norm and the other layers the backbone needs.
//! - [`model`]: expert branches with a cosine head, the K-branch model and
//!   checkpoints.
//! - [`datagen`]: a synthetic defect-image generator with product-line
//!   backgrounds, plus manifest I/O.
//! - [`train`]: SGD with cosine decay, history, and the gradient checker.
//! - [`eval`]: subgroup accuracy, confusion matrices, embedding export.
//! - [`cli`]: the `recame` command line.

pub mod attention;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
