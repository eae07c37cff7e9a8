//! Desk-scale lab for concept erasure in conditional diffusion models.
//!
//! Everything runs on a 2-D Gaussian mixture whose modes are labelled by a
//! concept (angle) and a context (radius), so that the ground-truth concept
//! of any sample can be computed exactly.

pub mod ant_finetune;
pub mod diffusion;
pub mod error;
pub mod eval_metrics;
pub mod multi_fuse;
pub mod optim;
pub mod pretrainer;
pub mod saliency;
pub mod score_net;
pub mod synth_data;
pub mod util;

pub use error::{Error, Result};
