//! Cross-modal mutual information maximization (CMIM).
//!
//! Per-modality encoders are trained so that each modality's local features
//! carry as much information as possible about representations computed
//! from all modalities jointly. Mutual information is maximized through
//! learned critics and a Jensen-Shannon (or Donsker-Varadhan) variational
//! lower bound, alongside the usual classification or segmentation loss.
//! At test time a single modality is enough to run the task head.

pub mod autograd;
pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod mi;
pub mod model;
pub mod optim;
pub mod params;
pub mod training;

pub use error::{CmimError, Result};
