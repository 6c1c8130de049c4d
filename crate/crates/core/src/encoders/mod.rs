//! Per-modality encoders, fusion of modality features, and task heads.
//!
//! Every encoder maps its input to local features `[B, N, C]` (one vector per
//! spatial or sequence location, taken before pooling) and, except for the
//! segmentation branches, a global vector `[B, C]` that is the mean of the
//! local vectors.

mod fusion;
mod heads;
mod image;
mod text;
mod unet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;

pub use fusion::{BilinearFusion, LocalFusion};
pub(crate) use fusion::scale_rows;
pub use heads::{ClassHead, PixelHead};
pub use image::{ImageEncoder, ImageEncoderConfig};
pub use text::{TextEncoder, TextEncoderConfig, PAD_TOKEN};
pub use unet::{SegmentationForward, UNet, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModalityKind {
    Image2D,
    TokenSequence,
    VolumeChannel,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityId {
    pub name: String,
    pub kind: ModalityKind,
}

impl ModalityId {
    pub fn new(name: impl Into<String>, kind: ModalityKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// A single input's local features and (optional) pooled global vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `[N, C]`
    pub local: Array2<f64>,
    pub global: Option<Array1<f64>>,
}

impl FeatureBundle {
    pub fn is_finite(&self) -> bool {
        self.local.iter().all(|x| x.is_finite())
            && self
                .global
                .as_ref()
                .is_none_or(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    /// `[N, C']`
    pub local: Array2<f64>,
    pub global: Option<Array1<f64>>,
}

/// Batched features on a graph: `local [B, N, C]`, `global [B, C]`.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub local: Var,
    pub global: Option<Var>,
}
