use ndarray::{Array1, Axis};
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CmimError, Result};
use crate::layers::{ConvLayer, Linear};
use crate::params::{ParamId, ParamStore};

/// Linear map from the fused global vector to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHead {
    linear: Linear,
    num_classes: usize,
}

impl ClassHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, name, in_dim, num_classes, true, rng),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.linear.params()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, global: Var) -> Var {
        self.linear.forward(g, store, global)
    }

    pub fn predict_class_logits(&self, store: &ParamStore, global: &Array1<f64>) -> Result<Array1<f64>> {
        let d = self.linear.in_dim(store);
        if global.len() != d {
            return Err(CmimError::Shape(format!(
                "global vector of length {}, head expects {d}",
                global.len()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(global.to_owned().insert_axis(Axis(0)).into_dyn());
        let y = self.forward(&mut g, store, x);
        Ok(g.value(y)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .expect("[K]"))
    }
}

/// 1x1 convolution from decoder features to per-pixel label logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelHead {
    conv: ConvLayer,
}

impl PixelHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: ConvLayer::new(store, name, (1, 1), in_channels, num_labels, 1, rng),
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        self.conv.params()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Var {
        self.conv.forward(g, store, features)
    }
}
