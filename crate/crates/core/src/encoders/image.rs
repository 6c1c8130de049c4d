use ndarray::{Array3, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BundleVars, FeatureBundle};
use crate::autograd::{conv_output_len, Graph, Var};
use crate::error::{CmimError, Result};
use crate::layers::ConvLayer;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub width: usize,
    pub stages: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            in_channels: 1,
            width: 64,
            stages: 4,
        }
    }
}

impl ImageEncoderConfig {
    /// Side length of the final feature map.
    pub fn output_side(&self) -> usize {
        (0..self.stages).fold(self.input_size, |s, _| conv_output_len(s, 3, 2, 1))
    }

    pub fn num_locations(&self) -> usize {
        self.output_side().pow(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualStage {
    down: ConvLayer,
    body: ConvLayer,
}

/// Residual CNN: a stem convolution followed by stages that halve the
/// resolution (`relu(down(x))`) and add a residual convolution
/// (`relu(h + body(h))`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    cfg: ImageEncoderConfig,
    stem: ConvLayer,
    stages: Vec<ResidualStage>,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &ImageEncoderConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.width;
        let stem = ConvLayer::new(store, &format!("{name}.stem"), (3, 3), cfg.in_channels, c, 1, rng);
        let stages = (0..cfg.stages)
            .map(|i| ResidualStage {
                down: ConvLayer::new(store, &format!("{name}.stage{i}.down"), (3, 3), c, c, 2, rng),
                body: ConvLayer::new(store, &format!("{name}.stage{i}.body"), (3, 3), c, c, 1, rng),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            stem,
            stages,
        }
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.stem.params().to_vec();
        for s in &self.stages {
            ids.extend(s.down.params());
            ids.extend(s.body.params());
        }
        ids
    }

    /// `x [B, H, W, Ci]` to local `[B, N, C]` and global `[B, C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> BundleVars {
        let h = self.stem.forward(g, store, x);
        let mut h = g.relu(h);
        for stage in &self.stages {
            let d = stage.down.forward(g, store, h);
            let d = g.relu(d);
            let r = stage.body.forward(g, store, d);
            let s = g.add(d, r);
            h = g.relu(s);
        }
        let shape = g.shape(h).to_vec();
        let local = g.reshape(h, &[shape[0], shape[1] * shape[2], shape[3]]);
        let global = g.mean_axis(local, 1);
        BundleVars {
            local,
            global: Some(global),
        }
    }

    /// Encodes one image `[H, W, C]` with pixel values in `[0, 1]`.
    pub fn encode_image(&self, store: &ParamStore, pixels: &Array3<f64>) -> Result<FeatureBundle> {
        let (h, w, c) = pixels.dim();
        let s = self.cfg.input_size;
        if (h, w, c) != (s, s, self.cfg.in_channels) {
            return Err(CmimError::Shape(format!(
                "image is {h}x{w}x{c}, encoder expects {s}x{s}x{}",
                self.cfg.in_channels
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(CmimError::invalid("pixel values must lie in [0, 1]"));
        }
        let mut g = Graph::new();
        let x = g.constant(
            pixels
                .clone()
                .insert_axis(Axis(0))
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, h, w, c]))
                .expect("reshape"),
        );
        let out = self.forward(&mut g, store, x);
        Ok(bundle_from_vars(&g, out))
    }
}

/// Copies the first batch row of a bundle off the graph.
pub(crate) fn bundle_from_vars(g: &Graph, vars: BundleVars) -> FeatureBundle {
    let local = g.value(vars.local).index_axis(Axis(0), 0).to_owned();
    let local = local
        .into_dimensionality::<ndarray::Ix2>()
        .expect("[N, C] local map");
    let global = vars.global.map(|v| {
        g.value(v)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("[C] global vector")
    });
    FeatureBundle { local, global }
}
