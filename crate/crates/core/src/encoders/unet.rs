use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureBundle, FusedFeatures, PixelHead};
use crate::autograd::{Graph, Var};
use crate::error::{CmimError, Result};
use crate::layers::ConvLayer;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub input_size: usize,
    /// Channel widths of the three skip levels and the bottleneck.
    pub widths: [usize; 4],
    pub num_labels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            widths: [8, 16, 32, 32],
            num_labels: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return Err(CmimError::Config(format!(
                "segmentation input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.widths.contains(&0) || self.num_labels < 2 {
            return Err(CmimError::Config("zero width or fewer than 2 labels".into()));
        }
        Ok(())
    }

    pub fn bottleneck_side(&self) -> usize {
        self.input_size / 8
    }
}

/// One modality's encoder branch: three skip levels and a bottleneck at 1/8
/// resolution.
#[derive(Clone, Debug, PartialEq)]
struct Branch {
    level0: [ConvLayer; 2],
    level1: [ConvLayer; 2],
    level2: [ConvLayer; 2],
    bottleneck: ConvLayer,
}

struct BranchOutput {
    skips: [Var; 3],
    bottleneck: Var,
}

impl Branch {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, w: [usize; 4], rng: &mut R) -> Self {
        let conv = |store: &mut ParamStore, rng: &mut R, n: &str, ci, co, stride| {
            ConvLayer::new(store, &format!("{name}.{n}"), (3, 3), ci, co, stride, rng)
        };
        Self {
            level0: [conv(store, rng, "l0a", 1, w[0], 1), conv(store, rng, "l0b", w[0], w[0], 1)],
            level1: [conv(store, rng, "l1a", w[0], w[1], 2), conv(store, rng, "l1b", w[1], w[1], 1)],
            level2: [conv(store, rng, "l2a", w[1], w[2], 2), conv(store, rng, "l2b", w[2], w[2], 1)],
            bottleneck: conv(store, rng, "bottleneck", w[2], w[3], 2),
        }
    }

    fn params(&self) -> Vec<ParamId> {
        self.level0
            .iter()
            .chain(&self.level1)
            .chain(&self.level2)
            .chain(std::iter::once(&self.bottleneck))
            .flat_map(|c| c.params())
            .collect()
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> BranchOutput {
        let mut h = x;
        let mut skips = Vec::with_capacity(3);
        for level in [&self.level0, &self.level1, &self.level2] {
            for conv in level {
                let y = conv.forward(g, store, h);
                h = g.relu(y);
            }
            skips.push(h);
        }
        let b = self.bottleneck.forward(g, store, h);
        let bottleneck = g.relu(b);
        BranchOutput {
            skips: [skips[0], skips[1], skips[2]],
            bottleneck,
        }
    }
}

/// Result of a segmentation forward pass on a graph.
#[derive(Clone, Debug)]
pub struct SegmentationForward {
    /// Bottleneck local features `[B, N, C]` per modality branch that ran,
    /// keyed by modality index.
    pub branch_locals: Vec<(usize, Var)>,
    /// Presence-weighted average of the branch bottlenecks `[B, N, C]`, the
    /// input of the shared trunk.
    pub fused_local: Var,
    /// Full-resolution decoder features `[B, H, W, C0]`.
    pub decoder: Var,
    /// `[B, H, W, K]`
    pub logits: Var,
}

/// U-Net with one encoder branch per modality. Skip maps and bottlenecks of
/// the present branches are averaged per sample, then a shared trunk and
/// decoder produce per-pixel logits. Only modalities flagged present
/// contribute, so any non-empty subset can be segmented.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    cfg: UNetConfig,
    modalities: Vec<String>,
    branches: Vec<Branch>,
    trunk: ConvLayer,
    up: [ConvLayer; 3],
    head: PixelHead,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &UNetConfig,
        modalities: &[String],
        rng: &mut R,
    ) -> Self {
        let w = cfg.widths;
        let branches = modalities
            .iter()
            .map(|m| Branch::new(store, &format!("{name}.branch.{m}"), w, rng))
            .collect();
        let trunk = ConvLayer::new(store, &format!("{name}.trunk"), (3, 3), w[3], w[3], 1, rng);
        let up = [
            ConvLayer::new(store, &format!("{name}.up2"), (3, 3), w[3] + w[2], w[2], 1, rng),
            ConvLayer::new(store, &format!("{name}.up1"), (3, 3), w[2] + w[1], w[1], 1, rng),
            ConvLayer::new(store, &format!("{name}.up0"), (3, 3), w[1] + w[0], w[0], 1, rng),
        ];
        let head = PixelHead::new(store, &format!("{name}.head"), w[0], cfg.num_labels, rng);
        Self {
            cfg: cfg.clone(),
            modalities: modalities.to_vec(),
            branches,
            trunk,
            up,
            head,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn head(&self) -> &PixelHead {
        &self.head
    }

    /// Trainable parameters of one modality's branch.
    pub fn branch_params(&self, modality: usize) -> Vec<ParamId> {
        self.branches[modality].params()
    }

    /// Parameters of the shared trunk, decoder and head.
    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut ids = self.trunk.params().to_vec();
        for u in &self.up {
            ids.extend(u.params());
        }
        ids.extend(self.head.params());
        ids
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = (0..self.branches.len()).flat_map(|i| self.branch_params(i)).collect();
        ids.extend(self.shared_params());
        ids
    }

    /// `inputs[i]` is modality `i`'s `[B, H, W, 1]` slice batch (or `None`
    /// when absent from every sample); `present [B, M]` flags which
    /// modalities each sample has.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[Option<Var>],
        present: &Array2<bool>,
    ) -> Result<SegmentationForward> {
        let (bs, m) = present.dim();
        if m != self.modalities.len() || inputs.len() != m {
            return Err(CmimError::Shape(format!(
                "{} modality inputs for a {}-branch network",
                inputs.len(),
                self.modalities.len()
            )));
        }
        let counts: Vec<f64> = present
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|p| **p).count() as f64)
            .collect();
        if let Some(b) = counts.iter().position(|c| *c == 0.0) {
            return Err(CmimError::invalid(format!("sample {b} has no modality present")));
        }

        let mut outputs: Vec<(usize, BranchOutput)> = Vec::new();
        for (i, input) in inputs.iter().enumerate() {
            let any = present.column(i).iter().any(|p| *p);
            match (input, any) {
                (Some(x), true) => outputs.push((i, self.branches[i].forward(g, store, *x))),
                (None, true) => {
                    return Err(CmimError::invalid(format!(
                        "modality {} flagged present without input",
                        self.modalities[i]
                    )))
                }
                _ => {}
            }
        }

        // per-sample average over present branches, summed in branch order
        let average = |g: &mut Graph, pick: &dyn Fn(&BranchOutput) -> Var| -> Var {
            let mut acc: Option<Var> = None;
            for (i, out) in &outputs {
                let v = pick(out);
                let shape = g.shape(v).to_vec();
                let per_row = shape[1..].iter().product::<usize>();
                let weights = ArrayD::from_shape_fn(IxDyn(&shape), |idx| {
                    let b = idx[0];
                    if present[[b, *i]] {
                        1.0 / counts[b]
                    } else {
                        0.0
                    }
                });
                debug_assert_eq!(weights.len(), bs * per_row);
                let single = present.column(*i).iter().all(|p| *p) && counts.iter().all(|c| *c == 1.0);
                let term = if single { v } else { g.mul_const(v, weights) };
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term),
                });
            }
            acc.expect("at least one branch ran")
        };

        let fused_bottleneck = average(g, &|o| o.bottleneck);
        let fused_skips = [
            average(g, &|o| o.skips[0]),
            average(g, &|o| o.skips[1]),
            average(g, &|o| o.skips[2]),
        ];

        let t = self.trunk.forward(g, store, fused_bottleneck);
        let mut h = g.relu(t);
        for (conv, skip) in self.up.iter().zip(fused_skips.iter().rev()) {
            let u = g.upsample2x(h);
            let cat = g.concat(&[u, *skip], 3);
            let y = conv.forward(g, store, cat);
            h = g.relu(y);
        }
        let logits = self.head.forward(g, store, h);

        let to_local = |g: &mut Graph, v: Var| {
            let s = g.shape(v).to_vec();
            g.reshape(v, &[s[0], s[1] * s[2], s[3]])
        };
        let branch_locals = outputs
            .iter()
            .map(|(i, o)| (*i, to_local(g, o.bottleneck)))
            .collect();
        let fused_local = to_local(g, fused_bottleneck);
        Ok(SegmentationForward {
            branch_locals,
            fused_local,
            decoder: h,
            logits,
        })
    }

    /// Single-sample convenience wrapper: runs only the `present` modalities
    /// and returns each branch's bundle (no global vector), the fused
    /// features and the decoder feature map `[H, W, C0]`.
    pub fn encode_modalities(
        &self,
        store: &ParamStore,
        volumes: &BTreeMap<String, Array2<f64>>,
        present: &[String],
    ) -> Result<(Vec<(String, FeatureBundle)>, FusedFeatures, Array3<f64>)> {
        if present.is_empty() {
            return Err(CmimError::invalid("no modality present"));
        }
        let s = self.cfg.input_size;
        let mut g = Graph::new();
        let mut inputs = vec![None; self.modalities.len()];
        let mut mask = Array2::from_elem((1, self.modalities.len()), false);
        for name in present {
            let i = self
                .modalities
                .iter()
                .position(|m| m == name)
                .ok_or_else(|| CmimError::UnknownModality(name.clone()))?;
            let slice = volumes
                .get(name)
                .ok_or_else(|| CmimError::invalid(format!("no slice given for {name}")))?;
            if slice.dim() != (s, s) {
                return Err(CmimError::Shape(format!(
                    "{name} slice is {:?}, expected {s}x{s}",
                    slice.dim()
                )));
            }
            let t = slice
                .clone()
                .into_shape_with_order(IxDyn(&[1, s, s, 1]))
                .expect("reshape");
            inputs[i] = Some(g.constant(t));
            mask[[0, i]] = true;
        }
        let out = self.forward(&mut g, store, &inputs, &mask)?;
        let row = |g: &Graph, v: Var| {
            g.value(v)
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("[N, C]")
        };
        let bundles = out
            .branch_locals
            .iter()
            .map(|(i, v)| {
                (
                    self.modalities[*i].clone(),
                    FeatureBundle {
                        local: row(&g, *v),
                        global: None,
                    },
                )
            })
            .collect();
        let fused = FusedFeatures {
            local: row(&g, out.fused_local),
            global: None,
        };
        let decoder = g
            .value(out.decoder)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("[H, W, C]");
        Ok((bundles, fused, decoder))
    }
}
