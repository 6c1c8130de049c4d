use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::bundle_from_vars;
use super::{BundleVars, FeatureBundle};
use crate::autograd::{Graph, Var};
use crate::error::{CmimError, Result};
use crate::layers::ConvLayer;
use crate::params::{ParamId, ParamStore};

/// Token id reserved for padding; its embedding row is all zeros.
pub const PAD_TOKEN: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub blocks: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_len: 16,
            embed_dim: 64,
            width: 64,
            blocks: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualBlock {
    a: ConvLayer,
    b: ConvLayer,
}

/// Frozen embedding lookup followed by residual 1-D convolutions (kernel 3).
/// Pad positions are zeroed after every layer, so features of real tokens
/// never depend on how much padding follows or precedes them.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    embedding: ParamId,
    input: ConvLayer,
    blocks: Vec<ResidualBlock>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &TextEncoderConfig,
        rng: &mut R,
    ) -> Self {
        let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
        let mut table = Array2::<f64>::zeros((cfg.vocab_size, cfg.embed_dim));
        for ((row, _), v) in table.indexed_iter_mut() {
            if row != PAD_TOKEN {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * scale;
            }
        }
        let embedding = store.add(format!("{name}.embedding"), table.into_dyn(), false);
        let input = ConvLayer::new(
            store,
            &format!("{name}.input"),
            (1, 3),
            cfg.embed_dim,
            cfg.width,
            1,
            rng,
        );
        let blocks = (0..cfg.blocks)
            .map(|i| ResidualBlock {
                a: ConvLayer::new(store, &format!("{name}.block{i}.a"), (1, 3), cfg.width, cfg.width, 1, rng),
                b: ConvLayer::new(store, &format!("{name}.block{i}.b"), (1, 3), cfg.width, cfg.width, 1, rng),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            embedding,
            input,
            blocks,
        }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    /// Trainable parameters (the embedding table is frozen and excluded).
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.input.params().to_vec();
        for b in &self.blocks {
            ids.extend(b.a.params());
            ids.extend(b.b.params());
        }
        ids
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embedding
    }

    fn check_vocab(&self, tokens: &Array2<usize>) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(CmimError::OutOfVocabulary {
                token: bad,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// `tokens [B, L]` to local `[B, L, C]` and masked-mean global `[B, C]`.
    /// Rows made entirely of padding get a zero global vector; callers that
    /// require content must check beforehand.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &Array2<usize>) -> Result<BundleVars> {
        self.check_vocab(tokens)?;
        let (bs, len) = tokens.dim();
        let c = self.cfg.width;
        let mask: Vec<f64> = tokens
            .iter()
            .map(|&t| if t == PAD_TOKEN { 0.0 } else { 1.0 })
            .collect();
        let channel_mask = ArrayD::from_shape_fn(IxDyn(&[bs, 1, len, c]), |i| mask[i[0] * len + i[2]]);

        let table = g.param(store, self.embedding);
        let ids: Vec<usize> = tokens.iter().copied().collect();
        let emb = g.gather(table, &ids);
        let emb = g.reshape(emb, &[bs, 1, len, self.cfg.embed_dim]);

        let masked_relu = |g: &mut Graph, x: Var| {
            let r = g.relu(x);
            g.mul_const(r, channel_mask.clone())
        };
        let h = self.input.forward(g, store, emb);
        let mut h = masked_relu(g, h);
        for block in &self.blocks {
            let r = block.a.forward(g, store, h);
            let r = masked_relu(g, r);
            let r = block.b.forward(g, store, r);
            let s = g.add(h, r);
            h = masked_relu(g, s);
        }
        let local = g.reshape(h, &[bs, len, c]);
        let pool = ArrayD::from_shape_fn(IxDyn(&[bs, len, c]), |i| {
            let row = &mask[i[0] * len..(i[0] + 1) * len];
            let count: f64 = row.iter().sum();
            if count == 0.0 {
                0.0
            } else {
                row[i[1]] * len as f64 / count
            }
        });
        let weighted = g.mul_const(local, pool);
        let global = g.mean_axis(weighted, 1);
        Ok(BundleVars {
            local,
            global: Some(global),
        })
    }

    /// Encodes one token sequence of length `1..=max_len`, right-padded to
    /// `max_len` with [`PAD_TOKEN`].
    pub fn encode_text(&self, store: &ParamStore, tokens: &[usize]) -> Result<FeatureBundle> {
        if tokens.is_empty() || tokens.len() > self.cfg.max_len {
            return Err(CmimError::invalid(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        let mut padded = Array2::from_elem((1, self.cfg.max_len), PAD_TOKEN);
        for (i, &t) in tokens.iter().enumerate() {
            padded[[0, i]] = t;
        }
        self.check_vocab(&padded)?;
        if padded.iter().all(|&t| t == PAD_TOKEN) {
            return Err(CmimError::EmptySequence);
        }
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &padded)?;
        Ok(bundle_from_vars(&g, out))
    }
}
