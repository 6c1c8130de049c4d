//! Cross-modal mutual information losses and their weighted compositions.
//!
//! Every MI loss is the negated lower-bound estimate, so minimizing the
//! composed objective maximizes mutual information between a modality's
//! features and the fused multi-modal features. Joint samples pair row `b`
//! of both inputs; marginal samples pair row `b` of the modality features
//! with row `pairing[b]` of the fused features.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::critic::Critic;
use crate::error::{CmimError, Result};
use crate::mi::{lower_bound_on_graph, EstimatorKind};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ll: f64,
    pub lambda_lg: f64,
    pub lambda_gg: f64,
    pub lambda_task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ll: 1.0,
            lambda_lg: 0.5,
            lambda_gg: 0.0,
            lambda_task: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ll, self.lambda_lg, self.lambda_gg, self.lambda_task];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CmimError::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(CmimError::Config("all loss weights are zero".into()));
        }
        Ok(())
    }

    /// Same task weight with every mutual-information weight set to zero.
    pub fn without_mi(&self) -> Self {
        Self {
            lambda_ll: 0.0,
            lambda_lg: 0.0,
            lambda_gg: 0.0,
            lambda_task: self.lambda_task,
        }
    }
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ll: f64,
    pub lg: f64,
    pub gg: f64,
    pub task: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ll: f64,
    pub lg: f64,
    pub gg: f64,
    pub task: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Components in a fixed order, for diagnostics and logging.
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("loss_ll", self.ll),
            ("loss_lg", self.lg),
            ("loss_gg", self.gg),
            ("loss_task", self.task),
            ("loss_total", self.total),
        ]
    }
}

/// `λ_lg L^{l→g} + λ_ll L^{l→l} + λ_gg L^{g→g} + λ_task L^classif`.
/// With the default `λ_gg = 0` this is the classification objective.
pub fn total_classification_loss(parts: LossParts, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        ll: parts.ll,
        lg: parts.lg,
        gg: parts.gg,
        task: parts.task,
        total: w.lambda_lg * parts.lg
            + w.lambda_ll * parts.ll
            + w.lambda_gg * parts.gg
            + w.lambda_task * parts.task,
    }
}

/// `λ_ll L^{l→l} + λ_task L^seg`; the global terms are forced to zero.
pub fn total_segmentation_loss(parts: LossParts, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        ll: parts.ll,
        lg: 0.0,
        gg: 0.0,
        task: parts.task,
        total: w.lambda_ll * parts.ll + w.lambda_task * parts.task,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiLossConfig {
    pub estimator: EstimatorKind,
    /// Upper bound on location pairs scored by the local-local loss; `None`
    /// scores all `N_i x N_M` pairs.
    pub max_location_pairs: Option<usize>,
}

impl Default for MiLossConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Jsd,
            max_location_pairs: None,
        }
    }
}

fn check_pairing(batch: usize, pairing: &[usize]) -> Result<()> {
    if batch < 2 {
        return Err(CmimError::InsufficientBatch(batch));
    }
    if pairing.len() != batch {
        return Err(CmimError::Shape(format!(
            "pairing has {} entries for a batch of {batch}",
            pairing.len()
        )));
    }
    if pairing.iter().enumerate().any(|(i, &p)| p >= batch || p == i) {
        return Err(CmimError::invalid("pairing must be a derangement of the batch"));
    }
    Ok(())
}

/// Negated bound from joint and marginal score tensors.
fn negated_bound(g: &mut Graph, joint: Var, marginal: Var, kind: EstimatorKind) -> Var {
    let b = lower_bound_on_graph(g, joint, marginal, kind);
    g.neg(b)
}

/// `L^{l→l}`: every location of `local_i [B, N_i, D_i]` against every
/// location of `fused [B, N_M, D_M]`, averaged over location pairs.
#[allow(clippy::too_many_arguments)]
pub fn loss_local_local(
    g: &mut Graph,
    store: &ParamStore,
    critic: &Critic,
    local_i: Var,
    fused: Var,
    pairing: &[usize],
    cfg: &MiLossConfig,
    subsample_seed: u64,
) -> Result<Var> {
    let (bs, ni) = (g.shape(local_i)[0], g.shape(local_i)[1]);
    let nm = g.shape(fused)[1];
    check_pairing(bs, pairing)?;
    let shuffled = g.gather(fused, pairing);
    match cfg.max_location_pairs {
        Some(max) if max > 0 && ni * nm > max => {
            let mut rng = ChaCha8Rng::seed_from_u64(subsample_seed);
            let picks = rand::seq::index::sample(&mut rng, ni * nm, max).into_vec();
            let n_idx: Vec<usize> = picks.iter().map(|p| p / nm).collect();
            let m_idx: Vec<usize> = picks.iter().map(|p| p % nm).collect();
            let a = g.gather_axis(local_i, 1, &n_idx);
            let b = g.gather_axis(fused, 1, &m_idx);
            let b_shuf = g.gather_axis(shuffled, 1, &m_idx);
            let joint = critic.score_aligned(g, store, a, b);
            let marginal = critic.score_aligned(g, store, a, b_shuf);
            Ok(negated_bound(g, joint, marginal, cfg.estimator))
        }
        _ => {
            let joint = critic.score_grid(g, store, local_i, fused);
            let marginal = critic.score_grid(g, store, local_i, shuffled);
            Ok(negated_bound(g, joint, marginal, cfg.estimator))
        }
    }
}

/// `L^{l→g}`: every location of `local_i [B, N, D]` against the fused global
/// vector `[B, G]`.
pub fn loss_local_global(
    g: &mut Graph,
    store: &ParamStore,
    critic: &Critic,
    local_i: Var,
    fused_global: Var,
    pairing: &[usize],
    kind: EstimatorKind,
) -> Result<Var> {
    let bs = g.shape(local_i)[0];
    check_pairing(bs, pairing)?;
    let dim = g.shape(fused_global)[1];
    let fg = g.reshape(fused_global, &[bs, 1, dim]);
    let shuffled = g.gather(fg, pairing);
    let joint = critic.score_grid(g, store, local_i, fg);
    let marginal = critic.score_grid(g, store, local_i, shuffled);
    Ok(negated_bound(g, joint, marginal, kind))
}

/// `L^{g→g}`: a modality's global vector `[B, G_i]` against the fused global
/// vector `[B, G]`.
pub fn loss_global_global(
    g: &mut Graph,
    store: &ParamStore,
    critic: &Critic,
    global_i: Var,
    fused_global: Var,
    pairing: &[usize],
    kind: EstimatorKind,
) -> Result<Var> {
    let (bs, d) = (g.shape(global_i)[0], g.shape(global_i)[1]);
    check_pairing(bs, pairing)?;
    let gi = g.reshape(global_i, &[bs, 1, d]);
    loss_local_global(g, store, critic, gi, fused_global, pairing, kind)
}

/// Mean categorical cross-entropy of `logits [B, K]`.
pub fn classification_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(CmimError::Shape(format!(
            "logits {:?} for {} labels",
            shape,
            labels.len()
        )));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(CmimError::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    Ok(g.cross_entropy(logits, labels))
}

/// Mean per-pixel cross-entropy of `pixel_logits [B, H, W, K]` against
/// `masks [B, H, W]`.
pub fn segmentation_loss(g: &mut Graph, pixel_logits: Var, masks: &Array3<usize>) -> Result<Var> {
    let shape = g.shape(pixel_logits).to_vec();
    if shape.len() != 4 || shape[..3] != *masks.shape() {
        return Err(CmimError::Shape(format!(
            "pixel logits {:?} vs masks {:?}",
            shape,
            masks.shape()
        )));
    }
    let k = shape[3];
    if let Some(&bad) = masks.iter().find(|&&l| l >= k) {
        return Err(CmimError::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let rows = shape[0] * shape[1] * shape[2];
    let flat = g.reshape(pixel_logits, &[rows, k]);
    let labels: Vec<usize> = masks.iter().copied().collect();
    Ok(g.cross_entropy(flat, &labels))
}
