//! Task models: encoders, fusion, critics and heads wired together, with the
//! composed training loss and inference.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::critic::{Critic, CriticKind};
use crate::data::{binarize_target, BatchTarget, ModalityBatch, ModalityInput, Task, SEGMENTATION_LABELS};
use crate::encoders::{
    BilinearFusion, ClassHead, ImageEncoder, ImageEncoderConfig, LocalFusion, TextEncoder,
    TextEncoderConfig, UNet, UNetConfig,
};
use crate::error::{CmimError, Result};
use crate::losses::{
    classification_loss, loss_global_global, loss_local_global, loss_local_local,
    segmentation_loss, LossWeights, MiLossConfig,
};
use crate::mi::make_marginal_pairing;
use crate::params::{zeros, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    /// Common width of the fused local features.
    pub fused_local_dim: usize,
    pub bilinear_rank: usize,
    pub fused_global_dim: usize,
    pub critic_hidden: usize,
    pub mi: MiLossConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            fused_local_dim: 64,
            bilinear_rank: 8,
            fused_global_dim: 128,
            critic_hidden: 64,
            mi: MiLossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub unet: UNetConfig,
    /// Label trained one-versus-rest; `None` trains on all mask labels.
    pub target_class: Option<usize>,
    pub critic_hidden: usize,
    pub mi: MiLossConfig,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            target_class: Some(4),
            critic_hidden: 32,
            mi: MiLossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum ModelConfig {
    Classification(ClassifierConfig),
    Segmentation(SegmenterConfig),
}

impl ModelConfig {
    pub fn task(&self) -> Task {
        match self {
            ModelConfig::Classification(_) => Task::Classification,
            ModelConfig::Segmentation(_) => Task::Segmentation,
        }
    }

    pub fn modalities(&self) -> Vec<String> {
        let names: &[&str] = match self {
            ModelConfig::Classification(_) => &crate::data::CLASSIFICATION_MODALITIES,
            ModelConfig::Segmentation(_) => &crate::data::SEGMENTATION_MODALITIES,
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Classification(c) => {
                if c.num_classes < 2 {
                    return Err(CmimError::Config("num_classes must be at least 2".into()));
                }
                if c.image.input_size >> c.image.stages == 0 {
                    return Err(CmimError::Config("image encoder downsamples below 1x1".into()));
                }
                let dims = [
                    c.image.width,
                    c.text.width,
                    c.text.embed_dim,
                    c.fused_local_dim,
                    c.bilinear_rank,
                    c.fused_global_dim,
                    c.critic_hidden,
                ];
                if dims.contains(&0) || c.text.vocab_size < 2 {
                    return Err(CmimError::Config("zero-sized classifier dimension".into()));
                }
            }
            ModelConfig::Segmentation(s) => {
                s.unet.validate()?;
                if let Some(t) = s.target_class {
                    if t >= SEGMENTATION_LABELS {
                        return Err(CmimError::Config(format!(
                            "target_class {t} outside 0..{SEGMENTATION_LABELS}"
                        )));
                    }
                    if s.unet.num_labels != 2 {
                        return Err(CmimError::Config(
                            "one-versus-rest segmentation needs num_labels = 2".into(),
                        ));
                    }
                } else if s.unet.num_labels != SEGMENTATION_LABELS {
                    return Err(CmimError::Config(format!(
                        "multi-label segmentation needs num_labels = {SEGMENTATION_LABELS}"
                    )));
                }
                if s.critic_hidden == 0 {
                    return Err(CmimError::Config("critic_hidden must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn mi(&self) -> &MiLossConfig {
        match self {
            ModelConfig::Classification(c) => &c.mi,
            ModelConfig::Segmentation(s) => &s.mi,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Classifier {
    cfg: ClassifierConfig,
    image: ImageEncoder,
    text: TextEncoder,
    local_fusion: LocalFusion,
    bilinear: BilinearFusion,
    /// Stand-ins for an absent modality's global vector.
    defaults: [ParamId; 2],
    head: ClassHead,
    ll: [Critic; 2],
    lg: [Critic; 2],
    gg: [Critic; 2],
}

#[derive(Clone, Debug, PartialEq)]
struct Segmenter {
    cfg: SegmenterConfig,
    unet: UNet,
    ll: Vec<Critic>,
}

#[derive(Clone, Debug, PartialEq)]
enum Net {
    Classifier(Box<Classifier>),
    Segmenter(Box<Segmenter>),
}

/// Loss terms of one forward pass on a graph; a term is `None` when its
/// weight is zero or no modality had two samples to pair.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ll: Option<Var>,
    pub lg: Option<Var>,
    pub gg: Option<Var>,
    pub task: Var,
    pub total: Var,
}

/// A model together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    modalities: Vec<String>,
    pub store: ParamStore,
    net: Net,
}

impl Model {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let modalities = config.modalities();
        let net = match config {
            ModelConfig::Classification(c) => {
                let image = ImageEncoder::new(&mut store, "enc.image", &c.image, &mut rng);
                let text = TextEncoder::new(&mut store, "enc.text", &c.text, &mut rng);
                let (ci, ct) = (c.image.width, c.text.width);
                let local_fusion = LocalFusion::new(
                    &mut store,
                    "fuse.local",
                    &[(c.image.num_locations(), ci), (c.text.max_len, ct)],
                    c.fused_local_dim,
                    &mut rng,
                );
                let bilinear = BilinearFusion::new(
                    &mut store,
                    "fuse.global",
                    &[ci, ct],
                    c.bilinear_rank,
                    c.fused_global_dim,
                    &mut rng,
                );
                let defaults = [
                    store.add("fuse.default.image", zeros(&[ci]), true),
                    store.add("fuse.default.text", zeros(&[ct]), true),
                ];
                let head = ClassHead::new(&mut store, "head", c.fused_global_dim, c.num_classes, &mut rng);
                let h = c.critic_hidden;
                let mut critic = |name: &str, kind, a, b| Critic::new(&mut store, name, kind, a, b, h, &mut rng);
                let ll = [
                    critic("critic.ll.image", CriticKind::LocalLocal, ci, c.fused_local_dim),
                    critic("critic.ll.text", CriticKind::LocalLocal, ct, c.fused_local_dim),
                ];
                let lg = [
                    critic("critic.lg.image", CriticKind::LocalGlobal, ci, c.fused_global_dim),
                    critic("critic.lg.text", CriticKind::LocalGlobal, ct, c.fused_global_dim),
                ];
                let gg = [
                    critic("critic.gg.image", CriticKind::GlobalGlobal, ci, c.fused_global_dim),
                    critic("critic.gg.text", CriticKind::GlobalGlobal, ct, c.fused_global_dim),
                ];
                Net::Classifier(Box::new(Classifier {
                    cfg: c.clone(),
                    image,
                    text,
                    local_fusion,
                    bilinear,
                    defaults,
                    head,
                    ll,
                    lg,
                    gg,
                }))
            }
            ModelConfig::Segmentation(s) => {
                let unet = UNet::new(&mut store, "unet", &s.unet, &modalities, &mut rng);
                let c = s.unet.widths[3];
                let ll = modalities
                    .iter()
                    .map(|m| {
                        Critic::new(
                            &mut store,
                            &format!("critic.ll.{m}"),
                            CriticKind::LocalLocal,
                            c,
                            c,
                            s.critic_hidden,
                            &mut rng,
                        )
                    })
                    .collect();
                Net::Segmenter(Box::new(Segmenter {
                    cfg: s.clone(),
                    unet,
                    ll,
                }))
            }
        };
        Ok(Self {
            config: config.clone(),
            modalities,
            store,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.config.task()
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| CmimError::UnknownModality(name.to_string()))
    }

    /// Checks that a batch's modality columns line up with the model's.
    fn check_batch(&self, batch: &ModalityBatch) -> Result<()> {
        batch.validate()?;
        if batch.inputs.len() != self.modalities.len() {
            return Err(CmimError::Shape(format!(
                "batch has {} modality columns, model has {}",
                batch.inputs.len(),
                self.modalities.len()
            )));
        }
        Ok(())
    }

    /// Builds the weighted training loss for one batch. MI terms whose
    /// weight is zero are not computed.
    pub fn loss(&self, g: &mut Graph, batch: &ModalityBatch, weights: &LossWeights) -> Result<LossVars> {
        self.check_batch(batch)?;
        match &self.net {
            Net::Classifier(c) => c.loss(g, &self.store, batch, weights),
            Net::Segmenter(s) => s.loss(g, &self.store, batch, weights),
        }
    }

    /// Class probabilities `[B, K]` (classification only).
    pub fn predict_proba(&self, batch: &ModalityBatch) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let Net::Classifier(c) = &self.net else {
            return Err(CmimError::invalid("class probabilities need a classification model"));
        };
        let mut g = Graph::new();
        let fwd = c.forward(&mut g, &self.store, batch)?;
        let logits = c.head.forward(&mut g, &self.store, fwd.fused_global);
        let logits = g
            .value(logits)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("[B, K]");
        Ok(softmax_rows(&logits))
    }

    /// Predicted label per pixel `[B, H, W]`, the argmax of the pixel
    /// logits (segmentation only). In the one-versus-rest setting 1 marks
    /// the target class.
    pub fn predict_masks(&self, batch: &ModalityBatch) -> Result<Array3<usize>> {
        self.check_batch(batch)?;
        let Net::Segmenter(s) = &self.net else {
            return Err(CmimError::invalid("masks need a segmentation model"));
        };
        let mut g = Graph::new();
        let (inputs, _) = s.inputs(&mut g, batch)?;
        let out = s.unet.forward(&mut g, &self.store, &inputs, &batch.present)?;
        let logits = g.value(out.logits);
        let (b, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        Ok(Array3::from_shape_fn((b, h, w), |(i, y, x)| {
            let lane = logits.slice(ndarray::s![i, y, x, ..]);
            argmax(lane.iter().copied())
        }))
    }

    /// Target the model is trained on for a batch: labels, or masks reduced
    /// to the one-versus-rest target when configured.
    pub fn batch_masks(&self, batch: &ModalityBatch) -> Result<Array3<usize>> {
        let BatchTarget::Masks(m) = &batch.target else {
            return Err(CmimError::invalid("batch has no masks"));
        };
        match &self.net {
            Net::Segmenter(s) => s.target_masks(m),
            Net::Classifier(_) => Err(CmimError::invalid("classification model has no masks")),
        }
    }

    /// Parameters grouped by submodule, for gradient-flow checks.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        match &self.net {
            Net::Classifier(c) => {
                let mut groups = vec![
                    ("image_encoder".to_string(), c.image.params()),
                    ("text_encoder".to_string(), c.text.params()),
                    ("local_fusion".to_string(), c.local_fusion.params()),
                    ("bilinear_fusion".to_string(), c.bilinear.params()),
                    ("defaults".to_string(), c.defaults.to_vec()),
                    ("head".to_string(), c.head.params()),
                ];
                for (name, critics) in [("ll", &c.ll), ("lg", &c.lg), ("gg", &c.gg)] {
                    for (m, critic) in self.modalities.iter().zip(critics.iter()) {
                        groups.push((format!("critic_{name}_{m}"), critic.params().to_vec()));
                    }
                }
                groups
            }
            Net::Segmenter(s) => {
                let mut groups: Vec<(String, Vec<ParamId>)> = self
                    .modalities
                    .iter()
                    .enumerate()
                    .map(|(i, m)| (format!("branch_{m}"), s.unet.branch_params(i)))
                    .collect();
                groups.push(("decoder".to_string(), s.unet.shared_params()));
                for (m, critic) in self.modalities.iter().zip(&s.ll) {
                    groups.push((format!("critic_ll_{m}"), critic.params().to_vec()));
                }
                groups
            }
        }
    }

    /// Short digest of the model configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(&self.config).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Rows of the batch where `present` holds.
fn present_rows(present: &Array2<bool>, m: usize) -> Vec<usize> {
    present
        .column(m)
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.then_some(i))
        .collect()
}

/// Gathers `rows` of `v` unless they are all rows.
fn rows_of(g: &mut Graph, v: Var, rows: &[usize]) -> Var {
    if rows.len() == g.shape(v)[0] {
        v
    } else {
        g.gather(v, rows)
    }
}

/// Mean of the available terms, or `None`.
fn average(g: &mut Graph, terms: Vec<Var>) -> Option<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next()?;
    let sum = it.fold(first, |acc, t| g.add(acc, t));
    Some(if n == 1 { sum } else { g.scale(sum, 1.0 / n as f64) })
}

fn weighted_sum(g: &mut Graph, parts: &[(Option<Var>, f64)], task: Var, task_weight: f64) -> Var {
    let mut total = g.scale(task, task_weight);
    for (v, w) in parts {
        if let Some(v) = v {
            let t = g.scale(*v, *w);
            total = g.add(total, t);
        }
    }
    total
}

struct ClassifierForward {
    locals: [Option<Var>; 2],
    globals: [Option<Var>; 2],
    fused_local: Var,
    fused_global: Var,
}

impl Classifier {
    fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &ModalityBatch) -> Result<ClassifierForward> {
        let bs = batch.len();
        let mut locals = [None, None];
        let mut globals = [None, None];
        match &batch.inputs[0] {
            Some(ModalityInput::Image(a)) => {
                let x = g.constant(a.clone());
                let out = self.image.forward(g, store, x);
                locals[0] = Some(out.local);
                globals[0] = out.global;
            }
            Some(ModalityInput::Tokens(_)) => return Err(CmimError::invalid("image column holds tokens")),
            None => {}
        }
        match &batch.inputs[1] {
            Some(ModalityInput::Tokens(t)) => {
                let out = self.text.forward(g, store, t)?;
                locals[1] = Some(out.local);
                globals[1] = out.global;
            }
            Some(ModalityInput::Image(_)) => return Err(CmimError::invalid("text column holds an image")),
            None => {}
        }
        let fused_local = self.local_fusion.forward(g, store, &locals, &batch.present)?;

        // absent rows take the learned default global vector
        let mut effective = Vec::with_capacity(2);
        for (m, global) in globals.iter().enumerate() {
            let mask: Vec<f64> = batch.present.column(m).iter().map(|p| f64::from(u8::from(*p))).collect();
            let v = match global {
                Some(gv) if mask.iter().all(|x| *x == 1.0) => *gv,
                Some(gv) => {
                    let kept = crate::encoders::scale_rows(g, *gv, &mask);
                    let d = g.param(store, self.defaults[m]);
                    let inverse: Vec<f64> = mask.iter().map(|x| 1.0 - x).collect();
                    let fill = g.row_outer(d, &inverse);
                    g.add(kept, fill)
                }
                None => {
                    let d = g.param(store, self.defaults[m]);
                    g.row_outer(d, &vec![1.0; bs])
                }
            };
            effective.push(v);
        }
        let fused_global = self.bilinear.forward(g, store, &effective)?;
        Ok(ClassifierForward {
            locals,
            globals,
            fused_local,
            fused_global,
        })
    }

    fn loss(&self, g: &mut Graph, store: &ParamStore, batch: &ModalityBatch, w: &LossWeights) -> Result<LossVars> {
        let BatchTarget::Labels(labels) = &batch.target else {
            return Err(CmimError::invalid("classification batch needs labels"));
        };
        let fwd = self.forward(g, store, batch)?;
        let logits = self.head.forward(g, store, fwd.fused_global);
        let task = classification_loss(g, logits, labels)?;

        let (mut ll, mut lg, mut gg) = (Vec::new(), Vec::new(), Vec::new());
        for m in 0..2 {
            let (Some(local), Some(global)) = (fwd.locals[m], fwd.globals[m]) else {
                continue;
            };
            let rows = present_rows(&batch.present, m);
            if rows.len() < 2 {
                continue;
            }
            let pairing = make_marginal_pairing(rows.len(), batch.pairing_seed)?;
            let local = rows_of(g, local, &rows);
            if w.lambda_ll != 0.0 {
                let fused = rows_of(g, fwd.fused_local, &rows);
                ll.push(loss_local_local(
                    g,
                    store,
                    &self.ll[m],
                    local,
                    fused,
                    &pairing,
                    &self.cfg.mi,
                    batch.pairing_seed,
                )?);
            }
            if w.lambda_lg != 0.0 || w.lambda_gg != 0.0 {
                let fg = rows_of(g, fwd.fused_global, &rows);
                if w.lambda_lg != 0.0 {
                    lg.push(loss_local_global(g, store, &self.lg[m], local, fg, &pairing, self.cfg.mi.estimator)?);
                }
                if w.lambda_gg != 0.0 {
                    let gi = rows_of(g, global, &rows);
                    gg.push(loss_global_global(g, store, &self.gg[m], gi, fg, &pairing, self.cfg.mi.estimator)?);
                }
            }
        }
        let (ll, lg, gg) = (average(g, ll), average(g, lg), average(g, gg));
        let total = weighted_sum(g, &[(lg, w.lambda_lg), (ll, w.lambda_ll), (gg, w.lambda_gg)], task, w.lambda_task);
        Ok(LossVars { ll, lg, gg, task, total })
    }
}

impl Segmenter {
    fn target_masks(&self, masks: &Array3<usize>) -> Result<Array3<usize>> {
        let Some(t) = self.cfg.target_class else {
            return Ok(masks.clone());
        };
        let mut out = Array3::zeros(masks.raw_dim());
        for (mut o, m) in out.outer_iter_mut().zip(masks.outer_iter()) {
            o.assign(&binarize_target(&m.to_owned(), t, SEGMENTATION_LABELS)?);
        }
        Ok(out)
    }

    fn inputs(&self, g: &mut Graph, batch: &ModalityBatch) -> Result<(Vec<Option<Var>>, usize)> {
        let s = self.cfg.unet.input_size;
        let mut vars = Vec::with_capacity(batch.inputs.len());
        for input in &batch.inputs {
            vars.push(match input {
                Some(ModalityInput::Image(a)) => {
                    if a.shape()[1..] != [s, s, 1] {
                        return Err(CmimError::Shape(format!(
                            "slice batch {:?}, network expects {s}x{s}",
                            a.shape()
                        )));
                    }
                    Some(g.constant(a.clone()))
                }
                Some(ModalityInput::Tokens(_)) => return Err(CmimError::invalid("segmentation input holds tokens")),
                None => None,
            });
        }
        Ok((vars, s))
    }

    fn loss(&self, g: &mut Graph, store: &ParamStore, batch: &ModalityBatch, w: &LossWeights) -> Result<LossVars> {
        let BatchTarget::Masks(masks) = &batch.target else {
            return Err(CmimError::invalid("segmentation batch needs masks"));
        };
        let targets = self.target_masks(masks)?;
        let (inputs, _) = self.inputs(g, batch)?;
        let out = self.unet.forward(g, store, &inputs, &batch.present)?;
        let task = segmentation_loss(g, out.logits, &targets)?;

        let mut ll = Vec::new();
        if w.lambda_ll != 0.0 {
            for (m, local) in &out.branch_locals {
                let rows = present_rows(&batch.present, *m);
                if rows.len() < 2 {
                    continue;
                }
                let pairing = make_marginal_pairing(rows.len(), batch.pairing_seed)?;
                let local = rows_of(g, *local, &rows);
                let fused = rows_of(g, out.fused_local, &rows);
                ll.push(loss_local_local(
                    g,
                    store,
                    &self.ll[*m],
                    local,
                    fused,
                    &pairing,
                    &self.cfg.mi,
                    batch.pairing_seed,
                )?);
            }
        }
        let ll = average(g, ll);
        let total = weighted_sum(g, &[(ll, w.lambda_ll)], task, w.lambda_task);
        Ok(LossVars {
            ll,
            lg: None,
            gg: None,
            task,
            total,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        generate_synthetic_classification, generate_synthetic_segmentation, make_batches, SyntheticConfig,
    };

    pub(crate) fn small_classifier() -> ModelConfig {
        ModelConfig::Classification(ClassifierConfig {
            num_classes: 4,
            image: ImageEncoderConfig {
                input_size: 16,
                in_channels: 1,
                width: 8,
                stages: 3,
            },
            text: TextEncoderConfig {
                vocab_size: 64,
                max_len: 16,
                embed_dim: 8,
                width: 8,
                blocks: 1,
            },
            fused_local_dim: 8,
            bilinear_rank: 4,
            fused_global_dim: 8,
            critic_hidden: 8,
            mi: MiLossConfig::default(),
        })
    }

    #[test]
    fn classifier_loss_parts_are_finite() {
        let d = generate_synthetic_classification(&SyntheticConfig {
            num_samples: 8,
            image_size: 16,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let model = Model::new(&small_classifier(), 0).unwrap();
        let batch = &make_batches(&d, 8, 0, 0.4).unwrap().epoch(0).unwrap()[0];
        let w = LossWeights {
            lambda_gg: 0.3,
            ..LossWeights::default()
        };
        let mut g = Graph::new();
        let l = model.loss(&mut g, batch, &w).unwrap();
        for v in [l.ll.unwrap(), l.lg.unwrap(), l.gg.unwrap(), l.task, l.total] {
            assert!(g.scalar(v).is_finite());
        }
        let expected = 0.5 * g.scalar(l.lg.unwrap())
            + g.scalar(l.ll.unwrap())
            + 0.3 * g.scalar(l.gg.unwrap())
            + g.scalar(l.task);
        assert!((g.scalar(l.total) - expected).abs() < 1e-12);
        let p = model.predict_proba(batch).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mi_weights_skip_mi_terms() {
        let d = generate_synthetic_classification(&SyntheticConfig {
            num_samples: 4,
            image_size: 16,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let model = Model::new(&small_classifier(), 0).unwrap();
        let batch = &make_batches(&d, 4, 0, 0.0).unwrap().epoch(0).unwrap()[0];
        let mut g = Graph::new();
        let l = model.loss(&mut g, batch, &LossWeights::default().without_mi()).unwrap();
        assert!(l.ll.is_none() && l.lg.is_none() && l.gg.is_none());
        assert_eq!(g.scalar(l.total), g.scalar(l.task));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(&small_classifier(), 3).unwrap();
        let b = Model::new(&small_classifier(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a, Model::new(&small_classifier(), 4).unwrap());
    }

    #[test]
    fn segmenter_predicts_binary_masks() {
        let cfg = ModelConfig::Segmentation(SegmenterConfig {
            unet: UNetConfig {
                input_size: 16,
                widths: [4, 4, 8, 8],
                num_labels: 2,
            },
            ..SegmenterConfig::default()
        });
        let model = Model::new(&cfg, 0).unwrap();
        let d = generate_synthetic_segmentation(&SyntheticConfig {
            num_samples: 4,
            image_size: 16,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let batch = &make_batches(&d, 4, 0, 0.0).unwrap().epoch(0).unwrap()[0];
        let masks = model.predict_masks(batch).unwrap();
        assert_eq!(masks.dim(), (4, 16, 16));
        assert!(masks.iter().all(|m| *m < 2));
        let mut g = Graph::new();
        let l = model.loss(&mut g, batch, &LossWeights::default()).unwrap();
        assert!(l.ll.is_some() && l.lg.is_none());
        assert!(g.scalar(l.total).is_finite());
        let truth = model.batch_masks(batch).unwrap();
        assert!(truth.iter().all(|m| *m < 2));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig::Segmentation(SegmenterConfig {
            target_class: Some(7),
            ..SegmenterConfig::default()
        });
        assert!(Model::new(&bad, 0).is_err());
        let bad = ModelConfig::Segmentation(SegmenterConfig {
            target_class: None,
            ..SegmenterConfig::default()
        });
        assert!(Model::new(&bad, 0).is_err());
    }
}
