//! Training loop with validation-based early stopping.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{make_batches, Dataset};
use crate::error::{CmimError, Result};
use crate::evaluation::{evaluate, MetricsRow};
use crate::losses::LossWeights;
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Subsets whose validation metrics are averaged for early stopping;
    /// empty means every single modality.
    pub eval_modality_schedule: Vec<Vec<String>>,
    pub clip_norm: f64,
    /// Per-sample probability of hiding each modality during training.
    pub train_modality_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            weights: LossWeights::default(),
            seed: 0,
            eval_modality_schedule: Vec::new(),
            clip_norm: 5.0,
            train_modality_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CmimError::Config("learning_rate must be positive".into()));
        }
        if self.patience == 0 {
            return Err(CmimError::Config("patience must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CmimError::Config("batch_size must be at least 2".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(CmimError::Config("clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train_modality_dropout) {
            return Err(CmimError::Config("train_modality_dropout must lie in [0, 1)".into()));
        }
        if self.eval_modality_schedule.iter().any(Vec::is_empty) {
            return Err(CmimError::Config("empty subset in eval_modality_schedule".into()));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// The configured schedule, or every single modality of `model`.
    pub fn schedule(&self, model: &Model) -> Vec<Vec<String>> {
        if self.eval_modality_schedule.is_empty() {
            model.modalities().iter().map(|m| vec![m.clone()]).collect()
        } else {
            self.eval_modality_schedule.clone()
        }
    }
}

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub modality_subset: String,
    pub metric_name: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<MetricRecord>,
}

impl History {
    fn push(&mut self, epoch: usize, split: &str, subset: &str, name: &str, value: f64) {
        self.records.push(MetricRecord {
            epoch,
            split: split.into(),
            modality_subset: subset.into(),
            metric_name: name.into(),
            value,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,modality_subset,metric_name,value\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.split, r.modality_subset, r.metric_name, r.value
            );
        }
        out
    }

    /// Values of one training metric, in epoch order.
    pub fn series(&self, split: &str, metric_name: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric_name == metric_name)
            .map(|r| r.value)
            .collect()
    }
}

/// Model, optimizer and progress; what a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_metric: f64,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        Self {
            model,
            optimizer: Adam::new(cfg.adam()),
            epoch: 0,
            best_metric: f64::NEG_INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot taken at the epoch with the best validation score.
    pub best: TrainState,
    /// State after the last epoch run.
    pub last: TrainState,
    pub history: History,
}

/// Per-subset validation rows; the early-stopping score is their mean.
pub type Validator<'a> = dyn Fn(&Model, &Dataset) -> Result<Vec<MetricsRow>> + 'a;

/// Trains from scratch with the default validator.
pub fn train(model: Model, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let schedule = cfg.schedule(&model);
    let validator = move |m: &Model, d: &Dataset| schedule.iter().map(|s| evaluate(m, d, s)).collect();
    train_from(TrainState::new(model, cfg), train_set, val_set, cfg, &validator)
}

/// One optimizer step on a batch; returns the named loss values.
pub fn train_step(
    state: &mut TrainState,
    batch: &crate::data::ModalityBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<(&'static str, f64)>> {
    let mut g = Graph::new();
    let lv = state.model.loss(&mut g, batch, &cfg.weights)?;
    let parts = [
        ("loss_ll", lv.ll),
        ("loss_lg", lv.lg),
        ("loss_gg", lv.gg),
        ("loss_task", Some(lv.task)),
        ("loss_total", Some(lv.total)),
    ];
    let mut values = Vec::new();
    for (name, v) in parts {
        if let Some(v) = v {
            let x = g.scalar(v);
            if !x.is_finite() {
                return Err(CmimError::NonFinite {
                    component: name.trim_start_matches("loss_").to_string(),
                    epoch: state.epoch + 1,
                    step,
                });
            }
            values.push((name, x));
        }
    }
    let mut grads = g.backward(lv.total);
    let store = &state.model.store;
    grads.retain_params(|id| store.is_trainable(id));
    let norm = grads.clip_global_norm(cfg.clip_norm);
    if !norm.is_finite() {
        return Err(CmimError::NonFinite {
            component: "gradient".into(),
            epoch: state.epoch + 1,
            step,
        });
    }
    state.optimizer.step(&mut state.model.store, &grads);
    if !state.model.store.all_finite() {
        return Err(CmimError::NonFinite {
            component: "parameters".into(),
            epoch: state.epoch + 1,
            step,
        });
    }
    Ok(values)
}

/// Continues training from `state` (epoch numbering resumes after
/// `state.epoch`) until `cfg.max_epochs` or early stopping.
pub fn train_from(
    mut state: TrainState,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    validator: &Validator<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.task != state.model.task() || train_set.modality_names() != state.model.modalities() {
        return Err(CmimError::invalid("training set does not fit the model"));
    }
    state.optimizer.config = cfg.adam();
    let batcher = make_batches(train_set, cfg.batch_size, cfg.seed, cfg.train_modality_dropout)?;
    let mut history = History::default();
    let mut best = state.clone();
    let mut stale = 0;
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let batches = batcher.epoch(epoch)?;
        let mut sums: Vec<(&'static str, f64, usize)> = Vec::new();
        for (step, batch) in batches.iter().enumerate() {
            for (name, v) in train_step(&mut state, batch, cfg, step)? {
                match sums.iter_mut().find(|(n, _, _)| *n == name) {
                    Some(e) => {
                        e.1 += v;
                        e.2 += 1;
                    }
                    None => sums.push((name, v, 1)),
                }
            }
        }
        state.epoch = epoch;
        for (name, sum, n) in &sums {
            history.push(epoch, "train", "all", name, sum / *n as f64);
        }

        let rows = validator(&state.model, val_set)?;
        if rows.is_empty() {
            return Err(CmimError::invalid("validator returned no rows"));
        }
        for r in &rows {
            history.push(epoch, "val", &r.subset_label(), r.metric.name(), r.value);
        }
        let score = rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
        history.push(epoch, "val", "schedule_mean", rows[0].metric.name(), score);
        log::info!("epoch {epoch}: validation {score:.4}");

        if score > state.best_metric {
            state.best_metric = score;
            best = state.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: state,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_classification, SyntheticConfig};
    use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
    use crate::evaluation::Metric;
    use crate::model::{ClassifierConfig, ModelConfig};

    fn tiny() -> (Model, Dataset) {
        let cfg = ModelConfig::Classification(ClassifierConfig {
            num_classes: 4,
            image: ImageEncoderConfig {
                input_size: 16,
                in_channels: 1,
                width: 4,
                stages: 2,
            },
            text: TextEncoderConfig {
                vocab_size: 64,
                max_len: 16,
                embed_dim: 4,
                width: 4,
                blocks: 1,
            },
            fused_local_dim: 4,
            bilinear_rank: 2,
            fused_global_dim: 4,
            critic_hidden: 4,
            ..ClassifierConfig::default()
        });
        let data = generate_synthetic_classification(&SyntheticConfig {
            num_samples: 12,
            image_size: 16,
            ..SyntheticConfig::default()
        })
        .unwrap();
        (Model::new(&cfg, 0).unwrap(), data)
    }

    #[test]
    fn constant_metric_with_patience_one_stops_after_two_epochs() {
        let (model, data) = tiny();
        let cfg = TrainConfig {
            patience: 1,
            max_epochs: 10,
            batch_size: 6,
            ..TrainConfig::default()
        };
        let constant = |_: &Model, _: &Dataset| {
            Ok(vec![MetricsRow {
                subset: vec!["image".into()],
                metric: Metric::Auc,
                value: 0.5,
                n: 1,
            }])
        };
        let out = train_from(TrainState::new(model, &cfg), &data, &data, &cfg, &constant).unwrap();
        assert_eq!(out.last.epoch, 2);
        assert_eq!(out.best.epoch, 1);
    }

    #[test]
    fn best_snapshot_is_kept_not_the_last() {
        let (model, data) = tiny();
        let cfg = TrainConfig {
            patience: 5,
            max_epochs: 3,
            batch_size: 6,
            ..TrainConfig::default()
        };
        let calls = std::cell::Cell::new(0);
        let falling = |_: &Model, _: &Dataset| {
            calls.set(calls.get() + 1);
            Ok(vec![MetricsRow {
                subset: vec!["image".into()],
                metric: Metric::Auc,
                value: 1.0 / calls.get() as f64,
                n: 1,
            }])
        };
        let out = train_from(TrainState::new(model, &cfg), &data, &data, &cfg, &falling).unwrap();
        assert_eq!(out.best.epoch, 1);
        assert_eq!(out.best.best_metric, 1.0);
        assert_eq!(out.last.epoch, 3);
        assert_ne!(out.best.model, out.last.model);
    }

    #[test]
    fn non_finite_loss_names_the_component() {
        let (mut model, data) = tiny();
        let head = model.store.ids().find(|id| model.store.name(*id) == "head.w").unwrap();
        model.store.get_mut(head).fill(f64::NAN);
        let cfg = TrainConfig {
            batch_size: 6,
            ..TrainConfig::default()
        };
        let err = train(model, &data, &data, &cfg).unwrap_err();
        match err {
            CmimError::NonFinite { component, epoch, step } => {
                assert_eq!((component.as_str(), epoch, step), ("task", 1, 0));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn invalid_train_configs() {
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 1, ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(CmimError::Config(_))));
        }
    }
}
