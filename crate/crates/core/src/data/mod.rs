//! Datasets: synthetic generators, manifest ingestion and batching.

mod batch;
mod manifest;
mod synthetic;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::{ModalityId, ModalityKind};
use crate::error::{CmimError, Result};

pub use batch::{collate, make_batches, BatchTarget, Batcher, ModalityBatch, ModalityInput};
pub use manifest::{load_manifest, load_manifest_split, load_manifest_splits, write_dataset, ManifestLine};
pub use synthetic::{
    generate_synthetic_classification, generate_synthetic_segmentation, SyntheticConfig,
    CLASSIFICATION_MODALITIES, SEGMENTATION_LABELS, SEGMENTATION_MODALITIES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
}

/// Kind of a modality from its manifest field name.
pub fn modality_kind(name: &str) -> Result<ModalityKind> {
    match name {
        "image" => Ok(ModalityKind::Image2D),
        "text" => Ok(ModalityKind::TokenSequence),
        "flair" | "t1" | "t1c" | "t2" => Ok(ModalityKind::VolumeChannel),
        other => Err(CmimError::UnknownModality(other.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Grayscale values in `[0, 1]`.
    Image(Array2<f64>),
    /// Unpadded token ids.
    Tokens(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Label(usize),
    Mask(Array2<usize>),
}

/// One subject: payloads of the modalities it has, plus its target.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityRecord {
    pub id: String,
    pub payloads: BTreeMap<String, Payload>,
    pub target: Target,
}

impl ModalityRecord {
    pub fn has(&self, modality: &str) -> bool {
        self.payloads.contains_key(modality)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub modalities: Vec<ModalityId>,
    /// Classes (classification) or mask labels (segmentation).
    pub num_classes: usize,
    pub records: Vec<ModalityRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| CmimError::UnknownModality(name.to_string()))
    }

    /// `[n, M]` presence flags in modality order.
    pub fn present_mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.len(), self.modalities.len()), |(i, m)| {
            self.records[i].has(&self.modalities[m].name)
        })
    }

    /// Longest token sequence over all text payloads (0 without text).
    pub fn max_tokens(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| r.payloads.values())
            .filter_map(|p| match p {
                Payload::Tokens(t) => Some(t.len()),
                Payload::Image(_) => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Checks targets, payload kinds and that every record has a modality.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if !self.modalities.iter().any(|m| r.has(&m.name)) {
                return Err(CmimError::invalid(format!("record {} has no modality", r.id)));
            }
            for name in r.payloads.keys() {
                self.modality_index(name)?;
            }
            match (&r.target, self.task) {
                (Target::Label(l), Task::Classification) => {
                    if *l >= self.num_classes {
                        return Err(CmimError::LabelOutOfRange {
                            label: *l,
                            classes: self.num_classes,
                        });
                    }
                }
                (Target::Mask(m), Task::Segmentation) => {
                    if let Some(l) = m.iter().find(|l| **l >= self.num_classes) {
                        return Err(CmimError::LabelOutOfRange {
                            label: *l,
                            classes: self.num_classes,
                        });
                    }
                }
                _ => {
                    return Err(CmimError::invalid(format!(
                        "record {} target does not match the {:?} task",
                        r.id, self.task
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            modalities: self.modalities.clone(),
            num_classes: self.num_classes,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Splits into consecutive train/val/test parts by fractions of the
    /// record count (test takes the rest).
    pub fn split(&self, train: f64, val: f64) -> Result<(Dataset, Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 {
            return Err(CmimError::Config(format!("invalid split fractions {train}, {val}")));
        }
        let n = self.len();
        let a = (n as f64 * train).round() as usize;
        let b = (a + (n as f64 * val).round() as usize).min(n);
        let idx: Vec<usize> = (0..n).collect();
        Ok((self.subset(&idx[..a]), self.subset(&idx[a..b]), self.subset(&idx[b..])))
    }

    /// Per-class sample counts (classification) or per-label pixel counts
    /// (segmentation).
    pub fn target_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in &self.records {
            match &r.target {
                Target::Label(l) => counts[*l] += 1,
                Target::Mask(m) => m.iter().for_each(|l| counts[*l] += 1),
            }
        }
        counts
    }
}

/// `1` where `mask == target_class`, else `0`.
pub fn binarize_target(mask: &Array2<usize>, target_class: usize, num_labels: usize) -> Result<Array2<usize>> {
    if target_class >= num_labels {
        return Err(CmimError::LabelOutOfRange {
            label: target_class,
            classes: num_labels,
        });
    }
    Ok(mask.mapv(|l| usize::from(l == target_class)))
}
