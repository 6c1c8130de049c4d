use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Payload, Target};
use crate::encoders::{ModalityKind, PAD_TOKEN};
use crate::error::{CmimError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ModalityInput {
    /// `[B, H, W, 1]`, zeros for samples missing the modality.
    Image(ArrayD<f64>),
    /// `[B, L]` right-padded, all pad for samples missing the modality.
    Tokens(Array2<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchTarget {
    Labels(Vec<usize>),
    /// `[B, H, W]`
    Masks(Array3<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    pub ids: Vec<String>,
    /// One entry per dataset modality; `None` when no sample has it.
    pub inputs: Vec<Option<ModalityInput>>,
    /// `[B, M]`
    pub present: Array2<bool>,
    pub target: BatchTarget,
    pub pairing_seed: u64,
}

impl ModalityBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks that every array shares the batch dimension and that the
    /// present mask agrees with the inputs.
    pub fn validate(&self) -> Result<()> {
        let b = self.ids.len();
        let err = |msg: String| Err(CmimError::Shape(msg));
        if self.present.nrows() != b || self.present.ncols() != self.inputs.len() {
            return err(format!("present mask {:?} for {b} samples", self.present.dim()));
        }
        for (m, input) in self.inputs.iter().enumerate() {
            let column = self.present.column(m);
            match input {
                None if column.iter().any(|p| *p) => {
                    return err(format!("modality {m} flagged present without input"))
                }
                None => {}
                Some(ModalityInput::Image(a)) => {
                    if a.ndim() != 4 || a.shape()[0] != b || a.shape()[3] != 1 {
                        return err(format!("image input shape {:?}", a.shape()));
                    }
                    for (i, p) in column.iter().enumerate() {
                        if !p && a.index_axis(ndarray::Axis(0), i).iter().any(|v| *v != 0.0) {
                            return err(format!("absent modality {m} has data in row {i}"));
                        }
                    }
                }
                Some(ModalityInput::Tokens(t)) => {
                    if t.nrows() != b {
                        return err(format!("token input shape {:?}", t.dim()));
                    }
                    for (i, p) in column.iter().enumerate() {
                        let empty = t.row(i).iter().all(|x| *x == PAD_TOKEN);
                        if *p == empty {
                            return err(format!("token row {i} disagrees with present mask"));
                        }
                    }
                }
            }
        }
        for (i, row) in self.present.rows().into_iter().enumerate() {
            if !row.iter().any(|p| *p) {
                return err(format!("sample {i} has no modality present"));
            }
        }
        match &self.target {
            BatchTarget::Labels(l) if l.len() != b => err(format!("{} labels for {b} samples", l.len())),
            BatchTarget::Masks(m) if m.dim().0 != b => err(format!("{} masks for {b} samples", m.dim().0)),
            _ => Ok(()),
        }
    }
}

/// Assembles samples `indices` into a batch; `present[[k, m]]` selects which
/// modalities of sample `k` are fed. Flags for modalities a record lacks are
/// ignored.
pub fn collate(dataset: &Dataset, indices: &[usize], present: &Array2<bool>, pairing_seed: u64) -> Result<ModalityBatch> {
    let b = indices.len();
    let m = dataset.modalities.len();
    if present.dim() != (b, m) {
        return Err(CmimError::Shape(format!("present mask {:?} for ({b}, {m})", present.dim())));
    }
    let records: Vec<_> = indices.iter().map(|&i| &dataset.records[i]).collect();
    let mut mask = present.clone();
    for (k, r) in records.iter().enumerate() {
        for (j, id) in dataset.modalities.iter().enumerate() {
            mask[[k, j]] &= r.has(&id.name);
        }
    }

    let max_tokens = dataset.max_tokens().max(1);
    let mut inputs = Vec::with_capacity(m);
    for (j, id) in dataset.modalities.iter().enumerate() {
        if !mask.column(j).iter().any(|p| *p) {
            inputs.push(None);
            continue;
        }
        let input = match id.kind {
            ModalityKind::TokenSequence => {
                let mut t = Array2::from_elem((b, max_tokens), PAD_TOKEN);
                for (k, r) in records.iter().enumerate() {
                    if let (true, Some(Payload::Tokens(tok))) = (mask[[k, j]], r.payloads.get(&id.name)) {
                        for (x, v) in t.row_mut(k).iter_mut().zip(tok) {
                            *x = *v;
                        }
                    }
                }
                ModalityInput::Tokens(t)
            }
            ModalityKind::Image2D | ModalityKind::VolumeChannel => {
                let (h, w) = records
                    .iter()
                    .zip(mask.column(j))
                    .find_map(|(r, p)| match (p, r.payloads.get(&id.name)) {
                        (true, Some(Payload::Image(a))) => Some(a.dim()),
                        _ => None,
                    })
                    .ok_or_else(|| CmimError::invalid(format!("{} payload is not an image", id.name)))?;
                let mut a = ArrayD::zeros(IxDyn(&[b, h, w, 1]));
                for (k, r) in records.iter().enumerate() {
                    if !mask[[k, j]] {
                        continue;
                    }
                    let Some(Payload::Image(img)) = r.payloads.get(&id.name) else {
                        return Err(CmimError::invalid(format!("{} payload is not an image", id.name)));
                    };
                    if img.dim() != (h, w) {
                        return Err(CmimError::Shape(format!(
                            "{} of {} is {:?}, batch uses {:?}",
                            id.name,
                            r.id,
                            img.dim(),
                            (h, w)
                        )));
                    }
                    for ((y, x), v) in img.indexed_iter() {
                        a[[k, y, x, 0]] = *v;
                    }
                }
                ModalityInput::Image(a)
            }
        };
        inputs.push(Some(input));
    }

    let target = match &records.first().map(|r| &r.target) {
        Some(Target::Mask(first)) => {
            let (h, w) = first.dim();
            let mut masks = Array3::zeros((b, h, w));
            for (k, r) in records.iter().enumerate() {
                let Target::Mask(mk) = &r.target else {
                    return Err(CmimError::invalid("mixed targets in one batch"));
                };
                if mk.dim() != (h, w) {
                    return Err(CmimError::Shape(format!("mask of {} is {:?}", r.id, mk.dim())));
                }
                masks.index_axis_mut(ndarray::Axis(0), k).assign(mk);
            }
            BatchTarget::Masks(masks)
        }
        _ => BatchTarget::Labels(
            records
                .iter()
                .map(|r| match r.target {
                    Target::Label(l) => Ok(l),
                    Target::Mask(_) => Err(CmimError::invalid("mixed targets in one batch")),
                })
                .collect::<Result<_>>()?,
        ),
    };

    let batch = ModalityBatch {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        inputs,
        present: mask,
        target,
        pairing_seed,
    };
    batch.validate()?;
    Ok(batch)
}

/// Seeded epoch-wise batch stream over a dataset.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    dropout: f64,
}

/// Builds a batch stream. Batches hold at least two samples, since the MI
/// losses need a mismatched pair; a trailing single sample is dropped.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64, train_modality_dropout: f64) -> Result<Batcher<'_>> {
    if batch_size < 2 {
        return Err(CmimError::InsufficientBatch(batch_size));
    }
    if dataset.len() < 2 {
        return Err(CmimError::InsufficientBatch(dataset.len()));
    }
    if !(0.0..1.0).contains(&train_modality_dropout) {
        return Err(CmimError::Config(format!(
            "modality dropout {train_modality_dropout} must lie in [0, 1)"
        )));
    }
    Ok(Batcher {
        dataset,
        batch_size,
        seed,
        dropout: train_modality_dropout,
    })
}

impl Batcher<'_> {
    /// Presence flags after dropout: each present modality is dropped
    /// independently, and if that would leave nothing the sample keeps all.
    fn drop_modalities<R: Rng>(&self, rng: &mut R, index: usize) -> Vec<bool> {
        let record = &self.dataset.records[index];
        let have: Vec<bool> = self.dataset.modalities.iter().map(|m| record.has(&m.name)).collect();
        if self.dropout == 0.0 {
            return have;
        }
        let kept: Vec<bool> = have.iter().map(|h| *h && rng.random::<f64>() >= self.dropout).collect();
        if kept.iter().any(|k| *k) {
            kept
        } else {
            have
        }
    }

    pub fn epoch(&self, epoch: usize) -> Result<Vec<ModalityBatch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut rng);
        let m = self.dataset.modalities.len();
        let mut batches = Vec::new();
        for chunk in order.chunks(self.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut present = Array2::from_elem((chunk.len(), m), false);
            for (k, &i) in chunk.iter().enumerate() {
                for (j, p) in self.drop_modalities(&mut rng, i).into_iter().enumerate() {
                    present[[k, j]] = p;
                }
            }
            let pairing_seed = rng.random();
            batches.push(collate(self.dataset, chunk, &present, pairing_seed)?);
        }
        Ok(batches)
    }
}
