//! Binary checkpoint container.
//!
//! Layout, all integers little-endian: magic `CMIM`, format version `u32`,
//! tensor count `u32`, then per tensor: name length `u32`, UTF-8 name,
//! dtype tag `u8` (0 = f64, 1 = raw bytes, 2 = i64), rank `u32`, dims
//! `u64` each, payload length `u64`, payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::autograd::Tensor;
use crate::error::{CmimError, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};

const MAGIC: &[u8; 4] = b"CMIM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// First and second moments keyed by parameter name.
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Digest of the configuration the run was trained under.
    pub fingerprint: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_metric: f64,
    /// Parameters in model order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&Adam>, epoch: usize, best_metric: f64, fingerprint: &str) -> Self {
        let store = &model.store;
        let params = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).clone()))
            .collect();
        let optimizer = optimizer.map(|adam| {
            let (step, first, second) = adam.state();
            let by_name = |m: &BTreeMap<_, Tensor>| {
                m.iter()
                    .map(|(id, t)| (store.name(*id).to_string(), t.clone()))
                    .collect()
            };
            OptimizerState {
                step,
                first: by_name(first),
                second: by_name(second),
            }
        });
        Self {
            config: model.config().clone(),
            fingerprint: fingerprint.to_string(),
            epoch,
            best_metric,
            params,
            optimizer,
        }
    }

    /// Rebuilds the model and copies every stored parameter into it.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config, 0)?;
        if model.store.len() != self.params.len() {
            return Err(CmimError::invalid(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| CmimError::invalid(format!("unknown parameter {name}")))?;
            if model.store.get(id).shape() != value.shape() {
                return Err(CmimError::Shape(format!(
                    "parameter {name} is {:?}, model expects {:?}",
                    value.shape(),
                    model.store.get(id).shape()
                )));
            }
            model.store.set(id, value.clone());
        }
        Ok(model)
    }

    /// Optimizer restored against `model`'s parameter ids.
    pub fn to_optimizer(&self, model: &Model, config: AdamConfig) -> Result<Adam> {
        let Some(state) = &self.optimizer else {
            return Ok(Adam::new(config));
        };
        let by_id = |m: &BTreeMap<String, Tensor>| {
            m.iter()
                .map(|(name, t)| {
                    model
                        .store
                        .id(name)
                        .map(|id| (id, t.clone()))
                        .ok_or_else(|| CmimError::invalid(format!("unknown optimizer slot {name}")))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        };
        Ok(Adam::restore(config, state.step, by_id(&state.first)?, by_id(&state.second)?))
    }

    /// Logs a warning when the checkpoint was written under another
    /// configuration; returns whether the fingerprints match.
    pub fn check_fingerprint(&self, expected: &str) -> bool {
        if self.fingerprint != expected {
            log::warn!(
                "checkpoint config fingerprint {} differs from the current config {}",
                self.fingerprint,
                expected
            );
            return false;
        }
        true
    }
}

enum Entry {
    F64(Tensor),
    Bytes(Vec<u8>),
    I64(i64),
}

fn push_entry(out: &mut Vec<u8>, name: &str, entry: &Entry) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    let (tag, dims, payload): (u8, Vec<usize>, Vec<u8>) = match entry {
        Entry::F64(t) => (
            0,
            t.shape().to_vec(),
            t.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        Entry::Bytes(b) => (1, vec![b.len()], b.clone()),
        Entry::I64(v) => (2, vec![], v.to_le_bytes().to_vec()),
    };
    out.push(tag);
    out.extend((dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend((d as u64).to_le_bytes());
    }
    out.extend((payload.len() as u64).to_le_bytes());
    out.extend(payload);
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let config = serde_json::to_vec(&ckpt.config).expect("config serializes");
    let mut entries: Vec<(String, Entry)> = vec![
        ("meta/model_config".into(), Entry::Bytes(config)),
        ("meta/fingerprint".into(), Entry::Bytes(ckpt.fingerprint.as_bytes().to_vec())),
        ("meta/epoch".into(), Entry::I64(ckpt.epoch as i64)),
        (
            "meta/best_metric".into(),
            Entry::F64(ArrayD::from_elem(IxDyn(&[]), ckpt.best_metric)),
        ),
    ];
    for (name, t) in &ckpt.params {
        entries.push((format!("param/{name}"), Entry::F64(t.clone())));
    }
    if let Some(opt) = &ckpt.optimizer {
        entries.push(("optim/step".into(), Entry::I64(opt.step as i64)));
        for (name, t) in &opt.first {
            entries.push((format!("optim/m/{name}"), Entry::F64(t.clone())));
        }
        for (name, t) in &opt.second {
            entries.push((format!("optim/v/{name}"), Entry::F64(t.clone())));
        }
    }
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, e) in &entries {
        push_entry(&mut out, name, e);
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> CmimError {
        CmimError::Checkpoint {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.fail(format!("truncated: needed {n} more bytes")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.fail(format!("rank {rank} of {name}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        let elems = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let entry = match tag {
            0 => {
                if elems.and_then(|e| e.checked_mul(8)) != Some(len) {
                    r.pos = start;
                    return Err(r.fail(format!("payload length of {name} does not match its shape")));
                }
                let values = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Entry::F64(ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length checked"))
            }
            1 => Entry::Bytes(payload.to_vec()),
            2 if len == 8 => Entry::I64(i64::from_le_bytes(payload.try_into().expect("8 bytes"))),
            _ => {
                r.pos = start;
                return Err(r.fail(format!("bad dtype {tag} for {name}")));
            }
        };
        entries.push((name, entry, start));
    }
    if r.pos != data.len() {
        return Err(r.fail("trailing bytes"));
    }

    let mut config = None;
    let mut fingerprint = String::new();
    let (mut epoch, mut best_metric, mut step) = (0, f64::NEG_INFINITY, None);
    let mut params = Vec::new();
    let (mut first, mut second) = (BTreeMap::new(), BTreeMap::new());
    for (name, entry, offset) in entries {
        let bad = |m: &str| CmimError::Checkpoint {
            offset: offset as u64,
            message: format!("{name}: {m}"),
        };
        match (name.as_str(), entry) {
            ("meta/model_config", Entry::Bytes(b)) => {
                config = Some(serde_json::from_slice::<ModelConfig>(&b).map_err(|e| bad(&e.to_string()))?)
            }
            ("meta/fingerprint", Entry::Bytes(b)) => {
                fingerprint = String::from_utf8(b).map_err(|_| bad("not UTF-8"))?
            }
            ("meta/epoch", Entry::I64(v)) => epoch = usize::try_from(v).map_err(|_| bad("negative"))?,
            ("meta/best_metric", Entry::F64(t)) => best_metric = t.iter().next().copied().ok_or_else(|| bad("empty"))?,
            ("optim/step", Entry::I64(v)) => step = Some(u64::try_from(v).map_err(|_| bad("negative"))?),
            (n, Entry::F64(t)) => {
                if let Some(p) = n.strip_prefix("param/") {
                    params.push((p.to_string(), t));
                } else if let Some(p) = n.strip_prefix("optim/m/") {
                    first.insert(p.to_string(), t);
                } else if let Some(p) = n.strip_prefix("optim/v/") {
                    second.insert(p.to_string(), t);
                } else {
                    return Err(bad("unexpected tensor"));
                }
            }
            _ => return Err(bad("unexpected entry")),
        }
    }
    let config = config.ok_or_else(|| CmimError::Checkpoint {
        offset: data.len() as u64,
        message: "missing model config".into(),
    })?;
    Ok(Checkpoint {
        config,
        fingerprint,
        epoch,
        best_metric,
        params,
        optimizer: step.map(|step| OptimizerState { step, first, second }),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CmimError::MissingFile(path.to_path_buf()),
        _ => CmimError::Io(e),
    })?;
    decode_checkpoint(&data)
}
