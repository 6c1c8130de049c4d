use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ModalityRecord, Payload, Target, Task};
use crate::encoders::{ModalityId, ModalityKind, PAD_TOKEN};
use crate::error::{CmimError, Result};

pub const CLASSIFICATION_MODALITIES: [&str; 2] = ["image", "text"];
pub const SEGMENTATION_MODALITIES: [&str; 4] = ["flair", "t1", "t1c", "t2"];
/// 0 background, 1 necrotic core, 2 edema, 3 non-enhancing, 4 enhancing.
pub const SEGMENTATION_LABELS: usize = 5;

/// Mean intensity per label for each contrast transform.
fn contrast_preset(id: &str) -> Option<[f64; SEGMENTATION_LABELS]> {
    Some(match id {
        "flair" => [0.1, 0.6, 0.9, 0.6, 0.7],
        // enhancing tissue barely differs from its surroundings
        "t1" => [0.3, 0.2, 0.3, 0.25, 0.5],
        "t1c" => [0.2, 0.3, 0.4, 0.3, 1.0],
        "t2" => [0.2, 0.8, 0.9, 0.7, 0.6],
        "full" => [0.0, 0.25, 0.5, 0.75, 1.0],
        _ => return None,
    })
}

fn default_noise(modality: &str) -> f64 {
    match modality {
        "t1" => 0.3,
        "image" | "text" => 0.3,
        _ => 0.1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub image_size: usize,
    /// Number of classes; ignored for segmentation (always 5 labels).
    pub num_classes: usize,
    /// Per-modality noise level, higher means weaker. Gaussian pixel noise
    /// std for images and slices; distractor rate (capped at 1) for text.
    pub modality_noise: BTreeMap<String, f64>,
    /// Per-slice contrast transform: `flair`, `t1`, `t1c`, `t2` or `full`.
    /// A modality without an entry uses the preset of its own name.
    pub modality_contrast: BTreeMap<String, String>,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_samples: 200,
            image_size: 32,
            num_classes: 4,
            modality_noise: BTreeMap::new(),
            modality_contrast: BTreeMap::new(),
            vocab_size: 64,
            seq_len: 16,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn noise(&self, modality: &str) -> f64 {
        self.modality_noise
            .get(modality)
            .copied()
            .unwrap_or_else(|| default_noise(modality))
    }

    fn contrast(&self, modality: &str) -> Result<[f64; SEGMENTATION_LABELS]> {
        let id = self
            .modality_contrast
            .get(modality)
            .map(String::as_str)
            .unwrap_or(modality);
        contrast_preset(id).ok_or_else(|| CmimError::Config(format!("unknown contrast transform {id:?}")))
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        if self.num_samples == 0 {
            return Err(CmimError::Config("num_samples must be at least 1".into()));
        }
        if self.image_size < 8 {
            return Err(CmimError::Config("image_size must be at least 8".into()));
        }
        let known: &[&str] = match task {
            Task::Classification => &CLASSIFICATION_MODALITIES,
            Task::Segmentation => &SEGMENTATION_MODALITIES,
        };
        for (m, v) in &self.modality_noise {
            if !known.contains(&m.as_str()) {
                return Err(CmimError::UnknownModality(m.clone()));
            }
            if !v.is_finite() || *v < 0.0 {
                return Err(CmimError::Config(format!("noise for {m} must be finite and >= 0")));
            }
        }
        match task {
            Task::Classification => {
                if self.num_classes < 2 {
                    return Err(CmimError::Config("num_classes must be at least 2".into()));
                }
                let grid = grid_side(self.num_classes);
                if self.image_size / grid < 3 {
                    return Err(CmimError::Config(format!(
                        "image_size {} too small for {} classes",
                        self.image_size, self.num_classes
                    )));
                }
                if self.vocab_size < 2 * self.num_classes + 2 {
                    return Err(CmimError::Config(format!(
                        "vocab_size must be at least {}",
                        2 * self.num_classes + 2
                    )));
                }
                if self.seq_len < 2 {
                    return Err(CmimError::Config("seq_len must be at least 2".into()));
                }
                if !self.modality_contrast.is_empty() {
                    return Err(CmimError::Config(
                        "modality_contrast applies to segmentation only".into(),
                    ));
                }
            }
            Task::Segmentation => {
                for m in self.modality_contrast.keys() {
                    if !SEGMENTATION_MODALITIES.contains(&m.as_str()) {
                        return Err(CmimError::UnknownModality(m.clone()));
                    }
                }
                for m in SEGMENTATION_MODALITIES {
                    self.contrast(m)?;
                }
            }
        }
        Ok(())
    }
}

fn grid_side(classes: usize) -> usize {
    (classes as f64).sqrt().ceil() as usize
}

/// Class `k` draws a bright square inside cell `k` of a grid laid over the
/// image; its text holds the class's two keyword tokens mixed with
/// distractors.
pub fn generate_synthetic_classification(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate(Task::Classification)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.num_classes;
    let mut labels: Vec<usize> = (0..cfg.num_samples).map(|i| i % k).collect();
    labels.shuffle(&mut rng);

    let s = cfg.image_size;
    let grid = grid_side(k);
    let cell = s / grid;
    let side = (cell * 5 / 8).max(2);
    let pixel_noise = Normal::new(0.0, cfg.noise("image").max(f64::MIN_POSITIVE))
        .map_err(|e| CmimError::Config(e.to_string()))?;
    let image_noise = cfg.noise("image");
    let distractor_rate = cfg.noise("text").min(1.0);
    let first_distractor = 1 + 2 * k;

    let mut records = Vec::with_capacity(cfg.num_samples);
    for (i, &label) in labels.iter().enumerate() {
        let (row, col) = (label / grid, label % grid);
        let oy = row * cell + rng.random_range(0..=cell - side);
        let ox = col * cell + rng.random_range(0..=cell - side);
        let image = Array2::from_shape_fn((s, s), |(y, x)| {
            let inside = (oy..oy + side).contains(&y) && (ox..ox + side).contains(&x);
            f64::from(u8::from(inside))
        })
        .mapv(|v| {
            let n = if image_noise > 0.0 { pixel_noise.sample(&mut rng) } else { 0.0 };
            (v + n).clamp(0.0, 1.0)
        });

        let len = rng.random_range(cfg.seq_len / 2..=cfg.seq_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| {
                if rng.random::<f64>() < distractor_rate {
                    rng.random_range(first_distractor..cfg.vocab_size.max(first_distractor + 1))
                } else {
                    1 + 2 * label + rng.random_range(0..2)
                }
            })
            .collect();
        debug_assert!(tokens.iter().all(|t| *t != PAD_TOKEN));

        let mut payloads = BTreeMap::new();
        payloads.insert("image".to_string(), Payload::Image(image));
        payloads.insert("text".to_string(), Payload::Tokens(tokens));
        records.push(ModalityRecord {
            id: format!("s{i:05}"),
            payloads,
            target: Target::Label(label),
        });
    }
    Ok(Dataset {
        task: Task::Classification,
        modalities: vec![
            ModalityId::new("image", ModalityKind::Image2D),
            ModalityId::new("text", ModalityKind::TokenSequence),
        ],
        num_classes: k,
        records,
    })
}

/// Irregular ellipse: radius modulated by a low-frequency wobble.
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
}

impl Blob {
    fn random<R: Rng>(rng: &mut R, cy: f64, cx: f64, ry: f64, rx: f64) -> Self {
        Self {
            cy,
            cx,
            ry,
            rx,
            wobble: rng.random_range(0.0..0.15),
            lobes: f64::from(rng.random_range(2u8..5)),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        let r = (dy * dy + dx * dx).sqrt();
        let theta = dy.atan2(dx);
        r <= 1.0 + self.wobble * (self.lobes * theta + self.phase).sin()
    }
}

fn label_field<R: Rng>(rng: &mut R, s: usize) -> Array2<usize> {
    let sf = s as f64;
    let cy = rng.random_range(0.3 * sf..0.7 * sf);
    let cx = rng.random_range(0.3 * sf..0.7 * sf);
    let ry = rng.random_range(sf / 5.0..sf / 3.5);
    let rx = rng.random_range(sf / 5.0..sf / 3.5);
    let edema = Blob::random(rng, cy, cx, ry, rx);
    let off = |rng: &mut R, r: f64| rng.random_range(-0.3 * r..0.3 * r);
    let (ny, nx) = (cy + 2.5 * off(rng, ry), cx + 2.5 * off(rng, rx));
    let non_enh = Blob::random(rng, ny, nx, 0.3 * ry, 0.3 * rx);
    let (ey, ex) = (cy + 0.3 * off(rng, ry), cx + 0.3 * off(rng, rx));
    let f = rng.random_range(0.6..0.8);
    let enhancing = Blob::random(rng, ey, ex, f * ry, f * rx);
    let c = rng.random_range(0.2..0.4);
    let core = Blob::random(rng, ey, ex, c * ry, c * rx);

    Array2::from_shape_fn((s, s), |(y, x)| {
        let (y, x) = (y as f64 + 0.5, x as f64 + 0.5);
        if core.contains(y, x) {
            1
        } else if enhancing.contains(y, x) {
            4
        } else if non_enh.contains(y, x) {
            3
        } else if edema.contains(y, x) {
            2
        } else {
            0
        }
    })
}

/// Blob-shaped tumour label fields rendered through four contrast transforms,
/// each with its own noise level.
pub fn generate_synthetic_segmentation(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate(Task::Segmentation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let mut channels = Vec::new();
    for m in SEGMENTATION_MODALITIES {
        let sigma = cfg.noise(m);
        let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| CmimError::Config(e.to_string()))?;
        channels.push((m, cfg.contrast(m)?, sigma, normal));
    }

    let mut records = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let mask = label_field(&mut rng, s);
        let mut payloads = BTreeMap::new();
        for (m, contrast, sigma, normal) in &channels {
            let slice = mask.mapv(|l| {
                let n = if *sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                (contrast[l] + n).clamp(0.0, 1.0)
            });
            payloads.insert(m.to_string(), Payload::Image(slice));
        }
        records.push(ModalityRecord {
            id: format!("s{i:05}"),
            payloads,
            target: Target::Mask(mask),
        });
    }
    Ok(Dataset {
        task: Task::Segmentation,
        modalities: SEGMENTATION_MODALITIES
            .iter()
            .map(|m| ModalityId::new(*m, ModalityKind::VolumeChannel))
            .collect(),
        num_classes: SEGMENTATION_LABELS,
        records,
    })
}
