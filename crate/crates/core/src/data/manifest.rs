use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{modality_kind, Dataset, ModalityRecord, Payload, Target, Task};
use crate::encoders::{ModalityId, ModalityKind};
use crate::error::{CmimError, Result};

/// Manifest fields naming per-modality payload files, in canonical order.
const PAYLOAD_FIELDS: [&str; 6] = ["image", "text", "flair", "t1", "t1c", "t2"];

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flair: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1c: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2: Option<String>,
}

impl ManifestLine {
    fn payload(&self, field: &str) -> Option<&String> {
        match field {
            "image" => self.image.as_ref(),
            "text" => self.text.as_ref(),
            "flair" => self.flair.as_ref(),
            "t1" => self.t1.as_ref(),
            "t1c" => self.t1c.as_ref(),
            "t2" => self.t2.as_ref(),
            _ => None,
        }
    }

    fn set_payload(&mut self, field: &str, path: String) {
        let slot = match field {
            "image" => &mut self.image,
            "text" => &mut self.text,
            "flair" => &mut self.flair,
            "t1" => &mut self.t1,
            "t1c" => &mut self.t1c,
            _ => &mut self.t2,
        };
        *slot = Some(path);
    }
}

fn read_png(path: &Path) -> Result<Array2<u8>> {
    let file = File::open(path).map_err(|_| CmimError::MissingFile(path.to_path_buf()))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let bad = |e: &dyn std::fmt::Display| CmimError::Image(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(|e| bad(&e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad(&"image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(&e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(&"expected 8-bit grayscale"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let rows: Vec<u8> = buf
        .chunks(info.line_size)
        .take(h)
        .flat_map(|r| r[..w].iter().copied())
        .collect();
    Array2::from_shape_vec((h, w), rows).map_err(|e| bad(&e))
}

fn write_png(path: &Path, pixels: &Array2<u8>) -> Result<()> {
    let (h, w) = pixels.dim();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let image_err = |e: png::EncodingError| CmimError::Image(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(image_err)?;
    let data: Vec<u8> = pixels.iter().copied().collect();
    writer.write_image_data(&data).map_err(image_err)?;
    writer.finish().map_err(image_err)
}

fn read_tokens(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|_| CmimError::MissingFile(path.to_path_buf()))?;
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| CmimError::invalid(format!("{}: bad token {t:?}", path.display())))
        })
        .collect()
}

/// Loads every line of a manifest.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    load_lines(path).map(|(d, _)| d)
}

/// Loads only the lines whose `split` field equals `split`. Class count and
/// modality list still come from the whole manifest.
pub fn load_manifest_split(path: &Path, split: &str) -> Result<Dataset> {
    let mut splits = load_manifest_splits(path)?;
    splits.remove(split).ok_or(CmimError::EmptyManifest)
}

/// Loads a manifest once and groups its records by `split` field. Lines
/// without one are grouped under the empty string.
pub fn load_manifest_splits(path: &Path) -> Result<BTreeMap<String, Dataset>> {
    let (all, tags) = load_lines(path)?;
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, t) in tags.into_iter().enumerate() {
        groups.entry(t.unwrap_or_default()).or_default().push(i);
    }
    Ok(groups.into_iter().map(|(k, idx)| (k, all.subset(&idx))).collect())
}

fn load_lines(path: &Path) -> Result<(Dataset, Vec<Option<String>>)> {
    let file = File::open(path).map_err(|_| CmimError::MissingFile(path.to_path_buf()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut lines = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| CmimError::Manifest {
            line: n + 1,
            message: e.to_string(),
        })?;
        lines.push((n + 1, parsed));
    }
    if lines.is_empty() {
        return Err(CmimError::EmptyManifest);
    }

    let task = match (&lines[0].1.label, &lines[0].1.mask) {
        (Some(_), None) => Task::Classification,
        (None, Some(_)) => Task::Segmentation,
        _ => {
            return Err(CmimError::Manifest {
                line: lines[0].0,
                message: "exactly one of label and mask is required".into(),
            })
        }
    };
    let modalities: Vec<ModalityId> = PAYLOAD_FIELDS
        .iter()
        .filter(|f| lines.iter().any(|(_, l)| l.payload(f).is_some()))
        .map(|f| Ok(ModalityId::new(*f, modality_kind(f)?)))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut tags = Vec::new();
    let mut max_label = 0;
    for (n, line) in lines {
        let malformed = |message: &str| CmimError::Manifest {
            line: n,
            message: message.to_string(),
        };
        let target = match (task, line.label, &line.mask) {
            (Task::Classification, Some(l), None) => Target::Label(l),
            (Task::Segmentation, None, Some(m)) => {
                Target::Mask(read_png(&base.join(m))?.mapv(usize::from))
            }
            _ => return Err(malformed("target field does not match the first line's task")),
        };
        max_label = max_label.max(match &target {
            Target::Label(l) => *l,
            Target::Mask(m) => m.iter().copied().max().unwrap_or(0),
        });
        let mut payloads = BTreeMap::new();
        for m in &modalities {
            let Some(rel) = line.payload(&m.name) else { continue };
            let file = base.join(rel);
            let payload = match m.kind {
                ModalityKind::TokenSequence => Payload::Tokens(read_tokens(&file)?),
                _ => Payload::Image(read_png(&file)?.mapv(|v| f64::from(v) / 255.0)),
            };
            payloads.insert(m.name.clone(), payload);
        }
        if payloads.is_empty() {
            return Err(malformed("no modality payload"));
        }
        tags.push(line.split);
        records.push(ModalityRecord {
            id: line.id,
            payloads,
            target,
        });
    }
    let dataset = Dataset {
        task,
        modalities,
        num_classes: max_label + 1,
        records,
    };
    dataset.validate()?;
    Ok((dataset, tags))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes each split's payloads under `out/data/<split>/` as
/// `<id>.<modality>.png|txt` (masks as `<id>.mask.png`) and one
/// `out/manifest.jsonl` covering all splits. Returns the manifest path.
pub fn write_dataset(out: &Path, splits: &[(&str, &Dataset)]) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let manifest_path = out.join("manifest.jsonl");
    let mut manifest = BufWriter::new(File::create(&manifest_path)?);
    for (split, dataset) in splits {
        let rel_dir = PathBuf::from("data").join(split);
        let dir = out.join(&rel_dir);
        fs::create_dir_all(&dir)?;
        for r in &dataset.records {
            let rel = |suffix: &str| rel_dir.join(format!("{}.{suffix}", r.id));
            let mut line = ManifestLine {
                id: r.id.clone(),
                split: Some(split.to_string()),
                ..ManifestLine::default()
            };
            match &r.target {
                Target::Label(l) => line.label = Some(*l),
                Target::Mask(m) => {
                    let p = rel("mask.png");
                    let pixels = m.mapv(|l| u8::try_from(l).unwrap_or(u8::MAX));
                    write_png(&out.join(&p), &pixels)?;
                    line.mask = Some(path_string(&p));
                }
            }
            for (name, payload) in &r.payloads {
                let p = match payload {
                    Payload::Image(img) => {
                        let p = rel(&format!("{name}.png"));
                        write_png(&out.join(&p), &img.mapv(quantize))?;
                        p
                    }
                    Payload::Tokens(t) => {
                        let p = rel(&format!("{name}.txt"));
                        let text: Vec<String> = t.iter().map(usize::to_string).collect();
                        fs::write(out.join(&p), text.join(" ") + "\n")?;
                        p
                    }
                };
                line.set_payload(name, path_string(&p));
            }
            let json = serde_json::to_string(&line).map_err(|e| CmimError::invalid(e.to_string()))?;
            writeln!(manifest, "{json}")?;
        }
    }
    manifest.flush()?;
    Ok(manifest_path)
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}
