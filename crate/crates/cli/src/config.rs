//! TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use cmim_core::data::{SyntheticConfig, Task};
use cmim_core::model::{ClassifierConfig, ModelConfig, SegmenterConfig};
use cmim_core::training::TrainConfig;
use cmim_core::{CmimError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest to read instead of generating synthetic data. Relative paths
    /// resolve against the config file's directory.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Fractions used when the data carries no split labels.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SyntheticConfig::default(),
            train_fraction: 0.7,
            val_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Root seed. Data generation, initialization, batching and pairing all
    /// derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub segmenter: SegmenterConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Subsets reported by `eval` and `ablate`; empty means every single
    /// modality plus the full set.
    #[serde(default)]
    pub eval_subsets: Vec<Vec<String>>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CmimError::Config(e.message().to_string()))
    }

    /// Reads, parses and validates a config file. A relative manifest path
    /// is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| CmimError::MissingFile(path.to_path_buf()))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| CmimError::Config(format!("{}: {}", path.display(), strip(&e))))?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.data.manifest = Some(base.join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies command-line overrides and pushes the root seed into every
    /// seeded component.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.data.synthetic.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(d.train_fraction) || !frac_ok(d.val_fraction) || d.train_fraction + d.val_fraction > 1.0 {
            return Err(CmimError::Config(format!(
                "split fractions {} and {} must lie in [0, 1] and sum to at most 1",
                d.train_fraction, d.val_fraction
            )));
        }
        if d.manifest.is_none() {
            d.synthetic.validate(self.task)?;
        }
        self.model()?.validate()?;
        self.train.validate()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(match self.task {
            Task::Classification => ModelConfig::Classification(self.classifier.clone()),
            Task::Segmentation => ModelConfig::Segmentation(self.segmenter.clone()),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn strip(e: &CmimError) -> String {
    match e {
        CmimError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
