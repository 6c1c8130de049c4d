//! The four subcommands. Each writes into the configured output directory,
//! guarded by a lock file; wall-clock timestamps only go to `run.log`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cmim_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cmim_core::data::{
    generate_synthetic_classification, generate_synthetic_segmentation, load_manifest_splits, write_dataset, Dataset,
    Task,
};
use cmim_core::evaluation::{ablation_compare, evaluate_modality_dropping, Comparison, MetricsReport};
use cmim_core::losses::LossWeights;
use cmim_core::model::Model;
use cmim_core::training::{train, TrainOutcome};
use cmim_core::{CmimError, Result};

use crate::config::ExperimentConfig;

pub const LOCK_FILE: &str = ".cmim.lock";
pub const LOG_FILE: &str = "run.log";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CmimError::Config(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct RunLog {
    file: File,
}

impl RunLog {
    fn open(dir: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        Ok(Self { file })
    }

    fn line(&mut self, msg: &str) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let _ = writeln!(self.file, "{ts} {msg}");
        log::info!("{msg}");
    }
}

/// Claims `cfg.out`, writes the resolved config and opens the log.
fn start(cfg: &ExperimentConfig, command: &str) -> Result<(OutputLock, RunLog)> {
    let lock = OutputLock::acquire(&cfg.out)?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let mut log = RunLog::open(&cfg.out)?;
    log.line(&format!("{command} started, seed {}", cfg.seed));
    Ok((lock, log))
}

fn synthetic(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.task {
        Task::Classification => generate_synthetic_classification(&cfg.data.synthetic),
        Task::Segmentation => generate_synthetic_segmentation(&cfg.data.synthetic),
    }
}

/// Train, validation and test sets. A manifest with `train`/`val`/`test`
/// split labels is used as is; otherwise records are split by the
/// configured fractions in file order.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let whole = match &cfg.data.manifest {
        Some(path) => {
            let mut groups = load_manifest_splits(path)?;
            if groups.contains_key("train") {
                let mut take = |name: &str| {
                    groups
                        .remove(name)
                        .ok_or_else(|| CmimError::Config(format!("{}: no '{name}' split", path.display())))
                };
                let (tr, va, te) = (take("train")?, take("val")?, take("test")?);
                return check_task(cfg, tr, va, te);
            }
            let mut all: Vec<Dataset> = groups.into_values().collect();
            if all.len() != 1 {
                return Err(CmimError::Config(format!(
                    "{}: split labels present but no 'train' split",
                    path.display()
                )));
            }
            all.remove(0)
        }
        None => synthetic(cfg)?,
    };
    let (tr, va, te) = whole.split(cfg.data.train_fraction, cfg.data.val_fraction)?;
    check_task(cfg, tr, va, te)
}

fn check_task(cfg: &ExperimentConfig, tr: Dataset, va: Dataset, te: Dataset) -> Result<(Dataset, Dataset, Dataset)> {
    if tr.task != cfg.task {
        return Err(CmimError::Config(format!(
            "config task {:?} does not match the data ({:?})",
            cfg.task, tr.task
        )));
    }
    for (name, d) in [("train", &tr), ("val", &va), ("test", &te)] {
        if d.len() < 2 {
            return Err(CmimError::Config(format!("{name} split has {} sample(s)", d.len())));
        }
    }
    Ok((tr, va, te))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub manifest: PathBuf,
    /// (split, sample count)
    pub splits: Vec<(String, usize)>,
    /// Per-class sample counts or per-label pixel counts over all splits.
    pub target_counts: Vec<usize>,
}

impl GenSummary {
    pub fn to_text(&self) -> String {
        let mut out = format!("manifest: {}\n", self.manifest.display());
        for (s, n) in &self.splits {
            out.push_str(&format!("{s}: {n} samples\n"));
        }
        for (i, c) in self.target_counts.iter().enumerate() {
            out.push_str(&format!("target {i}: {c}\n"));
        }
        out
    }
}

/// Generates the synthetic dataset and writes it with a manifest.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenSummary> {
    if cfg.data.manifest.is_some() {
        return Err(CmimError::Config("gen-data needs a synthetic data source, not a manifest".into()));
    }
    let (_lock, mut log) = start(cfg, "gen-data")?;
    let whole = synthetic(cfg)?;
    let counts = whole.target_counts();
    let (tr, va, te) = whole.split(cfg.data.train_fraction, cfg.data.val_fraction)?;
    let manifest = write_dataset(&cfg.out, &[("train", &tr), ("val", &va), ("test", &te)])?;
    log.line(&format!("wrote {}", manifest.display()));
    Ok(GenSummary {
        manifest,
        splits: vec![("train".into(), tr.len()), ("val".into(), va.len()), ("test".into(), te.len())],
        target_counts: counts,
    })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub epochs_run: usize,
}

fn train_into(cfg: &ExperimentConfig, dir: &Path, log: &mut RunLog) -> Result<(TrainOutcome, TrainSummary)> {
    let (tr, va, _) = load_splits(cfg)?;
    let model_cfg = cfg.model()?;
    let model = Model::new(&model_cfg, cfg.seed)?;
    log.line(&format!("training on {} samples, validating on {}", tr.len(), va.len()));
    let outcome = train(model, &tr, &va, &cfg.train)?;
    fs::create_dir_all(dir)?;
    let checkpoint = dir.join("best.ckpt");
    let best = &outcome.best;
    let fp = best.model.fingerprint();
    save_checkpoint(
        &Checkpoint::from_model(&best.model, Some(&best.optimizer), best.epoch, best.best_metric, &fp),
        &checkpoint,
    )?;
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, outcome.history.to_csv())?;
    log.line(&format!(
        "best epoch {} ({:.4}), {} epochs run",
        best.epoch, best.best_metric, outcome.last.epoch
    ));
    let summary = TrainSummary {
        checkpoint,
        metrics,
        best_epoch: best.epoch,
        best_metric: best.best_metric,
        epochs_run: outcome.last.epoch,
    };
    Ok((outcome, summary))
}

/// Trains one model and writes `best.ckpt` and `metrics.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let (_lock, mut log) = start(cfg, "train")?;
    let result = train_into(cfg, &cfg.out, &mut log);
    if let Err(e) = &result {
        log.line(&format!("train failed: {e}"));
    }
    result.map(|(_, s)| s)
}

/// Subsets to report: the configured ones, else each single modality plus
/// the full set.
pub fn report_subsets(cfg: &ExperimentConfig, model: &Model) -> Vec<Vec<String>> {
    if !cfg.eval_subsets.is_empty() {
        return cfg.eval_subsets.clone();
    }
    let mut subsets: Vec<Vec<String>> = model.modalities().iter().map(|m| vec![m.clone()]).collect();
    if subsets.len() > 1 {
        subsets.push(model.modalities().to_vec());
    }
    subsets
}

fn check_subsets(model: &Model, subsets: &[Vec<String>]) -> Result<()> {
    for s in subsets {
        if s.is_empty() {
            return Err(CmimError::Config("empty modality subset".into()));
        }
        for m in s {
            model.modality_index(m)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub report: MetricsReport,
    pub csv: PathBuf,
}

/// Evaluates a checkpoint on the test split. `subsets` overrides the
/// config's subsets; with neither, every single modality is reported.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, subsets: Option<Vec<Vec<String>>>) -> Result<EvalSummary> {
    let (_lock, mut log) = start(cfg, "eval")?;
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.to_model()?;
    if model.task() != cfg.task {
        return Err(CmimError::Config("checkpoint task does not match the config".into()));
    }
    let subsets = match subsets {
        Some(s) => s,
        None if cfg.eval_subsets.is_empty() => model.modalities().iter().map(|m| vec![m.clone()]).collect(),
        None => cfg.eval_subsets.clone(),
    };
    check_subsets(&model, &subsets)?;
    let (_, _, te) = load_splits(cfg)?;
    let report = evaluate_modality_dropping(&model, &te, &subsets)?;
    let csv = cfg.out.join("report.csv");
    fs::write(&csv, report.to_csv())?;
    fs::write(cfg.out.join("report.txt"), report.to_text())?;
    log.line(&format!("evaluated {} subset(s) on {} samples", subsets.len(), te.len()));
    Ok(EvalSummary { report, csv })
}

/// Weights of the ablation arm: every mutual-information term off.
pub fn baseline_weights(w: &LossWeights) -> LossWeights {
    LossWeights {
        lambda_ll: 0.0,
        lambda_lg: 0.0,
        lambda_gg: 0.0,
        ..*w
    }
}

pub const ABLATION_ARMS: [&str; 2] = ["cmim", "baseline"];

#[derive(Clone, Debug)]
pub struct AblateSummary {
    pub comparison: Comparison,
    pub csv: PathBuf,
    pub reports: Vec<(String, MetricsReport)>,
}

/// Trains the configured weights and the no-MI baseline on the same data and
/// seed, evaluates both on the test split and compares them.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblateSummary> {
    let (_lock, mut log) = start(cfg, "ablate")?;
    let (_, _, te) = load_splits(cfg)?;
    let mut reports = Vec::new();
    for arm in ABLATION_ARMS {
        let mut arm_cfg = cfg.clone();
        if arm == "baseline" {
            arm_cfg.train.weights = baseline_weights(&cfg.train.weights);
        }
        let dir = cfg.out.join(arm);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), arm_cfg.to_toml())?;
        let (outcome, _) = train_into(&arm_cfg, &dir, &mut log).map_err(|e| label(arm, e))?;
        let subsets = report_subsets(cfg, &outcome.best.model);
        check_subsets(&outcome.best.model, &subsets)?;
        let report = evaluate_modality_dropping(&outcome.best.model, &te, &subsets).map_err(|e| label(arm, e))?;
        fs::write(dir.join("report.csv"), report.to_csv())?;
        reports.push((arm.to_string(), report));
    }
    let comparison = ablation_compare(&reports)?;
    let csv = cfg.out.join("comparison.csv");
    fs::write(&csv, comparison.to_csv())?;
    fs::write(cfg.out.join("comparison.txt"), comparison.to_text())?;
    log.line("ablation done");
    Ok(AblateSummary { comparison, csv, reports })
}

/// Prefixes an error message with the ablation arm, keeping its exit code.
fn label(arm: &str, e: CmimError) -> CmimError {
    match e {
        CmimError::NonFinite { component, epoch, step } => CmimError::NonFinite {
            component: format!("{arm}/{component}"),
            epoch,
            step,
        },
        CmimError::Io(io) => CmimError::Io(std::io::Error::new(io.kind(), format!("{arm}: {io}"))),
        CmimError::Config(m) => CmimError::Config(format!("{arm}: {m}")),
        CmimError::InvalidArgument(m) => CmimError::InvalidArgument(format!("{arm}: {m}")),
        other => other,
    }
}
