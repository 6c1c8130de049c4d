//! AUC and Dice metrics, modality-dropping evaluation and ablation tables.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{collate, Dataset, Task};
use crate::error::{CmimError, Result};
use crate::model::Model;

/// Samples per inference batch.
const EVAL_BATCH: usize = 32;

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CmimError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CmimError::NonFiniteScore);
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CmimError::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-versus-rest AUC per class and their macro average. Classes without
/// both positives and negatives are left out of the average.
pub fn macro_auc(scores: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Vec<Option<f64>>)> {
    let k = scores.ncols();
    if scores.nrows() != labels.len() {
        return Err(CmimError::Shape(format!(
            "{} score rows for {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let truth: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        let col: Vec<f64> = scores.column(c).to_vec();
        per_class.push(match auc(&col, &truth) {
            Ok(v) => Some(v),
            Err(CmimError::AucUndefined) => None,
            Err(e) => return Err(e),
        });
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(CmimError::AucUndefined);
    }
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, per_class))
}

/// `2|P ∩ T| / (|P| + |T|)` over nonzero entries; two empty masks score 1.
pub fn dice(pred: ArrayView2<usize>, truth: ArrayView2<usize>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(CmimError::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth.iter()) {
        let (p, t) = (*p != 0, *t != 0);
        inter += usize::from(p && t);
        total += usize::from(p) + usize::from(t);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "AUC")]
    Auc,
    #[serde(rename = "DSC")]
    Dsc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "AUC",
            Metric::Dsc => "DSC",
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification => Metric::Auc,
            Task::Segmentation => Metric::Dsc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub subset: Vec<String>,
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
}

impl MetricsRow {
    pub fn subset_label(&self) -> String {
        self.subset.join("+")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,metric,value,n\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.subset_label(), r.metric.name(), r.value, r.n);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.subset_label().len())
            .max()
            .unwrap_or(0)
            .max("subset".len());
        let mut out = format!("{:<width$}  metric   value       n\n", "subset");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<6} {:>8.4} {:>7}",
                r.subset_label(),
                r.metric.name(),
                r.value,
                r.n
            );
        }
        out
    }

    pub fn value(&self, subset: &[&str]) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.subset.iter().map(String::as_str).eq(subset.iter().copied()))
            .map(|r| r.value)
    }
}

/// Parses `flair` or `image+text` into a subset.
pub fn parse_subset(text: &str) -> Vec<String> {
    text.split(['+', ','])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// Every single-modality subset of the model, in model order.
pub fn singleton_subsets(model: &Model) -> Vec<Vec<String>> {
    model.modalities().iter().map(|m| vec![m.clone()]).collect()
}

/// Task metric with only `subset` fed to the model. Samples holding none of
/// the subset's modalities are skipped.
pub fn evaluate(model: &Model, dataset: &Dataset, subset: &[String]) -> Result<MetricsRow> {
    if subset.is_empty() {
        return Err(CmimError::invalid("empty modality subset"));
    }
    if dataset.task != model.task() || dataset.modality_names() != model.modalities() {
        return Err(CmimError::invalid(format!(
            "dataset ({:?}, {:?}) does not fit the model ({:?}, {:?})",
            dataset.task,
            dataset.modality_names(),
            model.task(),
            model.modalities()
        )));
    }
    let mut wanted = vec![false; model.modalities().len()];
    for name in subset {
        wanted[model.modality_index(name)?] = true;
    }
    let usable: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            dataset.modalities.iter().zip(&wanted).any(|(m, w)| *w && dataset.records[i].has(&m.name))
        })
        .collect();
    if usable.is_empty() {
        return Err(CmimError::invalid(format!("no sample has any of {subset:?}")));
    }

    let metric = Metric::for_task(model.task());
    let mut probs: Vec<Array2<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut dice_sum = 0.0;
    for chunk in usable.chunks(EVAL_BATCH) {
        let present = Array2::from_shape_fn((chunk.len(), wanted.len()), |(_, m)| wanted[m]);
        let batch = collate(dataset, chunk, &present, 0)?;
        match metric {
            Metric::Auc => {
                probs.push(model.predict_proba(&batch)?);
                match &batch.target {
                    crate::data::BatchTarget::Labels(l) => labels.extend_from_slice(l),
                    crate::data::BatchTarget::Masks(_) => return Err(CmimError::invalid("expected labels")),
                }
            }
            Metric::Dsc => {
                let pred = model.predict_masks(&batch)?;
                let truth = model.batch_masks(&batch)?;
                for (p, t) in pred.outer_iter().zip(truth.outer_iter()) {
                    dice_sum += dice(p, t)?;
                }
            }
        }
    }
    let value = match metric {
        Metric::Auc => {
            let views: Vec<_> = probs.iter().map(|p| p.view()).collect();
            let all = ndarray::concatenate(ndarray::Axis(0), &views)
                .map_err(|e| CmimError::Shape(e.to_string()))?;
            macro_auc(all.view(), &labels)?.0
        }
        Metric::Dsc => dice_sum / usable.len() as f64,
    };
    Ok(MetricsRow {
        subset: subset.to_vec(),
        metric,
        value,
        n: usable.len(),
    })
}

/// Task metric with every modality present.
pub fn evaluate_full(model: &Model, dataset: &Dataset) -> Result<MetricsRow> {
    evaluate(model, dataset, model.modalities())
}

/// One report row per subset, each run with only that subset present.
pub fn evaluate_modality_dropping(model: &Model, dataset: &Dataset, subsets: &[Vec<String>]) -> Result<MetricsReport> {
    for s in subsets {
        for name in s {
            model.modality_index(name)?;
        }
    }
    let rows = subsets
        .iter()
        .map(|s| evaluate(model, dataset, s))
        .collect::<Result<_>>()?;
    Ok(MetricsReport { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub subset: String,
    pub metric: Metric,
    pub values: Vec<f64>,
    /// `values[k + 1] - values[0]`
    pub deltas: Vec<f64>,
}

/// Side-by-side view of named reports with deltas against the first one.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut header = vec!["subset".to_string(), "metric".to_string()];
        header.extend(self.names.iter().cloned());
        header.extend(self.names.iter().skip(1).map(|n| format!("delta_{n}")));
        let mut out = header.join(",") + "\n";
        for r in &self.rows {
            let mut cells = vec![r.subset.clone(), r.metric.name().to_string()];
            cells.extend(r.values.iter().map(f64::to_string));
            cells.extend(r.deltas.iter().map(f64::to_string));
            out += &(cells.join(",") + "\n");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.subset.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}  metric", "subset");
        for n in &self.names {
            let _ = write!(out, " {n:>12}");
        }
        for n in self.names.iter().skip(1) {
            let _ = write!(out, " {:>12}", format!("d_{n}"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<width$}  {:<6}", r.subset, r.metric.name());
            for v in r.values.iter().chain(&r.deltas) {
                let _ = write!(out, " {v:>12.4}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn ablation_compare(reports: &[(String, MetricsReport)]) -> Result<Comparison> {
    let Some((_, base)) = reports.first() else {
        return Err(CmimError::invalid("nothing to compare"));
    };
    let key = |r: &MetricsRow| (r.subset_label(), r.metric);
    let base_keys: Vec<_> = base.rows.iter().map(key).collect();
    for (name, report) in reports {
        let keys: Vec<_> = report.rows.iter().map(key).collect();
        if keys != base_keys {
            return Err(CmimError::invalid(format!(
                "report {name} does not share the subsets and metric of {}",
                reports[0].0
            )));
        }
    }
    let rows = base
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let values: Vec<f64> = reports.iter().map(|(_, rep)| rep.rows[i].value).collect();
            let deltas = values[1..].iter().map(|v| v - values[0]).collect();
            ComparisonRow {
                subset: r.subset_label(),
                metric: r.metric,
                values,
                deltas,
            }
        })
        .collect();
    Ok(Comparison {
        names: reports.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}
