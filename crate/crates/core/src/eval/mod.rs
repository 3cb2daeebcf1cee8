//! Top-1, per-class and subgroup accuracy, confusion matrices and
//! embedding export.

mod subgroup;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::datagen::SplitData;
use crate::error::{Error, Result};
use crate::model::{Backbone, MultiExpertModel};
use crate::nn::Real;

pub use subgroup::{majority_minority, subgroup_accuracy, MajorityMinority, Subgroup, SubgroupAccuracy, SubgroupSpec};

fn check_lengths(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("class id {bad} outside [0, {num_classes})")));
    }
    Ok(())
}

/// `C x C` counts, rows indexed by true class, columns by prediction.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Array2<u64>> {
    check_lengths(predictions, labels, num_classes)?;
    let mut m = Array2::zeros((num_classes, num_classes));
    for (&p, &y) in predictions.iter().zip(labels) {
        m[[y, p]] += 1;
    }
    Ok(m)
}

/// Row-normalized diagonal of a confusion matrix; `None` for empty rows.
pub fn per_class_from_confusion(confusion: &Array2<u64>) -> Vec<Option<f64>> {
    confusion
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, r)| {
            let total: u64 = r.sum();
            (total > 0).then(|| r[j] as f64 / total as f64)
        })
        .collect()
}

pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    Ok(per_class_from_confusion(&confusion_matrix(predictions, labels, num_classes)?))
}

pub fn top1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("top-1 needs equally many, nonzero predictions and labels"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Everything reported for one evaluation run. Undefined accuracies
/// (no test samples) serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub top1: f64,
    pub per_class: Vec<Option<f64>>,
    pub subgroups: SubgroupAccuracy,
    pub majority: Option<f64>,
    pub minority: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        train_counts: &[u64],
        spec: &SubgroupSpec,
    ) -> Result<Self> {
        let c = train_counts.len();
        let confusion = confusion_matrix(predictions, labels, c)?;
        let subgroups = subgroup_accuracy(predictions, labels, train_counts, spec)?;
        let mm = majority_minority(predictions, labels, train_counts, spec)?;
        Ok(Self {
            num_samples: labels.len(),
            top1: top1(predictions, labels)?,
            per_class: per_class_from_confusion(&confusion),
            subgroups,
            majority: mm.majority,
            minority: mm.minority,
            confusion: confusion.rows().into_iter().map(|r| r.to_vec()).collect(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Confusion matrix as CSV: header `true\pred,0,1,...`, one row per true class.
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let c = self.confusion.len();
        write!(w, "true\\pred")?;
        for j in 0..c {
            write!(w, ",{j}")?;
        }
        writeln!(w)?;
        for (i, row) in self.confusion.iter().enumerate() {
            write!(w, "{i}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Consensus predictions over a split, evaluated in chunks of `batch`.
pub fn predict_split<T: Real, B: Backbone<T>>(
    model: &mut MultiExpertModel<T, B>,
    data: &SplitData,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(data.len());
        let x = data.images.slice(s![start..end, .., .., ..]).mapv(|v| <T as Real>::from_f64(v as f64));
        out.extend(model.predict(&x)?.classes);
    }
    Ok(out)
}

pub fn evaluate<T: Real, B: Backbone<T>>(
    model: &mut MultiExpertModel<T, B>,
    data: &SplitData,
    train_counts: &[u64],
    spec: &SubgroupSpec,
    batch: usize,
) -> Result<EvalReport> {
    let preds = predict_split(model, data, batch)?;
    EvalReport::from_predictions(&preds, &data.labels, train_counts, spec)
}

/// One CSV row per (sample, branch): `path,class_id,product_line_id,branch_id,e_0,...`.
pub fn export_embeddings<T: Real, B: Backbone<T>>(
    model: &mut MultiExpertModel<T, B>,
    data: &SplitData,
    out_path: &Path,
    batch: usize,
) -> Result<usize> {
    let d = model.embedding_dim();
    let mut w = BufWriter::new(fs::File::create(out_path)?);
    write!(w, "path,class_id,product_line_id,branch_id")?;
    for j in 0..d {
        write!(w, ",e_{j}")?;
    }
    writeln!(w)?;
    let mut rows = 0;
    let batch = batch.max(1);
    for start in (0..data.len()).step_by(batch) {
        let end = (start + batch).min(data.len());
        let x = data.images.slice(s![start..end, .., .., ..]).mapv(|v| <T as Real>::from_f64(v as f64));
        let outs = model.forward(&x, false)?;
        for i in 0..end - start {
            let n = start + i;
            for (k, o) in outs.iter().enumerate() {
                write!(w, "{},{},{},{k}", data.paths[n], data.labels[n], data.product_lines[n])?;
                for v in o.embeddings.row(i) {
                    write!(w, ",{}", Real::to_f64(*v) as f32)?;
                }
                writeln!(w)?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    Ok(rows)
}
