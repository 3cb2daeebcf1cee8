use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class training-sample counts.
///
/// Every balanced-softmax denominator is driven by these counts, so a class
/// with zero samples is rejected at construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct ClassCountTable {
    counts: Vec<u64>,
}

impl ClassCountTable {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("class count table is empty"));
        }
        if let Some(j) = counts.iter().position(|&n| n < 1) {
            return Err(Error::invalid(format!(
                "class {j} has no training samples; every count must be >= 1"
            )));
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, class: usize) -> u64 {
        self.counts[class]
    }

    /// `ln n_j` for every class; the additive prior of the balanced softmax.
    pub fn log_counts(&self) -> Vec<f64> {
        self.counts.iter().map(|&n| (n as f64).ln()).collect()
    }

    pub(crate) fn check_classes(&self, classes: usize) -> Result<()> {
        if classes != self.counts.len() {
            return Err(Error::shape(format!(
                "{classes} logits per sample but {} class counts",
                self.counts.len()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<u64>> for ClassCountTable {
    type Error = Error;

    fn try_from(counts: Vec<u64>) -> Result<Self> {
        Self::new(counts)
    }
}

impl From<ClassCountTable> for Vec<u64> {
    fn from(table: ClassCountTable) -> Self {
        table.counts
    }
}

fn check_finite(values: &Array2<f64>, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains NaN or Inf")))
    }
}

/// Raw class scores (B x C) produced by one branch's classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    values: Array2<f64>,
    branch_id: usize,
}

impl LogitBatch {
    pub fn new(values: Array2<f64>, branch_id: usize) -> Result<Self> {
        check_finite(&values, "logit batch")?;
        Ok(Self { values, branch_id })
    }

    pub fn from_rows(rows: &[Vec<f64>], branch_id: usize) -> Result<Self> {
        Self::new(rows_to_array(rows)?, branch_id)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn branch_id(&self) -> usize {
        self.branch_id
    }

    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }
}

/// Pooled per-sample feature vectors (B x D) from one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    branch_id: usize,
}

impl EmbeddingBatch {
    pub fn new(vectors: Array2<f64>, branch_id: usize) -> Result<Self> {
        check_finite(&vectors, "embedding batch")?;
        Ok(Self { vectors, branch_id })
    }

    pub fn from_rows(rows: &[Vec<f64>], branch_id: usize) -> Result<Self> {
        Self::new(rows_to_array(rows)?, branch_id)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn branch_id(&self) -> usize {
        self.branch_id
    }

    pub fn batch_size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::shape("ragged rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::shape(e.to_string()))
}

/// Target class ids for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
}

impl LabelBatch {
    /// Labels are validated against `num_classes`.
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub(crate) fn check_against(&self, batch: usize, classes: usize) -> Result<()> {
        if self.labels.len() != batch {
            return Err(Error::shape(format!(
                "{} labels for a batch of {batch}",
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

/// Hard category set of one sample: its target class plus the Top-N
/// classes under the standard softmax ranking. Stored sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardCategorySet {
    target: usize,
    members: Vec<usize>,
}

impl HardCategorySet {
    pub(crate) fn from_members(target: usize, mut members: Vec<usize>) -> Self {
        if !members.contains(&target) {
            members.push(target);
        }
        members.sort_unstable();
        members.dedup();
        Self { target, members }
    }

    /// Every class id; used when the set covers the whole label space.
    pub fn full(target: usize, num_classes: usize) -> Self {
        Self::from_members(target, (0..num_classes).collect())
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.members.binary_search(&class).is_ok()
    }
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Contrastive loss weight.
    pub w1: f64,
    /// Center loss weight.
    pub w2: f64,
    /// Distillation weight, applied to `kd_all + kd_hard`.
    pub alpha: f64,
    /// Hinge margin of the contrastive loss.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 0.05,
            w2: 0.000625,
            alpha: 0.6,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w1", self.w1), ("w2", self.w2), ("alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid(format!(
                "contrastive margin must be > 0, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Value of every term of the composite objective for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub arb: f64,
    pub hcm: f64,
    pub contrastive: f64,
    pub center: f64,
    pub kd_all: f64,
    pub kd_hard: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills `total` from the six parts.
    pub fn compose(
        arb: f64,
        hcm: f64,
        contrastive: f64,
        center: f64,
        kd_all: f64,
        kd_hard: f64,
        weights: &LossWeights,
    ) -> Self {
        let total = arb
            + hcm
            + weights.w1 * contrastive
            + weights.w2 * center
            + weights.alpha * (kd_all + kd_hard);
        Self {
            arb,
            hcm,
            contrastive,
            center,
            kd_all,
            kd_hard,
            total,
        }
    }

    /// `(name, value)` for each of the seven fields, in CSV column order.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("arb", self.arb),
            ("hcm", self.hcm),
            ("contrastive", self.contrastive),
            ("center", self.center),
            ("kd_all", self.kd_all),
            ("kd_hard", self.kd_hard),
            ("total", self.total),
        ]
    }
}
