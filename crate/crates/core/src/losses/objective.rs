use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::classification::{
    arb_loss_grad, cross_entropy_grad, hard_category_sets, hcm_loss_with_sets,
};
use super::distill::{kd_all_loss_grad, kd_hard_loss_with_sets, kd_hard_sets};
use super::metric::{center_loss_grad, contrastive_loss_grad};
use super::types::{ClassCountTable, EmbeddingBatch, LabelBatch, LogitBatch, LossBreakdown, LossWeights};

/// Which classification term fills the `arb` slot of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationLoss {
    #[default]
    Arb,
    /// Plain softmax cross-entropy; used by baselines and the ARB ablation.
    CrossEntropy,
}

/// On/off switches for the non-weighted terms. Weighted terms are disabled
/// by a zero weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub classification: ClassificationLoss,
    pub hcm: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            classification: ClassificationLoss::Arb,
            hcm: true,
        }
    }
}

/// Gradient of the total objective with respect to one branch's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGradients {
    pub logits: Array2<f64>,
    pub embeddings: Array2<f64>,
}

/// Every term of the composite objective for `K` branches.
///
/// The per-branch terms (classification, hard category mining, contrastive,
/// center) are averaged over the branches; the distillation terms are zero
/// when `K = 1`.
pub fn total_loss(
    logits: &[LogitBatch],
    embeddings: &[EmbeddingBatch],
    y: &LabelBatch,
    counts: &ClassCountTable,
    weights: &LossWeights,
    top_n: usize,
) -> Result<LossBreakdown> {
    objective(logits, embeddings, y, counts, weights, top_n, &LossTerms::default()).map(|(b, _)| b)
}

/// [`total_loss`] with selectable terms, plus the gradient of `total` with
/// respect to every branch's logits and embeddings.
///
/// Hard category sets are selected at the current logits and held constant
/// for the gradient.
pub fn objective(
    logits: &[LogitBatch],
    embeddings: &[EmbeddingBatch],
    y: &LabelBatch,
    counts: &ClassCountTable,
    weights: &LossWeights,
    top_n: usize,
    terms: &LossTerms,
) -> Result<(LossBreakdown, Vec<BranchGradients>)> {
    let k = logits.len();
    if k == 0 {
        return Err(Error::invalid("no branches"));
    }
    if embeddings.len() != k {
        return Err(Error::shape(format!(
            "{k} logit batches but {} embedding batches",
            embeddings.len()
        )));
    }
    weights.validate()?;
    let inv_k = 1.0 / k as f64;

    let mut arb = 0.0;
    let mut hcm = 0.0;
    let mut contrastive = 0.0;
    let mut center = 0.0;
    let mut grads = Vec::with_capacity(k);
    for (z, e) in logits.iter().zip(embeddings) {
        if e.batch_size() != z.batch_size() {
            return Err(Error::shape(format!(
                "branch {} has {} embeddings for {} logit rows",
                z.branch_id(),
                e.batch_size(),
                z.batch_size()
            )));
        }
        let (a, mut gz) = match terms.classification {
            ClassificationLoss::Arb => arb_loss_grad(z, y, counts)?,
            ClassificationLoss::CrossEntropy => {
                counts.check_classes(z.num_classes())?;
                cross_entropy_grad(z, y)?
            }
        };
        arb += a * inv_k;
        if terms.hcm {
            let sets = hard_category_sets(z, y, top_n)?;
            let (h, gh) = hcm_loss_with_sets(z, y, counts, &sets)?;
            hcm += h * inv_k;
            gz += &gh;
        }
        gz *= inv_k;

        let (c, gc) = contrastive_loss_grad(e, y, weights.margin)?;
        let (m, gm) = center_loss_grad(e, y)?;
        contrastive += c * inv_k;
        center += m * inv_k;
        let ge = gc * (weights.w1 * inv_k) + gm * (weights.w2 * inv_k);
        grads.push(BranchGradients {
            logits: gz,
            embeddings: ge,
        });
    }

    let (mut kd_all, mut kd_hard) = (0.0, 0.0);
    if k >= 2 {
        let (v, g_all) = kd_all_loss_grad(logits, counts)?;
        let sets = kd_hard_sets(logits, y, top_n)?;
        let (h, g_hard) = kd_hard_loss_with_sets(logits, counts, &sets)?;
        kd_all = v;
        kd_hard = h;
        if weights.alpha != 0.0 {
            for ((g, a), b) in grads.iter_mut().zip(g_all).zip(g_hard) {
                g.logits.scaled_add(weights.alpha, &a);
                g.logits.scaled_add(weights.alpha, &b);
            }
        }
    }

    let breakdown = LossBreakdown::compose(arb, hcm, contrastive, center, kd_all, kd_hard, weights);
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{arb_loss, center_loss, contrastive_loss, hcm_loss};
    use approx::assert_abs_diff_eq;

    fn fixture() -> (Vec<LogitBatch>, Vec<EmbeddingBatch>, LabelBatch, ClassCountTable) {
        let z = vec![vec![0.5, -0.2, 1.0], vec![2.0, 0.1, -0.3], vec![0.0, 0.4, 0.4]];
        let e = vec![vec![0.1, 0.2], vec![0.5, -0.1], vec![0.3, 0.3]];
        let logits = vec![LogitBatch::from_rows(&z, 0).unwrap(), LogitBatch::from_rows(&z, 1).unwrap()];
        let embs = vec![EmbeddingBatch::from_rows(&e, 0).unwrap(), EmbeddingBatch::from_rows(&e, 1).unwrap()];
        let y = LabelBatch::new(vec![2, 0, 2], 3).unwrap();
        let c = ClassCountTable::new(vec![30, 6, 2]).unwrap();
        (logits, embs, y, c)
    }

    #[test]
    fn zero_weights_keep_arb_and_hcm() {
        let (z, e, y, c) = fixture();
        let w = LossWeights { w1: 0.0, w2: 0.0, alpha: 0.0, margin: 1.0 };
        let b = total_loss(&z, &e, &y, &c, &w, 1).unwrap();
        assert_eq!(b.total, b.arb + b.hcm);
    }

    #[test]
    fn default_weights_identical_branches() {
        let (z, e, y, c) = fixture();
        let w = LossWeights::default();
        let b = total_loss(&z, &e, &y, &c, &w, 1).unwrap();
        assert_abs_diff_eq!(b.kd_all, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.kd_hard, 0.0, epsilon = 1e-12);
        let expect = b.arb + b.hcm + 0.05 * b.contrastive + 0.000625 * b.center;
        assert_abs_diff_eq!(b.total, expect, epsilon = 1e-12);
        // branch means of identical branches equal the single-branch values
        assert_abs_diff_eq!(b.arb, arb_loss(&z[0], &y, &c).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.hcm, hcm_loss(&z[0], &y, &c, 1).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.contrastive, contrastive_loss(&e[0], &y, 1.0).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.center, center_loss(&e[0], &y).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn single_branch_has_no_distillation() {
        let (z, e, y, c) = fixture();
        let b = total_loss(&z[..1], &e[..1], &y, &c, &LossWeights::default(), 2).unwrap();
        assert_eq!((b.kd_all, b.kd_hard), (0.0, 0.0));
    }

    #[test]
    fn cross_entropy_variant_fills_arb_slot() {
        let (z, e, y, c) = fixture();
        let terms = LossTerms { classification: ClassificationLoss::CrossEntropy, hcm: false };
        let (b, _) = objective(&z, &e, &y, &c, &LossWeights::default(), 1, &terms).unwrap();
        assert_abs_diff_eq!(
            b.arb,
            crate::losses::cross_entropy(&z[0], &y).unwrap(),
            epsilon = 1e-12
        );
        assert_eq!(b.hcm, 0.0);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let (z, e, y, c) = fixture();
        assert!(total_loss(&z, &e[..1], &y, &c, &LossWeights::default(), 1).is_err());
        assert!(total_loss(&[], &[], &y, &c, &LossWeights::default(), 1).is_err());
    }
}
