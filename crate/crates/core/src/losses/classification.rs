use ndarray::Array2;

use crate::error::{Error, Result};

use super::softmax::{balanced_scores, log_sum_exp_over, softmax_over};
use super::types::{ClassCountTable, HardCategorySet, LabelBatch, LogitBatch};

/// Cross-entropy at the target class over a per-sample support, with an
/// optional log-count prior added to the logits. Mean-reduced over the batch.
///
/// With the prior, the per-sample term is
/// `-ln( e^{z_y} / sum_{l in S} (n_l / n_y) e^{z_l} )`, which equals
/// `lse_S(z + ln n) - (z_y + ln n_y)`.
fn target_cross_entropy(
    z: &LogitBatch,
    y: &LabelBatch,
    log_prior: Option<&[f64]>,
    supports: Option<&[HardCategorySet]>,
) -> Result<(f64, Array2<f64>)> {
    let (batch, classes) = z.values().dim();
    if batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    y.check_against(batch, classes)?;
    if let Some(s) = supports {
        if s.len() != batch {
            return Err(Error::shape(format!(
                "{} hard sets for a batch of {batch}",
                s.len()
            )));
        }
    }
    let all: Vec<usize> = (0..classes).collect();
    let mut grad = Array2::zeros((batch, classes));
    let mut total = 0.0;
    let scale = 1.0 / batch as f64;
    for (i, row) in z.values().rows().into_iter().enumerate() {
        let target = y.labels()[i];
        let row = row.to_vec();
        let scores = match log_prior {
            Some(p) => balanced_scores(&row, p),
            None => row,
        };
        let support = match supports {
            Some(s) => {
                if !s[i].contains(target) {
                    return Err(Error::invalid(format!(
                        "hard set of sample {i} does not contain its target {target}"
                    )));
                }
                s[i].members()
            }
            None => &all[..],
        };
        total += log_sum_exp_over(&scores, support) - scores[target];
        let p = softmax_over(&scores, support);
        let mut g = grad.row_mut(i);
        for &j in support {
            g[j] = p[j] * scale;
        }
        g[target] -= scale;
    }
    Ok((total * scale, grad))
}

/// Plain softmax cross-entropy, mean over the batch. Baseline hook.
pub fn cross_entropy(z: &LogitBatch, y: &LabelBatch) -> Result<f64> {
    cross_entropy_grad(z, y).map(|(v, _)| v)
}

pub fn cross_entropy_grad(z: &LogitBatch, y: &LabelBatch) -> Result<(f64, Array2<f64>)> {
    target_cross_entropy(z, y, None, None)
}

/// Attraction-repulsion-balanced loss: cross-entropy whose denominator weighs
/// each class by `n_k / n_y`. Mean over the batch.
pub fn arb_loss(z: &LogitBatch, y: &LabelBatch, counts: &ClassCountTable) -> Result<f64> {
    arb_loss_grad(z, y, counts).map(|(v, _)| v)
}

/// [`arb_loss`] and its gradient with respect to the logits.
pub fn arb_loss_grad(
    z: &LogitBatch,
    y: &LabelBatch,
    counts: &ClassCountTable,
) -> Result<(f64, Array2<f64>)> {
    counts.check_classes(z.num_classes())?;
    target_cross_entropy(z, y, Some(&counts.log_counts()), None)
}

/// Indices of the `n` largest scores, ties broken toward the lower index.
pub(crate) fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

fn check_top_n(n: usize, classes: usize) -> Result<()> {
    if n < 1 || n > classes {
        return Err(Error::invalid(format!(
            "Top-N must lie in [1, {classes}], got {n}"
        )));
    }
    Ok(())
}

/// `{y}` united with the Top-N classes of the standard softmax ranking of `z`.
///
/// The ranking covers every class, the target included. Softmax is monotone,
/// so ranking the logits directly gives the same order.
pub fn hard_category_set(z: &[f64], y: usize, n: usize) -> Result<HardCategorySet> {
    check_top_n(n, z.len())?;
    if y >= z.len() {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            z.len()
        )));
    }
    Ok(HardCategorySet::from_members(y, top_n(z, n)))
}

/// One hard set per sample of the batch.
pub fn hard_category_sets(
    z: &LogitBatch,
    y: &LabelBatch,
    n: usize,
) -> Result<Vec<HardCategorySet>> {
    let (batch, classes) = z.values().dim();
    y.check_against(batch, classes)?;
    z.values()
        .rows()
        .into_iter()
        .zip(y.labels())
        .map(|(row, &t)| hard_category_set(&row.to_vec(), t, n))
        .collect()
}

/// Hard-category-mining loss: the ARB loss with the denominator restricted
/// to each sample's hard category set. Mean over the batch.
pub fn hcm_loss(z: &LogitBatch, y: &LabelBatch, counts: &ClassCountTable, n: usize) -> Result<f64> {
    let sets = hard_category_sets(z, y, n)?;
    hcm_loss_with_sets(z, y, counts, &sets).map(|(v, _)| v)
}

/// [`hcm_loss`] for fixed hard sets, plus its gradient. The sets are
/// constants of the differentiation.
pub fn hcm_loss_with_sets(
    z: &LogitBatch,
    y: &LabelBatch,
    counts: &ClassCountTable,
    sets: &[HardCategorySet],
) -> Result<(f64, Array2<f64>)> {
    counts.check_classes(z.num_classes())?;
    target_cross_entropy(z, y, Some(&counts.log_counts()), Some(sets))
}

/// `max(1, floor(classes * fraction))`.
pub fn topn_from_fraction(classes: usize, fraction: f64) -> Result<usize> {
    if classes < 1 {
        return Err(Error::invalid("class count must be positive"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "Top-N fraction must lie in (0, 1], got {fraction}"
        )));
    }
    // absorbs products that land a few ulps below an integer
    let n = (classes as f64 * fraction + 1e-9).floor() as usize;
    Ok(n.clamp(1, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn counts(v: &[u64]) -> ClassCountTable {
        ClassCountTable::new(v.to_vec()).unwrap()
    }

    fn logits(rows: &[Vec<f64>]) -> LogitBatch {
        LogitBatch::from_rows(rows, 0).unwrap()
    }

    fn labels(v: &[usize], c: usize) -> LabelBatch {
        LabelBatch::new(v.to_vec(), c).unwrap()
    }

    #[test]
    fn arb_equal_counts_is_cross_entropy() {
        let z = logits(&[vec![0.7, 0.3]]);
        let y = labels(&[0], 2);
        let ce = -(0.7f64.exp() / (0.7f64.exp() + 0.3f64.exp())).ln();
        assert_abs_diff_eq!(arb_loss(&z, &y, &counts(&[5, 5])).unwrap(), ce, epsilon = 1e-14);
        assert_abs_diff_eq!(cross_entropy(&z, &y).unwrap(), ce, epsilon = 1e-14);
    }

    #[test]
    fn arb_matches_scalar_oracle() {
        // -ln(e^0 / (100/1 e^1 + 10/1 e^0 + 1/1 e^0)) = ln(100e + 11)
        let z = logits(&[vec![1.0, 0.0, 0.0]]);
        let y = labels(&[2], 3);
        let oracle = (100.0 * std::f64::consts::E + 11.0).ln();
        let v = arb_loss(&z, &y, &counts(&[100, 10, 1])).unwrap();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 5.6448, epsilon = 1e-4);
    }

    #[test]
    fn arb_rejects_bad_batches() {
        let c = counts(&[1, 1]);
        let empty = LogitBatch::new(Array2::zeros((0, 2)), 0).unwrap();
        assert!(arb_loss(&empty, &labels(&[], 2), &c).is_err());
        let z = logits(&[vec![0.0, 0.0]]);
        assert!(arb_loss(&z, &labels(&[0, 1], 2), &c).is_err());
        assert!(arb_loss(&z, &labels(&[0], 2), &counts(&[1, 1, 1])).is_err());
    }

    #[test]
    fn hard_set_examples() {
        assert_eq!(hard_category_set(&[2.0, 1.0, 0.0], 2, 1).unwrap().members(), &[0, 2]);
        assert_eq!(
            hard_category_set(&[0.3, -1.0, 4.0], 1, 3).unwrap().members(),
            &[0, 1, 2]
        );
        // tie resolved to class 0, which is also the target
        assert_eq!(hard_category_set(&[1.0, 1.0, 1.0], 0, 1).unwrap().members(), &[0]);
        assert!(hard_category_set(&[1.0, 1.0], 0, 0).is_err());
        assert!(hard_category_set(&[1.0, 1.0], 0, 3).is_err());
    }

    #[test]
    fn hard_set_size() {
        // target outside the Top-N adds one member
        let s = hard_category_set(&[5.0, 4.0, 3.0, 2.0, 1.0], 4, 2).unwrap();
        assert_eq!(s.len(), 3);
        let s = hard_category_set(&[5.0, 4.0, 3.0, 2.0, 1.0], 0, 2).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn hcm_matches_scalar_oracle() {
        // Psi = {0, 2}: -ln(e^0 / (100 e^2 + 1 e^0))
        let z = logits(&[vec![2.0, 1.0, 0.0]]);
        let y = labels(&[2], 3);
        let v = hcm_loss(&z, &y, &counts(&[100, 10, 1]), 1).unwrap();
        let oracle = (100.0 * 2f64.exp() + 1.0).ln();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 6.6066, epsilon = 1e-4);
    }

    #[test]
    fn hcm_full_set_is_arb() {
        let z = logits(&[vec![0.2, -1.3, 2.2, 0.0], vec![1.0, 1.5, -0.5, 3.0]]);
        let y = labels(&[1, 3], 4);
        let c = counts(&[40, 7, 3, 19]);
        assert_abs_diff_eq!(
            hcm_loss(&z, &y, &c, 4).unwrap(),
            arb_loss(&z, &y, &c).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn hcm_balanced_counts_is_ce() {
        let z = logits(&[vec![5.0, 0.0, 0.0]]);
        let y = labels(&[0], 3);
        let c = counts(&[1, 1, 1]);
        // target already ranks first, so N = 2 gives Psi = {0, 1}
        let v = hcm_loss(&z, &y, &c, 2).unwrap();
        assert_abs_diff_eq!(v, (1.0 + (-5f64).exp()).ln(), epsilon = 1e-14);
        let v = hcm_loss(&z, &y, &c, 3).unwrap();
        assert_abs_diff_eq!(v, cross_entropy(&z, &y).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn topn_examples() {
        assert_eq!(topn_from_fraction(15, 0.3).unwrap(), 4);
        assert_eq!(topn_from_fraction(10, 0.3).unwrap(), 3);
        assert_eq!(topn_from_fraction(2, 0.3).unwrap(), 1);
        assert_eq!(topn_from_fraction(1000, 0.3).unwrap(), 300);
        assert_eq!(topn_from_fraction(8, 0.3).unwrap(), 2);
        assert!(topn_from_fraction(0, 0.3).is_err());
        assert!(topn_from_fraction(5, 0.0).is_err());
        assert!(topn_from_fraction(5, 1.5).is_err());
    }
}
