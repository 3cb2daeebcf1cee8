use crate::error::{Error, Result};

use super::types::ClassCountTable;

/// Numerically stable softmax of `scores` restricted to `support`.
/// Entries outside the support are left at zero.
pub(crate) fn softmax_over(scores: &[f64], support: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    let max = support
        .iter()
        .map(|&j| scores[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &j in support {
        let e = (scores[j] - max).exp();
        out[j] = e;
        sum += e;
    }
    for &j in support {
        out[j] /= sum;
    }
    out
}

/// `ln sum_{j in support} exp(scores_j)`, max-shifted.
pub(crate) fn log_sum_exp_over(scores: &[f64], support: &[usize]) -> f64 {
    let max = support
        .iter()
        .map(|&j| scores[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = support.iter().map(|&j| (scores[j] - max).exp()).sum();
    max + sum.ln()
}

/// Standard softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let all: Vec<usize> = (0..z.len()).collect();
    softmax_over(z, &all)
}

/// Logits shifted by the log class prior: `z_j + ln n_j`.
pub(crate) fn balanced_scores(z: &[f64], log_counts: &[f64]) -> Vec<f64> {
    z.iter().zip(log_counts).map(|(a, b)| a + b).collect()
}

/// Count-aware softmax `P(j) = n_j e^{z_j} / sum_l n_l e^{z_l}`.
///
/// Evaluated as a softmax over `z + ln n`, so large logits do not overflow.
pub fn balanced_softmax(z: &[f64], counts: &ClassCountTable) -> Result<Vec<f64>> {
    if z.len() != counts.num_classes() {
        return Err(Error::shape(format!(
            "{} logits but {} class counts",
            z.len(),
            counts.num_classes()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits contain NaN or Inf"));
    }
    Ok(softmax(&balanced_scores(z, &counts.log_counts())))
}
