use ndarray::Array2;

use crate::error::{Error, Result};

use super::classification::top_n;
use super::softmax::{balanced_scores, log_sum_exp_over, softmax};
use super::types::{ClassCountTable, HardCategorySet, LabelBatch, LogitBatch};

fn check_branches(branches: &[LogitBatch], counts: &ClassCountTable) -> Result<(usize, usize)> {
    if branches.len() < 2 {
        return Err(Error::invalid(format!(
            "distillation needs at least two branches, got {}",
            branches.len()
        )));
    }
    let dim = branches[0].values().dim();
    if let Some(b) = branches.iter().find(|b| b.values().dim() != dim) {
        return Err(Error::shape(format!(
            "branch {} has shape {:?}, expected {dim:?}",
            b.branch_id(),
            b.values().dim()
        )));
    }
    counts.check_classes(dim.1)?;
    if dim.0 == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(dim)
}

/// Log-probabilities of a softmax over `scores` restricted to `support`.
fn log_probs(scores: &[f64], support: &[usize]) -> Vec<f64> {
    let lse = log_sum_exp_over(scores, support);
    support.iter().map(|&j| scores[j] - lse).collect()
}

/// Mean KL divergence over ordered branch pairs and samples, each sample on
/// its own support, with gradients into both arguments of every KL term.
fn pairwise_kl(
    branches: &[LogitBatch],
    counts: &ClassCountTable,
    supports: impl Fn(usize) -> Vec<usize>,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let (batch, classes) = check_branches(branches, counts)?;
    let k = branches.len();
    let log_n = counts.log_counts();
    let scale = 1.0 / (k * (k - 1) * batch) as f64;
    let mut grads = vec![Array2::<f64>::zeros((batch, classes)); k];
    let mut total = 0.0;
    for i in 0..batch {
        let support = supports(i);
        let logp: Vec<Vec<f64>> = branches
            .iter()
            .map(|b| log_probs(&balanced_scores(&b.values().row(i).to_vec(), &log_n), &support))
            .collect();
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let (lp, lq) = (&logp[a], &logp[b]);
                let kl: f64 = lp.iter().zip(lq).map(|(p, q)| p.exp() * (p - q)).sum();
                total += kl;
                for (s, &j) in support.iter().enumerate() {
                    let (p, q) = (lp[s].exp(), lq[s].exp());
                    grads[a][[i, j]] += scale * p * (lp[s] - lq[s] - kl);
                    grads[b][[i, j]] += scale * (q - p);
                }
            }
        }
    }
    Ok((total * scale, grads))
}

/// Mutual distillation over all classes: mean over ordered branch pairs
/// `(k, l)`, `k != l`, and over samples of `KL(P_k || P_l)` where `P` is the
/// balanced softmax.
pub fn kd_all_loss(branches: &[LogitBatch], counts: &ClassCountTable) -> Result<f64> {
    kd_all_loss_grad(branches, counts).map(|(v, _)| v)
}

/// [`kd_all_loss`] plus one gradient matrix per branch.
pub fn kd_all_loss_grad(
    branches: &[LogitBatch],
    counts: &ClassCountTable,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let classes = branches.first().map_or(0, LogitBatch::num_classes);
    let all: Vec<usize> = (0..classes).collect();
    pairwise_kl(branches, counts, |_| all.clone())
}

/// Per-sample hard sets shared by all branches: Top-N of the mean of the
/// branches' standard softmax outputs, united with the target.
pub fn kd_hard_sets(
    branches: &[LogitBatch],
    y: &LabelBatch,
    n: usize,
) -> Result<Vec<HardCategorySet>> {
    let first = branches
        .first()
        .ok_or_else(|| Error::invalid("no branches"))?;
    let (batch, classes) = first.values().dim();
    y.check_against(batch, classes)?;
    if n < 1 || n > classes {
        return Err(Error::invalid(format!(
            "Top-N must lie in [1, {classes}], got {n}"
        )));
    }
    let mut sets = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut mean = vec![0.0; classes];
        for b in branches {
            for (m, p) in mean.iter_mut().zip(softmax(&b.values().row(i).to_vec())) {
                *m += p / branches.len() as f64;
            }
        }
        sets.push(HardCategorySet::from_members(y.labels()[i], top_n(&mean, n)));
    }
    Ok(sets)
}

/// Mutual distillation on hard categories: each branch's balanced softmax is
/// restricted to the shared hard set and renormalized before the KL terms.
pub fn kd_hard_loss(
    branches: &[LogitBatch],
    y: &LabelBatch,
    counts: &ClassCountTable,
    n: usize,
) -> Result<f64> {
    check_branches(branches, counts)?;
    let sets = kd_hard_sets(branches, y, n)?;
    kd_hard_loss_with_sets(branches, counts, &sets).map(|(v, _)| v)
}

/// [`kd_hard_loss`] for fixed hard sets, plus one gradient per branch.
pub fn kd_hard_loss_with_sets(
    branches: &[LogitBatch],
    counts: &ClassCountTable,
    sets: &[HardCategorySet],
) -> Result<(f64, Vec<Array2<f64>>)> {
    let (batch, _) = check_branches(branches, counts)?;
    if sets.len() != batch {
        return Err(Error::shape(format!(
            "{} hard sets for a batch of {batch}",
            sets.len()
        )));
    }
    pairwise_kl(branches, counts, |i| sets[i].members().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn counts(v: &[u64]) -> ClassCountTable {
        ClassCountTable::new(v.to_vec()).unwrap()
    }

    fn branch(rows: &[Vec<f64>], id: usize) -> LogitBatch {
        LogitBatch::from_rows(rows, id).unwrap()
    }

    fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn identical_branches_give_zero() {
        let z = vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.0, 0.5]];
        let bs = [branch(&z, 0), branch(&z, 1), branch(&z, 2)];
        let c = counts(&[9, 3, 1]);
        assert_abs_diff_eq!(kd_all_loss(&bs, &c).unwrap(), 0.0, epsilon = 1e-12);
        let y = LabelBatch::new(vec![2, 0], 3).unwrap();
        assert_abs_diff_eq!(kd_hard_loss(&bs, &y, &c, 1).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn two_branch_hand_kl() {
        // counts [3, 1] with z = [0, 0] gives p = [0.75, 0.25]; z = [-ln 3, 0] gives q = [0.5, 0.5]
        let c = counts(&[3, 1]);
        let bs = [branch(&[vec![0.0, 0.0]], 0), branch(&[vec![-(3f64.ln()), 0.0]], 1)];
        let p = [0.75, 0.25];
        let q = [0.5, 0.5];
        let oracle = (kl(&p, &q) + kl(&q, &p)) / 2.0;
        let v = kd_all_loss(&bs, &c).unwrap();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.1373, epsilon = 1e-4);
    }

    #[test]
    fn needs_two_branches() {
        let c = counts(&[1, 1]);
        assert!(kd_all_loss(&[branch(&[vec![0.0, 0.0]], 0)], &c).is_err());
        let mismatched = [branch(&[vec![0.0, 0.0]], 0), branch(&[vec![0.0, 0.0], vec![0.0, 0.0]], 1)];
        assert!(kd_all_loss(&mismatched, &c).is_err());
    }

    #[test]
    fn hard_full_set_equals_all() {
        let c = counts(&[50, 5, 2, 1]);
        let bs = [
            branch(&[vec![0.1, 2.0, -0.4, 1.2], vec![-1.0, 0.3, 0.9, 0.0]], 0),
            branch(&[vec![1.1, -0.5, 0.6, 0.2], vec![0.4, 0.4, -2.0, 1.5]], 1),
        ];
        let y = LabelBatch::new(vec![3, 1], 4).unwrap();
        assert_abs_diff_eq!(
            kd_hard_loss(&bs, &y, &c, 4).unwrap(),
            kd_all_loss(&bs, &c).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn hard_matches_brute_force() {
        // K=2, C=3, N=1; all quantities enumerated by hand below
        let c = counts(&[10, 4, 1]);
        let z0 = [2.0, 0.5, -1.0];
        let z1 = [0.0, 1.5, 0.2];
        let y = 2;
        let bs = [branch(&[z0.to_vec()], 0), branch(&[z1.to_vec()], 1)];

        let sm = |z: &[f64]| {
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            z.iter().map(|v| v.exp() / s).collect::<Vec<_>>()
        };
        let mean: Vec<f64> = sm(&z0).iter().zip(sm(&z1)).map(|(a, b)| (a + b) / 2.0).collect();
        let top = (0..3).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        let mut psi = vec![top, y];
        psi.sort();
        psi.dedup();

        let restricted = |z: &[f64]| {
            let w: Vec<f64> = psi.iter().map(|&j| c.get(j) as f64 * z[j].exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (restricted(&z0), restricted(&z1));
        let oracle = (kl(&p, &q) + kl(&q, &p)) / 2.0;

        let labels = LabelBatch::new(vec![y], 3).unwrap();
        let v = kd_hard_loss(&bs, &labels, &c, 1).unwrap();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
    }
}
