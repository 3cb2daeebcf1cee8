use ndarray::Array2;

use crate::error::{Error, Result};

use super::types::{EmbeddingBatch, LabelBatch};

/// Added under the square root of every pairwise distance so the gradient
/// at coincident embeddings is finite (zero).
pub const DISTANCE_EPS: f64 = 1e-12;

fn check_pairs(e: &EmbeddingBatch, y: &LabelBatch) -> Result<()> {
    if e.batch_size() != y.len() {
        return Err(Error::shape(format!(
            "{} embeddings but {} labels",
            e.batch_size(),
            y.len()
        )));
    }
    Ok(())
}

/// Guarded L2 distance between rows `i` and `j`, plus the unit direction
/// `(e_i - e_j) / d` used by the gradients.
fn pair_distance(v: &Array2<f64>, i: usize, j: usize) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = v.row(i).iter().zip(v.row(j)).map(|(a, b)| a - b).collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    let d = (sq + DISTANCE_EPS).sqrt();
    let dir = diff.into_iter().map(|x| x / d).collect();
    (d, dir)
}

/// Accumulates `coef * dir` into row `i` and its negation into row `j`.
fn scatter(grad: &mut Array2<f64>, i: usize, j: usize, coef: f64, dir: &[f64]) {
    for (k, &u) in dir.iter().enumerate() {
        grad[[i, k]] += coef * u;
        grad[[j, k]] -= coef * u;
    }
}

/// Mean over all pairs `i < j` of
/// `delta_ij * d_ij + (1 - delta_ij) * max(0, margin - d_ij)`.
/// Zero for batches with fewer than two samples.
pub fn contrastive_loss(e: &EmbeddingBatch, y: &LabelBatch, margin: f64) -> Result<f64> {
    contrastive_loss_grad(e, y, margin).map(|(v, _)| v)
}

pub fn contrastive_loss_grad(
    e: &EmbeddingBatch,
    y: &LabelBatch,
    margin: f64,
) -> Result<(f64, Array2<f64>)> {
    check_pairs(e, y)?;
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::invalid(format!("margin must be > 0, got {margin}")));
    }
    let b = e.batch_size();
    let v = e.vectors();
    let mut grad = Array2::zeros(v.raw_dim());
    if b < 2 {
        return Ok((0.0, grad));
    }
    let pairs = (b * (b - 1) / 2) as f64;
    let labels = y.labels();
    let mut total = 0.0;
    for i in 0..b {
        for j in i + 1..b {
            let (d, dir) = pair_distance(v, i, j);
            if labels[i] == labels[j] {
                total += d;
                scatter(&mut grad, i, j, 1.0 / pairs, &dir);
            } else if d < margin {
                total += margin - d;
                scatter(&mut grad, i, j, -1.0 / pairs, &dir);
            }
        }
    }
    Ok((total / pairs, grad))
}

/// Mean L2 distance over same-class pairs `i < j`; zero if there are none.
pub fn center_loss(e: &EmbeddingBatch, y: &LabelBatch) -> Result<f64> {
    center_loss_grad(e, y).map(|(v, _)| v)
}

pub fn center_loss_grad(e: &EmbeddingBatch, y: &LabelBatch) -> Result<(f64, Array2<f64>)> {
    check_pairs(e, y)?;
    let b = e.batch_size();
    let v = e.vectors();
    let labels = y.labels();
    let mut grad = Array2::zeros(v.raw_dim());
    let positives: Vec<(usize, usize)> = (0..b)
        .flat_map(|i| (i + 1..b).map(move |j| (i, j)))
        .filter(|&(i, j)| labels[i] == labels[j])
        .collect();
    if positives.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / positives.len() as f64;
    let mut total = 0.0;
    for &(i, j) in &positives {
        let (d, dir) = pair_distance(v, i, j);
        total += d;
        scatter(&mut grad, i, j, scale, &dir);
    }
    Ok((total * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn emb(rows: &[Vec<f64>]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(rows, 0).unwrap()
    }

    fn labels(v: &[usize]) -> LabelBatch {
        LabelBatch::new(v.to_vec(), 10).unwrap()
    }

    // sqrt(DISTANCE_EPS): the guarded distance of coincident points
    const COINCIDENT: f64 = 1e-6;

    #[test]
    fn identical_positive_pair() {
        let e = emb(&[vec![0.3, -0.2], vec![0.3, -0.2]]);
        let v = contrastive_loss(&e, &labels(&[1, 1]), 1.0).unwrap();
        assert!((0.0..=COINCIDENT).contains(&v));
        let (_, g) = contrastive_loss_grad(&e, &labels(&[1, 1]), 1.0).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn negative_pair_inside_margin() {
        let e = emb(&[vec![0.0, 0.0], vec![0.4, 0.0]]);
        let v = contrastive_loss(&e, &labels(&[0, 1]), 1.0).unwrap();
        assert_abs_diff_eq!(v, 0.6, epsilon = 1e-9);
    }

    #[test]
    fn negative_pair_outside_margin() {
        let e = emb(&[vec![0.0, 0.0], vec![1.5, 0.0]]);
        assert_eq!(contrastive_loss(&e, &labels(&[0, 1]), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_small_batches() {
        assert_eq!(contrastive_loss(&emb(&[vec![1.0]]), &labels(&[0]), 1.0).unwrap(), 0.0);
        assert!(contrastive_loss(&emb(&[vec![1.0]]), &labels(&[0, 1]), 1.0).is_err());
        assert!(contrastive_loss(&emb(&[vec![1.0]]), &labels(&[0]), 0.0).is_err());
    }

    #[test]
    fn center_examples() {
        let same = emb(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!(center_loss(&same, &labels(&[0, 0, 1])).unwrap() <= COINCIDENT);

        let pair = emb(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
        assert_abs_diff_eq!(center_loss(&pair, &labels(&[2, 2])).unwrap(), 5.0, epsilon = 1e-9);

        let distinct = emb(&[vec![0.0], vec![3.0], vec![9.0]]);
        assert_eq!(center_loss(&distinct, &labels(&[0, 1, 2])).unwrap(), 0.0);
    }

    #[test]
    fn center_is_positive_part_of_contrastive_when_all_same() {
        let e = emb(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 0.0]]);
        let y = labels(&[4, 4, 4]);
        assert_abs_diff_eq!(
            center_loss(&e, &y).unwrap(),
            contrastive_loss(&e, &y, 1.0).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_embedding_gradient_is_zero() {
        let e = EmbeddingBatch::new(Array2::zeros((4, 3)), 0).unwrap();
        let (_, g) = center_loss_grad(&e, &labels(&[0, 0, 1, 1])).unwrap();
        assert!(g.iter().all(|&x| x == 0.0 && x.is_finite()));
    }
}
