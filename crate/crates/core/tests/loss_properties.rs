use ndarray::Array2;
use proptest::prelude::*;
use recame_core::losses::{
    arb_loss, balanced_softmax, center_loss, contrastive_loss, cross_entropy, hcm_loss, kd_all_loss, kd_hard_loss,
    ClassCountTable, EmbeddingBatch, LabelBatch, LogitBatch,
};

#[derive(Debug, Clone)]
struct Case {
    z: Array2<f64>,
    y: Vec<usize>,
    counts: Vec<u64>,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..6, 2usize..8).prop_flat_map(|(b, c)| {
        (
            prop::collection::vec(-8.0..8.0f64, b * c),
            prop::collection::vec(0..c, b),
            prop::collection::vec(1u64..5000, c),
        )
            .prop_map(move |(z, y, counts)| Case {
                z: Array2::from_shape_vec((b, c), z).unwrap(),
                y,
                counts,
            })
    })
}

fn batch(z: &Array2<f64>, k: usize) -> LogitBatch {
    LogitBatch::new(z.clone(), k).unwrap()
}

fn labels(y: &[usize], c: usize) -> LabelBatch {
    LabelBatch::new(y.to_vec(), c).unwrap()
}

fn table(n: &[u64]) -> ClassCountTable {
    ClassCountTable::new(n.to_vec()).unwrap()
}

/// Mean `-log softmax(z + log n)[y]`, written out directly.
fn balanced_ce_oracle(z: &Array2<f64>, y: &[usize], n: &[u64]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in z.rows().into_iter().zip(y) {
        let a: Vec<f64> = row.iter().zip(n).map(|(v, &c)| v + (c as f64).ln()).collect();
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - a[t];
    }
    total / y.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn balanced_softmax_sums_to_one(c in case()) {
        let n = table(&c.counts);
        for row in c.z.rows() {
            let p = balanced_softmax(row.as_slice().unwrap(), &n).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn arb_matches_balanced_oracle(c in case()) {
        let (b, cl) = c.z.dim();
        let got = arb_loss(&batch(&c.z, 0), &labels(&c.y, cl), &table(&c.counts)).unwrap();
        let want = balanced_ce_oracle(&c.z, &c.y, &c.counts);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "b={b} {got} vs {want}");
    }

    #[test]
    fn arb_is_cross_entropy_under_equal_counts(c in case(), n in 1u64..10_000) {
        let cl = c.z.ncols();
        let eq = vec![n; cl];
        let y = labels(&c.y, cl);
        let arb = arb_loss(&batch(&c.z, 0), &y, &table(&eq)).unwrap();
        let ce = cross_entropy(&batch(&c.z, 0), &y).unwrap();
        let oracle = balanced_ce_oracle(&c.z, &c.y, &vec![1; cl]);
        prop_assert!((arb - ce).abs() <= 1e-9);
        prop_assert!((ce - oracle).abs() <= 1e-9);
    }

    #[test]
    fn hcm_with_every_class_is_arb(c in case()) {
        let cl = c.z.ncols();
        let (z, y, n) = (batch(&c.z, 0), labels(&c.y, cl), table(&c.counts));
        let hcm = hcm_loss(&z, &y, &n, cl).unwrap();
        let arb = arb_loss(&z, &y, &n).unwrap();
        prop_assert!((hcm - arb).abs() <= 1e-12);
    }

    #[test]
    fn hcm_never_exceeds_arb(c in case(), frac in 0.0..1.0f64) {
        let cl = c.z.ncols();
        let top = 1 + (frac * (cl - 1) as f64) as usize;
        let (z, y, n) = (batch(&c.z, 0), labels(&c.y, cl), table(&c.counts));
        let hcm = hcm_loss(&z, &y, &n, top).unwrap();
        let arb = arb_loss(&z, &y, &n).unwrap();
        prop_assert!(hcm <= arb + 1e-12);
        prop_assert!(hcm >= -1e-12);
    }

    #[test]
    fn kd_hard_with_every_class_is_kd_all(c in case(), dz in prop::collection::vec(-3.0..3.0f64, 40)) {
        let (b, cl) = c.z.dim();
        let z2 = Array2::from_shape_fn((b, cl), |(i, j)| c.z[[i, j]] + dz[(i * cl + j) % dz.len()]);
        let branches = [batch(&c.z, 0), batch(&z2, 1)];
        let n = table(&c.counts);
        let all = kd_all_loss(&branches, &n).unwrap();
        let hard = kd_hard_loss(&branches, &labels(&c.y, cl), &n, cl).unwrap();
        prop_assert!((all - hard).abs() <= 1e-12);
        prop_assert!(all >= -1e-12 && hard >= -1e-12);
    }

    #[test]
    fn kd_vanishes_for_identical_branches(c in case(), top in 1usize..8) {
        let cl = c.z.ncols();
        let branches = [batch(&c.z, 0), batch(&c.z, 1), batch(&c.z, 2)];
        let n = table(&c.counts);
        prop_assert!(kd_all_loss(&branches, &n).unwrap().abs() <= 1e-12);
        let hard = kd_hard_loss(&branches, &labels(&c.y, cl), &n, top.min(cl)).unwrap();
        prop_assert!(hard.abs() <= 1e-12);
    }

    #[test]
    fn shift_invariance(c in case(), shift in -50.0..50.0f64) {
        let cl = c.z.ncols();
        let shifted = c.z.mapv(|v| v + shift);
        let (y, n) = (labels(&c.y, cl), table(&c.counts));
        let a = arb_loss(&batch(&c.z, 0), &y, &n).unwrap();
        let b = arb_loss(&batch(&shifted, 0), &y, &n).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
        let top = (cl / 2).max(1);
        let h1 = hcm_loss(&batch(&c.z, 0), &y, &n, top).unwrap();
        let h2 = hcm_loss(&batch(&shifted, 0), &y, &n, top).unwrap();
        prop_assert!((h1 - h2).abs() <= 1e-9);
        for (r, s) in c.z.rows().into_iter().zip(shifted.rows()) {
            let p = balanced_softmax(r.as_slice().unwrap(), &n).unwrap();
            let q = balanced_softmax(s.as_slice().unwrap(), &n).unwrap();
            prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-9));
        }
    }

    #[test]
    fn class_permutation_leaves_losses_unchanged(c in case(), rot in 0usize..8) {
        let (b, cl) = c.z.dim();
        // class j moves to position (j + rot) % cl
        let to = |j: usize| (j + rot) % cl;
        let mut zp = Array2::zeros((b, cl));
        for i in 0..b {
            for j in 0..cl {
                zp[[i, to(j)]] = c.z[[i, j]];
            }
        }
        let mut np = vec![0; cl];
        for j in 0..cl {
            np[to(j)] = c.counts[j];
        }
        let yp: Vec<usize> = c.y.iter().map(|&t| to(t)).collect();
        let (y, n) = (labels(&c.y, cl), table(&c.counts));
        let (y2, n2) = (labels(&yp, cl), table(&np));
        let arb = arb_loss(&batch(&c.z, 0), &y, &n).unwrap();
        let arb2 = arb_loss(&batch(&zp, 0), &y2, &n2).unwrap();
        prop_assert!((arb - arb2).abs() <= 1e-12);
        // ties in the hard-set selection are resolved by index, so only the full set is permutation-safe
        let hcm = hcm_loss(&batch(&c.z, 0), &y, &n, cl).unwrap();
        let hcm2 = hcm_loss(&batch(&zp, 0), &y2, &n2, cl).unwrap();
        prop_assert!((hcm - hcm2).abs() <= 1e-12);
        let z1 = c.z.mapv(|v| 0.5 * v - 1.0);
        let mut z1p = Array2::zeros((b, cl));
        for i in 0..b {
            for j in 0..cl {
                z1p[[i, to(j)]] = z1[[i, j]];
            }
        }
        let kd = kd_all_loss(&[batch(&c.z, 0), batch(&z1, 1)], &n).unwrap();
        let kd2 = kd_all_loss(&[batch(&zp, 0), batch(&z1p, 1)], &n2).unwrap();
        prop_assert!((kd - kd2).abs() <= 1e-12);
    }

    #[test]
    fn metric_losses_nonnegative(
        (b, d) in (1usize..8, 1usize..6),
        seed in any::<u64>(),
        margin in 0.1..3.0f64,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let e = Array2::from_shape_fn((b, d), |_| rng.random_range(-2.0..2.0));
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let e = EmbeddingBatch::new(e, 0).unwrap();
        let y = labels(&y, 3);
        prop_assert!(contrastive_loss(&e, &y, margin).unwrap() >= -1e-12);
        prop_assert!(center_loss(&e, &y).unwrap() >= -1e-12);
    }
}
