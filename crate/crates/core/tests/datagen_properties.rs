use std::collections::HashSet;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recame_core::datagen::{
    assign_splits, generate_dataset, read_manifest, record_seed, render_sample, DatasetSpec, Split,
};

fn l2(a: &[u8], b: &[u8]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn head_class_clusters_by_product_line() {
    let spec = DatasetSpec::icdefect_mini(0);
    let p = spec.num_product_lines;
    assert!(p >= 3);
    let render = |line: usize, i: usize| {
        render_sample(
            line,
            0,
            p,
            spec.num_classes,
            record_seed(spec.seed, 0, line, i),
            spec.image_size,
            spec.noise,
        )
        .unwrap()
        .pixels
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut within, mut across) = (0.0, 0.0);
    for _ in 0..100 {
        let l = rng.random_range(0..p);
        let (i, j) = (rng.random_range(0..20), rng.random_range(20..40));
        within += l2(&render(l, i), &render(l, j));
        let m = (l + rng.random_range(1..p)) % p;
        across += l2(&render(l, i), &render(m, j));
    }
    assert!(across > within, "across {across} within {within}");
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_byte_identical_and_splits_are_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::toy(4);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_dataset(&spec, &a).unwrap();
    generate_dataset(&spec, &b).unwrap();
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.len(), tb.len());
    assert!(ta == tb, "generated trees differ");

    let m = read_manifest(&a.join("manifest.jsonl")).unwrap();
    let train: HashSet<_> = m.split(Split::Train).map(|r| &r.path).collect();
    let test: HashSet<_> = m.split(Split::Test).map(|r| &r.path).collect();
    assert!(train.is_disjoint(&test));
    let (tr, te) = (m.counts(Split::Train), m.counts(Split::Test));
    for (c, total) in spec.class_totals().iter().enumerate() {
        assert_eq!(tr[c] + te[c], *total);
        assert!(tr[c] >= 1);
    }

    let other = tmp.path().join("c");
    generate_dataset(&DatasetSpec::toy(5), &other).unwrap();
    assert_ne!(read_tree(&other), ta);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn split_assignment_covers_every_cell(
        counts in prop::collection::vec(prop::collection::vec(0u64..40, 2), 2..6),
        seed in any::<u64>(),
    ) {
        let mut counts = counts;
        for row in &mut counts {
            if row.iter().sum::<u64>() == 0 {
                row[0] = 1;
            }
        }
        let spec = DatasetSpec {
            num_classes: counts.len(),
            num_product_lines: 2,
            counts: counts.clone(),
            image_size: 8,
            noise: 0.0,
            seed,
        };
        let s = assign_splits(&spec);
        for (c, row) in counts.iter().enumerate() {
            let mut train = 0;
            for (l, &n) in row.iter().enumerate() {
                prop_assert_eq!(s[c][l].len() as u64, n);
                let t = s[c][l].iter().filter(|&&x| x == Split::Train).count() as u64;
                let floor = (n as f64 * 0.6 + 1e-9).floor() as u64;
                prop_assert!(t == floor || (floor == 0 && t == 1));
                train += t;
            }
            prop_assert!(train >= 1);
        }
        prop_assert_eq!(assign_splits(&spec), s);
    }
}
