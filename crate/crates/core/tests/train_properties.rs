use recame_core::attention::AttentionKind;
use recame_core::datagen::{generate_dataset, load_split, DatasetSpec, Split};
use recame_core::losses::LossWeights;
use recame_core::train::{epoch_lr, train, train_on, TrainingConfig};

fn tiny(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        epochs,
        batch_size: 8,
        widths: vec![4, 8],
        attention: vec![AttentionKind::None, AttentionKind::RcAttn],
        reduction: 2,
        ..TrainingConfig::default()
    }
}

#[test]
fn single_branch_without_auxiliary_terms_is_plain_arb_hcm() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = generate_dataset(&DatasetSpec::toy(1), dir.path()).unwrap();
    let single = TrainingConfig {
        branches: 1,
        weights: LossWeights {
            w1: 0.0,
            w2: 0.0,
            alpha: 0.0,
            ..LossWeights::default()
        },
        ..tiny(3)
    };
    let a = train(&single, &m, None, &mut |_| {}).unwrap();
    // with one branch the distillation terms vanish, so alpha cannot matter
    let with_alpha = TrainingConfig {
        weights: LossWeights {
            alpha: 0.6,
            ..single.weights
        },
        ..single.clone()
    };
    let b = train(&with_alpha, &m, None, &mut |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    for r in &a.history.epochs {
        let l = r.losses;
        assert_eq!((l.kd_all, l.kd_hard), (0.0, 0.0));
        assert_eq!(l.total, l.arb + l.hcm);
    }
    assert_eq!(a.model.num_branches(), 1);
}

#[test]
fn counts_come_from_the_train_split_and_stay_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let (m, stats) = generate_dataset(&DatasetSpec::toy(2), dir.path()).unwrap();
    let out = train(&tiny(2), &m, None, &mut |_| {}).unwrap();
    assert_eq!(out.counts.counts(), stats.train_counts.as_slice());
    assert_eq!(out.counts.counts(), m.counts(Split::Train).as_slice());
}

#[test]
fn identical_seeds_give_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = generate_dataset(&DatasetSpec::toy(3), dir.path()).unwrap();
    let data = load_split(&m, Split::Train).unwrap();
    let counts = m.train_class_counts().unwrap();
    let cfg = TrainingConfig { augmentation: true, ..tiny(3) };
    let mut seen = Vec::new();
    let a = train_on(&cfg, &data, counts.clone(), None, &mut |r| seen.push(*r)).unwrap();
    let b = train_on(&cfg, &data, counts.clone(), None, &mut |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(seen, a.history.epochs);
    let c = train_on(&TrainingConfig { seed: 1, ..cfg.clone() }, &data, counts, None, &mut |_| {}).unwrap();
    assert_ne!(a.history, c.history);

    let lrs: Vec<f64> = a.history.epochs.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[0], cfg.lr_initial);
    assert_eq!(*lrs.last().unwrap(), cfg.lr_min);
    assert_eq!(lrs[1], epoch_lr(1, 3, cfg.lr_initial, cfg.lr_min).unwrap());
}

#[test]
fn rejects_label_outside_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = generate_dataset(&DatasetSpec::toy(4), dir.path()).unwrap();
    let mut data = load_split(&m, Split::Train).unwrap();
    data.labels[0] = 9;
    let err = train_on(&tiny(1), &data, m.train_class_counts().unwrap(), None, &mut |_| {}).unwrap_err();
    assert!(err.is_validation());
}
