use std::fs;
use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{load_split, DatasetManifest, Split, SplitData};
use crate::error::{Error, Result};
use crate::losses::{objective, topn_from_fraction, ClassCountTable, LabelBatch, LossBreakdown, LossWeights};
use crate::model::checkpoint::CheckpointMeta;
use crate::model::{loss_inputs, save_checkpoint, MultiExpertModel};
use crate::nn::Module;

use super::{epoch_lr, EpochRecord, Sgd, TrainingConfig, TrainingHistory};

/// Model, history and the frozen class counts of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MultiExpertModel<f32>,
    pub history: TrainingHistory,
    pub counts: ClassCountTable,
    pub top_n: usize,
}

/// Fails with the name of the first non-finite term.
pub fn check_finite(b: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    match b.terms().into_iter().find(|(_, v)| !v.is_finite()) {
        Some((term, _)) => Err(Error::NonFiniteLoss { term, epoch, step }),
        None => Ok(()),
    }
}

/// One optimizer step on a batch; returns the batch's loss terms.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut MultiExpertModel<f32>,
    sgd: &mut Sgd<f32>,
    x: &Array4<f32>,
    labels: &LabelBatch,
    counts: &ClassCountTable,
    config: &TrainingConfig,
    weights: &LossWeights,
    top_n: usize,
    lr: f64,
    (epoch, step): (usize, usize),
) -> Result<LossBreakdown> {
    model.zero_grad();
    let outs = model.forward(x, true)?;
    let (logits, embeddings) = loss_inputs(&outs)?;
    let (breakdown, grads) = objective(&logits, &embeddings, labels, counts, weights, top_n, &config.loss_terms)?;
    check_finite(&breakdown, epoch, step)?;
    model.backward(&grads)?;
    let mut params = Vec::new();
    model.params_mut(&mut params);
    sgd.step(params, lr)?;
    Ok(breakdown)
}

fn flip_horizontal(x: &mut Array4<f32>, rng: &mut ChaCha8Rng) {
    for mut img in x.outer_iter_mut() {
        if rng.random_bool(0.5) {
            img.invert_axis(Axis(1));
            let flipped = img.to_owned();
            img.assign(&flipped);
        }
    }
}

/// Trains on the train split of `manifest`. With `out_dir`, writes
/// `history.csv` after every epoch and checkpoints under `checkpoints/`.
pub fn train(
    config: &TrainingConfig,
    manifest: &DatasetManifest,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let counts = manifest.train_class_counts()?;
    let data = load_split(manifest, Split::Train)?;
    train_on(config, &data, counts, out_dir, observer)
}

/// [`train`] on already-decoded data.
pub fn train_on(
    config: &TrainingConfig,
    data: &SplitData,
    counts: ClassCountTable,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let c = counts.num_classes();
    if let Some(&y) = data.labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {y} outside {c} classes")));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::invalid("need at least two training samples"));
    }
    let size = data.images.dim().1;
    let model_cfg = config.model_config(c, size);
    let mut model = MultiExpertModel::<f32>::new(&model_cfg, config.seed)?;
    let top_n = topn_from_fraction(c, config.topn_fraction)?;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0000_0001_u64);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0000_0002_u64);
    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    let mut history = TrainingHistory::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let lr = epoch_lr(epoch, config.epochs, config.lr_initial, config.lr_min)?;
        let mut weights = config.weights;
        if epoch < config.kd_warmup_epochs {
            weights.alpha = 0.0;
        }
        order.shuffle(&mut order_rng);
        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut x = data.images.select(Axis(0), chunk);
            if config.augmentation {
                flip_horizontal(&mut x, &mut aug_rng);
            }
            let labels = LabelBatch::new(chunk.iter().map(|&i| data.labels[i]).collect(), c)?;
            let b = train_step(
                &mut model,
                &mut sgd,
                &x,
                &labels,
                &counts,
                config,
                &weights,
                top_n,
                lr,
                (epoch + 1, step),
            )?;
            for (s, v) in sums.iter_mut().zip([b.arb, b.hcm, b.contrastive, b.center, b.kd_all, b.kd_hard]) {
                *s += v;
            }
            batches += 1;
            step += 1;
        }
        let m = sums.map(|s| s / batches as f64);
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            losses: LossBreakdown::compose(m[0], m[1], m[2], m[3], m[4], m[5], &weights),
        };
        history.epochs.push(record);
        observer(&record);
        if let (Some(dir), Some(ck)) = (out_dir, &ckpt_dir) {
            history.write_csv(&dir.join("history.csv"))?;
            if config.save_every > 0 && (epoch + 1) % config.save_every == 0 {
                let meta = meta(&model, &counts, config, epoch + 1);
                save_checkpoint(&model, &meta, &ck.join(format!("epoch_{:04}", epoch + 1)))?;
            }
        }
    }
    if let Some(ck) = &ckpt_dir {
        fs::create_dir_all(ck)?;
        save_checkpoint(&model, &meta(&model, &counts, config, config.epochs), &ck.join("final"))?;
    }
    Ok(TrainOutcome {
        model,
        history,
        counts,
        top_n,
    })
}

fn meta(model: &MultiExpertModel<f32>, counts: &ClassCountTable, config: &TrainingConfig, epoch: usize) -> CheckpointMeta {
    let size = model.input_shape().0;
    CheckpointMeta {
        k: model.num_branches(),
        c: model.num_classes(),
        d: model.embedding_dim(),
        class_counts: counts.counts().to_vec(),
        config_hash: config.hash(),
        epoch,
        model: config.model_config(model.num_classes(), size),
    }
}
