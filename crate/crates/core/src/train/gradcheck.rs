//! Central finite-difference checks of every analytic gradient.
//!
//! Each check draws random small instances in `f64`, perturbs every input
//! entry by `±FD_STEP` and compares the numeric derivative with the analytic
//! one. Hard category sets are selected once per instance and held fixed.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::RegionalChannelAttention;
use crate::error::{Error, Result};
use crate::losses::{
    arb_loss_grad, center_loss_grad, contrastive_loss_grad, hard_category_sets, hcm_loss_with_sets, kd_all_loss_grad,
    kd_hard_loss_with_sets, kd_hard_sets, ClassCountTable, EmbeddingBatch, LabelBatch, LogitBatch,
};
use crate::model::CosineHead;
use crate::nn::Module;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-5;
/// Random instances per check.
pub const INSTANCES: usize = 20;

/// Every name accepted by [`gradcheck`].
pub const CHECK_NAMES: [&str; 8] = [
    "arb",
    "hcm",
    "contrastive",
    "center",
    "kd_all",
    "kd_hard",
    "rc_attn",
    "cosine_head",
];

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub name: String,
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Largest relative error between `grad` and central differences of `f`.
pub fn matrix_error(x: &Array2<f64>, grad: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (idx, &g) in grad.indexed_iter() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[idx] += FD_STEP;
        xm[idx] -= FD_STEP;
        let num = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(g, num));
    }
    worst
}

/// Largest relative error of a layer's input and parameter gradients,
/// for the scalar readout `sum(R * forward(x))` with random `R`.
pub fn layer_relative_error<L, F, B, R>(mut layer: L, x: Array4<f64>, forward: F, backward: B, rng: &mut R) -> f64
where
    L: Module<f64> + Clone,
    F: Fn(&mut L, &Array4<f64>, bool) -> Array4<f64>,
    B: Fn(&mut L, &Array4<f64>) -> Array4<f64>,
    R: Rng + ?Sized,
{
    layer.zero_grad();
    let out = forward(&mut layer, &x, true);
    let r = ArrayD::from_shape_fn(IxDyn(out.shape()), |_| rng.random::<f64>() * 2.0 - 1.0);
    let r4: Array4<f64> = r.clone().into_dimensionality().expect("4-D");
    let dx = backward(&mut layer, &r4);

    let eval = |l: &L, x: &Array4<f64>| {
        let mut l = l.clone();
        (forward(&mut l, x, true) * &r4).sum()
    };

    let mut worst: f64 = 0.0;
    let xs = x.as_slice().expect("standard layout");
    for idx in 0..xs.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().expect("standard layout")[idx] += FD_STEP;
        xm.as_slice_mut().expect("standard layout")[idx] -= FD_STEP;
        let num = (eval(&layer, &xp) - eval(&layer, &xm)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(dx.as_slice().expect("standard layout")[idx], num));
    }

    let grads: Vec<ArrayD<f64>> = {
        let mut ps = Vec::new();
        layer.params_mut(&mut ps);
        ps.into_iter().map(|p| p.grad.clone()).collect()
    };
    for (pi, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let shifted = |delta: f64| {
                let mut l = layer.clone();
                {
                    let mut ps = Vec::new();
                    l.params_mut(&mut ps);
                    ps[pi].value.as_slice_mut().expect("standard layout")[idx] += delta;
                }
                eval(&l, &x)
            };
            let num = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(g.as_slice().expect("standard layout")[idx], num));
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

fn random_counts(rng: &mut ChaCha8Rng, c: usize) -> ClassCountTable {
    ClassCountTable::new((0..c).map(|_| rng.random_range(1..500)).collect()).expect("positive counts")
}

fn random_labels(rng: &mut ChaCha8Rng, b: usize, c: usize) -> LabelBatch {
    LabelBatch::new((0..b).map(|_| rng.random_range(0..c)).collect(), c).expect("labels in range")
}

fn logits(v: &Array2<f64>, k: usize) -> LogitBatch {
    LogitBatch::new(v.clone(), k).expect("finite")
}

fn embeddings(v: &Array2<f64>) -> EmbeddingBatch {
    EmbeddingBatch::new(v.clone(), 0).expect("finite")
}

fn instance_error(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    Ok(match name {
        "arb" => {
            let (b, c) = (rng.random_range(2..6), rng.random_range(2..7));
            let z = uniform(rng, (b, c), 3.0);
            let y = random_labels(rng, b, c);
            let n = random_counts(rng, c);
            let (_, g) = arb_loss_grad(&logits(&z, 0), &y, &n)?;
            matrix_error(&z, &g, |z| arb_loss_grad(&logits(z, 0), &y, &n).expect("valid").0)
        }
        "hcm" => {
            let (b, c) = (rng.random_range(2..6), rng.random_range(2..7));
            let z = uniform(rng, (b, c), 3.0);
            let y = random_labels(rng, b, c);
            let n = random_counts(rng, c);
            let top = rng.random_range(1..=c);
            let sets = hard_category_sets(&logits(&z, 0), &y, top)?;
            let (_, g) = hcm_loss_with_sets(&logits(&z, 0), &y, &n, &sets)?;
            matrix_error(&z, &g, |z| hcm_loss_with_sets(&logits(z, 0), &y, &n, &sets).expect("valid").0)
        }
        "contrastive" => {
            let (b, d) = (rng.random_range(2..7), rng.random_range(2..5));
            let y = random_labels(rng, b, 3);
            let margin = 1.0;
            // keep every pair away from the hinge so the loss is smooth around the point
            let e = loop {
                let e = uniform(rng, (b, d), 0.6);
                let near_hinge = (0..b).any(|i| {
                    (i + 1..b).any(|j| {
                        let dist = (&e.row(i) - &e.row(j)).mapv(|v| v * v).sum().sqrt();
                        (dist - margin).abs() < 1e-3
                    })
                });
                if !near_hinge {
                    break e;
                }
            };
            let (_, g) = contrastive_loss_grad(&embeddings(&e), &y, margin)?;
            matrix_error(&e, &g, |e| contrastive_loss_grad(&embeddings(e), &y, margin).expect("valid").0)
        }
        "center" => {
            let (b, d) = (rng.random_range(2..7), rng.random_range(2..5));
            let y = random_labels(rng, b, 2);
            let e = uniform(rng, (b, d), 1.0);
            let (_, g) = center_loss_grad(&embeddings(&e), &y)?;
            matrix_error(&e, &g, |e| center_loss_grad(&embeddings(e), &y).expect("valid").0)
        }
        "kd_all" | "kd_hard" => {
            let (k, b, c) = (rng.random_range(2..4), rng.random_range(1..4), rng.random_range(2..6));
            let zs: Vec<Array2<f64>> = (0..k).map(|_| uniform(rng, (b, c), 2.0)).collect();
            let n = random_counts(rng, c);
            let y = random_labels(rng, b, c);
            let batches = |zs: &[Array2<f64>]| -> Vec<LogitBatch> {
                zs.iter().enumerate().map(|(i, z)| logits(z, i)).collect()
            };
            let sets = if name == "kd_hard" {
                Some(kd_hard_sets(&batches(&zs), &y, rng.random_range(1..=c))?)
            } else {
                None
            };
            let eval = |zs: &[Array2<f64>]| match &sets {
                Some(s) => kd_hard_loss_with_sets(&batches(zs), &n, s),
                None => kd_all_loss_grad(&batches(zs), &n),
            };
            let (_, grads) = eval(&zs)?;
            let mut worst: f64 = 0.0;
            for (bi, g) in grads.iter().enumerate() {
                let err = matrix_error(&zs[bi], g, |z| {
                    let mut shifted = zs.clone();
                    shifted[bi] = z.clone();
                    eval(&shifted).expect("valid").0
                });
                worst = worst.max(err);
            }
            worst
        }
        "rc_attn" => {
            let (h, w, c) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6));
            let per_quadrant = rng.random_bool(0.25);
            let layer = RegionalChannelAttention::<f64>::new(c, rng.random_range(1..3), per_quadrant, rng);
            let x = Array4::from_shape_fn((2, h, w, c), |_| rng.random::<f64>() * 2.0 - 1.0);
            layer_relative_error(
                layer,
                x,
                |l, x, t| l.forward(x, t).expect("valid shapes"),
                |l, g| l.backward(g).expect("cached"),
                rng,
            )
        }
        "cosine_head" => {
            let (b, c, d) = (rng.random_range(1..5), rng.random_range(2..6), rng.random_range(2..6));
            let mut head = CosineHead::<f64>::new(c, d, rng.random_range(1.0..20.0), rng);
            let e = uniform(rng, (b, d), 1.0);
            let r = uniform(rng, (b, c), 1.0);
            head.zero_grad();
            head.forward(&e, true)?;
            let de = head.backward(&r)?;
            let readout = |h: &CosineHead<f64>, e: &Array2<f64>| (h.clone().forward(e, false).expect("valid") * &r).sum();
            let mut worst = matrix_error(&e, &de, |e| readout(&head, e));
            let w = head.weight.value.clone().into_dimensionality().expect("2-D");
            let gw = head.weight.grad.clone().into_dimensionality().expect("2-D");
            worst = worst.max(matrix_error(&w, &gw, |w| {
                let mut h = head.clone();
                h.weight.value = w.clone().into_dyn();
                readout(&h, &e)
            }));
            worst
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown gradient check {other:?}; expected one of {CHECK_NAMES:?}"
            )))
        }
    })
}

/// Runs [`INSTANCES`] random instances of one check.
pub fn gradcheck(name: &str, seed: u64) -> Result<GradcheckReport> {
    if !CHECK_NAMES.contains(&name) {
        return Err(Error::invalid(format!(
            "unknown gradient check {name:?}; expected one of {CHECK_NAMES:?}"
        )));
    }
    let idx = CHECK_NAMES.iter().position(|&n| n == name).expect("checked") as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(idx));
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        worst = worst.max(instance_error(name, &mut rng)?);
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        seed,
        instances: INSTANCES,
        step: FD_STEP,
        tolerance: REL_TOLERANCE,
        max_relative_error: worst,
        passed: worst < REL_TOLERANCE,
    })
}

pub fn gradcheck_all(seed: u64) -> Result<Vec<GradcheckReport>> {
    CHECK_NAMES.iter().map(|n| gradcheck(n, seed)).collect()
}
