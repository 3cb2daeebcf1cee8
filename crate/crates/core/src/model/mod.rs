//! The multi-expert classifier: `K` independent branches, each a backbone
//! with attention followed by a cosine head.

mod backbone;
pub mod checkpoint;
mod head;

use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{softmax, BranchGradients, EmbeddingBatch, LogitBatch};
use crate::nn::{join, Module, Param, Real};

pub use backbone::{Backbone, SmallCnn, SmallCnnConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use head::{cosine_head, CosineHead, DEFAULT_SCALE, NORM_EPS};

/// Feature extractor family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneId {
    #[default]
    SmallCnn,
}

/// Everything needed to rebuild a [`MultiExpertModel`] with fresh weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub branches: usize,
    pub num_classes: usize,
    pub head_scale: f64,
    pub backbone: BackboneId,
    pub small_cnn: SmallCnnConfig,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            branches: 2,
            num_classes,
            head_scale: DEFAULT_SCALE,
            backbone: BackboneId::SmallCnn,
            small_cnn: SmallCnnConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 {
            return Err(Error::invalid("a model needs at least one branch"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        if !(self.head_scale > 0.0 && self.head_scale.is_finite()) {
            return Err(Error::invalid(format!("head scale must be > 0, got {}", self.head_scale)));
        }
        self.small_cnn.validate()
    }
}

/// Embeddings and logits of one branch for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput<T> {
    pub embeddings: Array2<T>,
    pub logits: Array2<T>,
}

/// One expert: backbone plus cosine head, with its own parameters.
#[derive(Debug, Clone)]
pub struct ExpertBranch<T, B> {
    pub backbone: B,
    pub head: CosineHead<T>,
}

impl<T: Real, B: Backbone<T>> ExpertBranch<T, B> {
    pub fn new(backbone: B, head: CosineHead<T>) -> Result<Self> {
        if head.dim() != backbone.embedding_dim() {
            return Err(Error::shape(format!(
                "head width {} does not match backbone width {}",
                head.dim(),
                backbone.embedding_dim()
            )));
        }
        Ok(Self { backbone, head })
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<BranchOutput<T>> {
        let embeddings = self.backbone.forward(x, train)?;
        let logits = self.head.forward(&embeddings, train)?;
        Ok(BranchOutput { embeddings, logits })
    }

    /// Backpropagates gradients with respect to this branch's logits and
    /// embeddings.
    pub fn backward(&mut self, dlogits: &Array2<T>, dembeddings: &Array2<T>) -> Result<()> {
        let mut de = self.head.backward(dlogits)?;
        if de.dim() != dembeddings.dim() {
            return Err(Error::shape("embedding gradient has the wrong shape"));
        }
        de += dembeddings;
        self.backbone.backward(&de)
    }
}

impl<T: Real, B: Backbone<T>> Module<T> for ExpertBranch<T, B> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.backbone.params_mut(out);
        self.head.params_mut(out);
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        self.backbone.tensors(&join(prefix, "backbone"), out);
        self.head.tensors(&join(prefix, "head"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        self.backbone.tensors_mut(&join(prefix, "backbone"), out);
        self.head.tensors_mut(&join(prefix, "head"), out);
    }
}

/// Predicted class ids and the consensus probabilities they come from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub probabilities: Array2<f64>,
}

/// Mean over branches of the standard softmax, argmax with ties to the lower
/// class id.
pub fn consensus(branch_logits: &[Array2<f64>]) -> Result<Prediction> {
    let first = branch_logits.first().ok_or_else(|| Error::invalid("no branches"))?;
    let dim = first.dim();
    if branch_logits.iter().any(|z| z.dim() != dim) {
        return Err(Error::shape("branch logits disagree in shape"));
    }
    let inv_k = 1.0 / branch_logits.len() as f64;
    let mut probs = Array2::zeros(dim);
    for z in branch_logits {
        for (mut out, row) in probs.rows_mut().into_iter().zip(z.rows()) {
            for (o, p) in out.iter_mut().zip(softmax(&row.to_vec())) {
                *o += p * inv_k;
            }
        }
    }
    let classes = probs
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &p)| if p > best.1 { (j, p) } else { best })
                .0
        })
        .collect();
    Ok(Prediction {
        classes,
        probabilities: probs,
    })
}

/// `K` expert branches sharing class count and embedding width.
#[derive(Debug, Clone)]
pub struct MultiExpertModel<T, B = SmallCnn<T>> {
    pub branches: Vec<ExpertBranch<T, B>>,
}

impl<T: Real> MultiExpertModel<T, SmallCnn<T>> {
    /// Fresh weights for every branch, drawn in branch order from one
    /// seeded stream.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = *config.small_cnn.widths.last().expect("validated");
        let branches = (0..config.branches)
            .map(|_| {
                let backbone = SmallCnn::new(config.small_cnn.clone(), &mut rng)?;
                let head = CosineHead::new(config.num_classes, dim, config.head_scale, &mut rng);
                ExpertBranch::new(backbone, head)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }
}

impl<T: Real, B: Backbone<T>> MultiExpertModel<T, B> {
    pub fn from_branches(branches: Vec<ExpertBranch<T, B>>) -> Result<Self> {
        let first = branches.first().ok_or_else(|| Error::invalid("a model needs at least one branch"))?;
        let (c, d) = (first.head.num_classes(), first.head.dim());
        if branches.iter().any(|b| b.head.num_classes() != c || b.head.dim() != d) {
            return Err(Error::shape("branches disagree on class count or embedding width"));
        }
        Ok(Self { branches })
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn num_classes(&self) -> usize {
        self.branches[0].head.num_classes()
    }

    pub fn embedding_dim(&self) -> usize {
        self.branches[0].head.dim()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.branches[0].backbone.input_shape()
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Vec<BranchOutput<T>>> {
        self.branches.iter_mut().map(|b| b.forward(x, train)).collect()
    }

    /// Backpropagates per-branch gradients of the objective.
    pub fn backward(&mut self, grads: &[BranchGradients]) -> Result<()> {
        if grads.len() != self.branches.len() {
            return Err(Error::shape(format!(
                "{} gradient sets for {} branches",
                grads.len(),
                self.branches.len()
            )));
        }
        for (b, g) in self.branches.iter_mut().zip(grads) {
            let dz = g.logits.mapv(<T as Real>::from_f64);
            let de = g.embeddings.mapv(<T as Real>::from_f64);
            b.backward(&dz, &de)?;
        }
        Ok(())
    }

    /// Evaluation-mode forward followed by [`consensus`].
    pub fn predict(&mut self, x: &Array4<T>) -> Result<Prediction> {
        let outs = self.forward(x, false)?;
        let logits: Vec<Array2<f64>> = outs.iter().map(|o| o.logits.mapv(Real::to_f64)).collect();
        consensus(&logits)
    }
}

impl<T: Real, B: Backbone<T>> Module<T> for MultiExpertModel<T, B> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for b in &mut self.branches {
            b.params_mut(out);
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        for (k, b) in self.branches.iter().enumerate() {
            b.tensors(&join(prefix, &format!("branch{k}")), out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        for (k, b) in self.branches.iter_mut().enumerate() {
            b.tensors_mut(&join(prefix, &format!("branch{k}")), out);
        }
    }
}

/// Converts branch outputs into the `f64` loss inputs.
pub fn loss_inputs<T: Real>(outputs: &[BranchOutput<T>]) -> Result<(Vec<LogitBatch>, Vec<EmbeddingBatch>)> {
    let mut logits = Vec::with_capacity(outputs.len());
    let mut embeddings = Vec::with_capacity(outputs.len());
    for (k, o) in outputs.iter().enumerate() {
        logits.push(LogitBatch::new(o.logits.mapv(Real::to_f64), k)?);
        embeddings.push(EmbeddingBatch::new(o.embeddings.mapv(Real::to_f64), k)?);
    }
    Ok((logits, embeddings))
}

/// Stacks single images `(H, W, C)` into a batch.
pub fn stack_images<T: Real>(images: &[ndarray::ArrayView3<T>]) -> Result<Array4<T>> {
    let views: Vec<_> = images.iter().map(|v| v.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use ndarray::array;
    use rand::Rng;

    fn tiny_config(k: usize) -> ModelConfig {
        ModelConfig {
            branches: k,
            num_classes: 3,
            head_scale: 16.0,
            backbone: BackboneId::SmallCnn,
            small_cnn: SmallCnnConfig {
                image_size: 8,
                in_channels: 1,
                widths: vec![4, 6],
                attention: vec![AttentionKind::None, AttentionKind::RcAttn],
                reduction: 2,
            },
        }
    }

    fn images(seed: u64, n: usize) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 8, 8, 1), |_| rng.random::<f32>() * 2.0 - 1.0)
    }

    #[test]
    fn consensus_mean_of_softmaxes() {
        // softmax rows [0.6, 0.4] and [0.2, 0.8]
        let z0 = array![[0.0, (0.4f64 / 0.6).ln()]];
        let z1 = array![[0.0, 4f64.ln()]];
        let p = consensus(&[z0, z1]).unwrap();
        assert!((p.probabilities[[0, 0]] - 0.4).abs() < 1e-12);
        assert!((p.probabilities[[0, 1]] - 0.6).abs() < 1e-12);
        assert_eq!(p.classes, vec![1]);
    }

    #[test]
    fn consensus_ties_to_lower_id() {
        let p = consensus(&[array![[1.0, 1.0, 0.0]]]).unwrap();
        assert_eq!(p.classes, vec![0]);
    }

    #[test]
    fn one_branch_forward() {
        let mut m = MultiExpertModel::<f32>::new(&tiny_config(1), 0).unwrap();
        let out = m.forward(&images(1, 4), false).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].logits.dim(), (4, 3));
        assert_eq!(out[0].embeddings.dim(), (4, 6));
    }

    #[test]
    fn logits_bounded_by_scale() {
        let mut m = MultiExpertModel::<f32>::new(&tiny_config(3), 5).unwrap();
        for o in m.forward(&images(2, 6), false).unwrap() {
            assert!(o.logits.iter().all(|z| z.abs() <= 16.0 + 1e-4));
        }
    }

    #[test]
    fn identical_branches_identical_outputs() {
        let mut m = MultiExpertModel::<f32>::new(&tiny_config(1), 3).unwrap();
        let b = m.branches[0].clone();
        m.branches.push(b);
        let out = m.forward(&images(4, 3), false).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn branches_have_independent_weights() {
        let m = MultiExpertModel::<f32>::new(&tiny_config(2), 3).unwrap();
        assert_ne!(m.branches[0].head.weight.value, m.branches[1].head.weight.value);
    }

    #[test]
    fn predict_is_deterministic() {
        let mut m = MultiExpertModel::<f32>::new(&tiny_config(2), 9).unwrap();
        let x = images(7, 5);
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let mut m = MultiExpertModel::<f32>::new(&tiny_config(1), 0).unwrap();
        assert!(m.forward(&Array4::zeros((1, 8, 8, 2)), false).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(0);
        assert!(c.validate().is_err());
        c.branches = 1;
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }
}
