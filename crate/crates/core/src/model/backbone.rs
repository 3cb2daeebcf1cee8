use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionKind, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, join, BatchNorm2d, Conv2d, Module, Param, Real, Relu};

/// A trainable feature extractor mapping an NHWC image batch to pooled
/// `(N, D)` embeddings.
pub trait Backbone<T: Real>: Module<T> + Clone + Send + Sync {
    fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array2<T>>;

    /// Consumes the cache of the last training forward and accumulates
    /// parameter gradients.
    fn backward(&mut self, de: &Array2<T>) -> Result<()>;

    fn embedding_dim(&self) -> usize;

    /// `(H, W, C)` of one input image.
    fn input_shape(&self) -> (usize, usize, usize);
}

/// Layout of the default small CNN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmallCnnConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
    /// Attention after each stage; same length as `widths`.
    pub attention: Vec<AttentionKind>,
    pub reduction: usize,
}

impl Default for SmallCnnConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            widths: vec![32, 64, 128, 256],
            attention: vec![
                AttentionKind::None,
                AttentionKind::None,
                AttentionKind::RcAttn,
                AttentionKind::RcAttn,
            ],
            reduction: DEFAULT_REDUCTION,
        }
    }
}

impl SmallCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("backbone widths must be nonempty and positive"));
        }
        if self.attention.len() != self.widths.len() {
            return Err(Error::invalid(format!(
                "{} attention flags for {} stages",
                self.attention.len(),
                self.widths.len()
            )));
        }
        if self.in_channels == 0 || self.reduction == 0 {
            return Err(Error::invalid("in_channels and reduction must be positive"));
        }
        let mut size = self.image_size;
        for (i, kind) in self.attention.iter().enumerate() {
            size = size.div_ceil(2);
            if size == 0 {
                return Err(Error::invalid("image size must be positive"));
            }
            let regional = matches!(kind, AttentionKind::RcAttn | AttentionKind::RcAttnPerQuadrant);
            if regional && size < 2 {
                return Err(Error::invalid(format!(
                    "stage {i} map is {size}x{size}, too small for regional attention"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
    attn: AttentionBlock<T>,
}

/// Stacked `conv3x3(stride 2) -> batch norm -> ReLU -> attention` stages
/// followed by global average pooling.
#[derive(Debug, Clone)]
pub struct SmallCnn<T> {
    config: SmallCnnConfig,
    stages: Vec<Stage<T>>,
    pooled_hw: Option<(usize, usize)>,
}

impl<T: Real> SmallCnn<T> {
    pub fn new<R: Rng + ?Sized>(config: SmallCnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        let mut stages = Vec::with_capacity(config.widths.len());
        for (i, (&w, &kind)) in config.widths.iter().zip(&config.attention).enumerate() {
            let mut conv = Conv2d::new(cin, w, 3, 2, 1, false, rng);
            conv.input_grad = i > 0;
            stages.push(Stage {
                conv,
                bn: BatchNorm2d::new(w),
                relu: Relu::new(),
                attn: AttentionBlock::new(kind, w, config.reduction, rng),
            });
            cin = w;
        }
        Ok(Self {
            config,
            stages,
            pooled_hw: None,
        })
    }

    pub fn config(&self) -> &SmallCnnConfig {
        &self.config
    }
}

impl<T: Real> Backbone<T> for SmallCnn<T> {
    fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array2<T>> {
        let (_, h, w, c) = x.dim();
        let s = self.config.image_size;
        if (h, w, c) != (s, s, self.config.in_channels) {
            return Err(Error::shape(format!(
                "backbone expects {s}x{s}x{} images, got {h}x{w}x{c}",
                self.config.in_channels
            )));
        }
        let mut a = x.clone();
        for st in &mut self.stages {
            a = st.conv.forward(&a, train)?;
            a = st.bn.forward(&a, train)?;
            a = st.relu.forward(&a, train);
            a = st.attn.forward(&a, train)?;
        }
        if train {
            self.pooled_hw = Some((a.dim().1, a.dim().2));
        }
        Ok(global_avg_pool(&a))
    }

    fn backward(&mut self, de: &Array2<T>) -> Result<()> {
        let (h, w) = self
            .pooled_hw
            .take()
            .ok_or_else(|| Error::invalid("backbone backward without a training forward"))?;
        let mut g = global_avg_pool_backward(de, h, w);
        for st in self.stages.iter_mut().rev() {
            g = st.attn.backward(&g)?;
            g = st.relu.backward(&g)?;
            g = st.bn.backward(&g)?;
            match st.conv.backward(&g)? {
                Some(dx) => g = dx,
                None => break,
            }
        }
        Ok(())
    }

    fn embedding_dim(&self) -> usize {
        *self.config.widths.last().expect("validated nonempty")
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.config.image_size;
        (s, s, self.config.in_channels)
    }
}

impl<T: Real> Module<T> for SmallCnn<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for st in &mut self.stages {
            st.conv.params_mut(out);
            st.bn.params_mut(out);
            st.attn.params_mut(out);
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        for (i, st) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            st.conv.tensors(&join(&p, "conv"), out);
            st.bn.tensors(&join(&p, "bn"), out);
            st.attn.tensors(&join(&p, "attn"), out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        for (i, st) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            st.conv.tensors_mut(&join(&p, "conv"), out);
            st.bn.tensors_mut(&join(&p, "bn"), out);
            st.attn.tensors_mut(&join(&p, "attn"), out);
        }
    }
}
