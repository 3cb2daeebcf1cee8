//! Channel attention, regional (quadrant-wise) channel attention and the
//! spatial / CBAM baselines.
//!
//! Per-sample functions take a [`FeatureMap`] of shape `(H, W, C)`; the
//! batched layers in this module work on NHWC `Array4` tensors and carry
//! their own backward pass.

mod block;
mod channel;
mod regional;
mod spatial;

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::nn::Real;

pub use block::{AttentionBlock, AttentionKind};
pub use channel::{channel_attention, hidden_width, ChannelAttention, ChannelAttentionParams};
pub use regional::{merge_quadrants, quadrant_bounds, rc_attn, split_quadrants, RegionalChannelAttention};
pub use spatial::SpatialAttention;

/// Default reduction ratio of the attention MLP.
pub const DEFAULT_REDUCTION: usize = 16;

/// A finite `(H, W, C)` activation tensor for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T>(Array3<T>);

impl<T: Real> FeatureMap<T> {
    pub fn new(values: Array3<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_trusted(values: Array3<T>) -> Self {
        Self(values)
    }

    pub fn view(&self) -> ArrayView3<'_, T> {
        self.0.view()
    }

    pub fn values(&self) -> &Array3<T> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<T> {
        self.0
    }

    /// `(H, W, C)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }
}
