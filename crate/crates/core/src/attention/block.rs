use ndarray::{Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{join, Module, Param, Real};

use super::{ChannelAttention, ChannelAttentionParams, RegionalChannelAttention, SpatialAttention};

/// Attention variant inserted after a backbone stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    /// Quadrant-wise channel attention, one shared parameter set.
    #[default]
    RcAttn,
    /// Quadrant-wise channel attention, one parameter set per quadrant.
    RcAttnPerQuadrant,
    Channel,
    Spatial,
    /// Channel attention followed by spatial attention.
    Cbam,
}

/// Runtime instance of an [`AttentionKind`].
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum AttentionBlock<T> {
    Identity,
    Regional(RegionalChannelAttention<T>),
    Channel(ChannelAttention<T>),
    Spatial(SpatialAttention<T>),
    Cbam(ChannelAttention<T>, SpatialAttention<T>),
}

impl<T: Real> AttentionBlock<T> {
    pub fn new<R: Rng + ?Sized>(kind: AttentionKind, channels: usize, reduction: usize, rng: &mut R) -> Self {
        match kind {
            AttentionKind::None => Self::Identity,
            AttentionKind::RcAttn => Self::Regional(RegionalChannelAttention::new(channels, reduction, false, rng)),
            AttentionKind::RcAttnPerQuadrant => {
                Self::Regional(RegionalChannelAttention::new(channels, reduction, true, rng))
            }
            AttentionKind::Channel => {
                Self::Channel(ChannelAttention::new(ChannelAttentionParams::new(channels, reduction, rng)))
            }
            AttentionKind::Spatial => Self::Spatial(SpatialAttention::new(rng)),
            AttentionKind::Cbam => Self::Cbam(
                ChannelAttention::new(ChannelAttentionParams::new(channels, reduction, rng)),
                SpatialAttention::new(rng),
            ),
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        match self {
            Self::Identity => Ok(x.clone()),
            Self::Regional(a) => a.forward(x, train),
            Self::Channel(a) => a.forward(x, train),
            Self::Spatial(a) => a.forward(x, train),
            Self::Cbam(c, s) => {
                let y = c.forward(x, train)?;
                s.forward(&y, train)
            }
        }
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        match self {
            Self::Identity => Ok(dy.clone()),
            Self::Regional(a) => a.backward(dy),
            Self::Channel(a) => a.backward(dy),
            Self::Spatial(a) => a.backward(dy),
            Self::Cbam(c, s) => {
                let g = s.backward(dy)?;
                c.backward(&g)
            }
        }
    }
}

impl<T: Real> Module<T> for AttentionBlock<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        match self {
            Self::Identity => {}
            Self::Regional(a) => a.params_mut(out),
            Self::Channel(a) => a.params_mut(out),
            Self::Spatial(a) => a.params_mut(out),
            Self::Cbam(c, s) => {
                c.params_mut(out);
                s.params_mut(out);
            }
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        match self {
            Self::Identity => {}
            Self::Regional(a) => a.tensors(prefix, out),
            Self::Channel(a) => a.tensors(prefix, out),
            Self::Spatial(a) => a.tensors(prefix, out),
            Self::Cbam(c, s) => {
                c.tensors(&join(prefix, "channel"), out);
                s.tensors(&join(prefix, "spatial"), out);
            }
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        match self {
            Self::Identity => {}
            Self::Regional(a) => a.tensors_mut(prefix, out),
            Self::Channel(a) => a.tensors_mut(prefix, out),
            Self::Spatial(a) => a.tensors_mut(prefix, out),
            Self::Cbam(c, s) => {
                c.tensors_mut(&join(prefix, "channel"), out);
                s.tensors_mut(&join(prefix, "spatial"), out);
            }
        }
    }
}
