use ndarray::{Array4, ArrayD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, sigmoid, Conv2d, Module, Param, Real};

/// Spatial attention baseline: a 7x7 convolution over the channel-wise mean
/// and max maps, squashed by a sigmoid and broadcast over channels.
#[derive(Debug, Clone)]
pub struct SpatialAttention<T> {
    pub conv: Conv2d<T>,
    cache: Option<SpatialCache<T>>,
}

#[derive(Debug, Clone)]
struct SpatialCache<T> {
    input: Array4<T>,
    gate: Array4<T>,
    argmax: Vec<usize>,
}

impl<T: Real> SpatialAttention<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(2, 1, 7, 1, 3, true, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let (n, h, w, c) = x.dim();
        if c == 0 {
            return Err(Error::shape("spatial attention on zero channels"));
        }
        let inv_c = T::one() / <T as Real>::from_f64(c as f64);
        let mut pooled = Array4::zeros((n, h, w, 2));
        let mut argmax = Vec::with_capacity(n * h * w);
        for (mut out, lane) in pooled.lanes_mut(Axis(3)).into_iter().zip(x.lanes(Axis(3))) {
            let mut best = 0;
            let mut sum = T::zero();
            for (k, &v) in lane.iter().enumerate() {
                sum += v;
                if v > lane[best] {
                    best = k;
                }
            }
            out[0] = sum * inv_c;
            out[1] = lane[best];
            argmax.push(best);
        }
        let gate = self.conv.forward(&pooled, train)?.mapv(sigmoid);
        let mut y = x.clone();
        for (mut lane, g) in y.lanes_mut(Axis(3)).into_iter().zip(gate.iter()) {
            lane *= *g;
        }
        if train {
            self.cache = Some(SpatialCache {
                input: x.clone(),
                gate,
                argmax,
            });
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let SpatialCache { input, gate, argmax } = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("spatial attention backward without a training forward"))?;
        let (n, h, w, c) = input.dim();
        let inv_c = T::one() / <T as Real>::from_f64(c as f64);
        let mut dpre = Array4::zeros((n, h, w, 1));
        for (((d, lane), x), g) in dpre
            .iter_mut()
            .zip(dy.lanes(Axis(3)))
            .zip(input.lanes(Axis(3)))
            .zip(gate.iter())
        {
            let dg: T = lane.iter().zip(x.iter()).map(|(&a, &b)| a * b).sum();
            *d = dg * *g * (T::one() - *g);
        }
        let dpooled = self.conv.backward(&dpre)?.expect("input gradient enabled");
        let mut dx = dy.clone();
        for (((mut lane, g), dp), &am) in dx
            .lanes_mut(Axis(3))
            .into_iter()
            .zip(gate.iter())
            .zip(dpooled.lanes(Axis(3)))
            .zip(&argmax)
        {
            for v in lane.iter_mut() {
                *v = *v * *g + dp[0] * inv_c;
            }
            lane[am] += dp[1];
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for SpatialAttention<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.conv.params_mut(out);
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        self.conv.tensors(&join(prefix, "conv"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        self.conv.tensors_mut(&join(prefix, "conv"), out);
    }
}
