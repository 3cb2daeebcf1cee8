use ndarray::{Array2, Array4, Axis};

use crate::error::{Error, Result};

use super::Real;

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    mask: Option<Array4<bool>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Self {
            mask: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        if train {
            self.mask = Some(x.mapv(|v| v > T::zero()));
        }
        x.mapv(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::invalid("relu backward without a training forward"))?;
        let mut dx = dy.to_owned();
        dx.zip_mut_with(&mask, |g, &m| {
            if !m {
                *g = T::zero();
            }
        });
        Ok(dx)
    }
}

/// Mean over the spatial axes: `(N, H, W, C) -> (N, C)`.
pub fn global_avg_pool<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (_, h, w, _) = x.dim();
    let scale = T::one() / <T as Real>::from_f64((h * w) as f64);
    x.sum_axis(Axis(1)).sum_axis(Axis(1)) * scale
}

pub fn global_avg_pool_backward<T: Real>(dy: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = dy.dim();
    let scale = T::one() / <T as Real>::from_f64((h * w) as f64);
    Array4::from_shape_fn((n, h, w, c), |(b, _, _, j)| dy[[b, j]] * scale)
}
