//! Layers with hand-written backward passes.
//!
//! Tensors are NHWC (`Array4<T>` of shape `(batch, height, width, channels)`).
//! Every layer caches what its backward pass needs during a training-mode
//! forward; `backward` consumes that cache, accumulates parameter gradients
//! into [`Param::grad`] and returns the gradient with respect to its input.
//!
//! Layers are generic over [`Real`] so the same code trains in `f32` and is
//! gradient-checked in `f64`.

mod conv;
mod layers;
mod norm;
#[cfg(test)]
pub(crate) mod testing;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use conv::Conv2d;
pub use layers::{global_avg_pool, global_avg_pool_backward, Relu};
pub use norm::BatchNorm2d;

/// Floating-point element type of the network.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }

    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Normal(0, std) entries.
    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data: Vec<T> = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                <T as Real>::from_f64(z * std)
            })
            .collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named access to the state of a layer or model.
///
/// `params_mut` yields the trainable tensors in a fixed order (the optimizer
/// relies on it). `tensors` / `tensors_mut` yield every persistent tensor,
/// parameters and buffers alike, under dotted names; checkpoints use them.
pub trait Module<T: Real> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>);

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>);

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>);

    fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut(&mut ps);
        for p in ps {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
