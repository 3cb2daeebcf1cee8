//! Finite-difference helpers shared by the layer tests.

use ndarray::Array4;
use rand::Rng;

use crate::train::gradcheck::{layer_relative_error, REL_TOLERANCE};

use super::Module;

pub(crate) fn random_array4<R: Rng>(rng: &mut R, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Asserts that the input and parameter gradients of a layer agree with
/// central differences of the scalar readout `sum(R * forward(x))`.
pub(crate) fn check_layer_grads<L, F, B, R>(layer: L, x: Array4<f64>, forward: F, backward: B, rng: &mut R)
where
    L: Module<f64> + Clone,
    F: Fn(&mut L, &Array4<f64>, bool) -> Array4<f64>,
    B: Fn(&mut L, &Array4<f64>) -> Array4<f64>,
    R: Rng,
{
    let worst = layer_relative_error(layer, x, forward, backward, rng);
    assert!(worst < REL_TOLERANCE, "max relative error {worst:e}");
}
