use ndarray::{Array4, ArrayD, Axis, Ix1, IxDyn};

use crate::error::{Error, Result};

use super::{join, Module, Param, Real};

/// Batch normalization over the channel (last) axis.
///
/// Training mode normalizes with the biased batch statistics and updates the
/// running estimates (unbiased variance); evaluation mode uses the running
/// estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    momentum: T,
    eps: T,
    cache: Option<NormCache<T>>,
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Array4<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            momentum: <T as Real>::from_f64(0.1),
            eps: <T as Real>::from_f64(1e-5),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let c = x.dim().3;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got {c}",
                self.channels()
            )));
        }
        let m = x.len() / c;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().expect("1-D");
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().expect("1-D");
        let (mean, var) = if train {
            let x_std = x.as_standard_layout();
            let flat = x_std
                .view()
                .into_shape_with_order((m, c))
                .expect("standard layout");
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_m = T::one() / <T as Real>::from_f64(m as f64);
            for row in flat.rows() {
                for (s, &v) in mean.iter_mut().zip(row) {
                    *s += v;
                }
            }
            mean.iter_mut().for_each(|s| *s *= inv_m);
            for row in flat.rows() {
                for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - mu;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s *= inv_m);
            let unbias = if m > 1 {
                <T as Real>::from_f64(m as f64 / (m - 1) as f64)
            } else {
                T::one()
            };
            let mom = self.momentum;
            for j in 0..c {
                self.running_mean[j] = (T::one() - mom) * self.running_mean[j] + mom * mean[j];
                self.running_var[j] = (T::one() - mom) * self.running_var[j] + mom * var[j] * unbias;
            }
            (mean, var)
        } else {
            (
                self.running_mean.iter().copied().collect(),
                self.running_var.iter().copied().collect(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = x.to_owned();
        for mut lane in xhat.lanes_mut(Axis(3)) {
            for (j, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut y = xhat.clone();
        for mut lane in y.lanes_mut(Axis(3)) {
            for (j, v) in lane.iter_mut().enumerate() {
                *v = *v * gamma[j] + beta[j];
            }
        }
        if train {
            self.cache = Some(NormCache { xhat, inv_std });
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let NormCache { xhat, inv_std } = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("batch norm backward without a training forward"))?;
        let c = self.channels();
        let m = <T as Real>::from_f64((xhat.len() / c) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (g, xh) in dy.lanes(Axis(3)).into_iter().zip(xhat.lanes(Axis(3))) {
            for j in 0..c {
                sum_dy[j] += g[j];
                sum_dy_xhat[j] += g[j] * xh[j];
            }
        }
        {
            let mut gg = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
            let mut gb = self.beta.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
            for j in 0..c {
                gg[j] += sum_dy_xhat[j];
                gb[j] += sum_dy[j];
            }
        }
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().expect("1-D");
        let mut dx = Array4::zeros(dy.raw_dim());
        for ((mut out, g), xh) in dx
            .lanes_mut(Axis(3))
            .into_iter()
            .zip(dy.lanes(Axis(3)))
            .zip(xhat.lanes(Axis(3)))
        {
            for j in 0..c {
                // dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
                out[j] = gamma[j] * inv_std[j] / m
                    * (m * g[j] - sum_dy[j] - xh[j] * sum_dy_xhat[j]);
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma.value));
        out.push((join(prefix, "beta"), &self.beta.value));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma.value));
        out.push((join(prefix, "beta"), &mut self.beta.value));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}
