use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Module, Param, Real};

/// Floor applied to both norms of the cosine head.
pub const NORM_EPS: f64 = 1e-12;

/// Default logit scale of the cosine head.
pub const DEFAULT_SCALE: f64 = 16.0;

/// `z_j = s * <W_j / |W_j|, e / |e|>`, norms floored at [`NORM_EPS`].
pub fn cosine_head(e: ArrayView1<f64>, w: ArrayView2<f64>, s: f64) -> Result<Array1<f64>> {
    if w.ncols() != e.len() {
        return Err(Error::shape(format!(
            "cosine head of width {} applied to a {}-vector",
            w.ncols(),
            e.len()
        )));
    }
    let en = e.dot(&e).sqrt().max(NORM_EPS);
    Ok(w
        .rows()
        .into_iter()
        .map(|row| s * row.dot(&e) / (row.dot(&row).sqrt().max(NORM_EPS) * en))
        .collect())
}

/// Gradient of `v = x / max(|x|, eps)` applied to an upstream `g`.
fn normalize_backward<T: Real>(x: ArrayView1<T>, norm: T, g: ArrayView1<T>) -> Array1<T> {
    let eps = <T as Real>::from_f64(NORM_EPS);
    if norm > eps {
        let u = x.mapv(|v| v / norm);
        let proj = u.dot(&g);
        (&g - &(u * proj)) / norm
    } else {
        g.mapv(|v| v / eps)
    }
}

fn normalize_rows<T: Real>(x: ArrayView2<T>) -> (Array2<T>, Vec<T>) {
    let eps = <T as Real>::from_f64(NORM_EPS);
    let norms: Vec<T> = x.rows().into_iter().map(|r| r.dot(&r).sqrt().max(eps)).collect();
    let mut u = x.to_owned();
    for (mut r, &n) in u.rows_mut().into_iter().zip(&norms) {
        r /= n;
    }
    (u, norms)
}

/// Batched cosine classifier with weight `(C, D)`.
#[derive(Debug, Clone)]
pub struct CosineHead<T> {
    pub weight: Param<T>,
    pub scale: T,
    cache: Option<HeadCache<T>>,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    e: Array2<T>,
    u: Array2<T>,
    e_norm: Vec<T>,
    v: Array2<T>,
    w_norm: Vec<T>,
}

impl<T: Real> CosineHead<T> {
    pub fn new<R: Rng + ?Sized>(classes: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(&[classes, dim], (1.0 / dim as f64).sqrt(), rng),
            scale: <T as Real>::from_f64(scale),
            cache: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D")
    }

    pub fn forward(&mut self, e: &Array2<T>, train: bool) -> Result<Array2<T>> {
        if e.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "cosine head of width {} got embeddings of width {}",
                self.dim(),
                e.ncols()
            )));
        }
        let (u, e_norm) = normalize_rows(e.view());
        let (v, w_norm) = normalize_rows(self.weight2());
        let z = u.dot(&v.t()) * self.scale;
        if train {
            self.cache = Some(HeadCache { e: e.clone(), u, e_norm, v, w_norm });
        }
        Ok(z)
    }

    /// Accumulates the weight gradient and returns the embedding gradient.
    pub fn backward(&mut self, dz: &Array2<T>) -> Result<Array2<T>> {
        let HeadCache { e, u, e_norm, v, w_norm } = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("cosine head backward without a training forward"))?;
        let dz = dz * self.scale;
        let du = dz.dot(&v);
        let dv = dz.t().dot(&u);
        let mut de = Array2::zeros(e.raw_dim());
        for (i, mut row) in de.rows_mut().into_iter().enumerate() {
            row.assign(&normalize_backward(e.row(i), e_norm[i], du.row(i)));
        }
        let w = self.weight2().to_owned();
        let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
        for (j, mut row) in gw.axis_iter_mut(Axis(0)).enumerate() {
            row += &normalize_backward(w.row(j), w_norm[j], dv.row(j));
        }
        Ok(de)
    }
}

impl<T: Real> Module<T> for CosineHead<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        out.push((join(prefix, "weight"), &self.weight.value));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight.value));
    }
}
