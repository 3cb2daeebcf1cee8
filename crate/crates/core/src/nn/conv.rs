use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, ArrayView4, Axis, Ix1, Ix2};
use rand::Rng;

use crate::error::{Error, Result};

use super::{join, Module, Param, Real};

/// 2-D convolution over NHWC tensors, lowered to one matrix product per batch
/// via im2col. The weight is stored as `(k * k * in_channels, out_channels)`
/// with rows ordered `(ky, kx, c_in)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    /// Skip the input gradient; set on the first layer of a network.
    pub input_grad: bool,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Array2<T>,
    input_dim: (usize, usize, usize, usize),
}

impl<T: Real> Conv2d<T> {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::normal(&[fan_in, out_channels], std, rng),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input_grad: true,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |x: usize| (x + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn im2col(&self, x: &ArrayView4<T>) -> Array2<T> {
        let (n, h, w, c) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut cols = Array2::zeros((n * ho * wo, k * k * c));
        for ((b, oy, ox), mut row) in (0..n)
            .flat_map(|b| (0..ho).flat_map(move |oy| (0..wo).map(move |ox| (b, oy, ox))))
            .zip(cols.rows_mut())
        {
            let dst = row.as_slice_mut().expect("contiguous row");
            for ky in 0..k {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = ((b * h + iy as usize) * w + ix as usize) * c;
                    let d = (ky * k + kx) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
        let (n, h, w, c) = dim;
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let dcols = dcols.as_standard_layout();
        let mut dx = Array4::<T>::zeros(dim);
        let out = dx.as_slice_mut().expect("fresh array is contiguous");
        let mut r = 0;
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = dcols.row(r);
                    let row = row.as_slice().expect("contiguous row");
                    r += 1;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s = ((b * h + iy as usize) * w + ix as usize) * c;
                            let d = (ky * k + kx) * c;
                            for (o, &g) in out[s..s + c].iter_mut().zip(&row[d..d + c]) {
                                *o += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let (n, h, w, c) = x.dim();
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::shape(format!("input {h}x{w} smaller than kernel")));
        }
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(&x.view());
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight");
        let mut out = cols.dot(&weight);
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<Ix1>().expect("1-D bias");
            out += &b;
        }
        if train {
            self.cache = Some(ConvCache { cols, input_dim: (n, h, w, c) });
        }
        Ok(out
            .into_shape_with_order((n, ho, wo, self.out_channels))
            .expect("row-major product"))
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Option<Array4<T>>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("conv backward without a training forward"))?;
        let rows = cache.cols.nrows();
        let dy = dy.as_standard_layout();
        let dy2 = dy
            .view()
            .into_shape_with_order((rows, self.out_channels))
            .map_err(|e| Error::shape(e.to_string()))?;
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
            general_mat_mul(T::one(), &cache.cols.t(), &dy2, T::one(), &mut gw);
        }
        if let Some(b) = &mut self.bias {
            let mut gb = b.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
            gb += &dy2.sum_axis(Axis(0));
        }
        if !self.input_grad {
            return Ok(None);
        }
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight");
        let dcols = dy2.dot(&weight.t());
        Ok(Some(self.col2im(&dcols, cache.input_dim)))
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        out.push((join(prefix, "weight"), &self.weight.value));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), &b.value));
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight.value));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), &mut b.value));
        }
    }
}
