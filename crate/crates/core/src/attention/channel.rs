use ndarray::{Array1, Array3, Array4, ArrayD, ArrayView3, Axis, Ix1, Ix2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, sigmoid, Module, Param, Real};

use super::FeatureMap;

/// Weights of the shared two-layer perceptron `C -> C/r -> C` of channel
/// attention.
#[derive(Debug, Clone)]
pub struct ChannelAttentionParams<T> {
    pub fc1_weight: Param<T>,
    pub fc1_bias: Param<T>,
    pub fc2_weight: Param<T>,
    pub fc2_bias: Param<T>,
}

/// `max(1, channels / reduction)`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

impl<T: Real> ChannelAttentionParams<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self {
            fc1_weight: Param::normal(&[hidden, channels], (2.0 / channels as f64).sqrt(), rng),
            fc1_bias: Param::zeros(&[hidden]),
            fc2_weight: Param::normal(&[channels, hidden], (1.0 / hidden as f64).sqrt(), rng),
            fc2_bias: Param::zeros(&[channels]),
        }
    }

    /// All weights and biases zero: the gate is exactly 0.5.
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self {
            fc1_weight: Param::zeros(&[hidden, channels]),
            fc1_bias: Param::zeros(&[hidden]),
            fc2_weight: Param::zeros(&[channels, hidden]),
            fc2_bias: Param::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc2_bias.len()
    }

    pub fn hidden(&self) -> usize {
        self.fc1_bias.len()
    }
}

impl<T: Real> Module<T> for ChannelAttentionParams<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.fc1_weight);
        out.push(&mut self.fc1_bias);
        out.push(&mut self.fc2_weight);
        out.push(&mut self.fc2_bias);
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        out.push((join(prefix, "fc1.weight"), &self.fc1_weight.value));
        out.push((join(prefix, "fc1.bias"), &self.fc1_bias.value));
        out.push((join(prefix, "fc2.weight"), &self.fc2_weight.value));
        out.push((join(prefix, "fc2.bias"), &self.fc2_bias.value));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        out.push((join(prefix, "fc1.weight"), &mut self.fc1_weight.value));
        out.push((join(prefix, "fc1.bias"), &mut self.fc1_bias.value));
        out.push((join(prefix, "fc2.weight"), &mut self.fc2_weight.value));
        out.push((join(prefix, "fc2.bias"), &mut self.fc2_bias.value));
    }
}

/// Intermediate values of one MLP evaluation.
#[derive(Debug, Clone)]
struct MlpTrace<T> {
    input: Array1<T>,
    pre: Array1<T>,
}

/// What the backward pass of one channel-attention evaluation needs.
#[derive(Debug, Clone)]
pub(crate) struct ChannelCache<T> {
    input: Array3<T>,
    gate: Array1<T>,
    avg: MlpTrace<T>,
    max: MlpTrace<T>,
    argmax: Vec<(usize, usize)>,
}

fn mlp<T: Real>(p: &ChannelAttentionParams<T>, v: &Array1<T>) -> (Array1<T>, MlpTrace<T>) {
    let w1 = p.fc1_weight.value.view().into_dimensionality::<Ix2>().expect("2-D");
    let b1 = p.fc1_bias.value.view().into_dimensionality::<Ix1>().expect("1-D");
    let w2 = p.fc2_weight.value.view().into_dimensionality::<Ix2>().expect("2-D");
    let b2 = p.fc2_bias.value.view().into_dimensionality::<Ix1>().expect("1-D");
    let pre = w1.dot(v) + b1;
    let hidden = pre.mapv(|x| x.max(T::zero()));
    let out = w2.dot(&hidden) + b2;
    (out, MlpTrace { input: v.clone(), pre })
}

/// Accumulates parameter gradients for one MLP evaluation and returns the
/// gradient with respect to its input.
fn mlp_backward<T: Real>(p: &mut ChannelAttentionParams<T>, t: &MlpTrace<T>, dout: &Array1<T>) -> Array1<T> {
    let hidden = t.pre.mapv(|x| x.max(T::zero()));
    {
        let mut g2 = p.fc2_weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
        for (i, &d) in dout.iter().enumerate() {
            for (j, &h) in hidden.iter().enumerate() {
                g2[[i, j]] += d * h;
            }
        }
        let mut gb2 = p.fc2_bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
        gb2 += dout;
    }
    let w2 = p.fc2_weight.value.view().into_dimensionality::<Ix2>().expect("2-D");
    let mut dpre = w2.t().dot(dout);
    dpre.zip_mut_with(&t.pre, |d, &x| {
        if x <= T::zero() {
            *d = T::zero();
        }
    });
    {
        let mut g1 = p.fc1_weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D");
        for (i, &d) in dpre.iter().enumerate() {
            for (j, &v) in t.input.iter().enumerate() {
                g1[[i, j]] += d * v;
            }
        }
        let mut gb1 = p.fc1_bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1-D");
        gb1 += &dpre;
    }
    let w1 = p.fc1_weight.value.view().into_dimensionality::<Ix2>().expect("2-D");
    w1.t().dot(&dpre)
}

/// Gated map and backward cache for one `(H, W, C)` tensor.
pub(crate) fn channel_forward<T: Real>(
    x: ArrayView3<T>,
    p: &ChannelAttentionParams<T>,
) -> Result<(Array3<T>, ChannelCache<T>)> {
    let (h, w, c) = x.dim();
    if c != p.channels() {
        return Err(Error::shape(format!(
            "channel attention built for {} channels got {c}",
            p.channels()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("channel attention on an empty region"));
    }
    let scale = T::one() / <T as Real>::from_f64((h * w) as f64);
    let mut avg = Array1::<T>::zeros(c);
    let mut max = Array1::from_elem(c, T::neg_infinity());
    let mut argmax = vec![(0, 0); c];
    for ((i, j, k), &v) in x.indexed_iter() {
        avg[k] += v;
        if v > max[k] {
            max[k] = v;
            argmax[k] = (i, j);
        }
    }
    avg *= scale;
    let (oa, ta) = mlp(p, &avg);
    let (om, tm) = mlp(p, &max);
    let gate = (oa + om).mapv(sigmoid);
    let mut y = x.to_owned();
    for mut lane in y.lanes_mut(Axis(2)) {
        lane *= &gate;
    }
    Ok((
        y,
        ChannelCache {
            input: x.to_owned(),
            gate,
            avg: ta,
            max: tm,
            argmax,
        },
    ))
}

pub(crate) fn channel_backward<T: Real>(
    cache: &ChannelCache<T>,
    dy: ArrayView3<T>,
    p: &mut ChannelAttentionParams<T>,
) -> Array3<T> {
    let (h, w, c) = cache.input.dim();
    let mut dgate = Array1::<T>::zeros(c);
    for (d, g) in dy.lanes(Axis(2)).into_iter().zip(cache.input.lanes(Axis(2))) {
        for k in 0..c {
            dgate[k] += d[k] * g[k];
        }
    }
    let dpre = &dgate * &cache.gate.mapv(|g| g * (T::one() - g));
    let davg = mlp_backward(p, &cache.avg, &dpre);
    let dmax = mlp_backward(p, &cache.max, &dpre);
    let scale = T::one() / <T as Real>::from_f64((h * w) as f64);
    let mut dx = dy.to_owned();
    for mut lane in dx.lanes_mut(Axis(2)) {
        for k in 0..c {
            lane[k] = lane[k] * cache.gate[k] + davg[k] * scale;
        }
    }
    for (k, &(i, j)) in cache.argmax.iter().enumerate() {
        dx[[i, j, k]] += dmax[k];
    }
    dx
}

/// Channel attention: `F * sigmoid(MLP(avgpool F) + MLP(maxpool F))`, the
/// gate broadcast over the spatial axes.
pub fn channel_attention<T: Real>(
    f: &FeatureMap<T>,
    params: &ChannelAttentionParams<T>,
) -> Result<FeatureMap<T>> {
    let (y, _) = channel_forward(f.view(), params)?;
    Ok(FeatureMap::from_trusted(y))
}

/// Batched channel attention with a training cache.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    pub params: ChannelAttentionParams<T>,
    caches: Vec<ChannelCache<T>>,
}

impl<T: Real> ChannelAttention<T> {
    pub fn new(params: ChannelAttentionParams<T>) -> Self {
        Self { params, caches: Vec::new() }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let mut y = Array4::zeros(x.raw_dim());
        self.caches.clear();
        for (b, sample) in x.outer_iter().enumerate() {
            let (out, cache) = channel_forward(sample, &self.params)?;
            y.index_axis_mut(Axis(0), b).assign(&out);
            if train {
                self.caches.push(cache);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        if self.caches.len() != dy.dim().0 {
            return Err(Error::invalid("channel attention backward without a training forward"));
        }
        let mut dx = Array4::zeros(dy.raw_dim());
        let caches = std::mem::take(&mut self.caches);
        for (b, cache) in caches.iter().enumerate() {
            let g = channel_backward(cache, dy.index_axis(Axis(0), b), &mut self.params);
            dx.index_axis_mut(Axis(0), b).assign(&g);
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for ChannelAttention<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.params.params_mut(out);
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        self.params.tensors(prefix, out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        self.params.tensors_mut(prefix, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{check_layer_grads, random_array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        FeatureMap::new(Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>() * 4.0 - 2.0)).unwrap()
    }

    #[test]
    fn zero_mlp_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_map(&mut rng, 3, 5, 8);
        let y = channel_attention(&f, &ChannelAttentionParams::zeros(8, 16)).unwrap();
        for (a, b) in y.view().iter().zip(f.view().iter()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn constant_channels_pool_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ChannelAttentionParams::<f64>::new(4, 2, &mut rng);
        let levels = [0.3, -1.2, 2.0, 0.7];
        let f = FeatureMap::new(Array3::from_shape_fn((2, 3, 4), |(_, _, k)| levels[k])).unwrap();
        let y = channel_attention(&f, &p).unwrap();
        let (m, _) = mlp(&p, &Array1::from(levels.to_vec()));
        for k in 0..4 {
            let gate = sigmoid(2.0 * m[k]);
            assert!((y.view()[[1, 2, k]] - gate * levels[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn gate_bounds_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = ChannelAttentionParams::<f64>::new(6, 3, &mut rng);
            let f = random_map(&mut rng, 4, 3, 6);
            let y = channel_attention(&f, &p).unwrap();
            assert_eq!(y.dim(), f.dim());
            for (a, b) in y.view().iter().zip(f.view().iter()) {
                assert!(a.abs() <= b.abs());
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_map(&mut rng, 2, 2, 5);
        assert!(channel_attention(&f, &ChannelAttentionParams::zeros(4, 2)).is_err());
    }

    #[test]
    fn hidden_width_clamped() {
        assert_eq!(hidden_width(8, 16), 1);
        assert_eq!(hidden_width(256, 16), 16);
        assert_eq!(hidden_width(7, 2), 3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = ChannelAttention::new(ChannelAttentionParams::<f64>::new(6, 2, &mut rng));
        let x = random_array4(&mut rng, (2, 3, 3, 6));
        check_layer_grads(layer, x, |l, x, t| l.forward(x, t).unwrap(), |l, g| l.backward(g).unwrap(), &mut rng);
    }
}
