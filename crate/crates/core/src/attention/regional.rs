use std::ops::Range;

use ndarray::{s, Array3, Array4, ArrayD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Module, Param, Real};

use super::channel::{channel_backward, channel_forward, ChannelAttentionParams, ChannelCache};
use super::FeatureMap;

/// Row and column ranges of the four quadrants, in the order top-left,
/// top-right, bottom-left, bottom-right. Odd sizes put the extra row/column
/// in the bottom/right quadrants.
pub fn quadrant_bounds(h: usize, w: usize) -> Result<[(Range<usize>, Range<usize>); 4]> {
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "quadrant split needs H >= 2 and W >= 2, got {h}x{w}"
        )));
    }
    let (hm, wm) = (h / 2, w / 2);
    Ok([
        (0..hm, 0..wm),
        (0..hm, wm..w),
        (hm..h, 0..wm),
        (hm..h, wm..w),
    ])
}

pub fn split_quadrants<T: Real>(f: &FeatureMap<T>) -> Result<[FeatureMap<T>; 4]> {
    let (h, w, _) = f.dim();
    let b = quadrant_bounds(h, w)?;
    let v = f.view();
    Ok(b.map(|(r, c)| FeatureMap::from_trusted(v.slice(s![r, c, ..]).to_owned())))
}

/// Inverse of [`split_quadrants`].
pub fn merge_quadrants<T: Real>(q: &[FeatureMap<T>; 4]) -> Result<FeatureMap<T>> {
    let (h0, w0, c) = q[0].dim();
    let (_, w1, _) = q[1].dim();
    let (h2, _, _) = q[2].dim();
    let expect = [(h0, w0), (h0, w1), (h2, w0), (h2, w1)];
    for (i, (qi, e)) in q.iter().zip(expect).enumerate() {
        let (hh, ww, cc) = qi.dim();
        if (hh, ww) != e || cc != c {
            return Err(Error::shape(format!("quadrant {i} has shape {:?}", qi.dim())));
        }
    }
    let (h, w) = (h0 + h2, w0 + w1);
    let mut out = Array3::zeros((h, w, c));
    for ((r, cs), qi) in quadrant_bounds(h, w)?.into_iter().zip(q) {
        out.slice_mut(s![r, cs, ..]).assign(qi.values());
    }
    Ok(FeatureMap::from_trusted(out))
}

/// Regional channel attention: channel attention applied to each quadrant
/// independently, with one shared parameter set.
pub fn rc_attn<T: Real>(f: &FeatureMap<T>, params: &ChannelAttentionParams<T>) -> Result<FeatureMap<T>> {
    let (h, w, _) = f.dim();
    let mut out = f.values().clone();
    for (r, c) in quadrant_bounds(h, w)? {
        let (y, _) = channel_forward(f.view().slice(s![r.clone(), c.clone(), ..]), params)?;
        out.slice_mut(s![r, c, ..]).assign(&y);
    }
    Ok(FeatureMap::from_trusted(out))
}

/// Batched regional channel attention.
///
/// Holds either one parameter set shared by the four quadrants or four
/// independent ones (`per_quadrant`).
#[derive(Debug, Clone)]
pub struct RegionalChannelAttention<T> {
    pub params: Vec<ChannelAttentionParams<T>>,
    caches: Vec<[ChannelCache<T>; 4]>,
}

impl<T: Real> RegionalChannelAttention<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, per_quadrant: bool, rng: &mut R) -> Self {
        let n = if per_quadrant { 4 } else { 1 };
        Self::from_params((0..n).map(|_| ChannelAttentionParams::new(channels, reduction, rng)).collect())
            .expect("one or four parameter sets")
    }

    pub fn from_params(params: Vec<ChannelAttentionParams<T>>) -> Result<Self> {
        if params.len() != 1 && params.len() != 4 {
            return Err(Error::invalid(format!(
                "regional attention takes 1 or 4 parameter sets, got {}",
                params.len()
            )));
        }
        Ok(Self { params, caches: Vec::new() })
    }

    pub fn per_quadrant(&self) -> bool {
        self.params.len() == 4
    }

    fn param_index(&self, q: usize) -> usize {
        if self.per_quadrant() {
            q
        } else {
            0
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Result<Array4<T>> {
        let (_, h, w, _) = x.dim();
        let bounds = quadrant_bounds(h, w)?;
        let mut y = x.clone();
        self.caches.clear();
        for (b, sample) in x.outer_iter().enumerate() {
            let mut caches = Vec::with_capacity(4);
            for (q, (r, c)) in bounds.iter().enumerate() {
                let p = &self.params[self.param_index(q)];
                let (out, cache) = channel_forward(sample.slice(s![r.clone(), c.clone(), ..]), p)?;
                y.slice_mut(s![b, r.clone(), c.clone(), ..]).assign(&out);
                caches.push(cache);
            }
            if train {
                self.caches.push(caches.try_into().expect("four quadrants"));
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        if self.caches.len() != dy.dim().0 {
            return Err(Error::invalid("regional attention backward without a training forward"));
        }
        let (_, h, w, _) = dy.dim();
        let bounds = quadrant_bounds(h, w)?;
        let caches = std::mem::take(&mut self.caches);
        let mut dx = Array4::zeros(dy.raw_dim());
        for (b, sample) in caches.iter().enumerate() {
            let dys = dy.index_axis(Axis(0), b);
            for (q, ((r, c), cache)) in bounds.iter().zip(sample).enumerate() {
                let pi = self.param_index(q);
                let g = channel_backward(cache, dys.slice(s![r.clone(), c.clone(), ..]), &mut self.params[pi]);
                dx.slice_mut(s![b, r.clone(), c.clone(), ..]).assign(&g);
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for RegionalChannelAttention<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for p in &mut self.params {
            p.params_mut(out);
        }
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        if self.per_quadrant() {
            for (i, p) in self.params.iter().enumerate() {
                p.tensors(&join(prefix, &format!("q{i}")), out);
            }
        } else {
            self.params[0].tensors(prefix, out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        if self.per_quadrant() {
            for (i, p) in self.params.iter_mut().enumerate() {
                p.tensors_mut(&join(prefix, &format!("q{i}")), out);
            }
        } else {
            self.params[0].tensors_mut(prefix, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::channel_attention;
    use crate::nn::testing::{check_layer_grads, random_array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        FeatureMap::new(Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>() * 2.0 - 1.0)).unwrap()
    }

    #[test]
    fn even_split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = split_quadrants(&random_map(&mut rng, 4, 4, 8)).unwrap();
        assert!(q.iter().all(|m| m.dim() == (2, 2, 8)));
    }

    #[test]
    fn odd_split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = split_quadrants(&random_map(&mut rng, 7, 7, 3)).unwrap();
        let dims: Vec<_> = q.iter().map(|m| m.dim()).collect();
        assert_eq!(dims, vec![(3, 3, 3), (3, 4, 3), (4, 3, 3), (4, 4, 3)]);
    }

    #[test]
    fn split_merge_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w) in [(2, 2), (4, 4), (7, 7), (5, 8), (3, 2)] {
            let f = random_map(&mut rng, h, w, 4);
            assert_eq!(merge_quadrants(&split_quadrants(&f).unwrap()).unwrap(), f);
        }
    }

    #[test]
    fn rejects_tiny_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(split_quadrants(&random_map(&mut rng, 1, 4, 2)).is_err());
        assert!(rc_attn(&random_map(&mut rng, 4, 1, 2), &ChannelAttentionParams::zeros(2, 1)).is_err());
    }

    #[test]
    fn zero_params_halve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_map(&mut rng, 7, 7, 8);
        let y = rc_attn(&f, &ChannelAttentionParams::zeros(8, 16)).unwrap();
        assert_eq!(y.values(), &(f.values() * 0.5));
    }

    #[test]
    fn matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ChannelAttentionParams::<f64>::new(8, 4, &mut rng);
        let f = random_map(&mut rng, 4, 4, 8);
        let q = split_quadrants(&f).unwrap();
        let gated = q.map(|m| channel_attention(&m, &p).unwrap());
        let oracle = merge_quadrants(&gated).unwrap();
        assert_eq!(rc_attn(&f, &p).unwrap(), oracle);
    }

    #[test]
    fn top_left_change_stays_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ChannelAttentionParams::<f64>::new(4, 2, &mut rng);
        let f = random_map(&mut rng, 7, 7, 4);
        let mut g = f.values().clone();
        g[[1, 2, 3]] += 0.7;
        let a = rc_attn(&f, &p).unwrap();
        let b = rc_attn(&FeatureMap::new(g).unwrap(), &p).unwrap();
        for ((i, j, _), (x, y)) in a.values().indexed_iter().map(|(ix, x)| (ix, (x, b.values()[ix]))) {
            if i >= 3 || j >= 3 {
                assert_eq!(*x, y);
            }
        }
    }

    #[test]
    fn batched_matches_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = RegionalChannelAttention::<f64>::new(6, 2, false, &mut rng);
        let x = random_array4(&mut rng, (3, 5, 4, 6));
        let y = layer.forward(&x, false).unwrap();
        for b in 0..3 {
            let f = FeatureMap::new(x.index_axis(Axis(0), b).to_owned()).unwrap();
            assert_eq!(rc_attn(&f, &layer.params[0]).unwrap().values(), &y.index_axis(Axis(0), b));
        }
    }

    #[test]
    fn shared_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = RegionalChannelAttention::<f64>::new(4, 2, false, &mut rng);
        let x = random_array4(&mut rng, (2, 5, 4, 4));
        check_layer_grads(layer, x, |l, x, t| l.forward(x, t).unwrap(), |l, g| l.backward(g).unwrap(), &mut rng);
    }

    #[test]
    fn per_quadrant_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = RegionalChannelAttention::<f64>::new(4, 2, true, &mut rng);
        assert_eq!(layer.params.len(), 4);
        let x = random_array4(&mut rng, (2, 4, 4, 4));
        check_layer_grads(layer, x, |l, x, t| l.forward(x, t).unwrap(), |l, g| l.backward(g).unwrap(), &mut rng);
    }
}
