//! Building blocks of the encoder-decoder with hand-written backward passes.
//!
//! Every layer works on one sample at a time (`channels x height x width`).
//! `forward` returns the output together with whatever the matching
//! `backward` needs; `backward` accumulates parameter gradients into
//! [`Grads`] and returns the gradient with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-5;
const LEAK: f64 = 0.01;

/// Dense `channels x height x width` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    /// Stack along the channel axis.
    pub fn concat(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.channels + b.channels, a.height, a.width, data)
    }

    /// Inverse of [`Tensor::concat`] for gradients.
    pub fn split(self, first_channels: usize) -> (Tensor<T>, Tensor<T>) {
        let cut = first_channels * self.plane();
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = self.data;
        let rest = data.split_off(cut);
        (
            Tensor::from_vec(first_channels, h, w, data),
            Tensor::from_vec(c - first_channels, h, w, rest),
        )
    }
}

/// 2-D convolution, stride 1, zero padding `kernel / 2`; kernel 1 or 3.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    height: usize,
    width: usize,
}

impl<T> ConvCache<T> {
    pub(crate) fn empty() -> Self {
        Self {
            cols: Vec::new(),
            height: 0,
            width: 0,
        }
    }
}

impl Conv {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let w = (0..out_channels * fan_in).map(|_| T::of(normal.sample(rng))).collect();
        let weight = store.push(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            w,
        );
        let bias = store.push(
            format!("{name}.bias"),
            vec![out_channels],
            vec![T::zero(); out_channels],
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col<T: Scalar>(&self, x: &Tensor<T>) -> Vec<T> {
        if self.kernel == 1 {
            return x.data.clone();
        }
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let mut cols = vec![T::zero(); self.patch_len() * hw];
        for ci in 0..self.in_channels {
            let src = x.channel(ci);
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * hw;
                    let dst = &mut cols[row..row + hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let (x0, x1) = if kx == 0 {
                            (1, w)
                        } else if kx == 2 {
                            (0, w - 1)
                        } else {
                            (0, w)
                        };
                        for xx in x0..x1 {
                            dst[y * w + xx] = src[sy * w + xx + kx - 1];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], h: usize, w: usize) -> Tensor<T> {
        if self.kernel == 1 {
            return Tensor::from_vec(self.in_channels, h, w, cols.to_vec());
        }
        let hw = h * w;
        let mut out = Tensor::zeros(self.in_channels, h, w);
        for ci in 0..self.in_channels {
            let dst = &mut out.data[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * hw;
                    let src = &cols[row..row + hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let (x0, x1) = if kx == 0 {
                            (1, w)
                        } else if kx == 2 {
                            (0, w - 1)
                        } else {
                            (0, w)
                        };
                        for xx in x0..x1 {
                            dst[sy * w + xx + kx - 1] += src[y * w + xx];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        debug_assert_eq!(x.channels, self.in_channels);
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let k = self.patch_len();
        let cols = self.im2col(x);
        let bias = store.get(self.bias);
        let mut out = Tensor::zeros(self.out_channels, h, w);
        for (co, b) in bias.iter().enumerate() {
            out.data[co * hw..(co + 1) * hw].fill(*b);
        }
        T::gemm(
            self.out_channels,
            k,
            hw,
            T::one(),
            store.get(self.weight),
            k as isize,
            1,
            &cols,
            hw as isize,
            1,
            T::one(),
            &mut out.data,
            hw as isize,
            1,
        );
        (
            out,
            ConvCache {
                cols,
                height: h,
                width: w,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let hw = cache.height * cache.width;
        let k = self.patch_len();
        // dW += dy . cols^T
        T::gemm(
            self.out_channels,
            hw,
            k,
            T::one(),
            &dy.data,
            hw as isize,
            1,
            &cache.cols,
            1,
            hw as isize,
            T::one(),
            grads.get_mut(self.weight),
            k as isize,
            1,
        );
        let db = grads.get_mut(self.bias);
        for (co, g) in db.iter_mut().enumerate() {
            *g += dy.data[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        // dcols = W^T . dy
        let mut dcols = vec![T::zero(); k * hw];
        T::gemm(
            k,
            self.out_channels,
            hw,
            T::one(),
            store.get(self.weight),
            1,
            k as isize,
            &dy.data,
            hw as isize,
            1,
            T::zero(),
            &mut dcols,
            hw as isize,
            1,
        );
        self.col2im(&dcols, cache.height, cache.width)
    }
}

/// Per-sample, per-channel normalization with a learned affine map.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

pub struct NormCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

impl InstanceNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.push(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]);
        let beta = store.push(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]);
        Self { gamma, beta, channels }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let n = x.plane();
        let nf = T::of(n as f64);
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut out = Tensor::zeros(x.channels, x.height, x.width);
        let mut normalized = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); x.channels];
        for c in 0..x.channels {
            let src = x.channel(c);
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = (var + T::of(NORM_EPS)).sqrt().recip();
            inv_std[c] = is;
            for i in 0..n {
                let xh = (src[i] - mean) * is;
                normalized[c * n + i] = xh;
                out.data[c * n + i] = gamma[c] * xh + beta[c];
            }
        }
        (out, NormCache { normalized, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let n = dy.plane();
        let nf = T::of(n as f64);
        let gamma = store.get(self.gamma);
        let mut dx = Tensor::zeros(dy.channels, dy.height, dy.width);
        let mut dgamma = vec![T::zero(); self.channels];
        let mut dbeta = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let g = dy.channel(c);
            let xh = &cache.normalized[c * n..(c + 1) * n];
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..n {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
            dgamma[c] = sum_gx;
            dbeta[c] = sum_g;
            let k = gamma[c] * cache.inv_std[c] / nf;
            for i in 0..n {
                dx.data[c * n + i] = k * (nf * g[i] - sum_g - xh[i] * sum_gx);
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(dgamma) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(dbeta) {
            *a += b;
        }
        dx
    }
}

pub fn leaky_relu<T: Scalar>(x: &mut Tensor<T>) {
    let leak = T::of(LEAK);
    for v in &mut x.data {
        if *v < T::zero() {
            *v *= leak;
        }
    }
}

/// Backward of [`leaky_relu`] given its output (sign is preserved).
pub fn leaky_relu_backward<T: Scalar>(output: &Tensor<T>, dy: &mut Tensor<T>) {
    let leak = T::of(LEAK);
    for (g, &y) in dy.data.iter_mut().zip(&output.data) {
        if y < T::zero() {
            *g *= leak;
        }
    }
}

/// 2x2 max pooling; returns the winning input index per output cell.
pub fn max_pool<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    let mut idx = vec![0u32; out.data.len()];
    for c in 0..x.channels {
        let src = x.channel(c);
        for y in 0..h {
            for xx in 0..w {
                let mut best = (2 * y) * x.width + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = (2 * y + dy) * x.width + 2 * xx + dx;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                let o = c * h * w + y * w + xx;
                out.data[o] = src[best];
                idx[o] = (c * x.plane() + best) as u32;
            }
        }
    }
    (out, idx)
}

pub fn max_pool_backward<T: Scalar>(dy: &Tensor<T>, idx: &[u32], in_height: usize, in_width: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.channels, in_height, in_width);
    for (g, &i) in dy.data.iter().zip(idx) {
        dx.data[i as usize] += *g;
    }
    dx
}

/// Source taps for one output coordinate of 2x bilinear upsampling
/// (half-pixel centers, edge clamped).
fn bilinear_taps(out: usize, in_len: usize) -> (usize, usize, f64) {
    let src = ((out as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

pub fn upsample<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let ys: Vec<_> = (0..h).map(|y| bilinear_taps(y, x.height)).collect();
    let xs: Vec<_> = (0..w).map(|v| bilinear_taps(v, x.width)).collect();
    let mut out = Tensor::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::of(fy);
            for (xx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::of(fx);
                let top = src[y0 * x.width + x0] * (T::one() - fx) + src[y0 * x.width + x1] * fx;
                let bot = src[y1 * x.width + x0] * (T::one() - fx) + src[y1 * x.width + x1] * fx;
                dst[y * w + xx] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let ys: Vec<_> = (0..dy.height).map(|y| bilinear_taps(y, h)).collect();
    let xs: Vec<_> = (0..dy.width).map(|v| bilinear_taps(v, w)).collect();
    let mut dx = Tensor::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::of(fy);
            for (xx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::of(fx);
                let v = g[y * dy.width + xx];
                dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * w + x0] += v * fy * (T::one() - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// conv3x3 -> norm -> leaky ReLU, twice.
#[derive(Clone, Debug)]
pub struct Block {
    conv1: Conv,
    norm1: InstanceNorm,
    conv2: Conv,
    norm2: InstanceNorm,
}

pub struct BlockCache<T> {
    conv1: ConvCache<T>,
    norm1: NormCache<T>,
    act1: Tensor<T>,
    conv2: ConvCache<T>,
    norm2: NormCache<T>,
    act2: Tensor<T>,
}

impl<T: Scalar> BlockCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.act2
    }
}

impl Block {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv::new(store, &format!("{name}.conv1"), in_channels, out_channels, 3, rng),
            norm1: InstanceNorm::new(store, &format!("{name}.norm1"), out_channels),
            conv2: Conv::new(store, &format!("{name}.conv2"), out_channels, out_channels, 3, rng),
            norm2: InstanceNorm::new(store, &format!("{name}.norm2"), out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> BlockCache<T> {
        let (y, conv1) = self.conv1.forward(store, x);
        let (mut act1, norm1) = self.norm1.forward(store, &y);
        leaky_relu(&mut act1);
        let (y, conv2) = self.conv2.forward(store, &act1);
        let (mut act2, norm2) = self.norm2.forward(store, &y);
        leaky_relu(&mut act2);
        BlockCache {
            conv1,
            norm1,
            act1,
            conv2,
            norm2,
            act2,
        }
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &BlockCache<T>,
        mut dy: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        leaky_relu_backward(&cache.act2, &mut dy);
        let d = self.norm2.backward(store, &cache.norm2, &dy, grads);
        let mut d = self.conv2.backward(store, &cache.conv2, &d, grads);
        leaky_relu_backward(&cache.act1, &mut d);
        let d = self.norm1.backward(store, &cache.norm1, &d, grads);
        self.conv1.backward(store, &cache.conv1, &d, grads)
    }
}
