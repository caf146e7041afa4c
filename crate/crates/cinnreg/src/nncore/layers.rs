//! Layer kinds with explicit forward/backward passes.
//!
//! Each layer caches what its backward pass needs during forward. Parameter
//! gradients accumulate into `Param::grad`; call `zero_grads` between
//! optimizer steps. Batched tensors put the batch dimension first.

use rand::Rng;

use super::{Mode, Param, Parameterized, Tensor};

/// Run `f(batch_index, out_chunk)` over equal batch chunks of `data`,
/// in parallel when the `parallel` feature is on. Chunks are disjoint, so
/// results are bit-identical either way.
fn batch_for_each<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(b, c)| f(b, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (b, c) in data.chunks_mut(chunk).enumerate() {
            f(b, c);
        }
    }
}

// ---------------------------------------------------------------- Dense

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Param, // [out, in]
    pub b: Param, // [out]
    pub in_dim: usize,
    pub out_dim: usize,
    cache_x: Tensor,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: Param::uniform_fan_in(&[out_dim, in_dim], in_dim, rng),
            b: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
            cache_x: Tensor::zeros(&[0]),
        }
    }

    /// All-zero weights; used for final layers that must start as the
    /// identity contribution (regression head, coupling subnets).
    pub fn new_zeroed(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            w: Param::zeros(&[out_dim, in_dim]),
            b: Param::zeros(&[out_dim]),
            in_dim,
            out_dim,
            cache_x: Tensor::zeros(&[0]),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let batch = x.len() / self.in_dim;
        let mut y = Tensor::zeros(&[batch, self.out_dim]);
        let (ind, outd) = (self.in_dim, self.out_dim);
        let w = &self.w.value.data;
        let b = &self.b.value.data;
        batch_for_each(&mut y.data, outd, |bi, row| {
            let xr = &x.data[bi * ind..(bi + 1) * ind];
            for o in 0..outd {
                let wr = &w[o * ind..(o + 1) * ind];
                let mut acc = b[o];
                for i in 0..ind {
                    acc += wr[i] * xr[i];
                }
                row[o] = acc;
            }
        });
        self.cache_x = x.clone();
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (ind, outd) = (self.in_dim, self.out_dim);
        let batch = gy.len() / outd;
        let x = &self.cache_x;
        let mut gx = Tensor::zeros(&[batch, ind]);
        let w = &self.w.value.data;
        batch_for_each(&mut gx.data, ind, |bi, gxr| {
            let gyr = &gy.data[bi * outd..(bi + 1) * outd];
            for o in 0..outd {
                let g = gyr[o];
                if g == 0.0 {
                    continue;
                }
                let wr = &w[o * ind..(o + 1) * ind];
                for i in 0..ind {
                    gxr[i] += g * wr[i];
                }
            }
        });
        // Parameter gradients, fixed batch order.
        for bi in 0..batch {
            let xr = &x.data[bi * ind..(bi + 1) * ind];
            let gyr = &gy.data[bi * outd..(bi + 1) * outd];
            for o in 0..outd {
                let g = gyr[o];
                self.b.grad.data[o] += g;
                if g == 0.0 {
                    continue;
                }
                let gw = &mut self.w.grad.data[o * ind..(o + 1) * ind];
                for i in 0..ind {
                    gw[i] += g * xr[i];
                }
            }
        }
        gx
    }
}

impl Parameterized for Dense {
    fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

// ----------------------------------------------------------------- ReLU

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        for v in &mut y.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        y
    }

    pub fn backward(&self, gy: &Tensor) -> Tensor {
        let mut gx = gy.clone();
        for (g, &m) in gx.data.iter_mut().zip(&self.mask) {
            if !m {
                *g = 0.0;
            }
        }
        gx
    }
}

// -------------------------------------------------------------- Dropout

/// Inverted dropout: kept units are scaled by 1/keep at train time, eval is
/// the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    mask: Vec<f64>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate));
        Dropout { rate, mask: Vec::new() }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut impl Rng) -> Tensor {
        if mode == Mode::Eval || self.rate == 0.0 {
            self.mask.clear();
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        self.mask = x
            .data
            .iter()
            .map(|_| if rng.gen_range(0.0..1.0) < keep { scale } else { 0.0 })
            .collect();
        let mut y = x.clone();
        for (v, &m) in y.data.iter_mut().zip(&self.mask) {
            *v *= m;
        }
        y
    }

    pub fn backward(&self, gy: &Tensor) -> Tensor {
        if self.mask.is_empty() {
            return gy.clone();
        }
        let mut gx = gy.clone();
        for (g, &m) in gx.data.iter_mut().zip(&self.mask) {
            *g *= m;
        }
        gx
    }
}

// ------------------------------------------------------------ BatchNorm

/// Per-channel batch normalization over [B, C, spatial...] tensors.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub channels: usize,
    cache: BnCache,
}

#[derive(Debug, Clone, Default)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    spatial: usize,
    batch: usize,
    eval_mode: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Param::zeros(&[channels]);
        gamma.value.data.fill(1.0);
        BatchNorm {
            gamma,
            beta: Param::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            channels,
            cache: BnCache::default(),
        }
    }

    /// `x` has shape [batch, channels, spatial] flattened; `spatial` is the
    /// product of all trailing dims.
    pub fn forward(&mut self, x: &Tensor, spatial: usize, mode: Mode) -> Tensor {
        let c = self.channels;
        let batch = x.len() / (c * spatial);
        let m = (batch * spatial) as f64;
        let mut y = x.clone();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if mode == Mode::Train {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for b in 0..batch {
                    let base = (b * c + ch) * spatial;
                    for s in 0..spatial {
                        let v = x.data[base + s];
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / m;
                let var = (sq / m - mean * mean).max(0.0);
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                self.running_var[ch] =
                    (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.value.data[ch];
            let be = self.beta.value.data[ch];
            for b in 0..batch {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    let xh = (x.data[base + s] - mean) * istd;
                    xhat[base + s] = xh;
                    y.data[base + s] = g * xh + be;
                }
            }
        }
        self.cache = BnCache {
            xhat,
            inv_std,
            spatial,
            batch,
            eval_mode: mode == Mode::Eval,
        };
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let c = self.channels;
        let BnCache {
            ref xhat,
            ref inv_std,
            spatial,
            batch,
            eval_mode,
        } = self.cache;
        let m = (batch * spatial) as f64;
        let mut gx = Tensor::zeros(&gy.shape.clone());
        gx.shape = gy.shape.clone();
        for ch in 0..c {
            let g = self.gamma.value.data[ch];
            let istd = inv_std[ch];
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for b in 0..batch {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    let gv = gy.data[base + s];
                    sum_gy += gv;
                    sum_gy_xhat += gv * xhat[base + s];
                }
            }
            self.beta.grad.data[ch] += sum_gy;
            self.gamma.grad.data[ch] += sum_gy_xhat;
            for b in 0..batch {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    let gv = gy.data[base + s];
                    gx.data[base + s] = if eval_mode {
                        gv * g * istd
                    } else {
                        g * istd / m * (m * gv - sum_gy - xhat[base + s] * sum_gy_xhat)
                    };
                }
            }
        }
        gx
    }
}

impl Parameterized for BatchNorm {
    fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }
}

// --------------------------------------------------------------- Conv2d

/// 3x3 convolution (configurable stride, padding 1).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param, // [out_ch, in_ch, 3, 3]
    pub b: Param, // [out_ch]
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    cache_x: Tensor,
    in_hw: [usize; 2],
}

pub(crate) const K: usize = 3;
pub(crate) const PAD: i64 = 1;

pub(crate) fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 * PAD as usize - K) / stride + 1
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * K * K;
        Conv2d {
            w: Param::uniform_fan_in(&[out_ch, in_ch, K, K], fan_in, rng),
            b: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            stride,
            cache_x: Tensor::zeros(&[0]),
            in_hw: [0, 0],
        }
    }

    pub fn forward(&mut self, x: &Tensor, hw: [usize; 2]) -> Tensor {
        let [h, w] = hw;
        let (ho, wo) = (conv_out(h, self.stride), conv_out(w, self.stride));
        let batch = x.len() / (self.in_ch * h * w);
        let mut y = Tensor::zeros(&[batch, self.out_ch, ho, wo]);
        let s = self.stride as i64;
        let (ic, oc) = (self.in_ch, self.out_ch);
        let wt = &self.w.value.data;
        let bias = &self.b.value.data;
        batch_for_each(&mut y.data, oc * ho * wo, |bi, out| {
            let xin = &x.data[bi * ic * h * w..(bi + 1) * ic * h * w];
            for o in 0..oc {
                let ochunk = &mut out[o * ho * wo..(o + 1) * ho * wo];
                ochunk.fill(bias[o]);
                for i in 0..ic {
                    let xch = &xin[i * h * w..(i + 1) * h * w];
                    let wbase = ((o * ic) + i) * K * K;
                    for kh in 0..K {
                        for kw in 0..K {
                            let wv = wt[wbase + kh * K + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = oh as i64 * s + kh as i64 - PAD;
                                if ih < 0 || ih >= h as i64 {
                                    continue;
                                }
                                let xrow = &xch[ih as usize * w..(ih as usize + 1) * w];
                                let orow = &mut ochunk[oh * wo..(oh + 1) * wo];
                                for ow in 0..wo {
                                    let iw = ow as i64 * s + kw as i64 - PAD;
                                    if iw < 0 || iw >= w as i64 {
                                        continue;
                                    }
                                    orow[ow] += wv * xrow[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
        self.cache_x = x.clone();
        self.in_hw = hw;
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let [h, w] = self.in_hw;
        let (ho, wo) = (conv_out(h, self.stride), conv_out(w, self.stride));
        let (ic, oc) = (self.in_ch, self.out_ch);
        let batch = gy.len() / (oc * ho * wo);
        let s = self.stride as i64;
        let x = &self.cache_x;
        let mut gx = Tensor::zeros(&[batch, ic, h, w]);
        let wt = &self.w.value.data;
        batch_for_each(&mut gx.data, ic * h * w, |bi, gxin| {
            let gout = &gy.data[bi * oc * ho * wo..(bi + 1) * oc * ho * wo];
            for o in 0..oc {
                let gchunk = &gout[o * ho * wo..(o + 1) * ho * wo];
                for i in 0..ic {
                    let gxch = &mut gxin[i * h * w..(i + 1) * h * w];
                    let wbase = ((o * ic) + i) * K * K;
                    for kh in 0..K {
                        for kw in 0..K {
                            let wv = wt[wbase + kh * K + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = oh as i64 * s + kh as i64 - PAD;
                                if ih < 0 || ih >= h as i64 {
                                    continue;
                                }
                                let grow = &gchunk[oh * wo..(oh + 1) * wo];
                                let gxrow = &mut gxch[ih as usize * w..(ih as usize + 1) * w];
                                for ow in 0..wo {
                                    let iw = ow as i64 * s + kw as i64 - PAD;
                                    if iw < 0 || iw >= w as i64 {
                                        continue;
                                    }
                                    gxrow[iw as usize] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        });
        // Weight/bias gradients, fixed batch order.
        for bi in 0..batch {
            let xin = &x.data[bi * ic * h * w..(bi + 1) * ic * h * w];
            let gout = &gy.data[bi * oc * ho * wo..(bi + 1) * oc * ho * wo];
            for o in 0..oc {
                let gchunk = &gout[o * ho * wo..(o + 1) * ho * wo];
                self.b.grad.data[o] += gchunk.iter().sum::<f64>();
                for i in 0..ic {
                    let xch = &xin[i * h * w..(i + 1) * h * w];
                    let wbase = ((o * ic) + i) * K * K;
                    for kh in 0..K {
                        for kw in 0..K {
                            let mut acc = 0.0;
                            for oh in 0..ho {
                                let ih = oh as i64 * s + kh as i64 - PAD;
                                if ih < 0 || ih >= h as i64 {
                                    continue;
                                }
                                let xrow = &xch[ih as usize * w..(ih as usize + 1) * w];
                                let grow = &gchunk[oh * wo..(oh + 1) * wo];
                                for ow in 0..wo {
                                    let iw = ow as i64 * s + kw as i64 - PAD;
                                    if iw < 0 || iw >= w as i64 {
                                        continue;
                                    }
                                    acc += grow[ow] * xrow[iw as usize];
                                }
                            }
                            self.w.grad.data[wbase + kh * K + kw] += acc;
                        }
                    }
                }
            }
        }
        gx
    }
}

impl Parameterized for Conv2d {
    fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

// --------------------------------------------------------------- Conv3d

/// 3x3x3 convolution (configurable stride, padding 1).
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: Param, // [out_ch, in_ch, 3, 3, 3]
    pub b: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    cache_x: Tensor,
    in_dhw: [usize; 3],
}

impl Conv3d {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * K * K * K;
        Conv3d {
            w: Param::uniform_fan_in(&[out_ch, in_ch, K, K, K], fan_in, rng),
            b: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            stride,
            cache_x: Tensor::zeros(&[0]),
            in_dhw: [0, 0, 0],
        }
    }

    pub fn forward(&mut self, x: &Tensor, dhw: [usize; 3]) -> Tensor {
        let [d, h, w] = dhw;
        let (do_, ho, wo) = (
            conv_out(d, self.stride),
            conv_out(h, self.stride),
            conv_out(w, self.stride),
        );
        let (ic, oc) = (self.in_ch, self.out_ch);
        let batch = x.len() / (ic * d * h * w);
        let mut y = Tensor::zeros(&[batch, oc, do_, ho, wo]);
        let s = self.stride as i64;
        let wt = &self.w.value.data;
        let bias = &self.b.value.data;
        batch_for_each(&mut y.data, oc * do_ * ho * wo, |bi, out| {
            let xin = &x.data[bi * ic * d * h * w..(bi + 1) * ic * d * h * w];
            for o in 0..oc {
                let ochunk = &mut out[o * do_ * ho * wo..(o + 1) * do_ * ho * wo];
                ochunk.fill(bias[o]);
                for i in 0..ic {
                    let xch = &xin[i * d * h * w..(i + 1) * d * h * w];
                    let wbase = ((o * ic) + i) * K * K * K;
                    for kd in 0..K {
                        for kh in 0..K {
                            for kw in 0..K {
                                let wv = wt[wbase + (kd * K + kh) * K + kw];
                                if wv == 0.0 {
                                    continue;
                                }
                                for od in 0..do_ {
                                    let id = od as i64 * s + kd as i64 - PAD;
                                    if id < 0 || id >= d as i64 {
                                        continue;
                                    }
                                    for oh in 0..ho {
                                        let ih = oh as i64 * s + kh as i64 - PAD;
                                        if ih < 0 || ih >= h as i64 {
                                            continue;
                                        }
                                        let xrow = &xch[(id as usize * h + ih as usize) * w..];
                                        let orow =
                                            &mut ochunk[(od * ho + oh) * wo..(od * ho + oh + 1) * wo];
                                        for ow in 0..wo {
                                            let iw = ow as i64 * s + kw as i64 - PAD;
                                            if iw < 0 || iw >= w as i64 {
                                                continue;
                                            }
                                            orow[ow] += wv * xrow[iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        self.cache_x = x.clone();
        self.in_dhw = dhw;
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let [d, h, w] = self.in_dhw;
        let (do_, ho, wo) = (
            conv_out(d, self.stride),
            conv_out(h, self.stride),
            conv_out(w, self.stride),
        );
        let (ic, oc) = (self.in_ch, self.out_ch);
        let batch = gy.len() / (oc * do_ * ho * wo);
        let s = self.stride as i64;
        let x = &self.cache_x;
        let mut gx = Tensor::zeros(&[batch, ic, d, h, w]);
        let wt = &self.w.value.data;
        batch_for_each(&mut gx.data, ic * d * h * w, |bi, gxin| {
            let gout = &gy.data[bi * oc * do_ * ho * wo..(bi + 1) * oc * do_ * ho * wo];
            for o in 0..oc {
                let gchunk = &gout[o * do_ * ho * wo..(o + 1) * do_ * ho * wo];
                for i in 0..ic {
                    let gxch = &mut gxin[i * d * h * w..(i + 1) * d * h * w];
                    let wbase = ((o * ic) + i) * K * K * K;
                    for kd in 0..K {
                        for kh in 0..K {
                            for kw in 0..K {
                                let wv = wt[wbase + (kd * K + kh) * K + kw];
                                if wv == 0.0 {
                                    continue;
                                }
                                for od in 0..do_ {
                                    let id = od as i64 * s + kd as i64 - PAD;
                                    if id < 0 || id >= d as i64 {
                                        continue;
                                    }
                                    for oh in 0..ho {
                                        let ih = oh as i64 * s + kh as i64 - PAD;
                                        if ih < 0 || ih >= h as i64 {
                                            continue;
                                        }
                                        let grow = &gchunk[(od * ho + oh) * wo..];
                                        let gxrow =
                                            &mut gxch[(id as usize * h + ih as usize) * w..];
                                        for ow in 0..wo {
                                            let iw = ow as i64 * s + kw as i64 - PAD;
                                            if iw < 0 || iw >= w as i64 {
                                                continue;
                                            }
                                            gxrow[iw as usize] += wv * grow[ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        for bi in 0..batch {
            let xin = &x.data[bi * ic * d * h * w..(bi + 1) * ic * d * h * w];
            let gout = &gy.data[bi * oc * do_ * ho * wo..(bi + 1) * oc * do_ * ho * wo];
            for o in 0..oc {
                let gchunk = &gout[o * do_ * ho * wo..(o + 1) * do_ * ho * wo];
                self.b.grad.data[o] += gchunk.iter().sum::<f64>();
                for i in 0..ic {
                    let xch = &xin[i * d * h * w..(i + 1) * d * h * w];
                    let wbase = ((o * ic) + i) * K * K * K;
                    for kd in 0..K {
                        for kh in 0..K {
                            for kw in 0..K {
                                let mut acc = 0.0;
                                for od in 0..do_ {
                                    let id = od as i64 * s + kd as i64 - PAD;
                                    if id < 0 || id >= d as i64 {
                                        continue;
                                    }
                                    for oh in 0..ho {
                                        let ih = oh as i64 * s + kh as i64 - PAD;
                                        if ih < 0 || ih >= h as i64 {
                                            continue;
                                        }
                                        let xrow = &xch[(id as usize * h + ih as usize) * w..];
                                        let grow = &gchunk[(od * ho + oh) * wo..];
                                        for ow in 0..wo {
                                            let iw = ow as i64 * s + kw as i64 - PAD;
                                            if iw < 0 || iw >= w as i64 {
                                                continue;
                                            }
                                            acc += grow[ow] * xrow[iw as usize];
                                        }
                                    }
                                }
                                self.w.grad.data[wbase + (kd * K + kh) * K + kw] += acc;
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

impl Parameterized for Conv3d {
    fn named_params(&mut self) -> Vec<(String, &mut Param)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

///// Mean over all trailing (spatial) dims: [B, C, S] -> [B, C].
pub fn global_avg_pool(x: &Tensor, channels: usize) -> Tensor {
    let spatial = x.len() / (x.shape[0] * channels);
    let batch = x.shape[0];
    let mut y = Tensor::zeros(&[batch, channels]);
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * spatial;
            y.data[b * channels + c] =
                x.data[base..base + spatial].iter().sum::<f64>() / spatial as f64;
        }
    }
    y
}

/// Backward of [`global_avg_pool`].
pub fn global_avg_pool_backward(gy: &Tensor, channels: usize, spatial: usize) -> Tensor {
    let batch = gy.shape[0];
    let mut gx = Tensor::zeros(&[batch, channels * spatial]);
    for b in 0..batch {
        for c in 0..channels {
            let g = gy.data[b * channels + c] / spatial as f64;
            let base = (b * channels + c) * spatial;
            for s in 0..spatial {
                gx.data[base + s] = g;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Mode;
    use crate::rng::stream;

    #[test]
    fn relu_backward_subgradient_convention() {
        let mut relu = Relu::new();
        let x = Tensor::from_vec(&[1, 2], vec![-1.0, 2.0]);
        relu.forward(&x);
        let g = relu.backward(&Tensor::from_vec(&[1, 2], vec![1.0, 1.0]));
        assert_eq!(g.data, vec![0.0, 1.0]);
    }

    #[test]
    fn batchnorm_eval_identity_statistics() {
        let mut bn = BatchNorm::new(2);
        bn.eps = 0.0;
        let x = Tensor::from_vec(&[2, 2, 1], vec![0.3, -0.7, 1.2, 0.1]);
        let y = bn.forward(&x, 1, Mode::Eval);
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::from_vec(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.forward(&x, 1, Mode::Train);
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        let var: f64 = y.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps-limited
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut d = Dropout::new(0.5);
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = d.forward(&x, Mode::Eval, &mut stream(0, 0));
        assert_eq!(x.data, y.data);
        let mut kept_sum = 0.0;
        let n = 20_000;
        for i in 0..n {
            let y = d.forward(&x, Mode::Train, &mut stream(1, i));
            kept_sum += y.data[0];
        }
        // Inverted scaling keeps the expectation: E[y] = x.
        let mean = kept_sum / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn dense_zero_init_outputs_zero() {
        let mut d = Dense::new_zeroed(3, 2);
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 3.0]);
        let y = d.forward(&x);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_out_shapes() {
        assert_eq!(conv_out(64, 2), 32);
        assert_eq!(conv_out(33, 2), 17);
        assert_eq!(conv_out(8, 1), 8);
    }

    #[test]
    fn global_avg_pool_round_trip_shapes() {
        let x = Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = global_avg_pool(&x, 2);
        assert_eq!(y.data, vec![2.0, 5.0]);
        let gx = global_avg_pool_backward(&y, 2, 3);
        assert_eq!(gx.len(), 6);
    }
}
