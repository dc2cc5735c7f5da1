//! Neural-net layers on NCHW f64 tensors with hand-written backward passes.
//!
//! Convolutions run as one im2col gather plus one GEMM per layer over the
//! whole batch. Everything is single-threaded and allocation-order
//! deterministic: identical inputs and parameters give bitwise identical
//! outputs and gradients. Layers cache what their backward needs, so the
//! call protocol is forward, then at most one backward, per step.

use ndarray::{s, Array, Array1, Array2, Array3, Array4, ArrayD, Dimension, Zip};
use rand_distr::{Distribution, Normal};

use crate::rng::derive_stream;
use crate::{Error, Result};

/// Role of a parameter tensor; drives init, weight decay, and trust-ratio
/// exclusion rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv or linear weight: He-normal init, decayed, trust-scaled.
    Weight,
    /// Additive bias: zero init, excluded from decay and trust scaling.
    Bias,
    /// Norm scale: ones init, excluded.
    Gain,
    /// Norm shift: zero init, excluded.
    Shift,
}

/// Named tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, shape: &[usize]) -> Self {
        let name = name.into();
        Param {
            name,
            kind,
            value: ArrayD::zeros(shape.to_vec()),
            grad: ArrayD::zeros(shape.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Inputs feeding one output unit; first axis is the output axis.
    pub fn fan_in(&self) -> usize {
        self.value.len() / self.value.shape()[0].max(1)
    }

    /// Deterministic per-name init: He normal for weights, constants for
    /// the rest. Independent of visit order.
    pub fn init(&mut self, seed: u64) {
        match self.kind {
            ParamKind::Weight => {
                let std = (2.0 / self.fan_in() as f64).sqrt();
                let mut rng = derive_stream(seed, &format!("init/{}", self.name));
                let dist = Normal::new(0.0, std).expect("std is finite");
                for v in self.value.iter_mut() {
                    *v = dist.sample(&mut rng);
                }
            }
            ParamKind::Bias | ParamKind::Shift => self.value.fill(0.0),
            ParamKind::Gain => self.value.fill(1.0),
        }
    }
}

fn conv_out(n: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> usize {
    (n + 2 * padding - dilation * (k - 1) - 1) / stride + 1
}

fn im2col(
    x: &Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> (Array2<f64>, (usize, usize)) {
    let (bsz, cin, h, w) = x.dim();
    let ho = conv_out(h, kh, stride, padding, dilation);
    let wo = conv_out(w, kw, stride, padding, dilation);
    let k = cin * kh * kw;
    let mut cols = Array2::<f64>::zeros((bsz * ho * wo, k));
    let xv = x.as_standard_layout();
    let xs = xv.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("freshly allocated");
    for b in 0..bsz {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * k;
                for ci in 0..cin {
                    let x_base = (b * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        let in_y = iy >= 0 && (iy as usize) < h;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            let dst = row + (ci * kh + ky) * kw + kx;
                            cs[dst] = if in_y && ix >= 0 && (ix as usize) < w {
                                xs[x_base + iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
    (cols, (ho, wo))
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    out_hw: (usize, usize),
) -> Array4<f64> {
    let (bsz, cin, h, w) = in_dim;
    let (ho, wo) = out_hw;
    let k = cin * kh * kw;
    let mut dx = Array4::<f64>::zeros((bsz, cin, h, w));
    let dv = dcols.as_standard_layout();
    let ds = dv.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("freshly allocated");
    for b in 0..bsz {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * k;
                for ci in 0..cin {
                    let x_base = (b * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            xs[x_base + iy as usize * w + ix as usize] +=
                                ds[row + (ci * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

/// 2-d convolution, weights [out_c, in_c, kh, kw].
pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    cache: Option<ConvCache>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        Conv2d {
            w: Param::new(format!("{name}.w"), ParamKind::Weight, &[out_c, in_c, k, k]),
            b: bias.then(|| Param::new(format!("{name}.b"), ParamKind::Bias, &[out_c])),
            stride,
            padding,
            dilation,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let sh = self.w.value.shape().to_vec();
        let (out_c, _in_c, kh, kw) = (sh[0], sh[1], sh[2], sh[3]);
        let (cols, (ho, wo)) = im2col(x, kh, kw, self.stride, self.padding, self.dilation);
        let k = sh[1] * kh * kw;
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((out_c, k))
            .expect("contiguous weight");
        let mut y2 = cols.dot(&w2.t());
        if let Some(b) = &self.b {
            let bv = b.value.view().into_shape_with_order(out_c).expect("bias shape");
            y2 += &bv.insert_axis(ndarray::Axis(0));
        }
        let (bsz, _, _, _) = x.dim();
        let y = y2
            .into_shape_with_order((bsz, ho, wo, out_c))
            .expect("row count")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        self.cache = Some(ConvCache { cols, in_dim: x.dim(), out_hw: (ho, wo) });
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("forward before backward");
        let sh = self.w.value.shape().to_vec();
        let (out_c, _, kh, kw) = (sh[0], sh[1], sh[2], sh[3]);
        let k = sh[1] * kh * kw;
        let (bsz, _, _, _) = cache.in_dim;
        let (ho, wo) = cache.out_hw;
        let dy2 = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape_with_order((bsz * ho * wo, out_c))
            .expect("grad shape")
            .to_owned();
        let dw2 = dy2.t().dot(&cache.cols);
        let dwv = dw2.into_shape_with_order(self.w.grad.raw_dim()).expect("weight shape");
        self.w.grad += &dwv;
        if let Some(b) = &mut self.b {
            let db = dy2.sum_axis(ndarray::Axis(0));
            let dbv = db.into_shape_with_order(b.grad.raw_dim()).expect("bias shape");
            b.grad += &dbv;
        }
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((out_c, k))
            .expect("contiguous weight");
        let dcols = dy2.dot(&w2);
        col2im(
            &dcols,
            cache.in_dim,
            kh,
            kw,
            self.stride,
            self.padding,
            self.dilation,
            cache.out_hw,
        )
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

/// Largest group count from {32, 16, 8, 4, 2, 1} dividing `c`.
pub fn gn_groups(c: usize) -> usize {
    [32, 16, 8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

struct GnCache {
    xhat: Array4<f64>,
    invstd: Array2<f64>,
}

/// Group normalization; statistics never cross the batch axis, so train
/// and eval behave identically at any batch size.
pub struct GroupNorm {
    pub gamma: Param,
    pub beta: Param,
    pub groups: usize,
    pub eps: f64,
    cache: Option<GnCache>,
}

impl GroupNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        GroupNorm {
            gamma: Param::new(format!("{name}.gamma"), ParamKind::Gain, &[channels]),
            beta: Param::new(format!("{name}.beta"), ParamKind::Shift, &[channels]),
            groups: gn_groups(channels),
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = x.dim();
        let g = self.groups;
        let cg = c / g;
        let m = (cg * h * w) as f64;
        let mut xhat = Array4::<f64>::zeros((bsz, c, h, w));
        let mut invstd = Array2::<f64>::zeros((bsz, g));
        for b in 0..bsz {
            for gi in 0..g {
                let sl = s![b, gi * cg..(gi + 1) * cg, .., ..];
                let xg = x.slice(sl);
                let mean = xg.sum() / m;
                let var = xg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let istd = 1.0 / (var + self.eps).sqrt();
                invstd[(b, gi)] = istd;
                Zip::from(xhat.slice_mut(sl)).and(xg).for_each(|o, &v| *o = (v - mean) * istd);
            }
        }
        let mut y = Array4::<f64>::zeros((bsz, c, h, w));
        let gamma = &self.gamma.value;
        let beta = &self.beta.value;
        for b in 0..bsz {
            for ci in 0..c {
                let ga = gamma[[ci]];
                let be = beta[[ci]];
                Zip::from(y.slice_mut(s![b, ci, .., ..]))
                    .and(xhat.slice(s![b, ci, .., ..]))
                    .for_each(|o, &v| *o = ga * v + be);
            }
        }
        self.cache = Some(GnCache { xhat, invstd });
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("forward before backward");
        let (bsz, c, h, w) = dy.dim();
        let g = self.groups;
        let cg = c / g;
        let m = (cg * h * w) as f64;
        for ci in 0..c {
            let mut dga = 0.0;
            let mut dbe = 0.0;
            for b in 0..bsz {
                Zip::from(dy.slice(s![b, ci, .., ..]))
                    .and(cache.xhat.slice(s![b, ci, .., ..]))
                    .for_each(|&d, &xh| {
                        dga += d * xh;
                        dbe += d;
                    });
            }
            self.gamma.grad[[ci]] += dga;
            self.beta.grad[[ci]] += dbe;
        }
        let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
        for b in 0..bsz {
            for gi in 0..g {
                // dxhat = dy * gamma, computed on the fly per channel.
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ci in gi * cg..(gi + 1) * cg {
                    let ga = self.gamma.value[[ci]];
                    Zip::from(dy.slice(s![b, ci, .., ..]))
                        .and(cache.xhat.slice(s![b, ci, .., ..]))
                        .for_each(|&d, &xh| {
                            let dxh = d * ga;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh;
                        });
                }
                let istd = cache.invstd[(b, gi)];
                for ci in gi * cg..(gi + 1) * cg {
                    let ga = self.gamma.value[[ci]];
                    Zip::from(dx.slice_mut(s![b, ci, .., ..]))
                        .and(dy.slice(s![b, ci, .., ..]))
                        .and(cache.xhat.slice(s![b, ci, .., ..]))
                        .for_each(|o, &d, &xh| {
                            let dxh = d * ga;
                            *o = istd / m * (m * dxh - sum_dxhat - xh * sum_dxhat_xhat);
                        });
                }
            }
        }
        dx
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Elementwise max(x, 0) over any dimensionality.
pub struct Relu<D: Dimension> {
    mask: Option<Array<bool, D>>,
}

pub type Relu4 = Relu<ndarray::Ix4>;
pub type Relu2 = Relu<ndarray::Ix2>;

impl<D: Dimension> Relu<D> {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward(&mut self, x: &Array<f64, D>) -> Array<f64, D> {
        self.mask = Some(x.mapv(|v| v > 0.0));
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, dy: &Array<f64, D>) -> Array<f64, D> {
        let mask = self.mask.take().expect("forward before backward");
        let mut dx = dy.clone();
        Zip::from(&mut dx).and(&mask).for_each(|d, &m| {
            if !m {
                *d = 0.0;
            }
        });
        dx
    }
}

impl<D: Dimension> Default for Relu<D> {
    fn default() -> Self {
        Self::new()
    }
}

/// Max pooling; ties resolve to the first element in row-major scan order.
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Option<Array4<usize>>,
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d { k, stride, padding, argmax: None, in_dim: (0, 0, 0, 0) }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = x.dim();
        let ho = conv_out(h, self.k, self.stride, self.padding, 1);
        let wo = conv_out(w, self.k, self.stride, self.padding, 1);
        let mut y = Array4::<f64>::zeros((bsz, c, ho, wo));
        let mut am = Array4::<usize>::zeros((bsz, c, ho, wo));
        for b in 0..bsz {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let v = x[(b, ci, iy as usize, ix as usize)];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        y[(b, ci, oy, ox)] = best;
                        am[(b, ci, oy, ox)] = best_idx;
                    }
                }
            }
        }
        self.argmax = Some(am);
        self.in_dim = x.dim();
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let am = self.argmax.take().expect("forward before backward");
        let (bsz, c, h, w) = self.in_dim;
        let (_, _, ho, wo) = dy.dim();
        let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
        for b in 0..bsz {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let idx = am[(b, ci, oy, ox)];
                        dx[(b, ci, idx / w, idx % w)] += dy[(b, ci, oy, ox)];
                    }
                }
            }
        }
        dx
    }
}

/// Spatial mean: [B, C, H, W] to [B, C].
pub struct GlobalAvgPool {
    in_dim: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { in_dim: (0, 0, 0, 0) }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array2<f64> {
        self.in_dim = x.dim();
        let (_, _, h, w) = x.dim();
        let m = (h * w) as f64;
        x.sum_axis(ndarray::Axis(3)).sum_axis(ndarray::Axis(2)) / m
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = self.in_dim;
        let m = (h * w) as f64;
        let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
        for b in 0..bsz {
            for ci in 0..c {
                let g = dy[(b, ci)] / m;
                dx.slice_mut(s![b, ci, .., ..]).fill(g);
            }
        }
        dx
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

/// Fully connected layer, weights [out, in].
pub struct Linear {
    pub w: Param,
    pub b: Param,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), ParamKind::Weight, &[out_dim, in_dim]),
            b: Param::new(format!("{name}.b"), ParamKind::Bias, &[out_dim]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix2>().expect("2d weight");
        let b1 = self.b.value.view().into_dimensionality::<ndarray::Ix1>().expect("1d bias");
        let y = x.dot(&w2.t()) + &b1.insert_axis(ndarray::Axis(0));
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("forward before backward");
        let dw = dy.t().dot(&x);
        self.w.grad += &dw.into_shape_with_order(self.w.grad.raw_dim()).expect("weight shape");
        let db = dy.sum_axis(ndarray::Axis(0));
        self.b.grad += &db.into_shape_with_order(self.b.grad.raw_dim()).expect("bias shape");
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix2>().expect("2d weight");
        dy.dot(&w2)
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Row-wise x / (|x| + eps).
pub struct L2Normalize {
    pub eps: f64,
    cache: Option<(Array2<f64>, Array1<f64>)>,
}

impl L2Normalize {
    pub fn new() -> Self {
        L2Normalize { eps: 1e-12, cache: None }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (n, d) = x.dim();
        let mut y = Array2::<f64>::zeros((n, d));
        let mut norms = Array1::<f64>::zeros(n);
        for i in 0..n {
            let row = x.slice(s![i, ..]);
            let nrm = row.dot(&row).sqrt();
            norms[i] = nrm;
            let denom = nrm + self.eps;
            Zip::from(y.slice_mut(s![i, ..])).and(row).for_each(|o, &v| *o = v / denom);
        }
        self.cache = Some((x.clone(), norms));
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let (x, norms) = self.cache.take().expect("forward before backward");
        let (n, d) = x.dim();
        let mut dx = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let nrm = norms[i];
            let denom = nrm + self.eps;
            let xi = x.slice(s![i, ..]);
            let di = dy.slice(s![i, ..]);
            let sdx = di.dot(&xi);
            // d(x/denom): the norm only moves when |x| > 0.
            let scale = if nrm > 0.0 { sdx / (nrm * denom * denom) } else { 0.0 };
            Zip::from(dx.slice_mut(s![i, ..]))
                .and(di)
                .and(xi)
                .for_each(|o, &dyv, &xv| *o = dyv / denom - xv * scale);
        }
        dx
    }
}

impl Default for L2Normalize {
    fn default() -> Self {
        Self::new()
    }
}

/// Bilinear resample of NCHW maps, sample points at pixel centers.
pub fn resize_bilinear(x: &Array4<f64>, out_hw: (usize, usize)) -> Array4<f64> {
    let (bsz, c, h, w) = x.dim();
    let (oh, ow) = out_hw;
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut y = Array4::<f64>::zeros((bsz, c, oh, ow));
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for b in 0..bsz {
                for ci in 0..c {
                    let v00 = x[(b, ci, y0, x0)];
                    let v01 = x[(b, ci, y0, x1)];
                    let v10 = x[(b, ci, y1, x0)];
                    let v11 = x[(b, ci, y1, x1)];
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    y[(b, ci, oy, ox)] = top + (bot - top) * wy;
                }
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`]: scatters each output gradient onto the
/// four source taps with the forward weights.
pub fn resize_bilinear_backward(dy: &Array4<f64>, in_hw: (usize, usize)) -> Array4<f64> {
    let (bsz, c, oh, ow) = dy.dim();
    let (h, w) = in_hw;
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut dx = Array4::<f64>::zeros((bsz, c, h, w));
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for b in 0..bsz {
                for ci in 0..c {
                    let g = dy[(b, ci, oy, ox)];
                    dx[(b, ci, y0, x0)] += g * (1.0 - wy) * (1.0 - wx);
                    dx[(b, ci, y0, x1)] += g * (1.0 - wy) * wx;
                    dx[(b, ci, y1, x0)] += g * wy * (1.0 - wx);
                    dx[(b, ci, y1, x1)] += g * wy * wx;
                }
            }
        }
    }
    dx
}

/// Mean softmax cross-entropy over labeled pixels, with its gradient.
///
/// Pixels whose label equals `ignore_index` contribute nothing to the loss
/// or the gradient; the mean divides by the labeled-pixel count. A batch
/// with no labeled pixels yields loss 0 and zero gradient.
pub fn softmax_cross_entropy(
    logits: &Array4<f64>,
    labels: &Array3<u8>,
    ignore_index: u8,
) -> Result<(f64, Array4<f64>)> {
    let (bsz, k, h, w) = logits.dim();
    if labels.dim() != (bsz, h, w) {
        return Err(Error::Shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.dim(),
            logits.dim()
        )));
    }
    let mut count = 0usize;
    for &l in labels.iter() {
        if l != ignore_index {
            if l as usize >= k {
                return Err(Error::Validation(format!(
                    "label {l} out of range for {k} classes"
                )));
            }
            count += 1;
        }
    }
    let mut dlogits = Array4::<f64>::zeros((bsz, k, h, w));
    if count == 0 {
        return Ok((0.0, dlogits));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for b in 0..bsz {
        for y in 0..h {
            for x in 0..w {
                let lab = labels[(b, y, x)];
                if lab == ignore_index {
                    continue;
                }
                let mut mx = f64::NEG_INFINITY;
                for ci in 0..k {
                    mx = mx.max(logits[(b, ci, y, x)]);
                }
                let mut z = 0.0;
                for ci in 0..k {
                    z += (logits[(b, ci, y, x)] - mx).exp();
                }
                let lse = mx + z.ln();
                loss += (lse - logits[(b, lab as usize, y, x)]) * inv;
                for ci in 0..k {
                    let p = (logits[(b, ci, y, x)] - lse).exp();
                    let onehot = if ci == lab as usize { 1.0 } else { 0.0 };
                    dlogits[(b, ci, y, x)] = (p - onehot) * inv;
                }
            }
        }
    }
    Ok((loss, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::IGNORE_INDEX;
    use ndarray::{Array2, Array3, Array4};
    use rand::Rng;

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = derive_stream(seed, "test/randn4");
        Array4::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn randn2(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = derive_stream(seed, "test/randn2");
        Array2::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn naive_conv(
        x: &Array4<f64>,
        w: &ArrayD<f64>,
        b: Option<&ArrayD<f64>>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Array4<f64> {
        let (bsz, cin, h, wd) = x.dim();
        let sh = w.shape();
        let (cout, _cin, kh, kw) = (sh[0], sh[1], sh[2], sh[3]);
        let ho = conv_out(h, kh, stride, padding, dilation);
        let wo = conv_out(wd, kw, stride, padding, dilation);
        let mut y = Array4::<f64>::zeros((bsz, cout, ho, wo));
        for bi in 0..bsz {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b[[co]]);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky * dilation) as isize
                                        - padding as isize;
                                    let ix = (ox * stride + kx * dilation) as isize
                                        - padding as isize;
                                    if iy >= 0
                                        && (iy as usize) < h
                                        && ix >= 0
                                        && (ix as usize) < wd
                                    {
                                        acc += x[(bi, ci, iy as usize, ix as usize)]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[(bi, co, oy, ox)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_naive_reference() {
        for (seed, stride, padding, dilation) in
            [(1u64, 1, 1, 1), (2, 2, 1, 1), (3, 1, 2, 2), (4, 2, 0, 1)]
        {
            let mut conv = Conv2d::new("c", 3, 4, 3, stride, padding, dilation, true);
            conv.w.init(seed);
            let mut rng = derive_stream(seed, "test/conv_bias");
            for v in conv.b.as_mut().unwrap().value.iter_mut() {
                *v = rng.random::<f64>() - 0.5;
            }
            let x = randn4((2, 3, 7, 6), seed + 100);
            let got = conv.forward(&x);
            let want = naive_conv(
                &x,
                &conv.w.value,
                conv.b.as_ref().map(|b| &b.value),
                stride,
                padding,
                dilation,
            );
            assert_eq!(got.dim(), want.dim());
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-10, "stride {stride} pad {padding} dil {dilation}");
            }
        }
    }

    // Linear functional of the layer output: L = sum(y * r) for a fixed
    // random r, so dL/dy = r and finite differences stay cheap.
    fn fd_loss_conv(conv: &mut Conv2d, x: &Array4<f64>, r: &Array4<f64>) -> f64 {
        (conv.forward(x) * r).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for (seed, stride, padding, dilation) in [(10u64, 1, 1, 1), (11, 2, 1, 1), (12, 1, 2, 2)] {
            let mut conv = Conv2d::new("c", 2, 3, 3, stride, padding, dilation, true);
            conv.w.init(seed);
            let mut x = randn4((2, 2, 6, 5), seed + 50);
            let y = conv.forward(&x);
            let r = randn4(y.dim(), seed + 60);
            conv.w.zero_grad();
            conv.b.as_mut().unwrap().zero_grad();
            let dx = conv.backward(&r);
            let eps = 1e-5;
            // Input gradient.
            for idx in [(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 5, 4), (1, 0, 2, 2)] {
                let keep = x[idx];
                x[idx] = keep + eps;
                let up = fd_loss_conv(&mut conv, &x, &r);
                x[idx] = keep - eps;
                let dn = fd_loss_conv(&mut conv, &x, &r);
                x[idx] = keep;
                let fd = (up - dn) / (2.0 * eps);
                assert!(rel_err(fd, dx[idx]) < 1e-4, "dx at {idx:?}: fd {fd} vs {}", dx[idx]);
            }
            // Weight and bias gradients, a few entries each.
            for flat in [0usize, 7, 23] {
                let keep = conv.w.value.as_slice_mut().unwrap()[flat];
                conv.w.value.as_slice_mut().unwrap()[flat] = keep + eps;
                let up = fd_loss_conv(&mut conv, &x, &r);
                conv.w.value.as_slice_mut().unwrap()[flat] = keep - eps;
                let dn = fd_loss_conv(&mut conv, &x, &r);
                conv.w.value.as_slice_mut().unwrap()[flat] = keep;
                let fd = (up - dn) / (2.0 * eps);
                let got = conv.w.grad.as_slice().unwrap()[flat];
                assert!(rel_err(fd, got) < 1e-4, "dw[{flat}]: fd {fd} vs {got}");
            }
            let bgrad = conv.b.as_ref().unwrap().grad.clone();
            for flat in 0..3usize {
                let keep = conv.b.as_mut().unwrap().value.as_slice_mut().unwrap()[flat];
                conv.b.as_mut().unwrap().value.as_slice_mut().unwrap()[flat] = keep + eps;
                let up = fd_loss_conv(&mut conv, &x, &r);
                conv.b.as_mut().unwrap().value.as_slice_mut().unwrap()[flat] = keep - eps;
                let dn = fd_loss_conv(&mut conv, &x, &r);
                conv.b.as_mut().unwrap().value.as_slice_mut().unwrap()[flat] = keep;
                let fd = (up - dn) / (2.0 * eps);
                let got = bgrad.as_slice().unwrap()[flat];
                assert!(rel_err(fd, got) < 1e-4, "db[{flat}]: fd {fd} vs {got}");
            }
        }
    }

    #[test]
    fn groupnorm_normalizes_each_group() {
        let mut gn = GroupNorm::new("gn", 8);
        gn.gamma.init(0);
        gn.beta.init(0);
        assert_eq!(gn.groups, 8);
        let x = randn4((2, 8, 5, 5), 20) * 3.0 + 1.5;
        let y = gn.forward(&x);
        for b in 0..2 {
            for c in 0..8 {
                let g = y.slice(s![b, c, .., ..]);
                let m = g.mean().unwrap();
                let v = g.iter().map(|&t| (t - m) * (t - m)).sum::<f64>() / 25.0;
                assert!(m.abs() < 1e-10, "group mean {m}");
                assert!((v - 1.0).abs() < 1e-3, "group var {v}");
            }
        }
    }

    #[test]
    fn groupnorm_backward_matches_finite_differences() {
        let mut gn = GroupNorm::new("gn", 4);
        gn.gamma.init(0);
        gn.beta.init(0);
        // Non-trivial affine params so the gamma path is exercised.
        let mut rng = derive_stream(21, "test/gn_params");
        for v in gn.gamma.value.iter_mut() {
            *v = 0.5 + rng.random::<f64>();
        }
        for v in gn.beta.value.iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let mut x = randn4((2, 4, 3, 3), 22);
        let y = gn.forward(&x);
        let r = randn4(y.dim(), 23);
        let dx = gn.backward(&r);
        let eps = 1e-5;
        for idx in [(0, 0, 0, 0), (1, 3, 2, 2), (0, 2, 1, 1), (1, 1, 0, 2)] {
            let keep = x[idx];
            x[idx] = keep + eps;
            let up = (gn.forward(&x) * &r).sum();
            x[idx] = keep - eps;
            let dn = (gn.forward(&x) * &r).sum();
            x[idx] = keep;
            let fd = (up - dn) / (2.0 * eps);
            assert!(rel_err(fd, dx[idx]) < 1e-4, "dx at {idx:?}: fd {fd} vs {}", dx[idx]);
        }
        for ci in 0..4usize {
            let keep = gn.gamma.value[[ci]];
            gn.gamma.value[[ci]] = keep + eps;
            let up = (gn.forward(&x) * &r).sum();
            gn.gamma.value[[ci]] = keep - eps;
            let dn = (gn.forward(&x) * &r).sum();
            gn.gamma.value[[ci]] = keep;
            let fd = (up - dn) / (2.0 * eps);
            assert!(rel_err(fd, gn.gamma.grad[[ci]]) < 1e-4, "dgamma[{ci}]");
        }
    }

    #[test]
    fn relu_gradient_masks_negatives() {
        let mut relu = Relu4::new();
        let x = randn4((2, 3, 4, 4), 30).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let y = relu.forward(&x);
        assert!(y.iter().all(|&v| v >= 0.0));
        let dy = Array4::<f64>::from_elem(x.dim(), 1.0);
        let dx = relu.backward(&dy);
        for (xi, di) in x.iter().zip(dx.iter()) {
            assert_eq!(*di, if *xi > 0.0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn maxpool_matches_window_maximum_and_routes_gradient() {
        let mut mp = MaxPool2d::new(3, 2, 1);
        let x = randn4((1, 2, 7, 7), 31);
        let y = mp.forward(&x);
        assert_eq!(y.dim(), (1, 2, 4, 4));
        for c in 0..2 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let iy = oy as isize * 2 + ky - 1;
                            let ix = ox as isize * 2 + kx - 1;
                            if (0..7).contains(&iy) && (0..7).contains(&ix) {
                                best = best.max(x[(0, c, iy as usize, ix as usize)]);
                            }
                        }
                    }
                    assert_eq!(y[(0, c, oy, ox)], best);
                }
            }
        }
        let dy = randn4((1, 2, 4, 4), 32);
        let dx = mp.backward(&dy);
        // Gradient mass is conserved: every dy lands on exactly one input.
        assert!((dx.sum() - dy.sum()).abs() < 1e-12);
    }

    #[test]
    fn gap_linear_l2norm_backward_match_finite_differences() {
        let eps = 1e-5;
        // Chain: GAP -> Linear -> L2 normalize, FD through the whole stack.
        let mut gap = GlobalAvgPool::new();
        let mut lin = Linear::new("fc", 3, 4);
        lin.w.init(40);
        let mut l2 = L2Normalize::new();
        let mut x = randn4((2, 3, 4, 4), 41);
        let r = randn2((2, 4), 42);
        let fwd = |x: &Array4<f64>,
                   gap: &mut GlobalAvgPool,
                   lin: &mut Linear,
                   l2: &mut L2Normalize| {
            let h = gap.forward(x);
            let h = lin.forward(&h);
            (l2.forward(&h) * &r).sum()
        };
        let _ = fwd(&x, &mut gap, &mut lin, &mut l2);
        let dh = l2.backward(&r);
        let dh = lin.backward(&dh);
        let dx = gap.backward(&dh);
        for idx in [(0, 0, 0, 0), (1, 2, 3, 3), (0, 1, 2, 1)] {
            let keep = x[idx];
            x[idx] = keep + eps;
            let up = fwd(&x, &mut gap, &mut lin, &mut l2);
            x[idx] = keep - eps;
            let dn = fwd(&x, &mut gap, &mut lin, &mut l2);
            x[idx] = keep;
            let fd = (up - dn) / (2.0 * eps);
            assert!(rel_err(fd, dx[idx]) < 1e-4, "dx at {idx:?}: fd {fd} vs {}", dx[idx]);
        }
        for flat in [0usize, 5, 11] {
            let keep = lin.w.value.as_slice_mut().unwrap()[flat];
            lin.w.value.as_slice_mut().unwrap()[flat] = keep + eps;
            let up = fwd(&x, &mut gap, &mut lin, &mut l2);
            lin.w.value.as_slice_mut().unwrap()[flat] = keep - eps;
            let dn = fwd(&x, &mut gap, &mut lin, &mut l2);
            lin.w.value.as_slice_mut().unwrap()[flat] = keep;
            let fd = (up - dn) / (2.0 * eps);
            let got = lin.w.grad.as_slice().unwrap()[flat];
            assert!(rel_err(fd, got) < 1e-4, "dw[{flat}]: fd {fd} vs {got}");
        }
    }

    #[test]
    fn l2_normalize_produces_unit_rows() {
        let mut l2 = L2Normalize::new();
        let x = randn2((5, 16), 50) * 10.0;
        let y = l2.forward(&x);
        for i in 0..5 {
            let n = y.slice(s![i, ..]).iter().map(|&v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row {i} norm {n}");
        }
    }

    #[test]
    fn resize_is_adjoint_of_its_backward() {
        // <R(x), dy> must equal <x, R^T(dy)> for the pair to be exact
        // transposes; random shapes, both up and down scaling.
        for (seed, in_hw, out_hw) in
            [(60u64, (5, 7), (11, 13)), (61, (8, 8), (4, 4)), (62, (6, 5), (6, 5))]
        {
            let x = randn4((2, 3, in_hw.0, in_hw.1), seed);
            let dy = randn4((2, 3, out_hw.0, out_hw.1), seed + 1);
            let lhs = (resize_bilinear(&x, out_hw) * &dy).sum();
            let rhs = (resize_bilinear_backward(&dy, in_hw) * &x).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch {lhs} vs {rhs}");
        }
    }

    #[test]
    fn resize_identity_and_constant_preservation() {
        let x = randn4((1, 2, 6, 6), 63);
        assert_eq!(resize_bilinear(&x, (6, 6)), x);
        let flat = Array4::<f64>::from_elem((1, 1, 5, 5), 3.25);
        let up = resize_bilinear(&flat, (9, 9));
        for v in up.iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // Uniform logits: loss is ln K regardless of labels.
        let k = 5;
        let logits = Array4::<f64>::zeros((1, k, 2, 2));
        let labels = Array3::<u8>::zeros((1, 2, 2));
        let (loss, _) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
        // Dominant correct logit: loss near zero.
        let mut logits = Array4::<f64>::zeros((1, 2, 1, 1));
        logits[(0, 0, 0, 0)] = 50.0;
        let labels = Array3::<u8>::zeros((1, 1, 1));
        let (loss, _) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn cross_entropy_honors_ignore_index() {
        let mut rng = derive_stream(70, "test/ce_ignore");
        let logits = randn4((2, 4, 3, 3), 70);
        let mut labels = Array3::<u8>::zeros((2, 3, 3));
        for l in labels.iter_mut() {
            *l = if rng.random::<f64>() < 0.4 { IGNORE_INDEX } else { rng.random_range(0..4) };
        }
        let (loss, dl) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
        assert!(loss.is_finite());
        for b in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    if labels[(b, y, x)] == IGNORE_INDEX {
                        for c in 0..4 {
                            assert_eq!(dl[(b, c, y, x)], 0.0);
                        }
                    }
                }
            }
        }
        // All ignored: zero loss, zero grad.
        let all = Array3::<u8>::from_elem((2, 3, 3), IGNORE_INDEX);
        let (loss, dl) = softmax_cross_entropy(&logits, &all, IGNORE_INDEX).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dl.iter().all(|&v| v == 0.0));
        // Out-of-range label: rejected.
        let bad = Array3::<u8>::from_elem((2, 3, 3), 4);
        assert!(softmax_cross_entropy(&logits, &bad, IGNORE_INDEX).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = derive_stream(71, "test/ce_fd");
        let mut logits = randn4((1, 3, 2, 2), 71) * 2.0;
        let mut labels = Array3::<u8>::zeros((1, 2, 2));
        for l in labels.iter_mut() {
            *l = rng.random_range(0..3);
        }
        labels[(0, 1, 1)] = IGNORE_INDEX;
        let (_, dl) = softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
        let eps = 1e-5;
        for b in 0..1 {
            for c in 0..3 {
                for y in 0..2 {
                    for x in 0..2 {
                        let idx = (b, c, y, x);
                        let keep = logits[idx];
                        logits[idx] = keep + eps;
                        let (up, _) =
                            softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
                        logits[idx] = keep - eps;
                        let (dn, _) =
                            softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
                        logits[idx] = keep;
                        let fd = (up - dn) / (2.0 * eps);
                        assert!(
                            rel_err(fd, dl[idx]) < 1e-4,
                            "dlogits at {idx:?}: fd {fd} vs {}",
                            dl[idx]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn init_follows_kind_rules() {
        let mut w = Param::new("stage.w", ParamKind::Weight, &[64, 128, 3, 3]);
        w.init(7);
        let std = (2.0f64 / (128.0 * 9.0)).sqrt();
        let n = w.value.len() as f64;
        let mean = w.value.sum() / n;
        let var = w.value.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * std / n.sqrt() * 2.0, "init mean {mean}");
        assert!((var.sqrt() - std).abs() / std < 0.05, "init std {}", var.sqrt());
        // Same name, same seed: identical draw; different name: different.
        let mut w2 = Param::new("stage.w", ParamKind::Weight, &[64, 128, 3, 3]);
        w2.init(7);
        assert_eq!(w.value, w2.value);
        let mut w3 = Param::new("other.w", ParamKind::Weight, &[64, 128, 3, 3]);
        w3.init(7);
        assert_ne!(w.value, w3.value);
        let mut b = Param::new("stage.b", ParamKind::Bias, &[64]);
        b.init(7);
        assert!(b.value.iter().all(|&v| v == 0.0));
        let mut g = Param::new("gn.gamma", ParamKind::Gain, &[64]);
        g.init(7);
        assert!(g.value.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gn_groups_picks_largest_divisor() {
        assert_eq!(gn_groups(256), 32);
        assert_eq!(gn_groups(48), 16);
        assert_eq!(gn_groups(30), 2);
        assert_eq!(gn_groups(7), 1);
    }
}
