use rand::Rng;

use super::gemm::gemm;
use super::{Ctx, Init, Layer, Param, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the im2col scratch buffer, in floats.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output size `ceil(in / stride)`; odd padding goes after.
    Same,
}

/// (output length, padding before) along one axis.
fn axis(len: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            assert!(len >= k, "input {len} smaller than kernel {k}");
            ((len - k) / stride + 1, 0)
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            (out, total / 2)
        }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    pt: usize,
    pl: usize,
}

impl Geom {
    fn new(h: usize, w: usize, c: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Self {
        let (ho, pt) = axis(h, kh, stride, padding);
        let (wo, pl) = axis(w, kw, stride, padding);
        Self {
            h,
            w,
            c,
            kh,
            kw,
            stride,
            ho,
            wo,
            pt,
            pl,
        }
    }

    /// Input coordinate for an output position and kernel offset, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }
}

fn im2col(x: &[f32], g: &Geom, cols: &mut [f32]) {
    let kk = g.kh * g.kw * g.c;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            for ky in 0..g.kh {
                let iy = g.src(oy, ky, g.pt, g.h);
                for kx in 0..g.kw {
                    let dst = &mut row[(ky * g.kw + kx) * g.c..(ky * g.kw + kx + 1) * g.c];
                    match (iy, g.src(ox, kx, g.pl, g.w)) {
                        (Some(iy), Some(ix)) => {
                            let s = (iy * g.w + ix) * g.c;
                            dst.copy_from_slice(&x[s..s + g.c]);
                        }
                        _ => dst.fill(0.0),
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geom, dx: &mut [f32]) {
    let kk = g.kh * g.kw * g.c;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.pt, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.pl, g.w) else { continue };
                    let s = (iy * g.w + ix) * g.c;
                    let src = &row[(ky * g.kw + kx) * g.c..(ky * g.kw + kx + 1) * g.c];
                    for (d, v) in dx[s..s + g.c].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn column_sums(g: &[f32], c: usize) -> Vec<f32> {
    let mut s = vec![0f32; c];
    for row in g.chunks_exact(c) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

/// 2-D convolution with kernel layout `[kh, kw, cin, cout]`.
pub struct Conv2d {
    pub name: String,
    pub kernel: Param,
    pub bias: Option<Param>,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        init: &mut Init,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> Self {
        let name = name.into();
        let fan_in = k * k * cin;
        let kernel = Param::new(format!("{name}/kernel"), vec![k, k, cin, cout], init.he(fan_in * cout, fan_in));
        let bias = bias.then(|| Param::new(format!("{name}/bias"), vec![cout], vec![0.0; cout]));
        Self {
            name,
            kernel,
            bias,
            kh: k,
            kw: k,
            cin,
            cout,
            stride,
            padding,
        }
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn chunk(&self, per_image: usize, n: usize) -> usize {
        (COLS_BUDGET / per_image.max(1)).clamp(1, n.max(1))
    }
}

impl Layer for Conv2d {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        let (n, h, w, c) = x.dims4();
        assert_eq!(c, self.cin, "{}: expected {} input channels, got {c}", self.name, self.cin);
        let g = Geom::new(h, w, c, self.kh, self.kw, self.stride, self.padding);
        let (p, kk) = (g.ho * g.wo, self.kh * self.kw * c);
        let mut out = vec![0f32; n * p * self.cout];
        if self.pointwise() {
            gemm(n * p, c, self.cout, &x.data, false, &self.kernel.value, false, &mut out, 0.0);
        } else {
            let chunk = self.chunk(p * kk, n);
            let mut cols = vec![0f32; chunk * p * kk];
            for start in (0..n).step_by(chunk) {
                let m = (n - start).min(chunk);
                for i in 0..m {
                    im2col(x.item(start + i), &g, &mut cols[i * p * kk..(i + 1) * p * kk]);
                }
                gemm(
                    m * p,
                    kk,
                    self.cout,
                    &cols[..m * p * kk],
                    false,
                    &self.kernel.value,
                    false,
                    &mut out[start * p * self.cout..(start + m) * p * self.cout],
                    0.0,
                );
            }
        }
        if let Some(b) = &self.bias {
            add_bias(&mut out, &b.value);
        }
        ctx.push(x);
        Tensor::new(vec![n, g.ho, g.wo, self.cout], out)
    }

    fn backward(&self, gr: Tensor, ctx: &mut Ctx) -> Tensor {
        let x: Tensor = ctx.pop();
        let (n, h, w, c) = x.dims4();
        let g = Geom::new(h, w, c, self.kh, self.kw, self.stride, self.padding);
        let (p, kk) = (g.ho * g.wo, self.kh * self.kw * c);
        let mut dk = vec![0f32; kk * self.cout];
        let mut dx = vec![0f32; x.len()];
        if self.pointwise() {
            gemm(c, n * p, self.cout, &x.data, true, &gr.data, false, &mut dk, 0.0);
            gemm(n * p, self.cout, c, &gr.data, false, &self.kernel.value, true, &mut dx, 0.0);
        } else {
            let chunk = self.chunk(p * kk, n);
            let mut cols = vec![0f32; chunk * p * kk];
            let mut dcols = vec![0f32; chunk * p * kk];
            for start in (0..n).step_by(chunk) {
                let m = (n - start).min(chunk);
                for i in 0..m {
                    im2col(x.item(start + i), &g, &mut cols[i * p * kk..(i + 1) * p * kk]);
                }
                let gc = &gr.data[start * p * self.cout..(start + m) * p * self.cout];
                gemm(kk, m * p, self.cout, &cols[..m * p * kk], true, gc, false, &mut dk, 1.0);
                gemm(m * p, self.cout, kk, gc, false, &self.kernel.value, true, &mut dcols[..m * p * kk], 0.0);
                let item = h * w * c;
                for i in 0..m {
                    col2im(
                        &dcols[i * p * kk..(i + 1) * p * kk],
                        &g,
                        &mut dx[(start + i) * item..(start + i + 1) * item],
                    );
                }
            }
        }
        ctx.accumulate(&self.kernel, &dk);
        if let Some(b) = &self.bias {
            ctx.accumulate(b, &column_sums(&gr.data, self.cout));
        }
        Tensor::new(x.shape, dx)
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        let g = Geom::new(s[0], s[1], s[2], self.kh, self.kw, self.stride, self.padding);
        vec![g.ho, g.wo, self.cout]
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.kernel];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.kernel];
        v.extend(self.bias.as_mut());
        v
    }
}

/// Per-channel spatial convolution, kernel layout `[kh, kw, c]`.
pub struct DepthwiseConv2d {
    pub name: String,
    pub kernel: Param,
    k: usize,
    c: usize,
    stride: usize,
    padding: Padding,
}

impl DepthwiseConv2d {
    pub fn new(name: impl Into<String>, init: &mut Init, c: usize, k: usize, stride: usize, padding: Padding) -> Self {
        let name = name.into();
        let kernel = Param::new(format!("{name}/depthwise_kernel"), vec![k, k, c], init.he(k * k * c, k * k));
        Self {
            name,
            kernel,
            k,
            c,
            stride,
            padding,
        }
    }
}

impl Layer for DepthwiseConv2d {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        let (n, h, w, c) = x.dims4();
        assert_eq!(c, self.c, "{}: channel mismatch", self.name);
        let g = Geom::new(h, w, c, self.k, self.k, self.stride, self.padding);
        let kv = &self.kernel.value;
        let mut out = vec![0f32; n * g.ho * g.wo * c];
        for b in 0..n {
            let xi = x.item(b);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let o = ((b * g.ho + oy) * g.wo + ox) * c;
                    let dst = &mut out[o..o + c];
                    for ky in 0..self.k {
                        let Some(iy) = g.src(oy, ky, g.pt, h) else { continue };
                        for kx in 0..self.k {
                            let Some(ix) = g.src(ox, kx, g.pl, w) else { continue };
                            let src = &xi[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                            let kr = &kv[(ky * self.k + kx) * c..(ky * self.k + kx + 1) * c];
                            for ((d, s), k) in dst.iter_mut().zip(src).zip(kr) {
                                *d += s * k;
                            }
                        }
                    }
                }
            }
        }
        ctx.push(x);
        Tensor::new(vec![n, g.ho, g.wo, c], out)
    }

    fn backward(&self, gr: Tensor, ctx: &mut Ctx) -> Tensor {
        let x: Tensor = ctx.pop();
        let (n, h, w, c) = x.dims4();
        let g = Geom::new(h, w, c, self.k, self.k, self.stride, self.padding);
        let kv = &self.kernel.value;
        let mut dk = vec![0f32; kv.len()];
        let mut dx = vec![0f32; x.len()];
        let item = h * w * c;
        for b in 0..n {
            let xi = x.item(b);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let o = ((b * g.ho + oy) * g.wo + ox) * c;
                    let go = &gr.data[o..o + c];
                    for ky in 0..self.k {
                        let Some(iy) = g.src(oy, ky, g.pt, h) else { continue };
                        for kx in 0..self.k {
                            let Some(ix) = g.src(ox, kx, g.pl, w) else { continue };
                            let s = (iy * w + ix) * c;
                            let kofs = (ky * self.k + kx) * c;
                            for ch in 0..c {
                                dk[kofs + ch] += go[ch] * xi[s + ch];
                                dx[b * item + s + ch] += go[ch] * kv[kofs + ch];
                            }
                        }
                    }
                }
            }
        }
        ctx.accumulate(&self.kernel, &dk);
        Tensor::new(x.shape, dx)
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        let g = Geom::new(s[0], s[1], s[2], self.k, self.k, self.stride, self.padding);
        vec![g.ho, g.wo, self.c]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.kernel]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.kernel]
    }
}

enum BnCache {
    Train { xhat: Vec<f32>, inv_std: Vec<f32> },
    Eval { inv_std: Vec<f32> },
}

/// Batch normalization over the last axis.
pub struct BatchNorm {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub moving_mean: Param,
    pub moving_var: Param,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, c: usize) -> Self {
        let name = name.into();
        Self {
            gamma: Param::new(format!("{name}/gamma"), vec![c], vec![1.0; c]),
            beta: Param::new(format!("{name}/beta"), vec![c], vec![0.0; c]),
            moving_mean: Param::buffer(format!("{name}/moving_mean"), vec![0.0; c]),
            moving_var: Param::buffer(format!("{name}/moving_variance"), vec![1.0; c]),
            momentum: 0.9,
            eps: 1e-3,
            name,
        }
    }
}

impl Layer for BatchNorm {
    fn forward(&self, mut x: Tensor, ctx: &mut Ctx) -> Tensor {
        let c = x.channels();
        let m = x.len() / c;
        let (gamma, beta) = (&self.gamma.value, &self.beta.value);
        if ctx.train {
            let mut mean = vec![0f64; c];
            for row in x.data.chunks_exact(c) {
                for (a, &v) in mean.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0f64; c];
            for row in x.data.chunks_exact(c) {
                for ((a, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v as f64 - mu).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + self.eps as f64).sqrt()) as f32).collect();
            let mut xhat = vec![0f32; x.len()];
            for (row, hrow) in x.data.chunks_exact_mut(c).zip(xhat.chunks_exact_mut(c)) {
                for ch in 0..c {
                    let h = (row[ch] - mean[ch] as f32) * inv_std[ch];
                    hrow[ch] = h;
                    row[ch] = gamma[ch] * h + beta[ch];
                }
            }
            let mo = self.momentum;
            let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            let new_mean = (0..c)
                .map(|i| mo * self.moving_mean.value[i] + (1.0 - mo) * mean[i] as f32)
                .collect();
            let new_var = (0..c)
                .map(|i| mo * self.moving_var.value[i] + (1.0 - mo) * (var[i] * unbias) as f32)
                .collect();
            ctx.queue_stat_update(&self.moving_mean, new_mean);
            ctx.queue_stat_update(&self.moving_var, new_var);
            ctx.push(BnCache::Train { xhat, inv_std });
        } else {
            let inv_std: Vec<f32> = self
                .moving_var
                .value
                .iter()
                .map(|v| 1.0 / (v + self.eps).sqrt())
                .collect();
            let mean = &self.moving_mean.value;
            if ctx.records() {
                let mut xhat = vec![0f32; x.len()];
                for (row, hrow) in x.data.chunks_exact_mut(c).zip(xhat.chunks_exact_mut(c)) {
                    for ch in 0..c {
                        let h = (row[ch] - mean[ch]) * inv_std[ch];
                        hrow[ch] = h;
                        row[ch] = gamma[ch] * h + beta[ch];
                    }
                }
                ctx.push((BnCache::Eval { inv_std }, xhat));
            } else {
                for row in x.data.chunks_exact_mut(c) {
                    for ch in 0..c {
                        row[ch] = gamma[ch] * (row[ch] - mean[ch]) * inv_std[ch] + beta[ch];
                    }
                }
            }
        }
        x
    }

    fn backward(&self, mut g: Tensor, ctx: &mut Ctx) -> Tensor {
        let c = g.channels();
        let m = (g.len() / c) as f32;
        let gamma = &self.gamma.value;
        let (cache, xhat) = if ctx.train {
            match ctx.pop::<BnCache>() {
                BnCache::Train { xhat, inv_std } => (BnCache::Train { xhat: Vec::new(), inv_std }, xhat),
                BnCache::Eval { .. } => unreachable!("eval cache recorded in training mode"),
            }
        } else {
            ctx.pop::<(BnCache, Vec<f32>)>()
        };
        let mut dgamma = vec![0f32; c];
        let mut dbeta = vec![0f32; c];
        for (grow, hrow) in g.data.chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for ch in 0..c {
                dgamma[ch] += grow[ch] * hrow[ch];
                dbeta[ch] += grow[ch];
            }
        }
        match cache {
            BnCache::Train { inv_std, .. } => {
                for (grow, hrow) in g.data.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        grow[ch] = gamma[ch] * inv_std[ch] / m * (m * grow[ch] - dbeta[ch] - hrow[ch] * dgamma[ch]);
                    }
                }
            }
            BnCache::Eval { inv_std } => {
                for grow in g.data.chunks_exact_mut(c) {
                    for ch in 0..c {
                        grow[ch] *= gamma[ch] * inv_std[ch];
                    }
                }
            }
        }
        ctx.accumulate(&self.gamma, &dgamma);
        ctx.accumulate(&self.beta, &dbeta);
        g
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        s.to_vec()
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.moving_mean, &self.moving_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.moving_mean, &mut self.moving_var]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
}

pub struct Act(pub Activation);

impl Layer for Act {
    fn forward(&self, mut x: Tensor, ctx: &mut Ctx) -> Tensor {
        let hi = if self.0 == Activation::Relu6 { 6.0 } else { f32::INFINITY };
        for v in &mut x.data {
            *v = v.clamp(0.0, hi);
        }
        if ctx.records() {
            ctx.push(x.data.clone());
        }
        x
    }

    fn backward(&self, mut g: Tensor, ctx: &mut Ctx) -> Tensor {
        let y: Vec<f32> = ctx.pop();
        let hi = if self.0 == Activation::Relu6 { 6.0 } else { f32::INFINITY };
        for (gv, &yv) in g.data.iter_mut().zip(&y) {
            if yv <= 0.0 || yv >= hi {
                *gv = 0.0;
            }
        }
        g
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        s.to_vec()
    }
}

pub fn relu() -> Box<dyn Layer> {
    Box::new(Act(Activation::Relu))
}

pub fn relu6() -> Box<dyn Layer> {
    Box::new(Act(Activation::Relu6))
}

pub struct MaxPool2d {
    k: usize,
    stride: usize,
    padding: Padding,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, padding: Padding) -> Self {
        Self { k, stride, padding }
    }
}

impl Layer for MaxPool2d {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        let (n, h, w, c) = x.dims4();
        let g = Geom::new(h, w, c, self.k, self.k, self.stride, self.padding);
        let mut out = vec![f32::NEG_INFINITY; n * g.ho * g.wo * c];
        let mut arg = vec![0u32; out.len()];
        for b in 0..n {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let o = ((b * g.ho + oy) * g.wo + ox) * c;
                    for ky in 0..self.k {
                        let Some(iy) = g.src(oy, ky, g.pt, h) else { continue };
                        for kx in 0..self.k {
                            let Some(ix) = g.src(ox, kx, g.pl, w) else { continue };
                            let s = ((b * h + iy) * w + ix) * c;
                            for ch in 0..c {
                                if x.data[s + ch] > out[o + ch] {
                                    out[o + ch] = x.data[s + ch];
                                    arg[o + ch] = (s + ch) as u32;
                                }
                            }
                        }
                    }
                }
            }
        }
        ctx.push((x.shape.clone(), arg));
        Tensor::new(vec![n, g.ho, g.wo, c], out)
    }

    fn backward(&self, g: Tensor, ctx: &mut Ctx) -> Tensor {
        let (shape, arg): (Vec<usize>, Vec<u32>) = ctx.pop();
        let mut dx = Tensor::zeros(shape);
        for (gv, &a) in g.data.iter().zip(&arg) {
            dx.data[a as usize] += gv;
        }
        dx
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        let g = Geom::new(s[0], s[1], s[2], self.k, self.k, self.stride, self.padding);
        vec![g.ho, g.wo, s[2]]
    }
}

/// `[n, h, w, c] → [n, c]`.
pub struct GlobalAvgPool;

impl Layer for GlobalAvgPool {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        let (n, h, w, c) = x.dims4();
        let mut out = vec![0f32; n * c];
        for b in 0..n {
            for row in x.item(b).chunks_exact(c) {
                for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let z = (h * w) as f32;
        out.iter_mut().for_each(|v| *v /= z);
        ctx.push(x.shape);
        Tensor::new(vec![n, c], out)
    }

    fn backward(&self, g: Tensor, ctx: &mut Ctx) -> Tensor {
        let shape: Vec<usize> = ctx.pop();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let z = (h * w) as f32;
        let mut dx = Tensor::zeros(shape);
        for b in 0..n {
            let gb = &g.data[b * c..(b + 1) * c];
            for row in dx.item_mut(b).chunks_exact_mut(c) {
                for (d, v) in row.iter_mut().zip(gb) {
                    *d = v / z;
                }
            }
        }
        dx
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        vec![s[2]]
    }
}

pub struct Flatten;

impl Layer for Flatten {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        let (n, f) = (x.batch(), x.item_len());
        ctx.push(x.shape.clone());
        x.reshape(vec![n, f])
    }

    fn backward(&self, g: Tensor, ctx: &mut Ctx) -> Tensor {
        let shape: Vec<usize> = ctx.pop();
        g.reshape(shape)
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        vec![s.iter().product()]
    }
}

/// Fully connected layer, weight layout `[in, out]`.
pub struct Dense {
    pub name: String,
    pub weight: Param,
    pub bias: Param,
    fin: usize,
    fout: usize,
}

impl Dense {
    /// He-initialized, for hidden layers.
    pub fn new(name: impl Into<String>, init: &mut Init, fin: usize, fout: usize) -> Self {
        let w = init.he(fin * fout, fin);
        Self::with_weights(name, fin, fout, w)
    }

    /// Glorot-initialized, for the classifier output.
    pub fn output(name: impl Into<String>, init: &mut Init, fin: usize, fout: usize) -> Self {
        let w = init.glorot(fin * fout, fin, fout);
        Self::with_weights(name, fin, fout, w)
    }

    pub fn with_weights(name: impl Into<String>, fin: usize, fout: usize, w: Vec<f32>) -> Self {
        let name = name.into();
        Self {
            weight: Param::new(format!("{name}/kernel"), vec![fin, fout], w),
            bias: Param::new(format!("{name}/bias"), vec![fout], vec![0.0; fout]),
            name,
            fin,
            fout,
        }
    }
}

impl Layer for Dense {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        let (n, f) = x.dims2();
        assert_eq!(f, self.fin, "{}: expected {} features, got {f}", self.name, self.fin);
        let mut out = vec![0f32; n * self.fout];
        gemm(n, f, self.fout, &x.data, false, &self.weight.value, false, &mut out, 0.0);
        add_bias(&mut out, &self.bias.value);
        ctx.push(x);
        Tensor::new(vec![n, self.fout], out)
    }

    fn backward(&self, g: Tensor, ctx: &mut Ctx) -> Tensor {
        let x: Tensor = ctx.pop();
        let n = x.batch();
        let mut dw = vec![0f32; self.fin * self.fout];
        gemm(self.fin, n, self.fout, &x.data, true, &g.data, false, &mut dw, 0.0);
        let mut dx = vec![0f32; n * self.fin];
        gemm(n, self.fout, self.fin, &g.data, false, &self.weight.value, true, &mut dx, 0.0);
        ctx.accumulate(&self.weight, &dw);
        ctx.accumulate(&self.bias, &column_sums(&g.data, self.fout));
        Tensor::new(vec![n, self.fin], dx)
    }

    fn out_shape(&self, _s: &[usize]) -> Vec<usize> {
        vec![self.fout]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Inverted dropout; identity outside training.
pub struct Dropout {
    pub rate: f32,
}

impl Layer for Dropout {
    fn forward(&self, mut x: Tensor, ctx: &mut Ctx) -> Tensor {
        if !ctx.train || self.rate <= 0.0 {
            ctx.push(None::<Vec<f32>>);
            return x;
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f32> = (0..x.len())
            .map(|_| if ctx.rng().gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        for (v, m) in x.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        ctx.push(Some(mask));
        x
    }

    fn backward(&self, mut g: Tensor, ctx: &mut Ctx) -> Tensor {
        if let Some(mask) = ctx.pop::<Option<Vec<f32>>>() {
            for (v, m) in g.data.iter_mut().zip(&mask) {
                *v *= m;
            }
        }
        g
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        s.to_vec()
    }
}

/// Named observation point: captures the activation and its gradient when
/// the context asks for it.
pub struct Tap {
    pub name: String,
}

impl Tap {
    pub fn boxed(name: impl Into<String>) -> Box<dyn Layer> {
        Box::new(Tap { name: name.into() })
    }
}

impl Layer for Tap {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        if ctx.captures(&self.name) {
            ctx.activations.insert(self.name.clone(), x.clone());
        }
        x
    }

    fn backward(&self, g: Tensor, ctx: &mut Ctx) -> Tensor {
        if ctx.captures(&self.name) {
            ctx.activation_grads.insert(self.name.clone(), g.clone());
        }
        g
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        s.to_vec()
    }

    fn taps(&self, out: &mut Vec<String>) {
        out.push(self.name.clone());
    }
}

#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, l: impl Layer + 'static) -> &mut Self {
        self.layers.push(Box::new(l));
        self
    }

    pub fn add_boxed(&mut self, l: Box<dyn Layer>) -> &mut Self {
        self.layers.push(l);
        self
    }
}

impl Layer for Sequential {
    fn forward(&self, mut x: Tensor, ctx: &mut Ctx) -> Tensor {
        for l in &self.layers {
            x = l.forward(x, ctx);
        }
        x
    }

    fn backward(&self, mut g: Tensor, ctx: &mut Ctx) -> Tensor {
        for l in self.layers.iter().rev() {
            g = l.backward(g, ctx);
        }
        g
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        self.layers.iter().fold(s.to_vec(), |s, l| l.out_shape(&s))
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn taps(&self, out: &mut Vec<String>) {
        for l in &self.layers {
            l.taps(out);
        }
    }
}

/// `main(x) + shortcut(x)`, with identity when no shortcut is given.
pub struct Residual {
    pub main: Sequential,
    pub shortcut: Option<Sequential>,
}

impl Layer for Residual {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        let s = match &self.shortcut {
            Some(sc) => sc.forward(x.clone(), ctx),
            None => x.clone(),
        };
        let mut y = self.main.forward(x, ctx);
        y.add_assign(&s);
        y
    }

    fn backward(&self, g: Tensor, ctx: &mut Ctx) -> Tensor {
        let mut dx = self.main.backward(g.clone(), ctx);
        let ds = match &self.shortcut {
            Some(sc) => sc.backward(g, ctx),
            None => g,
        };
        dx.add_assign(&ds);
        dx
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        self.main.out_shape(s)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.main.params();
        if let Some(sc) = &self.shortcut {
            v.extend(sc.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.main.params_mut();
        if let Some(sc) = &mut self.shortcut {
            v.extend(sc.params_mut());
        }
        v
    }

    fn taps(&self, out: &mut Vec<String>) {
        self.main.taps(out);
    }
}

/// Shifts every item of a batch by its own scalar mean: `y = x + mean(x)`.
pub fn mean_shift(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let l = x.item_len() as f64;
    for b in 0..x.batch() {
        let item = y.item_mut(b);
        let m = (item.iter().map(|&v| v as f64).sum::<f64>() / l) as f32;
        item.iter_mut().for_each(|v| *v += m);
    }
    y
}

/// Mean-shifts both maps and concatenates them along channels, `a` first.
pub fn mean_shift_concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 4 || b.shape.len() != 4 {
        return Err(Error::Shape(format!("fusion expects NHWC maps, got {:?} and {:?}", a.shape, b.shape)));
    }
    if a.shape[..3] != b.shape[..3] {
        return Err(Error::Shape(format!(
            "fusion needs equal batch and spatial dims, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (n, h, w, ca) = a.dims4();
    let cb = b.channels();
    let (sa, sb) = (mean_shift(a), mean_shift(b));
    let mut out = Vec::with_capacity(n * h * w * (ca + cb));
    for (ra, rb) in sa.data.chunks_exact(ca).zip(sb.data.chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Ok(Tensor::new(vec![n, h, w, ca + cb], out))
}

fn mean_shift_backward(g: &mut Tensor) {
    let l = g.item_len() as f64;
    for b in 0..g.batch() {
        let item = g.item_mut(b);
        let m = (item.iter().map(|&v| v as f64).sum::<f64>() / l) as f32;
        item.iter_mut().for_each(|v| *v += m);
    }
}

/// Runs two branches on the same input and fuses their maps with
/// [`mean_shift_concat`].
pub struct DualBranch {
    pub a: Sequential,
    pub b: Sequential,
}

impl Layer for DualBranch {
    fn forward(&self, x: Tensor, ctx: &mut Ctx) -> Tensor {
        let ya = self.a.forward(x.clone(), ctx);
        let yb = self.b.forward(x, ctx);
        ctx.push((ya.channels(), yb.channels()));
        mean_shift_concat(&ya, &yb).expect("branch output shapes checked at construction")
    }

    fn backward(&self, g: Tensor, ctx: &mut Ctx) -> Tensor {
        let (ca, cb): (usize, usize) = ctx.pop();
        let (n, h, w, _) = g.dims4();
        let mut ga = Vec::with_capacity(n * h * w * ca);
        let mut gb = Vec::with_capacity(n * h * w * cb);
        for row in g.data.chunks_exact(ca + cb) {
            ga.extend_from_slice(&row[..ca]);
            gb.extend_from_slice(&row[ca..]);
        }
        let mut ga = Tensor::new(vec![n, h, w, ca], ga);
        let mut gb = Tensor::new(vec![n, h, w, cb], gb);
        mean_shift_backward(&mut ga);
        mean_shift_backward(&mut gb);
        let mut dx = self.b.backward(gb, ctx);
        dx.add_assign(&self.a.backward(ga, ctx));
        dx
    }

    fn out_shape(&self, s: &[usize]) -> Vec<usize> {
        let sa = self.a.out_shape(s);
        let sb = self.b.out_shape(s);
        assert_eq!(sa[..2], sb[..2], "branch spatial dims differ");
        vec![sa[0], sa[1], sa[2] + sb[2]]
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.a.params();
        v.extend(self.b.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.a.params_mut();
        v.extend(self.b.params_mut());
        v
    }

    fn taps(&self, out: &mut Vec<String>) {
        self.a.taps(out);
        self.b.taps(out);
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn close(a: f64, n: f64) -> bool {
        (a - n).abs() <= 2e-2 * a.abs().max(n.abs()) + 2e-3
    }

    /// Compares backward against central differences of `Σ y·r` for a few
    /// input entries and parameter entries.
    pub fn check_grads(layer: &mut dyn Layer, x: Tensor, train: bool) {
        let out_shape = {
            let mut s = vec![x.batch()];
            s.extend(layer.out_shape(&x.shape[1..]));
            s
        };
        let r = random(out_shape, 99);
        let make = || if train { Ctx::training(5) } else { Ctx::gradients() };
        let loss = |layer: &dyn Layer, x: &Tensor| -> f64 {
            let mut ctx = make();
            let y = layer.forward(x.clone(), &mut ctx);
            assert_eq!(y.shape, r.shape);
            y.data.iter().zip(&r.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut ctx = make();
        let _ = layer.forward(x.clone(), &mut ctx);
        let dx = layer.backward(r.clone(), &mut ctx);
        assert_eq!(dx.shape, x.shape);
        let grads: Vec<Option<Vec<f32>>> = layer.params().iter().map(|p| ctx.grad(p).map(|g| g.to_vec())).collect();
        let eps = 1e-3f32;
        let step = (x.len() / 7).max(1);
        for i in (0..x.len()).step_by(step) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += eps;
            xm.data[i] -= eps;
            let num = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * eps as f64);
            assert!(close(dx.data[i] as f64, num), "input {i}: analytic {} numeric {num}", dx.data[i]);
        }
        let np = layer.params().len();
        for pi in 0..np {
            let (len, buffer) = {
                let p = &layer.params()[pi];
                (p.len(), p.buffer)
            };
            if buffer {
                continue;
            }
            let g = grads[pi].clone().expect("trainable parameter received no gradient");
            for j in (0..len).step_by((len / 5).max(1)) {
                let orig = layer.params()[pi].value[j];
                layer.params_mut()[pi].value[j] = orig + eps;
                let lp = loss(layer, &x);
                layer.params_mut()[pi].value[j] = orig - eps;
                let lm = loss(layer, &x);
                layer.params_mut()[pi].value[j] = orig;
                let num = (lp - lm) / (2.0 * eps as f64);
                assert!(close(g[j] as f64, num), "param {pi}[{j}]: analytic {} numeric {num}", g[j]);
            }
        }
    }

    #[test]
    fn conv_same_stride_two_gradients() {
        let mut init = Init::new(1);
        let mut l = Conv2d::new("c", &mut init, 3, 4, 3, 2, Padding::Same, true);
        check_grads(&mut l, random(vec![2, 7, 6, 3], 2), false);
    }

    #[test]
    fn conv_valid_and_pointwise_gradients() {
        let mut init = Init::new(1);
        let mut l = Conv2d::new("c", &mut init, 2, 3, 3, 1, Padding::Valid, false);
        check_grads(&mut l, random(vec![2, 5, 5, 2], 3), false);
        let mut l = Conv2d::new("p", &mut init, 4, 3, 1, 1, Padding::Same, true);
        check_grads(&mut l, random(vec![2, 3, 3, 4], 4), false);
        let mut l = Conv2d::new("s", &mut init, 4, 3, 1, 2, Padding::Same, true);
        check_grads(&mut l, random(vec![1, 5, 5, 4], 5), false);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut init = Init::new(7);
        let l = Conv2d::new("c", &mut init, 2, 3, 3, 1, Padding::Same, false);
        let x = random(vec![1, 4, 4, 2], 8);
        let y = l.forward(x.clone(), &mut Ctx::inference());
        let k = &l.kernel.value;
        for oy in 0..4 {
            for ox in 0..4 {
                for co in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as i32 + ky as i32 - 1, ox as i32 + kx as i32 - 1);
                            let (ky, kx): (usize, usize) = (ky, kx);
                            if !(0..4).contains(&iy) || !(0..4).contains(&ix) {
                                continue;
                            }
                            for ci in 0..2usize {
                                let xi = (iy * 4 + ix) as usize * 2 + ci;
                                acc += x.data[xi] * k[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    assert!((y.data[(oy * 4 + ox) * 3 + co] - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut init = Init::new(1);
        let mut l = DepthwiseConv2d::new("d", &mut init, 3, 3, 2, Padding::Same);
        check_grads(&mut l, random(vec![2, 5, 6, 3], 6), false);
    }

    #[test]
    fn batchnorm_gradients_in_both_modes() {
        let mut l = BatchNorm::new("bn", 3);
        l.gamma.value = vec![1.5, -0.5, 2.0];
        l.beta.value = vec![0.1, 0.2, -0.3];
        check_grads(&mut l, random(vec![4, 2, 2, 3], 7), true);
        l.moving_var.value = vec![0.5, 2.0, 1.0];
        check_grads(&mut l, random(vec![4, 2, 2, 3], 8), false);
    }

    #[test]
    fn batchnorm_normalizes_and_updates_stats() {
        let mut l = BatchNorm::new("bn", 1);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let mut ctx = Ctx::training(0);
        let y = l.forward(x, &mut ctx);
        let mean: f32 = y.data.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        ctx.apply_stat_updates(&mut l);
        assert!((l.moving_mean.value[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn pooling_dense_and_activation_gradients() {
        let mut init = Init::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut vals: Vec<f32> = (0..2 * 5 * 5 * 2).map(|i| i as f32 * 0.01).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng);
        let x = Tensor::new(vec![2, 5, 5, 2], vals);
        check_grads(&mut MaxPool2d::new(2, 2, Padding::Same), x.clone(), false);
        check_grads(&mut MaxPool2d::new(3, 2, Padding::Valid), x.clone(), false);
        check_grads(&mut GlobalAvgPool, x.clone(), false);
        check_grads(&mut Act(Activation::Relu), random(vec![3, 8], 9), false);
        check_grads(&mut Act(Activation::Relu6), random(vec![3, 8], 10).scale(8.0), false);
        check_grads(&mut Dense::new("d", &mut init, 6, 4), random(vec![3, 6], 11), false);
        check_grads(&mut Dropout { rate: 0.5 }, random(vec![3, 6], 12), true);
    }

    #[test]
    fn containers_gradients() {
        let mut init = Init::new(4);
        let mut main = Sequential::new();
        main.add(Conv2d::new("m1", &mut init, 2, 3, 3, 1, Padding::Same, true))
            .add(BatchNorm::new("mbn", 3))
            .add_boxed(relu())
            .add(Conv2d::new("m2", &mut init, 3, 3, 3, 2, Padding::Same, true));
        let mut sc = Sequential::new();
        sc.add(Conv2d::new("s", &mut init, 2, 3, 1, 2, Padding::Same, true));
        let res = Residual {
            main,
            shortcut: Some(sc),
        };
        let mut a = Sequential::new();
        a.add(res);
        let mut b = Sequential::new();
        b.add(Conv2d::new("b", &mut init, 2, 5, 3, 2, Padding::Same, true));
        let mut net = Sequential::new();
        net.add(DualBranch { a, b })
            .add(Flatten)
            .add(Dense::new("head", &mut init, 2 * 2 * 8, 3));
        check_grads(&mut net, random(vec![2, 4, 4, 2], 13), true);
        check_grads(&mut net, random(vec![2, 4, 4, 2], 15), false);
    }

    #[test]
    fn fusion_layout_and_zero_maps() {
        let a = random(vec![2, 2, 2, 3], 1);
        let b = random(vec![2, 2, 2, 5], 2);
        let f = mean_shift_concat(&a, &b).unwrap();
        assert_eq!(f.shape, vec![2, 2, 2, 8]);
        let sa = mean_shift(&a);
        for p in 0..8 {
            assert_eq!(&f.data[p * 8..p * 8 + 3], &sa.data[p * 3..p * 3 + 3]);
        }
        let z = mean_shift_concat(&Tensor::zeros(vec![1, 4, 4, 2]), &Tensor::zeros(vec![1, 4, 4, 3])).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(mean_shift_concat(&Tensor::zeros(vec![1, 4, 4, 2]), &Tensor::zeros(vec![1, 2, 2, 3])).is_err());
    }

    #[test]
    fn same_padding_output_sizes() {
        assert_eq!(axis(128, 3, 2, Padding::Same), (64, 0));
        assert_eq!(axis(7, 3, 2, Padding::Same), (4, 1));
        assert_eq!(axis(1, 2, 2, Padding::Same), (1, 0));
        assert_eq!(axis(128, 3, 2, Padding::Valid), (63, 0));
    }
}
