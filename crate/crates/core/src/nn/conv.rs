use rand::Rng;

use super::{Param, Parameterized};
use crate::real::{gemm, sigmoid, softplus, Operand, Real};

/// Dense 4-D tensor stored channel-major as `(C, N, H, W)`.
///
/// Keeping the channel outermost lets a convolution over the whole batch be
/// a single matrix product against an im2col buffer of shape
/// `(C*k*k, N*H*W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![T::zero(); c * n * h * w] }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Self { c, n, h, w, data }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    /// The `h x w` plane of channel `c`, image `n`.
    pub fn plane(&self, c: usize, n: usize) -> &[T] {
        let start = (c * self.n + n) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    pub fn plane_mut(&mut self, c: usize, n: usize) -> &mut [T] {
        let hw = self.h * self.w;
        let start = (c * self.n + n) * hw;
        &mut self.data[start..start + hw]
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor4<T>]) -> Self {
        let first = parts[0];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut c = 0;
        for p in parts {
            assert!(p.n == first.n && p.h == first.h && p.w == first.w, "concat shape mismatch");
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Self { c, n: first.n, h: first.h, w: first.w, data }
    }

    /// Split along the channel axis into pieces of the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor4<T>> {
        assert_eq!(counts.iter().sum::<usize>(), self.c);
        let stride = self.n * self.h * self.w;
        let mut offset = 0;
        counts
            .iter()
            .map(|&cc| {
                let t = Tensor4::from_vec(cc, self.n, self.h, self.w, self.data[offset * stride..(offset + cc) * stride].to_vec());
                offset += cc;
                t
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::c(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }
}

/// Square 2-D convolution with "same" padding (`k / 2`).
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `(out_ch, in_ch * kernel * kernel)` row-major.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

/// Bound on im2col buffer elements; larger batches are processed in chunks.
const MAX_COL_ELEMS: usize = 1 << 22;
const DIRECT_MAX_OUT: usize = 4;

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_ch * kernel * kernel;
        let mut weight = Param::he_uniform(format!("{name}.kernel"), &[out_ch, fan_in], fan_in, rng);
        weight.decay = true;
        let bias = Param::zeros(format!("{name}.bias"), &[out_ch]);
        Self { in_ch, out_ch, kernel, stride, weight, bias }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.kernel) / self.stride + 1, (w + 2 * p - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn chunk_images(&self, n: usize, ho: usize, wo: usize) -> usize {
        let per_image = self.in_ch * self.kernel * self.kernel * ho * wo;
        (MAX_COL_ELEMS / per_image.max(1)).clamp(1, n.max(1))
    }

    /// Fill `col` with the `(in_ch*k*k, nc*ho*wo)` patch matrix of images
    /// `n0..n0+nc`.
    fn im2col(&self, x: &Tensor4<T>, n0: usize, nc: usize, ho: usize, wo: usize, col: &mut Vec<T>) {
        let k = self.kernel;
        let p = self.pad() as isize;
        let s = self.stride as isize;
        let cols = nc * ho * wo;
        col.clear();
        col.resize(self.in_ch * k * k * cols, T::zero());
        for ci in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut col[row * cols..(row + 1) * cols];
                    for ni in 0..nc {
                        let src = x.plane(ci, n0 + ni);
                        for oy in 0..ho {
                            let iy = oy as isize * s - p + ky as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let dst = &mut dst_row[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = ox as isize * s - p + kx as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], n0: usize, nc: usize, ho: usize, wo: usize, dx: &mut Tensor4<T>) {
        let k = self.kernel;
        let p = self.pad() as isize;
        let s = self.stride as isize;
        let cols = nc * ho * wo;
        let (h, w) = (dx.h, dx.w);
        for ci in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &col[row * cols..(row + 1) * cols];
                    for ni in 0..nc {
                        let dst = dx.plane_mut(ci, n0 + ni);
                        for oy in 0..ho {
                            let iy = oy as isize * s - p + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &src_row[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                            let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = ox as isize * s - p + kx as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] = dst_row[ix as usize] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Stride-1 convolution as shifted row updates; faster than im2col when
    /// there are few output channels.
    fn direct_forward(&self, x: &Tensor4<T>, out: &mut Tensor4<T>) {
        let (h, w) = (x.h, x.w);
        let k = self.kernel;
        let p = self.pad() as isize;
        for n in 0..x.n {
            for co in 0..self.out_ch {
                let o = out.plane_mut(co, n);
                for ci in 0..self.in_ch {
                    let src = x.plane(ci, n);
                    for ky in 0..k {
                        let dy = ky as isize - p;
                        for kx in 0..k {
                            let wv = self.weight.value[((co * self.in_ch + ci) * k + ky) * k + kx];
                            let dx = kx as isize - p;
                            let (lo, hi) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                            for oy in 0..h {
                                let iy = oy as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = iy as usize * w;
                                let in_row = &src[(base as isize + lo as isize + dx) as usize..(base as isize + hi as isize + dx) as usize];
                                let out_row = &mut o[oy * w + lo..oy * w + hi];
                                for (a, &b) in out_row.iter_mut().zip(in_row) {
                                    *a = *a + wv * b;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn direct_backward(&mut self, x: &Tensor4<T>, dy_t: &Tensor4<T>, dx_t: &mut Tensor4<T>) {
        let (h, w) = (x.h, x.w);
        let k = self.kernel;
        let p = self.pad() as isize;
        for n in 0..x.n {
            for co in 0..self.out_ch {
                let g = dy_t.plane(co, n);
                for ci in 0..self.in_ch {
                    let src = x.plane(ci, n);
                    for ky in 0..k {
                        let dy = ky as isize - p;
                        for kx in 0..k {
                            let widx = ((co * self.in_ch + ci) * k + ky) * k + kx;
                            let wv = self.weight.value[widx];
                            let dx = kx as isize - p;
                            let (lo, hi) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                            let mut acc = [T::zero(); 16];
                            let dxp = dx_t.plane_mut(ci, n);
                            for oy in 0..h {
                                let iy = oy as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let start = (iy * w as isize + lo as isize + dx) as usize;
                                let len = hi - lo;
                                let g_row = &g[oy * w + lo..oy * w + hi];
                                let in_row = &src[start..start + len];
                                let mut gc = g_row.chunks_exact(16);
                                let mut ic = in_row.chunks_exact(16);
                                for (ga, ia) in (&mut gc).zip(&mut ic) {
                                    for j in 0..16 {
                                        acc[j] = acc[j] + ga[j] * ia[j];
                                    }
                                }
                                for (&ga, &ia) in gc.remainder().iter().zip(ic.remainder()) {
                                    acc[0] = acc[0] + ga * ia;
                                }
                                let d_row = &mut dxp[start..start + len];
                                for (d, &ga) in d_row.iter_mut().zip(g_row) {
                                    *d = *d + wv * ga;
                                }
                            }
                            let s: T = acc.iter().copied().sum();
                            self.weight.grad[widx] = self.weight.grad[widx] + s;
                        }
                    }
                }
            }
        }
    }

    fn use_direct(&self) -> bool {
        self.stride == 1 && self.kernel > 1 && self.out_ch <= DIRECT_MAX_OUT
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Tensor4<T> {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let mut out = Tensor4::zeros(self.out_ch, x.n, ho, wo);
        let ckk = self.in_ch * self.kernel * self.kernel;
        let total_cols = x.n * ho * wo;
        if self.use_direct() {
            self.direct_forward(x, &mut out);
        } else if self.is_pointwise() {
            gemm(self.out_ch, ckk, total_cols, Operand::new(&self.weight.value, ckk), Operand::new(&x.data, total_cols), T::zero(), &mut out.data, total_cols);
        } else {
            let chunk = self.chunk_images(x.n, ho, wo);
            let mut col = Vec::new();
            let mut n0 = 0;
            while n0 < x.n {
                let nc = chunk.min(x.n - n0);
                self.im2col(x, n0, nc, ho, wo, &mut col);
                let off = n0 * ho * wo;
                gemm(
                    self.out_ch,
                    ckk,
                    nc * ho * wo,
                    Operand::new(&self.weight.value, ckk),
                    Operand::new(&col, nc * ho * wo),
                    T::zero(),
                    &mut out.data[off..],
                    total_cols,
                );
                n0 += nc;
            }
        }
        for (co, chunk) in out.data.chunks_mut(total_cols).enumerate() {
            let b = self.bias.value[co];
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
        let (ho, wo) = self.out_size(x.h, x.w);
        assert!(dy.c == self.out_ch && dy.n == x.n && dy.h == ho && dy.w == wo, "conv grad shape");
        let ckk = self.in_ch * self.kernel * self.kernel;
        let total_cols = x.n * ho * wo;
        for (co, chunk) in dy.data.chunks(total_cols).enumerate() {
            let s: T = chunk.iter().copied().sum();
            self.bias.grad[co] = self.bias.grad[co] + s;
        }
        let mut dx = Tensor4::zeros(x.c, x.n, x.h, x.w);
        if self.use_direct() {
            self.direct_backward(x, dy, &mut dx);
            return dx;
        }
        if self.is_pointwise() {
            gemm(self.out_ch, total_cols, ckk, Operand::new(&dy.data, total_cols), Operand::t(&x.data, total_cols), T::one(), &mut self.weight.grad, ckk);
            gemm(ckk, self.out_ch, total_cols, Operand::t(&self.weight.value, ckk), Operand::new(&dy.data, total_cols), T::zero(), &mut dx.data, total_cols);
            return dx;
        }
        let chunk = self.chunk_images(x.n, ho, wo);
        let mut col = Vec::new();
        let mut n0 = 0;
        while n0 < x.n {
            let nc = chunk.min(x.n - n0);
            let cols = nc * ho * wo;
            let off = n0 * ho * wo;
            self.im2col(x, n0, nc, ho, wo, &mut col);
            gemm(self.out_ch, cols, ckk, Operand::new(&dy.data[off..], total_cols), Operand::t(&col, cols), T::one(), &mut self.weight.grad, ckk);
            gemm(ckk, self.out_ch, cols, Operand::t(&self.weight.value, ckk), Operand::new(&dy.data[off..], total_cols), T::zero(), &mut col, cols);
            self.col2im(&col, n0, nc, ho, wo, &mut dx);
            n0 += nc;
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Twofold bilinear upsampling with half-pixel centres and edge clamping.
pub fn upsample2x<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let (h, w) = (x.h, x.w);
    let mut out = Tensor4::zeros(x.c, x.n, 2 * h, 2 * w);
    let q = T::c(0.25);
    let tq = T::c(0.75);
    let mut rows = vec![T::zero(); 2 * h * w];
    for c in 0..x.c {
        for n in 0..x.n {
            let src = x.plane(c, n);
            // vertical pass: (2h, w)
            for oy in 0..2 * h {
                let y = oy / 2;
                let nb = if oy % 2 == 0 { y.saturating_sub(1) } else { (y + 1).min(h - 1) };
                for xx in 0..w {
                    rows[oy * w + xx] = tq * src[y * w + xx] + q * src[nb * w + xx];
                }
            }
            let dst = out.plane_mut(c, n);
            for oy in 0..2 * h {
                let r = &rows[oy * w..(oy + 1) * w];
                let d = &mut dst[oy * 2 * w..(oy + 1) * 2 * w];
                for ox in 0..2 * w {
                    let xx = ox / 2;
                    let nb = if ox % 2 == 0 { xx.saturating_sub(1) } else { (xx + 1).min(w - 1) };
                    d[ox] = tq * r[xx] + q * r[nb];
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor4<T>) -> Tensor4<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor4::zeros(dy.c, dy.n, h, w);
    let q = T::c(0.25);
    let tq = T::c(0.75);
    let mut rows = vec![T::zero(); 2 * h * w];
    for c in 0..dy.c {
        for n in 0..dy.n {
            let g = dy.plane(c, n);
            rows.iter_mut().for_each(|v| *v = T::zero());
            for oy in 0..2 * h {
                let gr = &g[oy * 2 * w..(oy + 1) * 2 * w];
                let r = &mut rows[oy * w..(oy + 1) * w];
                for ox in 0..2 * w {
                    let xx = ox / 2;
                    let nb = if ox % 2 == 0 { xx.saturating_sub(1) } else { (xx + 1).min(w - 1) };
                    r[xx] = r[xx] + tq * gr[ox];
                    r[nb] = r[nb] + q * gr[ox];
                }
            }
            let d = dx.plane_mut(c, n);
            for oy in 0..2 * h {
                let y = oy / 2;
                let nb = if oy % 2 == 0 { y.saturating_sub(1) } else { (y + 1).min(h - 1) };
                for xx in 0..w {
                    let v = rows[oy * w + xx];
                    d[y * w + xx] = d[y * w + xx] + tq * v;
                    d[nb * w + xx] = d[nb * w + xx] + q * v;
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `max(x, 0.2 x)`
    LeakyRelu,
    Softplus,
    Linear,
}

const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    T::c(LEAKY_SLOPE) * v
                }
            }
            Activation::Softplus => softplus(v),
            Activation::Linear => v,
        }
    }

    fn derivative<T: Real>(self, pre: T) -> T {
        match self {
            Activation::LeakyRelu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::c(LEAKY_SLOPE)
                }
            }
            Activation::Softplus => sigmoid(pre),
            Activation::Linear => T::one(),
        }
    }
}

/// Optional upsampling, convolution, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub upsample: bool,
    pub conv: Conv2d<T>,
    pub act: Activation,
}

/// A feed-forward stack of [`ConvBlock`]s.
#[derive(Debug, Clone)]
pub struct ConvStack<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

/// Activations saved by [`ConvStack::forward_trace`] for the backward pass.
#[derive(Debug, Clone)]
pub struct StackTrace<T> {
    /// Convolution input of each block (after any upsampling).
    inputs: Vec<Tensor4<T>>,
    /// Pre-activation output of each block.
    pre: Vec<Tensor4<T>>,
    pub output: Tensor4<T>,
}

impl<T: Real> ConvStack<T> {
    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.conv.out_ch).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let mut cur = x.clone();
        for b in &self.blocks {
            if b.upsample {
                cur = upsample2x(&cur);
            }
            let mut y = b.conv.forward(&cur);
            y.data.iter_mut().for_each(|v| *v = b.act.apply(*v));
            cur = y;
        }
        cur
    }

    pub fn forward_trace(&self, x: &Tensor4<T>) -> StackTrace<T> {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut pre = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            if b.upsample {
                cur = upsample2x(&cur);
            }
            let y = b.conv.forward(&cur);
            inputs.push(cur);
            let mut post = y.clone();
            post.data.iter_mut().for_each(|v| *v = b.act.apply(*v));
            pre.push(y);
            cur = post;
        }
        StackTrace { inputs, pre, output: cur }
    }

    /// Backpropagate `d_out` through the stack, returning the input gradient.
    pub fn backward(&mut self, trace: &StackTrace<T>, d_out: Tensor4<T>) -> Tensor4<T> {
        let mut grad = d_out;
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            for (g, &p) in grad.data.iter_mut().zip(&trace.pre[i].data) {
                *g = *g * b.act.derivative(p);
            }
            grad = b.conv.backward(&trace.inputs[i], &grad);
            if b.upsample {
                grad = upsample2x_backward(&grad);
            }
        }
        grad
    }
}

impl<T: Real> Parameterized<T> for ConvStack<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for b in &self.blocks {
            b.conv.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.blocks {
            b.conv.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        let data = (0..c * n * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(c, n, h, w, data)
    }

    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor4<f64>) -> Tensor4<f64> {
        let (ho, wo) = conv.out_size(x.h, x.w);
        let k = conv.kernel;
        let p = (k / 2) as isize;
        let mut out = Tensor4::zeros(conv.out_ch, x.n, ho, wo);
        for co in 0..conv.out_ch {
            for n in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.value[co];
                        for ci in 0..conv.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride) as isize - p + ky as isize;
                                    let ix = (ox * conv.stride) as isize - p + kx as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        acc += conv.weight.value[co * conv.in_ch * k * k + (ci * k + ky) * k + kx]
                                            * x.data[x.idx(ci, n, iy as usize, ix as usize)];
                                    }
                                }
                            }
                        }
                        let i = out.idx(co, n, oy, ox);
                        out.data[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, o) in &[(3, 1, 3), (3, 1, 6), (3, 2, 3), (1, 1, 3)] {
            let mut conv = Conv2d::<f64>::new("c", 2, o, k, s, &mut rng);
            conv.bias.value = (0..o).map(|i| 0.1 * i as f64 - 0.2).collect();
            let x = random_tensor(2, 2, 6, 6, &mut rng);
            let got = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn stack_loss(stack: &ConvStack<f64>, x: &Tensor4<f64>, w: &[f64]) -> f64 {
        stack.forward(x).data.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut stack = ConvStack {
            blocks: vec![
                ConvBlock { upsample: false, conv: Conv2d::new("a", 2, 3, 3, 2, &mut rng), act: Activation::LeakyRelu },
                ConvBlock { upsample: true, conv: Conv2d::new("b", 3, 2, 3, 1, &mut rng), act: Activation::Softplus },
                ConvBlock { upsample: false, conv: Conv2d::new("c", 2, 2, 1, 1, &mut rng), act: Activation::Linear },
            ],
        };
        let x = random_tensor(2, 2, 8, 8, &mut rng);
        let trace = stack.forward_trace(&x);
        let w: Vec<f64> = (0..trace.output.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_out = Tensor4::from_vec(trace.output.c, trace.output.n, trace.output.h, trace.output.w, w.clone());
        let dx = stack.backward(&trace, d_out);

        let eps = 1e-5;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (stack_loss(&stack, &xp, &w) - stack_loss(&stack, &xm, &w)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input grad {i}: {fd} vs {}", dx.data[i]);
        }
        let mut grads = Vec::new();
        stack.visit(&mut |p| grads.push(p.grad.clone()));
        let mut pi = 0;
        let snapshot = stack.clone();
        snapshot.visit(&mut |p| {
            for i in (0..p.value.len()).step_by(5) {
                let mut plus = snapshot.clone();
                let mut minus = snapshot.clone();
                let mut k = 0;
                plus.visit_mut(&mut |q| {
                    if k == pi {
                        q.value[i] += eps;
                    }
                    k += 1;
                });
                k = 0;
                minus.visit_mut(&mut |q| {
                    if k == pi {
                        q.value[i] -= eps;
                    }
                    k += 1;
                });
                let fd = (stack_loss(&plus, &x, &w) - stack_loss(&minus, &x, &w)) / (2.0 * eps);
                let an = grads[pi][i];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{} [{i}]: {fd} vs {an}", p.name);
            }
            pi += 1;
        });
    }

    #[test]
    fn upsample_preserves_constants_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Tensor4::from_vec(1, 1, 4, 4, vec![0.7f64; 16]);
        assert!(upsample2x(&c).data.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let x = random_tensor(2, 1, 4, 5, &mut rng);
        let y = random_tensor(2, 1, 8, 10, &mut rng);
        let lhs: f64 = upsample2x(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2x_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
