//! Layers with hand-written backward passes.
//!
//! Parameters live in one flat `f64` slice; each layer records the offsets of
//! its weights inside it. Backward functions accumulate into a gradient slice
//! of the same layout and return the gradient with respect to their input.

use rand::Rng;
use rand_distr::StandardNormal;

/// NCHW activation batch.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Batch {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    fn same_dims(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }
}

/// Hands out consecutive parameter ranges and remembers how to initialise them.
#[derive(Debug, Clone, Default)]
pub(crate) struct ParamAllocator {
    next: usize,
    inits: Vec<(usize, usize, Init)>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zero,
    One,
    Normal(f64),
}

impl ParamAllocator {
    pub fn alloc(&mut self, len: usize, init: Init) -> usize {
        let offset = self.next;
        self.inits.push((offset, len, init));
        self.next += len;
        offset
    }

    pub fn total(&self) -> usize {
        self.next
    }

    pub fn initialise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.next];
        for &(offset, len, init) in &self.inits {
            let slot = &mut p[offset..offset + len];
            match init {
                Init::Zero => slot.fill(0.0),
                Init::One => slot.fill(1.0),
                Init::Normal(std) => slot
                    .iter_mut()
                    .for_each(|v| *v = std * rng.sample::<f64, _>(StandardNormal)),
            }
        }
        p
    }
}

/// `C[m x n] = alpha * A[m x k] B[k x n] + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices whose extents cover every index reachable
    // through the given dimensions and strides; `c` is row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square convolution, stride 1, zero padding `kernel / 2`.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv2d {
    pub fn new(alloc: &mut ParamAllocator, cin: usize, cout: usize, kernel: usize, init_gain: f64) -> Self {
        assert!(kernel == 1 || kernel == 3);
        let fan_in = (cin * kernel * kernel) as f64;
        let init = if init_gain == 0.0 {
            Init::Zero
        } else {
            Init::Normal(init_gain / fan_in.sqrt())
        };
        let weight = alloc.alloc(cout * cin * kernel * kernel, init);
        let bias = alloc.alloc(cout, Init::Zero);
        Self {
            cin,
            cout,
            kernel,
            weight,
            bias,
        }
    }

    fn taps(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, col: &mut [f64]) {
        let hw = h * w;
        for ci in 0..self.cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let dst = &mut row[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                dst[0] = 0.0;
                                dst[1..].copy_from_slice(&src[..w - 1]);
                            }
                            1 => dst.copy_from_slice(src),
                            _ => {
                                dst[..w - 1].copy_from_slice(&src[1..]);
                                dst[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let hw = h * w;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[y * w..(y + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                            1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                            _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, p: &[f64], x: &Batch) -> Batch {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.plane();
        let k = self.taps();
        let wts = &p[self.weight..self.weight + self.cout * k];
        let bias = &p[self.bias..self.bias + self.cout];
        let mut y = Batch::zeros(x.n, self.cout, x.h, x.w);
        let mut col = if self.kernel == 3 { vec![0.0; k * hw] } else { Vec::new() };
        for i in 0..x.n {
            let out = y.sample_mut(i);
            for (o, b) in bias.iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(*b);
            }
            let src: &[f64] = if self.kernel == 3 {
                self.im2col(x.sample(i), x.h, x.w, &mut col);
                &col
            } else {
                x.sample(i)
            };
            gemm(self.cout, k, hw, wts, k as isize, 1, src, hw as isize, 1, 1.0, out);
        }
        y
    }

    pub fn backward(&self, p: &[f64], x: &Batch, dy: &Batch, g: &mut [f64]) -> Batch {
        let hw = x.plane();
        let k = self.taps();
        let wts = &p[self.weight..self.weight + self.cout * k];
        let mut dx = x.same_dims();
        let mut col = vec![0.0; k * hw];
        let mut dcol = vec![0.0; k * hw];
        for i in 0..x.n {
            let dout = dy.sample(i);
            {
                let gb = &mut g[self.bias..self.bias + self.cout];
                for (o, gbo) in gb.iter_mut().enumerate() {
                    *gbo += dout[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            }
            let src: &[f64] = if self.kernel == 3 {
                self.im2col(x.sample(i), x.h, x.w, &mut col);
                &col
            } else {
                x.sample(i)
            };
            // dW += dY * col^T
            gemm(
                self.cout,
                hw,
                k,
                dout,
                hw as isize,
                1,
                src,
                1,
                hw as isize,
                1.0,
                &mut g[self.weight..self.weight + self.cout * k],
            );
            // dcol = W^T * dY
            if self.kernel == 3 {
                gemm(k, self.cout, hw, wts, 1, k as isize, dout, hw as isize, 1, 0.0, &mut dcol);
                self.col2im(&dcol, x.h, x.w, dx.sample_mut(i));
            } else {
                gemm(k, self.cout, hw, wts, 1, k as isize, dout, hw as isize, 1, 0.0, dx.sample_mut(i));
            }
        }
        dx
    }
}

/// Group normalisation with a per-channel affine transform.
#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub(crate) struct GroupNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

const GN_EPS: f64 = 1e-5;

/// Largest divisor of `channels` not exceeding `min(channels / 4, 32)`, so
/// every group spans at least four channels once there are four to share.
/// Single-channel groups would strip each feature map of its spatial mean and
/// leave the network blind to constant offsets in its input.
pub(crate) fn group_count(channels: usize) -> usize {
    let cap = (channels / 4).clamp(1, 32);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(alloc: &mut ParamAllocator, channels: usize) -> Self {
        let gamma = alloc.alloc(channels, Init::One);
        let beta = alloc.alloc(channels, Init::Zero);
        Self {
            channels,
            groups: group_count(channels),
            gamma,
            beta,
        }
    }

    pub fn forward(&self, p: &[f64], x: &Batch) -> (Batch, GroupNormCache) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let hw = x.plane();
        let cg = self.channels / self.groups;
        let m = (cg * hw) as f64;
        let gamma = &p[self.gamma..self.gamma + self.channels];
        let beta = &p[self.beta..self.beta + self.channels];
        let mut y = x.same_dims();
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = Vec::with_capacity(x.n * self.groups);
        for i in 0..x.n {
            let xs = x.sample(i);
            let base = i * x.sample_len();
            for g in 0..self.groups {
                let range = g * cg * hw..(g + 1) * cg * hw;
                let seg = &xs[range.clone()];
                let mean = seg.iter().sum::<f64>() / m;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let is = 1.0 / (var + GN_EPS).sqrt();
                inv_std.push(is);
                for (j, &v) in seg.iter().enumerate() {
                    let idx = base + range.start + j;
                    let c = g * cg + j / hw;
                    let xh = (v - mean) * is;
                    xhat[idx] = xh;
                    y.data[idx] = gamma[c] * xh + beta[c];
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], cache: &GroupNormCache, dy: &Batch, g: &mut [f64]) -> Batch {
        let hw = dy.plane();
        let cg = self.channels / self.groups;
        let m = (cg * hw) as f64;
        let gamma = &p[self.gamma..self.gamma + self.channels];
        let mut dx = dy.same_dims();
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        let mut dxhat = vec![0.0; cg * hw];
        for i in 0..dy.n {
            let base = i * dy.sample_len();
            for grp in 0..self.groups {
                let start = base + grp * cg * hw;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..cg * hw {
                    let c = grp * cg + j / hw;
                    let d = dy.data[start + j];
                    let xh = cache.xhat[start + j];
                    dgamma[c] += d * xh;
                    dbeta[c] += d;
                    let dh = d * gamma[c];
                    dxhat[j] = dh;
                    sum_d += dh;
                    sum_dx += dh * xh;
                }
                let is = cache.inv_std[i * self.groups + grp];
                for j in 0..cg * hw {
                    let xh = cache.xhat[start + j];
                    dx.data[start + j] = is * (dxhat[j] - sum_d / m - xh * sum_dx / m);
                }
            }
        }
        for c in 0..self.channels {
            g[self.gamma + c] += dgamma[c];
            g[self.beta + c] += dbeta[c];
        }
        dx
    }
}

/// Fully connected layer on row vectors.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub din: usize,
    pub dout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Dense {
    pub fn new(alloc: &mut ParamAllocator, din: usize, dout: usize, init_gain: f64) -> Self {
        let init = if init_gain == 0.0 {
            Init::Zero
        } else {
            Init::Normal(init_gain / (din as f64).sqrt())
        };
        let weight = alloc.alloc(din * dout, init);
        let bias = alloc.alloc(dout, Init::Zero);
        Self {
            din,
            dout,
            weight,
            bias,
        }
    }

    /// `x` is `n x din` row-major; returns `n x dout`.
    pub fn forward(&self, p: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        let w = &p[self.weight..self.weight + self.din * self.dout];
        let b = &p[self.bias..self.bias + self.dout];
        let mut y = Vec::with_capacity(n * self.dout);
        for _ in 0..n {
            y.extend_from_slice(b);
        }
        gemm(n, self.din, self.dout, x, self.din as isize, 1, w, 1, self.din as isize, 1.0, &mut y);
        y
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], n: usize, g: &mut [f64]) -> Vec<f64> {
        let w = &p[self.weight..self.weight + self.din * self.dout];
        for r in 0..n {
            for o in 0..self.dout {
                g[self.bias + o] += dy[r * self.dout + o];
            }
        }
        // dW[o, i] += sum_r dy[r, o] x[r, i]
        gemm(
            self.dout,
            n,
            self.din,
            dy,
            1,
            self.dout as isize,
            x,
            self.din as isize,
            1,
            1.0,
            &mut g[self.weight..self.weight + self.din * self.dout],
        );
        let mut dx = vec![0.0; n * self.din];
        gemm(n, self.dout, self.din, dy, self.dout as isize, 1, w, self.din as isize, 1, 0.0, &mut dx);
        dx
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub(crate) fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub(crate) fn silu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * (s + v * s * (1.0 - s))
        })
        .collect()
}

pub(crate) fn silu_batch(x: &Batch) -> Batch {
    Batch {
        n: x.n,
        c: x.c,
        h: x.h,
        w: x.w,
        data: silu(&x.data),
    }
}

pub(crate) fn silu_batch_backward(x: &Batch, dy: &Batch) -> Batch {
    Batch {
        n: x.n,
        c: x.c,
        h: x.h,
        w: x.w,
        data: silu_backward(&x.data, &dy.data),
    }
}

/// 2x2 average pooling.
pub(crate) fn avg_pool2(x: &Batch) -> Batch {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Batch::zeros(x.n, x.c, h2, w2);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut y.data[nc * h2 * w2..(nc + 1) * h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = src[2 * i * x.w + 2 * j];
                let b = src[2 * i * x.w + 2 * j + 1];
                let c = src[(2 * i + 1) * x.w + 2 * j];
                let d = src[(2 * i + 1) * x.w + 2 * j + 1];
                dst[i * w2 + j] = 0.25 * (a + b + c + d);
            }
        }
    }
    y
}

pub(crate) fn avg_pool2_backward(dy: &Batch) -> Batch {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Batch::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = 0.25 * src[(i / 2) * dy.w + j / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2(x: &Batch) -> Batch {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Batch::zeros(x.n, x.c, h, w);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut y.data[nc * h * w..(nc + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / 2) * x.w + j / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward(dy: &Batch) -> Batch {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Batch::zeros(dy.n, dy.c, h2, w2);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h2 * w2..(nc + 1) * h2 * w2];
        for i in 0..dy.h {
            for j in 0..dy.w {
                dst[(i / 2) * w2 + j / 2] += src[i * dy.w + j];
            }
        }
    }
    dx
}

/// Concatenates two batches along the channel axis.
pub(crate) fn concat(a: &Batch, b: &Batch) -> Batch {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut y = Batch::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let la = a.sample_len();
        let dst = y.sample_mut(i);
        dst[..la].copy_from_slice(a.sample(i));
        dst[la..].copy_from_slice(b.sample(i));
    }
    y
}

pub(crate) fn split(dy: &Batch, ca: usize) -> (Batch, Batch) {
    let mut da = Batch::zeros(dy.n, ca, dy.h, dy.w);
    let mut db = Batch::zeros(dy.n, dy.c - ca, dy.h, dy.w);
    for i in 0..dy.n {
        let src = dy.sample(i);
        let la = da.sample_len();
        da.sample_mut(i).copy_from_slice(&src[..la]);
        db.sample_mut(i).copy_from_slice(&src[la..]);
    }
    (da, db)
}
