//! Spectrogram CNN: conv(3x3, same) -> batch norm -> ReLU -> 2x2 max-pool ->
//! dropout blocks, then dense layers down to one output. Tensors are NCHW,
//! row-major; convolutions go through im2col and GEMM.

use std::fmt;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Floating-point element type of the network.
pub trait Real: Float + Default + fmt::Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    #[allow(clippy::too_many_arguments)]
    /// `C = A B + beta C` with explicit element strides.
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, Copy)]
enum Op {
    N,
    T,
}

/// `C (m x n) = op(A) op(B) + beta C`. A is stored `m x k` (or `k x m` for
/// `T`), B `k x n` (or `n x k`), all row-major.
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], ta: Op, b: &[T], tb: Op, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the length checks above bound every index the strides reach.
    unsafe { T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnArch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: Vec<usize>,
    /// Hidden dense widths; a final 1-unit output layer follows.
    pub dense: Vec<usize>,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    off: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvSlots {
    w: Slot,
    b: Slot,
    gamma: Slot,
    beta: Slot,
    /// Offset of this block's channels in the running statistics.
    stat_off: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseSlots {
    w: Slot,
    b: Slot,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    conv: Vec<(ConvDims, ConvSlots)>,
    dense: Vec<DenseSlots>,
    total: usize,
    n_stats: usize,
}

impl CnnArch {
    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut slot = |len: usize| {
            let s = Slot { off, len };
            off += len;
            s
        };
        let (mut c, mut h, mut w) = (self.in_channels, self.height, self.width);
        let mut conv = Vec::new();
        let mut stat_off = 0;
        for &f in &self.filters {
            let dims = ConvDims { c, h, w, f };
            let slots = ConvSlots { w: slot(f * c * 9), b: slot(f), gamma: slot(f), beta: slot(f), stat_off };
            conv.push((dims, slots));
            stat_off += f;
            c = f;
            h /= 2;
            w /= 2;
        }
        let mut n_in = c * h * w;
        let mut dense = Vec::new();
        for &n_out in self.dense.iter().chain(std::iter::once(&1)) {
            dense.push(DenseSlots { w: slot(n_out * n_in), b: slot(n_out), n_in, n_out });
            n_in = n_out;
        }
        Layout { conv, dense, total: off, n_stats: stat_off }
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn flat_len(&self) -> usize {
        self.layout().dense[0].n_in
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }

    pub fn validate(&self) -> Result<(), String> {
        let (mut h, mut w) = (self.height, self.width);
        for _ in &self.filters {
            h /= 2;
            w /= 2;
        }
        if self.in_channels == 0 || self.filters.iter().chain(&self.dense).any(|&v| v == 0) {
            return Err("zero-sized layer".into());
        }
        if h == 0 || w == 0 {
            return Err(format!("input {}x{} too small for {} pooling stages", self.height, self.width, self.filters.len()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must be in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnNet<T> {
    pub arch: CnnArch,
    layout: Layout,
    pub params: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

struct BlockCache<T> {
    input: Vec<T>,
    zhat: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    pool_idx: Vec<u32>,
    drop_mask: Vec<T>,
}

struct DenseCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    drop_mask: Vec<T>,
}

/// Activations kept by a training-mode forward pass.
pub struct Cache<T> {
    batch: usize,
    blocks: Vec<BlockCache<T>>,
    dense: Vec<DenseCache<T>>,
}

fn im2col<T: Real>(x: &[T], d: ConvDims, cols: &mut [T]) {
    let (h, w) = (d.h, d.w);
    let hw = h * w;
    for c in 0..d.c {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let ix = xo as isize + kx as isize - 1;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], d: ConvDims, dx: &mut [T]) {
    let (h, w) = (d.h, d.w);
    let hw = h * w;
    for c in 0..d.c {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xo in 0..w {
                        let ix = xo as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] = plane[iy as usize * w + ix as usize] + row[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

fn dropout_mask<T: Real>(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = 1.0 - rate;
    let scale = T::of(1.0 / keep);
    (0..n).map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() }).collect()
}

impl<T: Real> CnnNet<T> {
    /// He-normal weights, zero biases, unit batch-norm scales.
    pub fn new(arch: CnnArch, rng: &mut ChaCha8Rng) -> Self {
        let layout = arch.layout();
        let mut params = vec![T::zero(); layout.total];
        let mut fill = |s: Slot, fan_in: usize, params: &mut Vec<T>| {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite sd");
            for p in &mut params[s.off..s.off + s.len] {
                *p = T::of(d.sample(rng));
            }
        };
        for (d, s) in &layout.conv {
            fill(s.w, d.c * 9, &mut params);
            params[s.gamma.off..s.gamma.off + s.gamma.len].fill(T::one());
        }
        for s in &layout.dense {
            fill(s.w, s.n_in, &mut params);
        }
        let n_stats = layout.n_stats;
        Self { arch, layout, params, running_mean: vec![T::zero(); n_stats], running_var: vec![T::one(); n_stats] }
    }

    pub fn from_parts(arch: CnnArch, params: Vec<T>, running_mean: Vec<T>, running_var: Vec<T>) -> Result<Self, String> {
        let layout = arch.layout();
        if params.len() != layout.total || running_mean.len() != layout.n_stats || running_var.len() != layout.n_stats {
            return Err(format!(
                "expected {} parameters and {} statistics, got {}/{}/{}",
                layout.total,
                layout.n_stats,
                params.len(),
                running_mean.len(),
                running_var.len()
            ));
        }
        Ok(Self { arch, layout, params, running_mean, running_var })
    }

    /// Mutable view of the output layer bias.
    pub fn output_bias_mut(&mut self) -> &mut T {
        let s = self.layout.dense.last().expect("output layer").b;
        &mut self.params[s.off]
    }

    pub fn cast<U: Real>(&self) -> CnnNet<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect();
        CnnNet {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            params: c(&self.params),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
        }
    }

    /// Inference with running batch-norm statistics and no dropout.
    pub fn predict(&self, x: &[T], batch: usize) -> Vec<T> {
        self.run(x, batch, false, None).0
    }

    /// Training-mode forward pass: batch statistics, optional dropout.
    pub fn forward_train(&self, x: &[T], batch: usize, rng: Option<&mut ChaCha8Rng>) -> (Vec<T>, Cache<T>) {
        self.run(x, batch, true, rng)
    }

    fn run(&self, x: &[T], batch: usize, train: bool, mut rng: Option<&mut ChaCha8Rng>) -> (Vec<T>, Cache<T>) {
        assert_eq!(x.len(), batch * self.arch.input_len(), "input shape");
        let p = &self.params;
        let rate = self.arch.dropout;
        let mut cur = x.to_vec();
        let mut blocks = Vec::new();
        for (d, s) in &self.layout.conv {
            let d = *d;
            let hw = d.h * d.w;
            let k = d.c * 9;
            let mut z = vec![T::zero(); batch * d.f * hw];
            let mut cols = vec![T::zero(); k * hw];
            let wts = &p[s.w.off..s.w.off + s.w.len];
            for b in 0..batch {
                im2col(&cur[b * d.c * hw..(b + 1) * d.c * hw], d, &mut cols);
                let zb = &mut z[b * d.f * hw..(b + 1) * d.f * hw];
                gemm(d.f, k, hw, wts, Op::N, &cols, Op::N, T::zero(), zb);
                for f in 0..d.f {
                    let bias = p[s.b.off + f];
                    for v in &mut zb[f * hw..(f + 1) * hw] {
                        *v = *v + bias;
                    }
                }
            }
            let m = T::of((batch * hw) as f64);
            let mut mean = vec![T::zero(); d.f];
            let mut var = vec![T::zero(); d.f];
            let mut inv_std = vec![T::zero(); d.f];
            for f in 0..d.f {
                let (mu, v) = if train {
                    let mut acc = 0.0f64;
                    for b in 0..batch {
                        acc += z[(b * d.f + f) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = acc / m.as_f64();
                    let mut sq = 0.0f64;
                    for b in 0..batch {
                        sq += z[(b * d.f + f) * hw..][..hw].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                    }
                    (T::of(mu), T::of(sq / m.as_f64()))
                } else {
                    (self.running_mean[s.stat_off + f], self.running_var[s.stat_off + f])
                };
                mean[f] = mu;
                var[f] = v;
                inv_std[f] = T::one() / (v + T::of(BN_EPS)).sqrt();
            }
            // z becomes zhat in place.
            for b in 0..batch {
                for f in 0..d.f {
                    for v in &mut z[(b * d.f + f) * hw..][..hw] {
                        *v = (*v - mean[f]) * inv_std[f];
                    }
                }
            }
            let (ho, wo) = (d.h / 2, d.w / 2);
            let mut pooled = vec![T::zero(); batch * d.f * ho * wo];
            let mut idx = vec![0u32; if train { pooled.len() } else { 0 }];
            for b in 0..batch {
                for f in 0..d.f {
                    let g = p[s.gamma.off + f];
                    let be = p[s.beta.off + f];
                    let plane = (b * d.f + f) * hw;
                    let out = (b * d.f + f) * ho * wo;
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut best = T::zero();
                            let mut arg = plane + 2 * i * d.w + 2 * j;
                            let mut first = true;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let at = plane + (2 * i + dy) * d.w + 2 * j + dx;
                                let a = (g * z[at] + be).max(T::zero());
                                if first || a > best {
                                    best = a;
                                    arg = at;
                                    first = false;
                                }
                            }
                            pooled[out + i * wo + j] = best;
                            if train {
                                idx[out + i * wo + j] = arg as u32;
                            }
                        }
                    }
                }
            }
            let mut drop_mask = Vec::new();
            if train && rate > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    drop_mask = dropout_mask(pooled.len(), rate, r);
                    for (v, m) in pooled.iter_mut().zip(&drop_mask) {
                        *v = *v * *m;
                    }
                }
            }
            if train {
                blocks.push(BlockCache {
                    input: std::mem::take(&mut cur),
                    zhat: z,
                    inv_std,
                    batch_mean: mean,
                    batch_var: var,
                    pool_idx: idx,
                    drop_mask,
                });
            }
            cur = pooled;
        }
        let mut dense = Vec::new();
        let n_dense = self.layout.dense.len();
        for (li, s) in self.layout.dense.iter().enumerate() {
            let mut z = vec![T::zero(); batch * s.n_out];
            gemm(batch, s.n_in, s.n_out, &cur, Op::N, &p[s.w.off..s.w.off + s.w.len], Op::T, T::zero(), &mut z);
            for b in 0..batch {
                for o in 0..s.n_out {
                    z[b * s.n_out + o] = z[b * s.n_out + o] + p[s.b.off + o];
                }
            }
            let last = li + 1 == n_dense;
            let mut a = z.clone();
            let mut drop_mask = Vec::new();
            if !last {
                for v in &mut a {
                    *v = v.max(T::zero());
                }
                if li == 0 && train && rate > 0.0 {
                    if let Some(r) = rng.as_deref_mut() {
                        drop_mask = dropout_mask(a.len(), rate, r);
                        for (v, m) in a.iter_mut().zip(&drop_mask) {
                            *v = *v * *m;
                        }
                    }
                }
            }
            if train {
                dense.push(DenseCache { input: std::mem::take(&mut cur), pre: z, drop_mask });
            }
            cur = a;
        }
        (cur, Cache { batch, blocks, dense })
    }

    /// Blends the batch statistics of a training pass into the running ones.
    pub fn update_running_stats(&mut self, cache: &Cache<T>) {
        let mom = T::of(BN_MOMENTUM);
        for ((d, s), bc) in self.layout.conv.iter().zip(&cache.blocks) {
            let m = (cache.batch * d.h * d.w) as f64;
            let unbias = T::of(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            for f in 0..d.f {
                let rm = &mut self.running_mean[s.stat_off + f];
                *rm = (T::one() - mom) * *rm + mom * bc.batch_mean[f];
                let rv = &mut self.running_var[s.stat_off + f];
                *rv = (T::one() - mom) * *rv + mom * bc.batch_var[f] * unbias;
            }
        }
    }

    /// Gradient of the loss with respect to every parameter, given the
    /// gradient at the network output.
    pub fn backward(&self, cache: &Cache<T>, dout: &[T]) -> Vec<T> {
        let p = &self.params;
        let batch = cache.batch;
        let mut grad = vec![T::zero(); p.len()];
        let mut d = dout.to_vec();
        let n_dense = self.layout.dense.len();
        for li in (0..n_dense).rev() {
            let s = &self.layout.dense[li];
            let dc = &cache.dense[li];
            if li + 1 != n_dense {
                for (i, g) in d.iter_mut().enumerate() {
                    if !dc.drop_mask.is_empty() {
                        *g = *g * dc.drop_mask[i];
                    }
                    if dc.pre[i] <= T::zero() {
                        *g = T::zero();
                    }
                }
            }
            gemm(s.n_out, batch, s.n_in, &d, Op::T, &dc.input, Op::N, T::zero(), &mut grad[s.w.off..s.w.off + s.w.len]);
            for o in 0..s.n_out {
                let mut acc = T::zero();
                for b in 0..batch {
                    acc = acc + d[b * s.n_out + o];
                }
                grad[s.b.off + o] = acc;
            }
            let mut dx = vec![T::zero(); batch * s.n_in];
            gemm(batch, s.n_out, s.n_in, &d, Op::N, &p[s.w.off..s.w.off + s.w.len], Op::N, T::zero(), &mut dx);
            d = dx;
        }
        for bi in (0..self.layout.conv.len()).rev() {
            let (dims, s) = &self.layout.conv[bi];
            let dims = *dims;
            let bc = &cache.blocks[bi];
            let hw = dims.h * dims.w;
            if !bc.drop_mask.is_empty() {
                for (g, m) in d.iter_mut().zip(&bc.drop_mask) {
                    *g = *g * *m;
                }
            }
            // Un-pool, then gate by the ReLU.
            let mut dz = vec![T::zero(); batch * dims.f * hw];
            for (g, &at) in d.iter().zip(&bc.pool_idx) {
                dz[at as usize] = dz[at as usize] + *g;
            }
            let m = T::of((batch * hw) as f64);
            for f in 0..dims.f {
                let g = p[s.gamma.off + f];
                let be = p[s.beta.off + f];
                let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
                for b in 0..batch {
                    let base = (b * dims.f + f) * hw;
                    for i in base..base + hw {
                        let xh = bc.zhat[i];
                        if g * xh + be <= T::zero() {
                            dz[i] = T::zero();
                        }
                        sum_dy = sum_dy + dz[i];
                        sum_dy_xhat = sum_dy_xhat + dz[i] * xh;
                    }
                }
                grad[s.gamma.off + f] = sum_dy_xhat;
                grad[s.beta.off + f] = sum_dy;
                let k = g * bc.inv_std[f] / m;
                let mut sum_dz = T::zero();
                for b in 0..batch {
                    let base = (b * dims.f + f) * hw;
                    for i in base..base + hw {
                        dz[i] = k * (m * dz[i] - sum_dy - bc.zhat[i] * sum_dy_xhat);
                        sum_dz = sum_dz + dz[i];
                    }
                }
                grad[s.b.off + f] = sum_dz;
            }
            let kk = dims.c * 9;
            let mut cols = vec![T::zero(); kk * hw];
            let mut dcols = vec![T::zero(); kk * hw];
            let need_dx = bi > 0;
            let mut dx = vec![T::zero(); if need_dx { batch * dims.c * hw } else { 0 }];
            let wts = &p[s.w.off..s.w.off + s.w.len];
            for b in 0..batch {
                let dzb = &dz[b * dims.f * hw..(b + 1) * dims.f * hw];
                im2col(&bc.input[b * dims.c * hw..(b + 1) * dims.c * hw], dims, &mut cols);
                gemm(dims.f, hw, kk, dzb, Op::N, &cols, Op::T, T::one(), &mut grad[s.w.off..s.w.off + s.w.len]);
                if need_dx {
                    gemm(kk, dims.f, hw, wts, Op::T, dzb, Op::N, T::zero(), &mut dcols);
                    col2im_add(&dcols, dims, &mut dx[b * dims.c * hw..(b + 1) * dims.c * hw]);
                }
            }
            d = dx;
        }
        grad
    }
}

/// Mean squared error and its gradient with respect to the outputs.
pub fn mse_loss<T: Real>(out: &[T], target: &[T]) -> (f64, Vec<T>) {
    let n = out.len() as f64;
    let mut loss = 0.0;
    let grad = out
        .iter()
        .zip(target)
        .map(|(o, t)| {
            let e = (*o - *t).as_f64();
            loss += e * e;
            T::of(2.0 * e / n)
        })
        .collect();
    (loss / n, grad)
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] = params[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn toy_arch() -> CnnArch {
        CnnArch { in_channels: 2, height: 12, width: 16, filters: vec![2, 2, 2], dense: vec![4, 3], dropout: 0.0 }
    }

    fn random_input(arch: &CnnArch, batch: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..batch * arch.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn full_size_arch_shapes() {
        let arch = CnnArch { in_channels: 2, height: 49, width: 197, filters: vec![32, 64, 128], dense: vec![128, 64], dropout: 0.3 };
        arch.validate().unwrap();
        assert_eq!(arch.flat_len(), 128 * 6 * 24);
        let convs = 32 * 2 * 9 + 32 * 3 + 64 * 32 * 9 + 64 * 3 + 128 * 64 * 9 + 128 * 3;
        let dense = 128 * 6 * 24 * 128 + 128 + 128 * 64 + 64 + 64 + 1;
        assert_eq!(arch.n_params(), convs + dense);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let arch = toy_arch();
        let mut net = CnnNet::<f64>::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(1));
        // Non-trivial batch-norm affine parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (_, s) in net.layout.conv.clone() {
            for i in 0..s.gamma.len {
                net.params[s.gamma.off + i] = rng.gen_range(0.5..1.5);
                net.params[s.beta.off + i] = rng.gen_range(-0.2..0.2);
            }
        }
        let batch = 4;
        let x = random_input(&arch, batch, 3);
        let y: Vec<f64> = (0..batch).map(|i| i as f64 / 4.0).collect();
        let (out, cache) = net.forward_train(&x, batch, None);
        let (_, dout) = mse_loss(&out, &y);
        let grad = net.backward(&cache, &dout);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..net.params.len() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let lp = mse_loss(&net.forward_train(&x, batch, None).0, &y).0;
            net.params[i] = orig - h;
            let lm = mse_loss(&net.forward_train(&x, batch, None).0, &y).0;
            net.params[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-3, "max relative error {worst}");
    }

    #[test]
    fn zero_weights_output_bias() {
        let arch = toy_arch();
        let mut net = CnnNet::<f64>::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(1));
        net.params.iter_mut().for_each(|p| *p = 0.0);
        *net.output_bias_mut() = 0.42;
        for seed in 0..3 {
            let out = net.predict(&random_input(&arch, 2, seed), 2);
            assert_eq!(out, vec![0.42, 0.42]);
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let arch = CnnArch { dropout: 0.3, ..toy_arch() };
        let net = CnnNet::<f32>::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(4));
        let x: Vec<f32> = random_input(&arch, 3, 5).iter().map(|v| *v as f32).collect();
        assert_eq!(net.predict(&x, 3), net.predict(&x, 3));
        // Per-sample inference equals batched inference.
        let one = net.predict(&x[arch.input_len()..2 * arch.input_len()], 1);
        assert_eq!(one[0], net.predict(&x, 3)[1]);
    }

    #[test]
    fn memorizes_one_sample() {
        let arch = toy_arch();
        let mut net = CnnNet::<f32>::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(6));
        let one: Vec<f32> = random_input(&arch, 1, 7).iter().map(|v| *v as f32).collect();
        let x: Vec<f32> = one.iter().cycle().take(32 * arch.input_len()).copied().collect();
        let y = vec![0.7f32; 32];
        let mut adam = Adam::new(net.params.len(), 1e-3);
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            for b in 0..2 {
                let xb = &x[b * 16 * arch.input_len()..(b + 1) * 16 * arch.input_len()];
                let (out, cache) = net.forward_train(xb, 16, None);
                let (l, dout) = mse_loss(&out, &y[..16]);
                let g = net.backward(&cache, &dout);
                adam.step(&mut net.params, &g);
                net.update_running_stats(&cache);
                loss = l;
            }
        }
        assert!(loss < 1e-4, "loss {loss}");
    }
}
