//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape once in reverse. Nodes created with [`Graph::param`] are
//! the differentiable leaves; [`Graph::constant`] leaves never get gradients
//! and gradient work flowing only into constants is skipped.

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Pre-normalization norms below this are treated as the zero vector.
pub const NORM_GUARD: f64 = 1e-8;

/// Rows per block when the fused InfoNCE op materializes logits.
const NCE_BLOCK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Relu(Var),
    Upsample2(Var),
    L2Normalize { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Log(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, T),
    Add(Var, Var),
    Mul(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    GatherPixels { x: Var, index: Vec<(u32, u32)> },
    PickSum { x: Var, axis: usize, labels: Vec<u32>, ignore: Option<u32> },
    InfoNce { a: Var, b: Var, inv_tau: T, lse: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·s + kx − pad` lies
/// inside `0..w`.
fn valid_range(wo: usize, w: usize, s: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(s).min(wo);
    // largest ox with ox·s + kx − pad ≤ w − 1
    let hi = if w + pad > kx { ((w + pad - kx - 1) / s + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Patch matrix in (K, P) layout: row `(ci, ky, kx)`, column = output pixel.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (s, pad) = (g.spec.stride, g.spec.pad);
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g.wo, g.w, s, kx, pad);
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * s + kx - pad;
                    if s == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, &v) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrix in (P, K) layout: one contiguous row of K taps per output
/// pixel. The weight-gradient product runs much faster on this layout.
fn im2row<T: Real>(g: &ConvGeom, x: &[T], rows: &mut [T]) {
    let (s, pad) = (g.spec.stride as isize, g.spec.pad as isize);
    let k = g.k();
    let khw = g.kh * g.kw;
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut rows[(oy * g.wo + ox) * k..(oy * g.wo + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = oy as isize * s + ky as isize - pad;
                for kx in 0..g.kw {
                    let ix = ox as isize * s + kx as isize - pad;
                    let inside = iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize;
                    let off = if inside { iy as usize * g.w + ix as usize } else { 0 };
                    for ci in 0..g.cin {
                        row[ci * khw + ky * g.kw + kx] = if inside { x[ci * g.h * g.w + off] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (s, pad) = (g.spec.stride, g.spec.pad);
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g.wo, g.w, s, kx, pad);
                if lo >= hi {
                    continue;
                }
                let first = lo * s + kx - pad;
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(s).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Source taps for one axis of a ×2 bilinear upsample (half-pixel centers).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NnError {
    NnError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every node so the graph can be rebuilt for the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros for
    /// parameters the loss does not depend on, empty for constants.
    pub fn grad(&self, v: Var) -> &[T] {
        &self.nodes[v.0].grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || spec.stride == 0 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d bias", self.shape(b), &ws));
            }
        }
        let (hp, wp) = (xs[2] + 2 * spec.pad, xs[3] + 2 * spec.pad);
        if hp < ws[2] || wp < ws[3] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let g = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            ho: (hp - ws[2]) / spec.stride + 1,
            wo: (wp - ws[3]) / spec.stride + 1,
            spec,
        };
        let (k, p) = (g.k(), g.p());
        let mut out = vec![T::zero(); g.n * g.cout * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for n in 0..g.n {
                let xn = &xv[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
                let src: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(&g, xn, &mut cols);
                    &cols
                };
                let on = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
                if let Some(b) = b {
                    for (c, &bc) in self.value(b).data().iter().enumerate() {
                        on[c * p..(c + 1) * p].fill(bc);
                    }
                }
                let beta = if b.is_some() { T::one() } else { T::zero() };
                T::gemm(g.cout, k, p, T::one(), wv, k as isize, 1, src, p as isize, 1, beta, on, p as isize, 1);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Bilinear ×2 upsampling of an (N, C, H, W) tensor, half-pixel centers.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("upsample2", &s, &[4]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for pl in 0..planes {
            let src = &xv[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * 4 * h * w..(pl + 1) * 4 * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wy0, wy1, wx0, wx1) = (T::of(wy0), T::of(wy1), T::of(wx0), T::of(wx1));
                    dst[oy * 2 * w + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample2(x), rg))
    }

    /// Unit-normalizes along `axis`; vectors with norm below [`NORM_GUARD`]
    /// map to zero and pass no gradient.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("l2_normalize", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let guard = T::of(NORM_GUARD);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let norm = (0..len).map(|c| xv[base + c * inner].powi(2)).sum::<T>().sqrt();
                if norm >= guard {
                    for c in 0..len {
                        out[base + c * inner] = xv[base + c * inner] / norm;
                    }
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::L2Normalize { x, axis }, rg))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("softmax", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let m = (0..len).map(|c| xv[base + c * inner]).fold(T::neg_infinity(), T::max);
                let z: T = (0..len).map(|c| (xv[base + c * inner] - m).exp()).sum();
                let lse = m + z.ln();
                for c in 0..len {
                    let idx = base + c * inner;
                    out[idx] = if log { xv[idx] - lse } else { (xv[idx] - m).exp() / z };
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(x);
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        Ok(self.push(value, op, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.ln()).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Log(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total: T = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Mean(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * s).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a · b` for a (M, K) and b (K, N), or `a · bᵀ` for b (N, K).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Rows `(sample, pixel)` of an (N, C, H, W) tensor as an (M, C) matrix.
    pub fn gather_pixels(&mut self, x: Var, index: Vec<(u32, u32)>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("gather_pixels", &s, &[4]));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &(n, p) in &index {
            let (n, p) = (n as usize, p as usize);
            if n >= s[0] || p >= hw {
                return Err(shape_err("gather_pixels index", &s, &[n, p]));
            }
            out.extend((0..c).map(|ch| xv[(n * c + ch) * hw + p]));
        }
        let value = Tensor::new(vec![index.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherPixels { x, index }, rg))
    }

    /// Sum over positions of `x[.., label, ..]` along `axis`, skipping
    /// positions labeled `ignore`. `labels` has one entry per
    /// (outer, inner) position. Returns the sum and the number of terms.
    pub fn pick_sum(&mut self, x: Var, axis: usize, labels: Vec<u32>, ignore: Option<u32>) -> Result<(Var, usize)> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("pick_sum", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        if labels.len() != outer * inner {
            return Err(shape_err("pick_sum labels", &s, &[labels.len()]));
        }
        let xv = self.value(x).data();
        let mut total = T::zero();
        let mut count = 0;
        for (pos, &l) in labels.iter().enumerate() {
            if Some(l) == ignore {
                continue;
            }
            if l as usize >= len {
                return Err(NnError::LabelRange { label: l, n_classes: len });
            }
            let (o, i) = (pos / inner, pos % inner);
            total += xv[(o * len + l as usize) * inner + i];
            count += 1;
        }
        let rg = self.rg(x);
        let v = self.push(Tensor::scalar(total), Op::PickSum { x, axis, labels, ignore }, rg);
        Ok((v, count))
    }

    /// Fused `Σ_i [logsumexp_k(a_i·b_k/τ) − a_i·b_i/τ]` for row-aligned
    /// (M, D) matrices; logits are recomputed blockwise in backward so the
    /// M×M matrix never lives in memory at once.
    pub fn info_nce_sum(&mut self, a: Var, b: Var, tau: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(shape_err("info_nce", &sa, &sb));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(NnError::Config(format!("temperature must be positive, got {tau}")));
        }
        let (m, d) = (sa[0], sa[1]);
        if m < 2 {
            return Err(NnError::TooFewPairs(m));
        }
        let inv_tau = T::of(1.0 / tau);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut lse = vec![T::zero(); m];
        let mut total = T::zero();
        let mut logits = vec![T::zero(); NCE_BLOCK.min(m) * m];
        for r0 in (0..m).step_by(NCE_BLOCK) {
            let rows = NCE_BLOCK.min(m - r0);
            nce_logits(&av[r0 * d..], bv, rows, m, d, inv_tau, &mut logits);
            for r in 0..rows {
                let row = &logits[r * m..(r + 1) * m];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let l = mx + row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln();
                lse[r0 + r] = l;
                total += l - row[r0 + r];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total), Op::InfoNce { a, b, inv_tau, lse }, rg))
    }

    /// Runs reverse-mode accumulation from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(NnError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            node.grad.clear();
        }
        if self.rg(loss) {
            self.nodes[loss.0].grad = vec![T::one()];
        }
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_empty() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let contributions = self.local_grads(i);
            for (v, g) in contributions {
                let dst = &mut self.nodes[v.0].grad;
                if dst.is_empty() {
                    *dst = g;
                } else {
                    for (d, s) in dst.iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
            }
            // Interior gradients are no longer needed once propagated.
            self.nodes[i].grad = Vec::new();
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_empty() {
                node.grad = vec![T::zero(); node.value.len()];
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let g = &node.grad;
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let geom = ConvGeom {
                    n: xs[0],
                    cin: xs[1],
                    h: xs[2],
                    w: xs[3],
                    cout: ws[0],
                    kh: ws[2],
                    kw: ws[3],
                    ho: node.value.shape()[2],
                    wo: node.value.shape()[3],
                    spec: *spec,
                };
                let (k, p, cout) = (geom.k(), geom.p(), geom.cout);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let (need_x, need_w) = (self.rg(*x), self.rg(*w));
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); cout];
                    for n in 0..geom.n {
                        for (c, d) in db.iter_mut().enumerate() {
                            *d += g[(n * cout + c) * p..(n * cout + c + 1) * p].iter().copied().sum::<T>();
                        }
                    }
                    out.push((b, db));
                }
                let mut dw = if need_w { vec![T::zero(); cout * k] } else { Vec::new() };
                let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
                let img = geom.cin * geom.h * geom.w;
                for n in 0..geom.n {
                    let gn = &g[n * cout * p..(n + 1) * cout * p];
                    if need_w {
                        let xn = &xv[n * img..(n + 1) * img];
                        if geom.is_pointwise() {
                            // dW (cout×k) += g (cout×p) · xᵀ (p×k)
                            T::gemm(cout, p, k, T::one(), gn, p as isize, 1, xn, 1, p as isize, T::one(), &mut dw, k as isize, 1);
                        } else {
                            // dW (cout×k) += g (cout×p) · rows (p×k)
                            im2row(&geom, xn, &mut cols);
                            T::gemm(cout, p, k, T::one(), gn, p as isize, 1, &cols, k as isize, 1, T::one(), &mut dw, k as isize, 1);
                        }
                    }
                    if need_x {
                        let dxn = &mut dx[n * img..(n + 1) * img];
                        if geom.is_pointwise() {
                            T::gemm(k, cout, p, T::one(), wv, 1, k as isize, gn, p as isize, 1, T::one(), dxn, p as isize, 1);
                        } else {
                            // dcols (k×p) = Wᵀ (k×cout) · g (cout×p)
                            T::gemm(k, cout, p, T::one(), wv, 1, k as isize, gn, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
                            col2im_add(&geom, &cols, dxn);
                        }
                    }
                }
                if need_w {
                    out.push((*w, dw));
                }
                if need_x {
                    out.push((*x, dx));
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let d = g.iter().zip(y).map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() }).collect();
                    out.push((*x, d));
                }
            }
            Op::Upsample2(x) => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
                    let mut d = vec![T::zero(); planes * h * w];
                    for pl in 0..planes {
                        let src = &g[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                        let dst = &mut d[pl * h * w..(pl + 1) * h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let go = src[oy * 2 * w + ox];
                                dst[y0 * w + x0] += go * T::of(wy0 * wx0);
                                dst[y0 * w + x1] += go * T::of(wy0 * wx1);
                                dst[y1 * w + x0] += go * T::of(wy1 * wx0);
                                dst[y1 * w + x1] += go * T::of(wy1 * wx1);
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::L2Normalize { x, axis } => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let guard = T::of(NORM_GUARD);
                    let mut d = vec![T::zero(); xv.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let norm = (0..len).map(|c| xv[base + c * inner].powi(2)).sum::<T>().sqrt();
                            if norm < guard {
                                continue;
                            }
                            let dot: T = (0..len).map(|c| y[base + c * inner] * g[base + c * inner]).sum();
                            for c in 0..len {
                                let idx = base + c * inner;
                                d[idx] = (g[idx] - y[idx] * dot) / norm;
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                if self.rg(*x) {
                    let log = matches!(node.op, Op::LogSoftmax { .. });
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let mut d = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let idx = |c: usize| base + c * inner;
                            if log {
                                let gs: T = (0..len).map(|c| g[idx(c)]).sum();
                                for c in 0..len {
                                    d[idx(c)] = g[idx(c)] - y[idx(c)].exp() * gs;
                                }
                            } else {
                                let dot: T = (0..len).map(|c| g[idx(c)] * y[idx(c)]).sum();
                                for c in 0..len {
                                    d[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
                                }
                            }
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::Log(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    out.push((*x, g.iter().zip(xv).map(|(&gi, &xi)| gi / xi).collect()));
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).len()]));
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    out.push((*x, vec![g[0] / T::of(n as f64); n]));
                }
            }
            Op::Scale(x, s) => {
                if self.rg(*x) {
                    out.push((*x, g.iter().map(|&gi| gi * *s).collect()));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect()));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // b as a k×n matrix through strides
                let (rsb, csb) = if *trans_b { (1, k as isize) } else { (n as isize, 1) };
                if self.rg(*a) {
                    // dA (m×k) = G (m×n) · Bᵀ (n×k)
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, csb, rsb, T::zero(), &mut d, k as isize, 1);
                    out.push((*a, d));
                }
                if self.rg(*b) {
                    // dB (k×n) = Aᵀ (k×m) · G (m×n), stored in b's layout
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::zero(), &mut d, rsb, csb);
                    out.push((*b, d));
                }
            }
            Op::GatherPixels { x, index } => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut d = vec![T::zero(); self.value(*x).len()];
                    for (r, &(n, p)) in index.iter().enumerate() {
                        for ch in 0..c {
                            d[(n as usize * c + ch) * hw + p as usize] += g[r * c + ch];
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::PickSum { x, axis, labels, ignore } => {
                if self.rg(*x) {
                    let (_, len, inner) = split_axis(self.shape(*x), *axis);
                    let mut d = vec![T::zero(); self.value(*x).len()];
                    for (pos, &l) in labels.iter().enumerate() {
                        if Some(l) != *ignore {
                            let (o, i) = (pos / inner, pos % inner);
                            d[(o * len + l as usize) * inner + i] += g[0];
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::InfoNce { a, b, inv_tau, lse } => {
                let s = self.shape(*a);
                let (m, dd) = (s[0], s[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (need_a, need_b) = (self.rg(*a), self.rg(*b));
                let mut da = if need_a { vec![T::zero(); m * dd] } else { Vec::new() };
                let mut db = if need_b { vec![T::zero(); m * dd] } else { Vec::new() };
                let mut logits = vec![T::zero(); NCE_BLOCK.min(m) * m];
                let scale = g[0] * *inv_tau;
                for r0 in (0..m).step_by(NCE_BLOCK) {
                    let rows = NCE_BLOCK.min(m - r0);
                    nce_logits(&av[r0 * dd..], bv, rows, m, dd, *inv_tau, &mut logits);
                    for r in 0..rows {
                        let row = &mut logits[r * m..(r + 1) * m];
                        let l = lse[r0 + r];
                        for z in row.iter_mut() {
                            *z = (*z - l).exp() * scale;
                        }
                        row[r0 + r] -= scale;
                    }
                    let gblk = &logits[..rows * m];
                    if need_a {
                        T::gemm(rows, m, dd, T::one(), gblk, m as isize, 1, bv, dd as isize, 1, T::one(), &mut da[r0 * dd..], dd as isize, 1);
                    }
                    if need_b {
                        T::gemm(m, rows, dd, T::one(), gblk, 1, m as isize, &av[r0 * dd..], dd as isize, 1, T::one(), &mut db, dd as isize, 1);
                    }
                }
                if need_a {
                    out.push((*a, da));
                }
                if need_b {
                    out.push((*b, db));
                }
            }
        }
        out
    }
}

/// `out[r, k] = inv_tau · a[r]·b[k]` for `rows` rows of `a`.
fn nce_logits<T: Real>(a: &[T], b: &[T], rows: usize, m: usize, d: usize, inv_tau: T, out: &mut [T]) {
    T::gemm(rows, d, m, inv_tau, a, d as isize, 1, b, 1, d as isize, T::zero(), out, m as isize, 1);
}
