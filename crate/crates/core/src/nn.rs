//! Dense-tensor operations with analytic gradients, the L2 loss and AdamW.
//!
//! "Convolution" means cross-correlation (no kernel flip). Every output
//! element of a convolution is accumulated in a fixed order: the bias
//! first, then input channel, kernel row, kernel column. Taps that fall in
//! the zero padding are skipped. Weight gradients reduce over samples in
//! sample order, so results never depend on how work is split. The ops are
//! generic over `f32` (training and inference) and `f64` (gradient checks).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;

pub trait Scalar: Float + AddAssign + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
}

/// `n x c x h x w` tensor, row-major with `n` outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!("zero extent in {n}x{c}x{h}x{w}")));
        }
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!("{} values for a {n}x{c}x{h}x{w} tensor", data.len())));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let s = self.h * self.w;
        let o = (n * self.c + c) * s;
        &self.data[o..o + s]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let s = self.h * self.w;
        let o = (n * self.c + c) * s;
        &mut self.data[o..o + s]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
        }
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }
}

impl<T> Tensor4<T> {
    fn dims(&self) -> String {
        format!("{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dot product with eight interleaved partial sums combined in a fixed
/// order, so the compiler can vectorize it without changing the result.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[8 * i..8 * i + 8], &b[8 * i..8 * i + 8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in 8 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Rows `y` for which `y + d` lies in `0..n`.
#[inline]
fn valid(d: isize, n: usize) -> std::ops::Range<usize> {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

fn check_conv<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>) -> Result<usize> {
    if w.h != w.w || w.h.is_multiple_of(2) {
        return Err(Error::ShapeMismatch(format!("kernel {} is not square and odd", w.dims())));
    }
    if x.c != w.c {
        return Err(Error::ShapeMismatch(format!("input {} does not match kernel {}", x.dims(), w.dims())));
    }
    Ok(w.h / 2)
}

/// Stride-1 convolution with "same" zero padding (`k/2` on each side).
pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &[T]) -> Result<Tensor4<T>> {
    let pad = check_conv(x, w)?;
    if b.len() != w.n {
        return Err(Error::ShapeMismatch(format!("bias length {} for {} outputs", b.len(), w.n)));
    }
    let (h, wd, k) = (x.h, x.w, w.h);
    let mut out = Tensor4::zeros(x.n, w.n, h, wd);
    for n in 0..x.n {
        for o in 0..w.n {
            let op = out.plane_mut(n, o);
            op.fill(b[o]);
            for ci in 0..x.c {
                let xp = x.plane(n, ci);
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        let wv = w.data[((o * w.c + ci) * k + ky) * k + kx];
                        let xs = valid(dx, wd);
                        for y in valid(dy, h) {
                            let sy = (y as isize + dy) as usize;
                            let src = &xp[sy * wd..(sy + 1) * wd];
                            let dst = &mut op[y * wd..(y + 1) * wd];
                            let (a, b) = (xs.start, xs.end);
                            let s0 = (a as isize + dx) as usize;
                            axpy(wv, &src[s0..s0 + (b - a)], &mut dst[a..b]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let pad = check_conv(x, w)?;
    if grad_out.shape() != [x.n, w.n, x.h, x.w] {
        return Err(Error::ShapeMismatch(format!(
            "conv grad {} for input {} and kernel {}",
            grad_out.dims(),
            x.dims(),
            w.dims()
        )));
    }
    let (h, wd, k) = (x.h, x.w, w.h);
    let mut gx = Tensor4::zeros(x.n, x.c, h, wd);
    let mut gw = Tensor4::zeros(w.n, w.c, k, k);
    let mut gb = vec![T::zero(); w.n];
    for n in 0..x.n {
        for o in 0..w.n {
            let gp = grad_out.plane(n, o);
            gb[o] += gp.iter().copied().sum();
            for ci in 0..x.c {
                let xp = x.plane(n, ci);
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        let xs = valid(dx, wd);
                        let (a, b) = (xs.start, xs.end);
                        let s0 = (a as isize + dx) as usize;
                        let widx = ((o * w.c + ci) * k + ky) * k + kx;
                        let wv = w.data[widx];
                        let mut acc = T::zero();
                        for y in valid(dy, h) {
                            let sy = (y as isize + dy) as usize;
                            let g = &gp[y * wd + a..y * wd + b];
                            acc += dot(g, &xp[sy * wd + s0..sy * wd + s0 + (b - a)]);
                            let gxp = gx.plane_mut(n, ci);
                            axpy(wv, g, &mut gxp[sy * wd + s0..sy * wd + s0 + (b - a)]);
                        }
                        gw.data[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

fn check_even<T>(x: &Tensor4<T>) -> Result<()> {
    if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) {
        return Err(Error::OddSpatialDims { h: x.h, w: x.w });
    }
    Ok(())
}

/// Index within the 2x2 window of the first maximum in row-major order.
#[inline]
fn argmax4<T: Scalar>(v: [T; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn maxpool2_forward<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_even(x)?;
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            let xp = x.plane(n, c);
            let op = out.plane_mut(n, c);
            for y in 0..oh {
                let (r0, r1) = (&xp[2 * y * x.w..], &xp[(2 * y + 1) * x.w..]);
                for xx in 0..ow {
                    let v = [r0[2 * xx], r0[2 * xx + 1], r1[2 * xx], r1[2 * xx + 1]];
                    op[y * ow + xx] = v[argmax4(v)];
                }
            }
        }
    }
    Ok(out)
}

pub fn maxpool2_backward<T: Scalar>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_even(x)?;
    let (oh, ow) = (x.h / 2, x.w / 2);
    if grad_out.shape() != [x.n, x.c, oh, ow] {
        return Err(Error::ShapeMismatch(format!("pool grad {} for {}", grad_out.dims(), x.dims())));
    }
    let mut gx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    for n in 0..x.n {
        for c in 0..x.c {
            let xp = x.plane(n, c);
            let gp = grad_out.plane(n, c);
            let gxp = gx.plane_mut(n, c);
            for y in 0..oh {
                for xx in 0..ow {
                    let idx = [
                        2 * y * x.w + 2 * xx,
                        2 * y * x.w + 2 * xx + 1,
                        (2 * y + 1) * x.w + 2 * xx,
                        (2 * y + 1) * x.w + 2 * xx + 1,
                    ];
                    let best = argmax4(idx.map(|i| xp[i]));
                    gxp[idx[best]] += gp[y * ow + xx];
                }
            }
        }
    }
    Ok(gx)
}

fn check_upconv<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>) -> Result<()> {
    if w.h != 2 || w.w != 2 || w.c != x.c {
        return Err(Error::ShapeMismatch(format!("upconv kernel {} for input {}", w.dims(), x.dims())));
    }
    Ok(())
}

/// Stride-2 transposed convolution with a 2x2 kernel laid out as
/// `(out_c, in_c, 2, 2)`. Output pixel `(2y+ky, 2x+kx)` receives exactly
/// one tap per input channel.
pub fn upconv2x2_forward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &[T]) -> Result<Tensor4<T>> {
    check_upconv(x, w)?;
    if b.len() != w.n {
        return Err(Error::ShapeMismatch(format!("bias length {} for {} outputs", b.len(), w.n)));
    }
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Tensor4::zeros(x.n, w.n, oh, ow);
    for n in 0..x.n {
        for o in 0..w.n {
            let op = out.plane_mut(n, o);
            op.fill(b[o]);
            for ky in 0..2 {
                for kx in 0..2 {
                    for y in 0..x.h {
                        let dst = &mut op[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                        for ci in 0..x.c {
                            let wv = w.data[((o * w.c + ci) * 2 + ky) * 2 + kx];
                            let src = &x.plane(n, ci)[y * x.w..(y + 1) * x.w];
                            for xx in 0..x.w {
                                dst[2 * xx + kx] += wv * src[xx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn upconv2x2_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    check_upconv(x, w)?;
    let (oh, ow) = (2 * x.h, 2 * x.w);
    if grad_out.shape() != [x.n, w.n, oh, ow] {
        return Err(Error::ShapeMismatch(format!("upconv grad {} for {}", grad_out.dims(), x.dims())));
    }
    let mut gx = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut gw = Tensor4::zeros(w.n, w.c, 2, 2);
    let mut gb = vec![T::zero(); w.n];
    for n in 0..x.n {
        for o in 0..w.n {
            let gp = grad_out.plane(n, o);
            gb[o] += gp.iter().copied().sum();
            for ci in 0..x.c {
                let xp = x.plane(n, ci);
                for ky in 0..2 {
                    for kx in 0..2 {
                        let widx = ((o * w.c + ci) * 2 + ky) * 2 + kx;
                        let wv = w.data[widx];
                        let mut acc = T::zero();
                        for y in 0..x.h {
                            let g = &gp[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                            let gxp = &mut gx.plane_mut(n, ci)[y * x.w..(y + 1) * x.w];
                            for xx in 0..x.w {
                                let gv = g[2 * xx + kx];
                                acc += gv * xp[y * x.w + xx];
                                gxp[xx] += wv * gv;
                            }
                        }
                        gw.data[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

#[inline]
pub fn leaky<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * T::of(LEAKY_SLOPE)
    }
}

pub fn leaky_relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(leaky)
}

/// Slope 1 for `x > 0`, 0.1 otherwise (including `x == 0`).
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    x.same_shape(grad_out, "leaky grad")?;
    let slope = T::of(LEAKY_SLOPE);
    let data = x.data.iter().zip(&grad_out.data).map(|(&v, &g)| if v > T::zero() { g } else { g * slope }).collect();
    Ok(Tensor4 { data, ..*x })
}

/// Channel concatenation `[a, b]`.
pub fn concat_forward<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.n != b.n || a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch(format!("concat {} with {}", a.dims(), b.dims())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    let (sa, sb) = (a.c * a.h * a.w, b.c * b.h * b.w);
    for n in 0..a.n {
        data.extend_from_slice(&a.data[n * sa..(n + 1) * sa]);
        data.extend_from_slice(&b.data[n * sb..(n + 1) * sb]);
    }
    Ok(Tensor4 { n: a.n, c: a.c + b.c, h: a.h, w: a.w, data })
}

/// Splits a concat gradient back into the parts for the first `ca`
/// channels and the rest.
pub fn concat_backward<T: Scalar>(grad: &Tensor4<T>, ca: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    if ca == 0 || ca >= grad.c {
        return Err(Error::ShapeMismatch(format!("cannot split {} at channel {ca}", grad.dims())));
    }
    let cb = grad.c - ca;
    let s = grad.h * grad.w;
    let mut ga = Vec::with_capacity(grad.n * ca * s);
    let mut gb = Vec::with_capacity(grad.n * cb * s);
    for n in 0..grad.n {
        let base = n * grad.c * s;
        ga.extend_from_slice(&grad.data[base..base + ca * s]);
        gb.extend_from_slice(&grad.data[base + ca * s..base + grad.c * s]);
    }
    Ok((
        Tensor4 { n: grad.n, c: ca, h: grad.h, w: grad.w, data: ga },
        Tensor4 { n: grad.n, c: cb, h: grad.h, w: grad.w, data: gb },
    ))
}

/// Mean squared difference and its gradient `2 (pred - target) / count`.
pub fn l2_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    pred.same_shape(target, "l2 loss")?;
    let count = pred.len() as f64;
    let mut loss = 0.0f64;
    let scale = T::of(2.0 / count);
    let data = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = p - t;
            let df = d.to_f64().unwrap();
            loss += df * df;
            d * scale
        })
        .collect();
    Ok((loss / count, Tensor4 { data, ..*pred }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay over a fixed list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub cfg: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            t: 0,
            m: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            v: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
        }
    }

    /// `theta <- theta - lr*wd*theta`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter groups and {} gradients for an optimizer over {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch(format!("parameter group {i} changed size")));
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mh = m[j] * inv_bc1;
                let vh = v[j] * inv_bc2;
                p[j] = p[j] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::Stream;

    pub(crate) fn random<T: Scalar>(s: &mut Stream, n: usize, c: usize, h: usize, w: usize) -> Tensor4<T> {
        let data = (0..n * c * h * w).map(|_| T::of(s.uniform_in(-1.0, 1.0))).collect();
        Tensor4::new(n, c, h, w, data).unwrap()
    }

    fn conv_oracle(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]) -> Tensor4<f64> {
        let p = (w.h / 2) as isize;
        let mut out = Tensor4::zeros(x.n, w.n, x.h, x.w);
        for n in 0..x.n {
            for o in 0..w.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut s = b[o];
                        for ci in 0..x.c {
                            for ky in 0..w.h {
                                for kx in 0..w.w {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < x.h && (sx as usize) < x.w {
                                        s += w.at(o, ci, ky, kx) * x.at(n, ci, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        out.data[((n * w.n + o) * x.h + y) * x.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_ones() {
        let x = Tensor4::new(1, 1, 3, 3, vec![1.0f32; 9]).unwrap();
        let w = Tensor4::new(1, 1, 3, 3, vec![1.0f32; 9]).unwrap();
        let y = conv2d_forward(&x, &w, &[0.0]).unwrap();
        assert_eq!(y.data, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_1x1() {
        let mut s = Stream::new(1);
        let x: Tensor4<f32> = random(&mut s, 2, 1, 5, 4);
        let w = Tensor4::new(1, 1, 1, 1, vec![1.0f32]).unwrap();
        assert_eq!(conv2d_forward(&x, &w, &[0.0]).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut s = Stream::new(2);
        let x: Tensor4<f64> = random(&mut s, 2, 3, 5, 5);
        for k in [1, 3] {
            let w: Tensor4<f64> = random(&mut s, 4, 3, k, k);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let got = conv2d_forward(&x, &w, &b).unwrap();
            let want = conv_oracle(&x, &w, &b);
            for (g, e) in got.data.iter().zip(&want.data) {
                assert!((g - e).abs() < 1e-12);
            }
            let got32 = conv2d_forward(&x.cast::<f32>(), &w.cast(), &[0.1, -0.2, 0.3, 0.0]).unwrap();
            for (g, e) in got32.data.iter().zip(&want.data) {
                assert!((*g as f64 - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor4::<f32>::zeros(1, 2, 4, 4);
        let w = Tensor4::<f32>::zeros(1, 3, 3, 3);
        assert!(matches!(conv2d_forward(&x, &w, &[0.0]), Err(Error::ShapeMismatch(_))));
        let w = Tensor4::<f32>::zeros(1, 2, 3, 3);
        assert!(matches!(conv2d_forward(&x, &w, &[]), Err(Error::ShapeMismatch(_))));
        assert!(Tensor4::<f32>::new(1, 1, 2, 2, vec![0.0; 3]).is_err());
    }

    /// Central finite differences of `sum(r * f(x))`.
    pub(crate) fn fd(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], r: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xp[i];
                xp[i] = orig + h;
                let plus: f64 = f(&xp).iter().zip(r).map(|(a, b)| a * b).sum();
                xp[i] = orig - h;
                let minus: f64 = f(&xp).iter().zip(r).map(|(a, b)| a * b).sum();
                xp[i] = orig;
                (plus - minus) / (2.0 * h)
            })
            .collect()
    }

    pub(crate) fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < tol, "element {i}: analytic {a} numeric {n} rel {rel}");
        }
    }

    #[test]
    fn conv_gradients_f64() {
        for seed in 0..10 {
            let mut s = Stream::new(seed);
            let x: Tensor4<f64> = random(&mut s, 1, 2, 4, 4);
            let w: Tensor4<f64> = random(&mut s, 3, 2, 3, 3);
            let b = vec![0.5, -0.5, 0.25];
            let r: Tensor4<f64> = random(&mut s, 1, 3, 4, 4);
            let (gx, gw, gb) = conv2d_backward(&x, &w, &r).unwrap();
            let fx = |v: &[f64]| {
                let xv = Tensor4::new(1, 2, 4, 4, v.to_vec()).unwrap();
                conv2d_forward(&xv, &w, &b).unwrap().data
            };
            assert_close(&gx.data, &fd(&fx, &x.data, &r.data, 1e-5), 1e-4);
            let fw = |v: &[f64]| {
                let wv = Tensor4::new(3, 2, 3, 3, v.to_vec()).unwrap();
                conv2d_forward(&x, &wv, &b).unwrap().data
            };
            assert_close(&gw.data, &fd(&fw, &w.data, &r.data, 1e-5), 1e-4);
            let fb = |v: &[f64]| conv2d_forward(&x, &w, v).unwrap().data;
            assert_close(&gb, &fd(&fb, &b, &r.data, 1e-5), 1e-4);
            // bias gradient is the per-channel sum of grad_out
            for o in 0..3 {
                assert!((gb[o] - r.plane(0, o).iter().sum::<f64>()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_f32() {
        let mut s = Stream::new(99);
        let x: Tensor4<f32> = random(&mut s, 1, 2, 4, 4);
        let w: Tensor4<f32> = random(&mut s, 2, 2, 3, 3);
        let r: Tensor4<f32> = random(&mut s, 1, 2, 4, 4);
        let (gx, _, _) = conv2d_backward(&x, &w, &r).unwrap();
        let h = 1e-3f32;
        let dot = |t: &Tensor4<f32>| -> f32 {
            let y = conv2d_forward(t, &w, &[0.0, 0.0]).unwrap();
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        // single precision rounding dominates small entries, so compare norms
        let (mut err, mut norm) = (0.0f64, 0.0f64);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let num = ((dot(&xp) - dot(&xm)) / (2.0 * h)) as f64;
            err += (num - gx.data[i] as f64).powi(2);
            norm += (gx.data[i] as f64).powi(2);
        }
        assert!((err / norm).sqrt() < 1e-2);
    }

    #[test]
    fn constant_output_has_zero_input_gradient() {
        let mut s = Stream::new(4);
        let x: Tensor4<f64> = random(&mut s, 1, 2, 4, 4);
        let w = Tensor4::<f64>::zeros(1, 2, 3, 3);
        let g: Tensor4<f64> = random(&mut s, 1, 1, 4, 4);
        let (gx, _, _) = conv2d_backward(&x, &w, &g).unwrap();
        assert!(gx.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_basics() {
        let x = Tensor4::new(1, 1, 2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2_forward(&x).unwrap().data, vec![4.0]);
        let g = Tensor4::new(1, 1, 1, 1, vec![1.0f32]).unwrap();
        assert_eq!(maxpool2_backward(&x, &g).unwrap().data, vec![0.0, 0.0, 0.0, 1.0]);
        // ties go to the first maximum in row-major order
        let t = Tensor4::new(1, 1, 2, 2, vec![0.0f32, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(maxpool2_backward(&t, &g).unwrap().data, vec![0.0, 1.0, 0.0, 0.0]);
        let odd = Tensor4::<f32>::zeros(1, 1, 3, 4);
        assert!(matches!(maxpool2_forward(&odd), Err(Error::OddSpatialDims { h: 3, w: 4 })));
        let y = maxpool2_forward(&Tensor4::<f32>::zeros(2, 3, 8, 6)).unwrap();
        assert_eq!(y.shape(), [2, 3, 4, 3]);
    }

    #[test]
    fn leaky_values() {
        assert_eq!(leaky(-10.0f32), -1.0);
        assert_eq!(leaky(10.0f32), 10.0);
    }

    fn upconv_oracle(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]) -> Tensor4<f64> {
        // zero-stuff the input, then a full 2x2 convolution (flipped kernel)
        let (sh, sw) = (2 * x.h, 2 * x.w);
        let mut out = Tensor4::zeros(x.n, w.n, sh, sw);
        for n in 0..x.n {
            for o in 0..w.n {
                for yy in 0..sh {
                    for xx in 0..sw {
                        let mut s = b[o];
                        for ci in 0..x.c {
                            for a in 0..2 {
                                for bb in 0..2 {
                                    if yy < a || xx < bb {
                                        continue;
                                    }
                                    let (py, px) = (yy - a, xx - bb);
                                    let stuffed =
                                        if py % 2 == 0 && px % 2 == 0 { x.at(n, ci, py / 2, px / 2) } else { 0.0 };
                                    s += stuffed * w.at(o, ci, a, bb);
                                }
                            }
                        }
                        out.data[((n * w.n + o) * sh + yy) * sw + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn upconv_matches_zero_stuffing() {
        let mut s = Stream::new(5);
        let x: Tensor4<f64> = random(&mut s, 1, 2, 3, 3);
        let w: Tensor4<f64> = random(&mut s, 3, 2, 2, 2);
        let b = vec![0.2, 0.0, -0.3];
        let got = upconv2x2_forward(&x, &w, &b).unwrap();
        assert_eq!(got.shape(), [1, 3, 6, 6]);
        let want = upconv_oracle(&x, &w, &b);
        for (g, e) in got.data.iter().zip(&want.data) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_upconv_leaky_concat_gradients() {
        for seed in 0..10 {
            let mut s = Stream::new(100 + seed);
            let x: Tensor4<f64> = random(&mut s, 1, 2, 4, 4);
            let r: Tensor4<f64> = random(&mut s, 1, 2, 2, 2);
            let g = maxpool2_backward(&x, &r).unwrap();
            let f = |v: &[f64]| maxpool2_forward(&Tensor4::new(1, 2, 4, 4, v.to_vec()).unwrap()).unwrap().data;
            assert_close(&g.data, &fd(&f, &x.data, &r.data, 1e-5), 1e-4);

            let r: Tensor4<f64> = random(&mut s, 1, 2, 4, 4);
            let g = leaky_relu_backward(&x, &r).unwrap();
            let f = |v: &[f64]| leaky_relu_forward(&Tensor4::new(1, 2, 4, 4, v.to_vec()).unwrap()).data;
            assert_close(&g.data, &fd(&f, &x.data, &r.data, 1e-5), 1e-4);

            let w: Tensor4<f64> = random(&mut s, 3, 2, 2, 2);
            let b = vec![0.1, 0.2, 0.3];
            let r: Tensor4<f64> = random(&mut s, 1, 3, 8, 8);
            let (gx, gw, gb) = upconv2x2_backward(&x, &w, &r).unwrap();
            let fx =
                |v: &[f64]| upconv2x2_forward(&Tensor4::new(1, 2, 4, 4, v.to_vec()).unwrap(), &w, &b).unwrap().data;
            assert_close(&gx.data, &fd(&fx, &x.data, &r.data, 1e-5), 1e-4);
            let fw =
                |v: &[f64]| upconv2x2_forward(&x, &Tensor4::new(3, 2, 2, 2, v.to_vec()).unwrap(), &b).unwrap().data;
            assert_close(&gw.data, &fd(&fw, &w.data, &r.data, 1e-5), 1e-4);
            let fb = |v: &[f64]| upconv2x2_forward(&x, &w, v).unwrap().data;
            assert_close(&gb, &fd(&fb, &b, &r.data, 1e-5), 1e-4);

            let y: Tensor4<f64> = random(&mut s, 1, 3, 4, 4);
            let c = concat_forward(&x, &y).unwrap();
            assert_eq!(c.shape(), [1, 5, 4, 4]);
            let (ga, gbb) = concat_backward(&c, 2).unwrap();
            assert_eq!((ga, gbb), (x.clone(), y));
        }
    }

    #[test]
    fn l2_values() {
        let p = Tensor4::new(1, 1, 1, 1, vec![2.0f32]).unwrap();
        let t = Tensor4::new(1, 1, 1, 1, vec![0.0f32]).unwrap();
        let (l, g) = l2_loss(&p, &t).unwrap();
        assert_eq!((l, g.data), (4.0, vec![4.0]));
        let (l, g) = l2_loss(&p, &p).unwrap();
        assert_eq!((l, g.data), (0.0, vec![0.0]));
        let mut s = Stream::new(8);
        let p: Tensor4<f64> = random(&mut s, 1, 1, 3, 3);
        let t: Tensor4<f64> = random(&mut s, 1, 1, 3, 3);
        let (_, g) = l2_loss(&p, &t).unwrap();
        let f = |v: &[f64]| vec![l2_loss(&Tensor4::new(1, 1, 3, 3, v.to_vec()).unwrap(), &t).unwrap().0];
        assert_close(&g.data, &fd(&f, &p.data, &[1.0], 1e-5), 1e-4);
    }

    #[test]
    fn adamw_steps() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamWState::<f64>::new(cfg, &[1]);
        let mut theta = [0.0f64];
        st.step(&mut [&mut theta], &[&[1.0]]).unwrap();
        assert!((theta[0] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut st = AdamWState::<f32>::new(cfg, &[3]);
        let mut p = [0.5f32, -1.0, 2.0];
        for _ in 0..5 {
            st.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, [0.5, -1.0, 2.0]);

        let mut st = AdamWState::<f32>::new(AdamWConfig::default(), &[1]);
        let mut th = [1.0f32];
        let mut prev = th[0].abs();
        for _ in 0..100 {
            let g = [2.0 * th[0]];
            st.step(&mut [&mut th], &[&g]).unwrap();
            assert!(th[0].abs() < prev);
            prev = th[0].abs();
        }
        assert!(st.step(&mut [], &[]).is_err());
    }
}
