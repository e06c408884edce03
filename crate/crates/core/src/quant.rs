//! Int8 quantization: per-tensor calibration, quantization-aware
//! fine-tuning and an integer-only inference path.
//!
//! Weights are symmetric (`q = round(w / s_w)`, `|q| <= 127`, zero point 0).
//! Activations are asymmetric uint8 with `value = s * (q - z)`. Every layer
//! that creates a new tensor owns an activation *slot*:
//!
//! - `Input` (fixed to `s = 1/255, z = 0`, which represents display gray
//!   levels exactly),
//! - a parameter layer not followed by `LeakyReLU`,
//! - the `LeakyReLU` that follows a parameter layer (the pair is fused),
//! - `UpConv2x2`.
//!
//! `MaxPool2` and `Concat` work on the uint8 codes directly, so the two
//! inputs of a concat share one slot range (the skip producer and the
//! upconv are calibrated to the union of their ranges). The last slot of a
//! branch is fixed to `1/255, 0`, matching the float path's clamp to
//! `[0, 1]` and rounding to gray levels.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Domain, Image};
use crate::net::{self, ActQuant, Branch, LayerKind, LayerParams, Model};
use crate::nn::Tensor4;
use crate::train::{self, Corpus, FakeQuant, TrainConfig};

/// Activation parameters of the input and output slots.
pub const UNIT_ACT: ActQuant = ActQuant { scale: 1.0 / 255.0, zero: 0 };

/// Symmetric per-tensor int8 quantization. An all-zero tensor gets
/// `s_w = 1`.
pub fn quantize_weights(w: &[f32]) -> Result<(Vec<i8>, f32)> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteWeights);
    }
    let m = w.iter().fold(0.0f32, |a, v| a.max(v.abs()));
    let s = if m == 0.0 { 1.0 } else { m / 127.0 };
    let q = w.iter().map(|&v| (v as f64 / s as f64).round().clamp(-127.0, 127.0) as i8).collect();
    Ok((q, s))
}

pub fn dequantize_weights(q: &[i8], s: f32) -> Vec<f32> {
    q.iter().map(|&v| v as f32 * s).collect()
}

/// Asymmetric uint8 parameters for an observed range. The range is widened
/// to include zero so that zero padding and ReLU-like outputs are exact.
/// A degenerate range `min == max == c` uses `s = max(|c|, 1) / 255`.
pub fn act_params(min: f32, max: f32) -> ActQuant {
    let (lo, hi) = (min as f64, max as f64);
    let scale = if lo == hi { lo.abs().max(1.0) / 255.0 } else { (hi.max(0.0) - lo.min(0.0)) / 255.0 };
    let zero = (-lo.min(0.0) / scale).round().clamp(0.0, 255.0) as i32;
    ActQuant { scale: scale as f32, zero }
}

/// Which layers of a branch own an activation slot.
pub fn slot_layers<T>(layers: &[LayerParams<T>]) -> Vec<bool> {
    (0..layers.len())
        .map(|i| match layers[i].kind {
            LayerKind::Input | LayerKind::UpConv2x2 => true,
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => layers.get(i + 1).map(|l| l.kind) != Some(LayerKind::LeakyReLU),
            LayerKind::LeakyReLU => i > 0 && layers[i - 1].kind.has_params(),
            _ => false,
        })
        .collect()
}

/// Pairs of slots that must share parameters: `(skip producer, producer of
/// the tensor it is concatenated with)`.
pub fn tied_slots<T>(layers: &[LayerParams<T>]) -> Vec<(usize, usize)> {
    let slots = slot_layers(layers);
    let mut producer = 0;
    let mut stack = Vec::new();
    let mut ties = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        if slots[i] {
            producer = i;
        }
        match l.kind {
            LayerKind::MaxPool2 => stack.push(producer),
            LayerKind::Concat => {
                if let Some(s) = stack.pop() {
                    ties.push((s, producer));
                }
            }
            _ => {}
        }
    }
    ties
}

/// Activation parameters of both branches, indexed like the layer lists.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub despeckle: Vec<Option<ActQuant>>,
    pub deblur: Vec<Option<ActQuant>>,
}

impl QuantParams {
    pub fn branch(&self, b: Branch) -> &[Option<ActQuant>] {
        match b {
            Branch::Deblur => &self.deblur,
            _ => &self.despeckle,
        }
    }

    /// Checks that the slots match the model and every parameter is valid.
    pub fn validate<T>(&self, model: &Model<T>) -> Result<()> {
        for (layers, acts) in [(&model.despeckle, &self.despeckle), (&model.deblur, &self.deblur)] {
            let slots = slot_layers(layers);
            if acts.len() != layers.len() {
                return Err(Error::MissingQuantParams);
            }
            for (a, s) in acts.iter().zip(slots) {
                match a {
                    Some(q) if s => {
                        if !(q.scale > 0.0 && q.scale.is_finite()) || !(0..=255).contains(&q.zero) {
                            return Err(Error::Malformed(format!("bad activation params {q:?}")));
                        }
                    }
                    None if !s => {}
                    _ => return Err(Error::MissingQuantParams),
                }
            }
        }
        Ok(())
    }
}

/// Running min/max of every slot of both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub despeckle: Vec<Option<(f32, f32)>>,
    pub deblur: Vec<Option<(f32, f32)>>,
    pub samples: usize,
}

fn merge_ranges(a: &mut [Option<(f32, f32)>], b: &[Option<(f32, f32)>]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = match (*x, *y) {
            (Some((l0, h0)), Some((l1, h1))) => Some((l0.min(l1), h0.max(h1))),
            (x, None) => x,
            (None, y) => y,
        };
    }
}

fn observe_branch(layers: &[LayerParams<f32>], img: &Image) -> Result<Vec<Option<(f32, f32)>>> {
    observe_tensor(layers, net::image_to_tensor::<f32>(img))
}

fn observe_tensor(layers: &[LayerParams<f32>], x: Tensor4<f32>) -> Result<Vec<Option<(f32, f32)>>> {
    let slots = slot_layers(layers);
    let trace = net::branch_forward_trace(layers, x, None)?;
    Ok((0..layers.len())
        .map(|i| {
            slots[i].then(|| {
                let out = trace.inputs.get(i + 1).unwrap_or(&trace.output);
                out.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
            })
        })
        .collect())
}

/// Slot ranges to activation parameters: concat ties share the union
/// range, the input and output slots are fixed at [`UNIT_ACT`].
fn ranges_to_params(layers: &[LayerParams<f32>], ranges: &[Option<(f32, f32)>]) -> Result<Vec<Option<ActQuant>>> {
    let mut r = ranges.to_vec();
    for (a, b) in tied_slots(layers) {
        let u = match (r[a], r[b]) {
            (Some((l0, h0)), Some((l1, h1))) => Some((l0.min(l1), h0.max(h1))),
            _ => return Err(Error::MissingQuantParams),
        };
        r[a] = u;
        r[b] = u;
    }
    let slots = slot_layers(layers);
    let last = slots.iter().rposition(|&s| s).unwrap_or(0);
    let mut out = Vec::with_capacity(layers.len());
    for (i, rg) in r.iter().enumerate() {
        out.push(match (slots[i], rg) {
            (false, _) => None,
            (true, _) if i == 0 || i == last => Some(UNIT_ACT),
            (true, Some((lo, hi))) => Some(act_params(*lo, *hi)),
            (true, None) => return Err(Error::MissingQuantParams),
        });
    }
    Ok(out)
}

impl CalibrationStats {
    pub fn empty(model: &Model) -> Self {
        Self { despeckle: vec![None; model.despeckle.len()], deblur: vec![None; model.deblur.len()], samples: 0 }
    }

    /// Records one Display8 image. The despeckle branch sees the image, the
    /// deblur branch sees the (rounded) despeckle output, as in the fused
    /// pipeline.
    pub fn observe(&mut self, model: &Model, img: &Image) -> Result<()> {
        let other = Self::of_image(model, img)?;
        self.merge(&other);
        Ok(())
    }

    fn of_image(model: &Model, img: &Image) -> Result<Self> {
        let padded = crate::image::pad_reflect_to_multiple(img, net::MULTIPLE);
        let d = observe_branch(&model.despeckle, &padded)?;
        let mid = net::forward(model, &padded, Branch::Despeckle)?;
        let b = observe_branch(&model.deblur, &mid)?;
        Ok(Self { despeckle: d, deblur: b, samples: 1 })
    }

    pub fn merge(&mut self, other: &Self) {
        merge_ranges(&mut self.despeckle, &other.despeckle);
        merge_ranges(&mut self.deblur, &other.deblur);
        self.samples += other.samples;
    }

    /// Converts ranges into activation parameters, applying the concat ties
    /// and the fixed input/output slots.
    pub fn params(&self, model: &Model) -> Result<QuantParams> {
        if self.samples == 0 {
            return Err(Error::EmptyCalibrationSet);
        }
        Ok(QuantParams {
            despeckle: ranges_to_params(&model.despeckle, &self.despeckle)?,
            deblur: ranges_to_params(&model.deblur, &self.deblur)?,
        })
    }
}

/// Float forward over every image, collecting slot ranges.
pub fn calibrate(model: &Model, images: &[Image]) -> Result<CalibrationStats> {
    if images.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let per: Vec<CalibrationStats> =
        images.par_iter().map(|img| CalibrationStats::of_image(model, img)).collect::<Result<_>>()?;
    let mut stats = CalibrationStats::empty(model);
    for p in &per {
        stats.merge(p);
    }
    Ok(stats)
}

/// `(producer, consumer)` layer pairs joined only by a LeakyReLU.
pub fn equalizable_pairs<T>(layers: &[LayerParams<T>]) -> Vec<(usize, usize)> {
    (0..layers.len().saturating_sub(2))
        .filter(|&i| {
            layers[i].weight.is_some() && layers[i + 1].kind == LayerKind::LeakyReLU && layers[i + 2].weight.is_some()
        })
        .map(|i| (i, i + 2))
        .collect()
}

/// Per-channel `(min, max)` of the outputs of layer `i` over a batch of inputs.
fn channel_ranges(layers: &[LayerParams<f32>], i: usize, inputs: &[Tensor4<f32>]) -> Result<Vec<(f32, f32)>> {
    let per: Vec<Vec<(f32, f32)>> = inputs
        .par_iter()
        .map(|x| {
            let y = net::branch_forward(&layers[..=i], x, None)?;
            let hw = y.h * y.w;
            let mut r = vec![(f32::INFINITY, f32::NEG_INFINITY); y.c];
            for (k, ch) in y.data.chunks(hw).enumerate() {
                let e = &mut r[k % y.c];
                for &v in ch {
                    e.0 = e.0.min(v);
                    e.1 = e.1.max(v);
                }
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let mut out = per[0].clone();
    for r in &per[1..] {
        for (a, b) in out.iter_mut().zip(r) {
            *a = (a.0.min(b.0), a.1.max(b.1));
        }
    }
    Ok(out)
}

/// Rescales channel `c` between producer `p` and consumer `q` by `scales[c]`.
fn apply_scales(layers: &mut [LayerParams<f32>], p: usize, q: usize, scales: &[f64]) {
    let prod = &mut layers[p];
    let wp = prod.weight.as_mut().unwrap();
    let per_out = wp.data.len() / prod.out_c;
    for (c, s) in scales.iter().enumerate() {
        wp.data[c * per_out..(c + 1) * per_out].iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
        prod.bias[c] = (prod.bias[c] as f64 / s) as f32;
    }
    let cons = &mut layers[q];
    let (in_c, wq) = (cons.in_c, cons.weight.as_mut().unwrap());
    let kk = wq.data.len() / (cons.out_c * in_c);
    for (j, v) in wq.data.iter_mut().enumerate() {
        *v = (*v as f64 * scales[(j / kk) % in_c]) as f32;
    }
}

/// Activation parameters of one branch calibrated on tensors.
fn branch_params(layers: &[LayerParams<f32>], inputs: &[Tensor4<f32>]) -> Result<Vec<Option<ActQuant>>> {
    let per: Vec<Vec<Option<(f32, f32)>>> =
        inputs.par_iter().map(|x| observe_tensor(layers, x.clone())).collect::<Result<_>>()?;
    let mut ranges = per[0].clone();
    for r in &per[1..] {
        merge_ranges(&mut ranges, r);
    }
    ranges_to_params(layers, &ranges)
}

/// Variance of the fake-quantized branch error against `reference`, in
/// gray levels squared. The mean is left out because bias correction
/// removes it afterwards.
fn quant_error_variance(
    layers: &[LayerParams<f32>],
    inputs: &[Tensor4<f32>],
    reference: &[Tensor4<f32>],
) -> Result<f64> {
    let acts = branch_params(layers, inputs)?;
    let fq = fake_quant_layers(layers, Some(&acts));
    let sums: Vec<(f64, f64, usize)> = inputs
        .par_iter()
        .zip(reference)
        .map(|(x, r)| {
            let y = net::branch_forward(&fq, x, Some(&acts))?;
            let (mut s1, mut s2) = (0.0, 0.0);
            for (a, b) in y.data.iter().zip(&r.data) {
                let e = 255.0 * (a.clamp(0.0, 1.0) - b.clamp(0.0, 1.0)) as f64;
                s1 += e;
                s2 += e * e;
            }
            Ok((s1, s2, y.data.len()))
        })
        .collect::<Result<_>>()?;
    let n = sums.iter().map(|s| s.2).sum::<usize>() as f64;
    let mean = sums.iter().map(|s| s.0).sum::<f64>() / n;
    Ok(sums.iter().map(|s| s.1).sum::<f64>() / n - mean * mean)
}

/// Candidate strengths tried for every pair by `equalize`.
pub const EQUALIZE_STRENGTHS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn equalize_branch(
    layers: &[LayerParams<f32>],
    inputs: &[Tensor4<f32>],
    strengths: &[f64],
) -> Result<Vec<LayerParams<f32>>> {
    let reference: Vec<Tensor4<f32>> =
        inputs.par_iter().map(|x| net::branch_forward(layers, x, None)).collect::<Result<_>>()?;
    let mut out = layers.to_vec();
    for (p, q) in equalizable_pairs(layers) {
        let widths: Vec<f64> =
            channel_ranges(&out, p + 1, inputs)?.iter().map(|&(lo, hi)| (hi - lo.min(0.0)) as f64).collect();
        if widths.iter().any(|&w| !(w > 0.0)) {
            continue;
        }
        let g = (widths.iter().map(|w| w.ln()).sum::<f64>() / widths.len() as f64).exp();
        let mut best: Option<(f64, Vec<LayerParams<f32>>)> = None;
        for &st in strengths {
            let mut cand = out.clone();
            let scales: Vec<f64> = widths.iter().map(|w| (w / g).powf(st)).collect();
            apply_scales(&mut cand, p, q, &scales);
            let err = if strengths.len() == 1 { 0.0 } else { quant_error_variance(&cand, inputs, &reference)? };
            if best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((err, cand));
            }
        }
        out = best.unwrap().1;
    }
    Ok(out)
}

/// Cross-layer equalization. For every conv -> LeakyReLU -> conv chain the
/// producer's output channel `c` is divided by `s_c` and the consumer's
/// input channel `c` multiplied by it, which leaves the float function
/// unchanged because LeakyReLU is positively homogeneous. `s_c` is the
/// channel's observed activation width relative to the geometric mean,
/// raised to a strength (1 equalizes the widths fully) so one per-tensor
/// activation scale fits every channel. Wider equalization coarsens the
/// weight grids, so each pair, in order, keeps the strength from
/// `strengths` with the smallest fake-quantized output error variance on
/// `images`.
pub fn equalize(model: &Model, images: &[Image], strengths: &[f64]) -> Result<Model> {
    if strengths.is_empty() || strengths.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("equalization needs finite strengths".into()));
    }
    if images.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let padded: Vec<Image> = images.iter().map(|i| crate::image::pad_reflect_to_multiple(i, net::MULTIPLE)).collect();
    let mids: Vec<Image> =
        padded.par_iter().map(|p| net::forward(model, p, Branch::Despeckle)).collect::<Result<_>>()?;
    let tensors = |v: &[Image]| v.iter().map(net::image_to_tensor::<f32>).collect::<Vec<_>>();
    let mut out = model.clone();
    out.despeckle = equalize_branch(&model.despeckle, &tensors(&padded), strengths)?;
    out.deblur = equalize_branch(&model.deblur, &tensors(&mids), strengths)?;
    Ok(out)
}

/// Second-order statistics of conv patches against float targets.
struct PatchStats {
    n: f64,
    /// Upper-triangular sums of `f f^T`, row-major over `features`.
    ff: Vec<f64>,
    f: Vec<f64>,
    /// Per output channel: sum of `y` and sums of `y f`.
    y: Vec<f64>,
    yf: Vec<Vec<f64>>,
}

impl PatchStats {
    fn new(features: usize, outputs: usize) -> Self {
        Self {
            n: 0.0,
            ff: vec![0.0; features * features],
            f: vec![0.0; features],
            y: vec![0.0; outputs],
            yf: vec![vec![0.0; features]; outputs],
        }
    }

    fn add(&mut self, o: &Self) {
        self.n += o.n;
        self.ff.iter_mut().zip(&o.ff).for_each(|(a, b)| *a += b);
        self.f.iter_mut().zip(&o.f).for_each(|(a, b)| *a += b);
        self.y.iter_mut().zip(&o.y).for_each(|(a, b)| *a += b);
        for (a, b) in self.yf.iter_mut().zip(&o.yf) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Patches of the quantized-path input `x` against the float layer output
/// `y`, on every pixel or, for large maps, every third pixel in raster
/// order (an odd stride, so all up-convolution phases are sampled).
fn patch_stats(x: &Tensor4<f32>, y: &Tensor4<f32>, k: usize) -> PatchStats {
    let (c, h, w, pad) = (x.c, x.h, x.w, (k / 2) as isize);
    let nf = c * k * k;
    let mut st = PatchStats::new(nf, y.c);
    let step = if h * w > 4096 { 3 } else { 1 };
    let mut f = vec![0.0f64; nf];
    for n in 0..x.n {
        for idx in (0..h * w).step_by(step) {
            let (yy, xx) = (idx / w, idx % w);
            {
                for ci in 0..c {
                    let plane = x.plane(n, ci);
                    for ky in 0..k {
                        for kx in 0..k {
                            let (sy, sx) = (yy as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                            let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                            f[(ci * k + ky) * k + kx] =
                                if inside { plane[sy as usize * w + sx as usize] as f64 } else { 0.0 };
                        }
                    }
                }
                st.n += 1.0;
                for i in 0..nf {
                    st.f[i] += f[i];
                    let row = &mut st.ff[i * nf..(i + 1) * nf];
                    for j in i..nf {
                        row[j] += f[i] * f[j];
                    }
                }
                for o in 0..y.c {
                    let t = y.plane(n, o)[yy * w + xx] as f64;
                    st.y[o] += t;
                    st.yf[o].iter_mut().zip(&f).for_each(|(a, b)| *a += t * b);
                }
            }
        }
    }
    st
}

/// Integer least squares for one output channel: starting from `q`,
/// single-step moves on the grid `s * q` are taken while they lower
/// `w^T G w - 2 r^T w`. Coordinate `frozen` keeps its value.
fn descend(q: &mut [i32], s: f64, g: &[f64], r: &[f64], frozen: Option<usize>) {
    let nf = q.len();
    let mut u: Vec<f64> =
        (0..nf).map(|i| (0..nf).map(|j| g[i * nf + j] * s * q[j] as f64).sum::<f64>() - r[i]).collect();
    for _sweep in 0..100 {
        let mut moved = false;
        for j in 0..nf {
            if Some(j) == frozen {
                continue;
            }
            for d in [1i32, -1] {
                let nq = q[j] + d;
                if nq.abs() > 127 {
                    continue;
                }
                let sd = s * d as f64;
                if sd * sd * g[j * nf + j] + 2.0 * sd * u[j] < 0.0 {
                    q[j] = nq;
                    for i in 0..nf {
                        u[i] += g[i * nf + j] * sd;
                    }
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            break;
        }
    }
}

/// Re-rounds one conv layer to reconstruct `targets` from the quantized
/// path's `inputs`, returning grid weights and the least-squares bias.
fn round_layer(l: &LayerParams<f32>, inputs: &[Tensor4<f32>], targets: &[Tensor4<f32>]) -> Result<LayerParams<f32>> {
    let wt = l.weight.as_ref().unwrap();
    let k = wt.h;
    let nf = l.in_c * k * k;
    let parts: Vec<PatchStats> = inputs.par_iter().zip(targets).map(|(x, y)| patch_stats(x, y, k)).collect();
    let mut st = PatchStats::new(nf, l.out_c);
    for p in &parts {
        st.add(p);
    }
    let mu: Vec<f64> = st.f.iter().map(|v| v / st.n).collect();
    let mut g = vec![0.0; nf * nf];
    for i in 0..nf {
        for j in i..nf {
            let v = st.ff[i * nf + j] / st.n - mu[i] * mu[j];
            g[i * nf + j] = v;
            g[j * nf + i] = v;
        }
    }
    let (q8, s) = quantize_weights(&wt.data)?;
    let s = s as f64;
    let frozen = q8.iter().position(|v| v.unsigned_abs() == 127);
    let mut out = l.clone();
    let w_out = out.weight.as_mut().unwrap();
    for o in 0..l.out_c {
        let ybar = st.y[o] / st.n;
        let r: Vec<f64> = (0..nf).map(|i| st.yf[o][i] / st.n - mu[i] * ybar).collect();
        let mut q: Vec<i32> = q8[o * nf..(o + 1) * nf].iter().map(|&v| v as i32).collect();
        let fz = frozen.filter(|&f| f / nf == o).map(|f| f % nf);
        descend(&mut q, s, &g, &r, fz);
        let w: Vec<f64> = q.iter().map(|&v| v as f64 * s).collect();
        for (dst, v) in w_out.data[o * nf..(o + 1) * nf].iter_mut().zip(&w) {
            *dst = *v as f32;
        }
        out.bias[o] = (ybar - mu.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()) as f32;
    }
    Ok(out)
}

fn round_branch(
    layers: &[LayerParams<f32>],
    acts: Option<&[Option<ActQuant>]>,
    inputs: &[Tensor4<f32>],
) -> Result<Vec<LayerParams<f32>>> {
    let mut out = layers.to_vec();
    for i in 0..layers.len() {
        if !matches!(layers[i].kind, LayerKind::Conv3x3 | LayerKind::Conv1x1) {
            continue;
        }
        let fq = fake_quant_layers(&out, acts);
        let pre = acts.map(|a| &a[..i]);
        let pairs: Vec<(Tensor4<f32>, Tensor4<f32>)> = inputs
            .par_iter()
            .map(|x| {
                let xq = net::branch_forward(&fq[..i], x, pre)?;
                let y = net::branch_forward(&layers[..=i], x, None)?;
                Ok((xq, y))
            })
            .collect::<Result<_>>()?;
        let (xs, ys): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        out[i] = round_layer(&out[i], &xs, &ys)?;
    }
    Ok(out)
}

/// Output-aware weight rounding. Each convolution, in order, gets the
/// integer weights (on its own per-tensor grid) and bias that best
/// reconstruct the float model's output of that layer from the inputs the
/// quantized path actually delivers, in the least-squares sense over
/// `images`. Plain round-to-nearest ignores how rounding errors combine
/// across taps; this step accounts for it. The largest-magnitude weight
/// is held fixed so the grid does not move. Up-convolutions keep
/// round-to-nearest.
pub fn optimize_rounding(model: &Model, qp: Option<&QuantParams>, images: &[Image]) -> Result<Model> {
    if images.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    if let Some(q) = qp {
        q.validate(model)?;
    }
    let padded: Vec<Image> = images.iter().map(|i| crate::image::pad_reflect_to_multiple(i, net::MULTIPLE)).collect();
    let mids: Vec<Image> =
        padded.par_iter().map(|p| net::forward(model, p, Branch::Despeckle)).collect::<Result<_>>()?;
    let tensors = |v: &[Image]| v.iter().map(net::image_to_tensor::<f32>).collect::<Vec<_>>();
    let mut out = model.clone();
    out.despeckle = round_branch(&model.despeckle, qp.map(|q| q.branch(Branch::Despeckle)), &tensors(&padded))?;
    out.deblur = round_branch(&model.deblur, qp.map(|q| q.branch(Branch::Deblur)), &tensors(&mids))?;
    Ok(out)
}

/// Per-channel mean of `q - f` over all pixels of an NCHW pair.
fn channel_shift(q: &Tensor4<f32>, f: &Tensor4<f32>) -> Vec<f64> {
    let hw = q.h * q.w;
    let mut sums = vec![0.0f64; q.c];
    for (k, (a, b)) in q.data.chunks(hw).zip(f.data.chunks(hw)).enumerate() {
        sums[k % q.c] += a.iter().zip(b).map(|(x, y)| (x - y) as f64).sum::<f64>();
    }
    let n = (q.n * hw) as f64;
    sums.iter().map(|s| s / n).collect()
}

fn correct_branch(
    layers: &[LayerParams<f32>],
    acts: Option<&[Option<ActQuant>]>,
    inputs: &[Tensor4<f32>],
) -> Result<Vec<LayerParams<f32>>> {
    let mut out = layers.to_vec();
    for i in 0..layers.len() {
        if layers[i].weight.is_none() {
            continue;
        }
        // measure the raw layer output: no activation quantizer at `i` itself
        let acts_i: Option<Vec<Option<ActQuant>>> = acts.map(|a| {
            let mut a = a[..=i].to_vec();
            a[i] = None;
            a
        });
        let fq = fake_quant_layers(&out, acts);
        let shifts: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|x| {
                let f = net::branch_forward(&layers[..=i], x, None)?;
                let q = net::branch_forward(&fq[..=i], x, acts_i.as_deref())?;
                Ok(channel_shift(&q, &f))
            })
            .collect::<Result<_>>()?;
        for (c, b) in out[i].bias.iter_mut().enumerate() {
            let mean = shifts.iter().map(|s| s[c]).sum::<f64>() / shifts.len() as f64;
            *b = (*b as f64 - mean) as f32;
        }
    }
    Ok(out)
}

/// Empirical bias correction. Layer by layer, the mean per-channel shift
/// between the quantized path and the float model is measured on `images`
/// and subtracted from the bias, with upstream corrections already in
/// place. Rounding weights to a per-tensor grid mostly moves the output
/// level rather than adding noise, so this removes most of the
/// quantized-vs-float gap. With `qp == None` only weights are simulated.
pub fn correct_bias(model: &Model, qp: Option<&QuantParams>, images: &[Image]) -> Result<Model> {
    if images.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    if let Some(q) = qp {
        q.validate(model)?;
    }
    let padded: Vec<Image> = images.iter().map(|i| crate::image::pad_reflect_to_multiple(i, net::MULTIPLE)).collect();
    let mids: Vec<Image> =
        padded.par_iter().map(|p| net::forward(model, p, Branch::Despeckle)).collect::<Result<_>>()?;
    let tensors = |v: &[Image]| v.iter().map(net::image_to_tensor::<f32>).collect::<Vec<_>>();
    let mut out = model.clone();
    out.despeckle = correct_branch(&model.despeckle, qp.map(|q| q.branch(Branch::Despeckle)), &tensors(&padded))?;
    out.deblur = correct_branch(&model.deblur, qp.map(|q| q.branch(Branch::Deblur)), &tensors(&mids))?;
    Ok(out)
}

/// Which fidelity steps run before conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepareSteps {
    pub equalize: bool,
    pub round: bool,
    pub bias: bool,
}

impl Default for PrepareSteps {
    fn default() -> Self {
        Self { equalize: true, round: true, bias: true }
    }
}

/// The conversion pipeline short of [`quantize`]: optional cross-layer
/// equalization, min/max calibration (full mode only), rounding
/// optimization and bias correction, all on `images`. Returns the float
/// model to convert and, in full mode, its activation parameters.
pub fn prepare(
    model: &Model,
    images: &[Image],
    mode: QuantMode,
    steps: PrepareSteps,
) -> Result<(Model, Option<QuantParams>)> {
    if images.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    let mut m = if steps.equalize && mode == QuantMode::Full {
        equalize(model, images, &EQUALIZE_STRENGTHS)?
    } else {
        model.clone()
    };
    let qp = match mode {
        QuantMode::Full => Some(calibrate(&m, images)?.params(&m)?),
        QuantMode::WeightsOnly => None,
    };
    if steps.round {
        m = optimize_rounding(&m, qp.as_ref(), images)?;
    }
    if steps.bias {
        m = correct_bias(&m, qp.as_ref(), images)?;
    }
    Ok((m, qp))
}

/// Quantize-dequantize the parameters of a layer list. With activation
/// parameters the bias is rounded to the accumulator scale `s_in * s_w`;
/// without them only the weights are touched.
pub fn fake_quant_layers(layers: &[LayerParams<f32>], acts: Option<&[Option<ActQuant>]>) -> Vec<LayerParams<f32>> {
    let mut s_in = UNIT_ACT.scale as f64;
    let mut out = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let mut l = l.clone();
        if let Some(w) = l.weight.as_mut() {
            if let Ok((q, s)) = quantize_weights(&w.data) {
                w.data = dequantize_weights(&q, s);
                if acts.is_some() {
                    let sb = s_in * s as f64;
                    for b in l.bias.iter_mut() {
                        *b = ((*b as f64 / sb).round() * sb) as f32;
                    }
                }
            }
        }
        if let Some(Some(a)) = acts.map(|a| a[i]) {
            s_in = a.scale as f64;
        }
        out.push(l);
    }
    out
}

/// Float simulation of the quantized model (fake quantization of weights,
/// biases and activations), rounded to Display8 like `net::forward`.
pub fn fake_quant_forward(model: &Model, qp: &QuantParams, img: &Image, branch: Branch) -> Result<Image> {
    let run = |b: Branch, x: &Image| {
        let acts = qp.branch(b);
        let layers = fake_quant_layers(model.branch(b), Some(acts));
        let out = net::branch_forward(&layers, &net::image_to_tensor::<f32>(x), Some(acts))?;
        Ok(net::tensor_to_display(&out, x))
    };
    match branch {
        Branch::Fused => {
            let mid = net::with_padding(img, true, |x| run(Branch::Despeckle, x))?;
            net::with_padding(&mid, true, |x| run(Branch::Deblur, x))
        }
        b => net::with_padding(img, true, |x| run(b, x)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QatConfig {
    /// Trainer settings for the fine-tuning run (usually a few epochs).
    pub train: TrainConfig,
    /// Fixed pairs used to compare the quantized path before and after.
    pub validation_count: usize,
    pub validation_seed: u64,
    /// Fit the float model's own output instead of the corpus targets.
    pub distill: bool,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig { epochs: 2, pairs_per_source: 8, ..Default::default() },
            validation_count: 16,
            validation_seed: 0x5eed,
            distill: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QatOutcome {
    pub model: Model,
    /// Quantized-path validation loss per branch (despeckle, deblur)
    /// before and after; the returned model holds the better of the two.
    pub before: [f64; 2],
    pub after: [f64; 2],
    pub losses: [Vec<f64>; 2],
}

/// Fine-tunes both branches with fake-quantized weights and activations.
/// A branch whose quantized-path validation loss got worse keeps its
/// original parameters, so the result is never worse than the input.
pub fn qat_finetune(model: &Model, corpus: &Corpus, qp: &QuantParams, cfg: &QatConfig) -> Result<QatOutcome> {
    qp.validate(model)?;
    let mut result = model.clone();
    let mut before = [0.0; 2];
    let mut after = [0.0; 2];
    let mut losses = [Vec::new(), Vec::new()];
    for (k, branch) in [Branch::Despeckle, Branch::Deblur].into_iter().enumerate() {
        let n = match branch {
            Branch::Deblur => corpus.deblur.len(),
            _ => corpus.despeckle.len(),
        };
        if n == 0 || cfg.train.epochs == 0 {
            continue;
        }
        let acts = qp.branch(branch);
        let teacher = model.branch(branch);
        let pairs = train::validation_pairs(corpus, branch, &cfg.train, cfg.validation_count, cfg.validation_seed)?;
        let pairs: Vec<(Tensor4<f32>, Tensor4<f32>)> = pairs
            .par_iter()
            .map(|(x, t)| {
                let x = net::image_to_tensor(x);
                let t = if cfg.distill { train::teacher_target(teacher, &x)? } else { net::image_to_tensor(t) };
                Ok((x, t))
            })
            .collect::<Result<_>>()?;
        let qloss = |m: &Model| -> Result<f64> {
            let layers = fake_quant_layers(m.branch(branch), Some(acts));
            let l: Vec<f64> = pairs
                .par_iter()
                .map(|(x, t)| Ok(crate::nn::l2_loss(&net::branch_forward(&layers, x, Some(acts))?, t)?.0))
                .collect::<Result<_>>()?;
            Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
        };
        let weights = |l: &[LayerParams<f32>]| fake_quant_layers(l, Some(acts));
        let fq = FakeQuant { weights: &weights, acts, teacher: cfg.distill.then_some(teacher) };
        let out = match branch {
            Branch::Deblur => train::train_deblur_fq(&result, corpus, &cfg.train, Some(&fq), None)?,
            _ => train::train_despeckle_fq(&result, corpus, &cfg.train, Some(&fq), None)?,
        };
        before[k] = qloss(&result)?;
        after[k] = qloss(&out.model)?;
        losses[k] = out.losses;
        if after[k] <= before[k] {
            *result.branch_mut(branch) = out.model.branch(branch).to_vec();
        }
        log::info!("qat {}: quantized validation loss {:.6} -> {:.6}", branch.name(), before[k], after[k]);
    }
    Ok(QatOutcome { model: result, before, after, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantWeight {
    /// `(out_c, in_c, k, k)`.
    pub shape: [usize; 4],
    pub q: Vec<i8>,
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub kind: LayerKind,
    pub in_c: usize,
    pub out_c: usize,
    pub weight: Option<QuantWeight>,
    /// Float bias; rounded to the accumulator scale when the integer plan
    /// is built.
    pub bias: Vec<f32>,
}

/// A model with int8 weights. `acts` is absent for weights-only models.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub channels: usize,
    pub depth: usize,
    pub fused: bool,
    pub despeckle: Vec<QuantLayer>,
    pub deblur: Vec<QuantLayer>,
    pub acts: Option<QuantParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Integer weights and uint8 activations.
    Full,
    /// Int8 weights dequantized into the float path.
    WeightsOnly,
}

impl QuantMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(QuantMode::Full),
            "weights-only" | "weights_only" => Ok(QuantMode::WeightsOnly),
            _ => Err(Error::InvalidConfig(format!("unknown quantization mode '{s}'"))),
        }
    }
}

fn quantize_branch(layers: &[LayerParams<f32>]) -> Result<Vec<QuantLayer>> {
    layers
        .iter()
        .map(|l| {
            let weight = match &l.weight {
                Some(w) => {
                    let (q, scale) = quantize_weights(&w.data)?;
                    Some(QuantWeight { shape: w.shape(), q, scale })
                }
                None => None,
            };
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFiniteWeights);
            }
            Ok(QuantLayer { kind: l.kind, in_c: l.in_c, out_c: l.out_c, weight, bias: l.bias.clone() })
        })
        .collect()
}

/// Converts a float model. Pass `None` for a weights-only model.
pub fn quantize(model: &Model, acts: Option<&QuantParams>) -> Result<QuantizedModel> {
    model.validate()?;
    if let Some(a) = acts {
        a.validate(model)?;
    }
    Ok(QuantizedModel {
        channels: model.channels,
        depth: model.depth,
        fused: model.fused,
        despeckle: quantize_branch(&model.despeckle)?,
        deblur: quantize_branch(&model.deblur)?,
        acts: acts.cloned(),
    })
}

impl QuantizedModel {
    /// The float model with dequantized weights.
    pub fn dequantized(&self) -> Model {
        let conv = |ls: &[QuantLayer]| {
            ls.iter()
                .map(|l| LayerParams {
                    kind: l.kind,
                    in_c: l.in_c,
                    out_c: l.out_c,
                    weight: l.weight.as_ref().map(|w| {
                        let [n, c, h, wd] = w.shape;
                        Tensor4 { n, c, h, w: wd, data: dequantize_weights(&w.q, w.scale) }
                    }),
                    bias: l.bias.clone(),
                })
                .collect()
        };
        Model {
            channels: self.channels,
            depth: self.depth,
            despeckle: conv(&self.despeckle),
            deblur: conv(&self.deblur),
            fused: self.fused,
        }
    }

    pub fn param_count(&self) -> usize {
        self.despeckle
            .iter()
            .chain(&self.deblur)
            .map(|l| l.weight.as_ref().map_or(0, |w| w.q.len()) + l.bias.len())
            .sum()
    }

    /// Builds the integer execution plan.
    pub fn compile(&self) -> Result<IntModel> {
        let acts = self.acts.as_ref().ok_or(Error::MissingQuantParams)?;
        Ok(IntModel {
            despeckle: compile_branch(&self.despeckle, &acts.despeckle)?,
            deblur: compile_branch(&self.deblur, &acts.deblur)?,
        })
    }
}

/// A positive real multiplier realized as `m0 * 2^-shift` with
/// `m0` in `[2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixed {
    pub m0: i32,
    pub shift: u32,
}

impl Fixed {
    pub fn from_scale(m: f64) -> Result<Self> {
        if !(m.is_finite() && m >= 0.0) || m >= (1u64 << 30) as f64 {
            return Err(Error::InvalidConfig(format!("requantization scale {m} out of range")));
        }
        // below 2^-33 every product rounds to zero anyway
        if m < 2f64.powi(-33) {
            return Ok(Fixed { m0: 0, shift: 1 });
        }
        let mut shift = 30 - m.log2().floor() as i32;
        let mut m0 = (m * 2f64.powi(shift)).round();
        while m0 >= 2f64.powi(31) {
            shift -= 1;
            m0 = (m * 2f64.powi(shift)).round();
        }
        while m0 < 2f64.powi(30) {
            shift += 1;
            m0 = (m * 2f64.powi(shift)).round();
        }
        Ok(Fixed { m0: m0 as i32, shift: shift as u32 })
    }

    pub fn realized(self) -> f64 {
        self.m0 as f64 / 2f64.powi(self.shift as i32)
    }

    /// `round_half_away(acc * m0 / 2^shift)`.
    #[inline(always)]
    pub fn apply(self, acc: i32) -> i32 {
        let p = acc as i64 * self.m0 as i64;
        let half = 1i64 << (self.shift - 1);
        // floor((p + half) / 2^s) rounds ties up; subtracting one for
        // negative p turns that into rounding ties away from zero
        let r = (p + half - (p < 0) as i64) >> self.shift;
        r.clamp(i32::MIN as i64, i32::MAX as i64) as i32
    }
}

/// Requantization of an accumulator: `z_out + M * acc`, with a separate
/// multiplier for negative accumulators (`0.1 * M` after a fused
/// LeakyReLU, `M` otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requant {
    pub pos: Fixed,
    pub neg: Fixed,
    pub z_out: i32,
}

impl Requant {
    #[inline(always)]
    fn apply(&self, acc: i32) -> u8 {
        // both products are computed so the sign select stays branch-free
        let (p, n) = (self.pos.apply(acc), self.neg.apply(acc));
        let v = if acc >= 0 { p } else { n };
        (self.z_out + v).clamp(0, 255) as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IntOp {
    Conv { k: usize, in_c: usize, out_c: usize, w: Vec<i16>, bias: Vec<i32>, z_in: i16, rq: Requant },
    UpConv { in_c: usize, out_c: usize, w: Vec<i16>, bias: Vec<i32>, z_in: i16, rq: Requant },
    MaxPool,
    Concat,
}

impl IntOp {
    pub fn name(&self) -> &'static str {
        match self {
            IntOp::Conv { k: 1, .. } => "conv1x1",
            IntOp::Conv { .. } => "conv3x3+lrelu",
            IntOp::UpConv { .. } => "upconv2x2",
            IntOp::MaxPool => "maxpool2",
            IntOp::Concat => "concat",
        }
    }
}

/// Integer execution plan of both branches. Holds only integers.
#[derive(Debug, Clone, PartialEq)]
pub struct IntModel {
    pub despeckle: Vec<IntOp>,
    pub deblur: Vec<IntOp>,
}

fn compile_branch(layers: &[QuantLayer], acts: &[Option<ActQuant>]) -> Result<Vec<IntOp>> {
    if acts.len() != layers.len() || acts.first().copied().flatten() != Some(UNIT_ACT) {
        return Err(Error::MissingQuantParams);
    }
    let mut ops = Vec::new();
    let mut cur = UNIT_ACT;
    let mut i = 0;
    while i < layers.len() {
        let l = &layers[i];
        match l.kind {
            LayerKind::Input | LayerKind::Output => {}
            LayerKind::MaxPool2 => ops.push(IntOp::MaxPool),
            LayerKind::Concat => ops.push(IntOp::Concat),
            LayerKind::LeakyReLU => {
                return Err(Error::DescriptorMismatch(format!("layer {i}: LeakyReLU without a preceding conv")))
            }
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::UpConv2x2 => {
                let w = l.weight.as_ref().ok_or_else(|| Error::DescriptorMismatch(format!("layer {i}: no weight")))?;
                let fused_relu =
                    layers.get(i + 1).map(|n| n.kind) == Some(LayerKind::LeakyReLU) && l.kind != LayerKind::UpConv2x2;
                let out_slot = if fused_relu { i + 1 } else { i };
                let out = acts[out_slot].ok_or(Error::MissingQuantParams)?;
                let s_acc = cur.scale as f64 * w.scale as f64;
                let m = s_acc / out.scale as f64;
                let rq = Requant {
                    pos: Fixed::from_scale(m)?,
                    neg: Fixed::from_scale(if fused_relu { 0.1 * m } else { m })?,
                    z_out: out.zero,
                };
                let bias = l
                    .bias
                    .iter()
                    .map(|&b| (b as f64 / s_acc).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                    .collect();
                let wq = w.q.iter().map(|&v| v as i16).collect();
                let z_in = cur.zero as i16;
                ops.push(match l.kind {
                    LayerKind::UpConv2x2 => IntOp::UpConv { in_c: l.in_c, out_c: l.out_c, w: wq, bias, z_in, rq },
                    k => IntOp::Conv { k: k.kernel(), in_c: l.in_c, out_c: l.out_c, w: wq, bias, z_in, rq },
                });
                cur = out;
                if fused_relu {
                    i += 1;
                }
            }
        }
        i += 1;
    }
    Ok(ops)
}

/// uint8 activation map, channels-first.
#[derive(Debug, Clone, PartialEq)]
pub struct U8Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl U8Map {
    fn plane(&self, c: usize) -> &[u8] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

#[inline]
fn axpy_i32(w: i32, x: &[i16], acc: &mut [i32]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += w * v as i32;
    }
}

/// One nonzero tap pair of a conv: offset into the interleaved input and
/// the two weights packed as `w1 << 16 | w0`.
#[derive(Clone, Copy)]
struct Tap {
    off: usize,
    packed: i32,
}

impl Tap {
    fn new(off: usize, w0: i16, w1: i16) -> Tap {
        Tap { off, packed: ((w1 as u16 as u32) << 16 | w0 as u16 as u32) as i32 }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn weights(self) -> (i32, i32) {
        (self.packed as i16 as i32, (self.packed >> 16) as i16 as i32)
    }
}

/// Output pixels accumulated together by `dot_block`.
const BLOCK: usize = 16;

/// Accumulates `BLOCK` adjacent output pixels starting at interleaved
/// index `base` over all taps. `max_off` bounds every tap offset.
#[inline]
fn dot_block(xs: &[i16], base: usize, taps: &[Tap], max_off: usize, bias: i32) -> [i32; BLOCK] {
    let xs = &xs[base..base + max_off + 2 * BLOCK];
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::x86_64::*;
        use std::mem::transmute;
        // lanes are read through array references rather than loadu, whose
        // pointer checks dominate this loop when debug assertions are on
        // SAFETY: SSE2 is part of the x86_64 baseline, and the array types
        // transmuted here are plain bytes of matching size.
        unsafe {
            let mut acc = [_mm_set1_epi32(bias); BLOCK / 4];
            for t in taps {
                let x: &[[i16; 8]; BLOCK / 4] = xs[t.off..t.off + 2 * BLOCK].as_chunks().0.try_into().unwrap();
                let wv = _mm_set1_epi32(t.packed);
                for (a, x) in acc.iter_mut().zip(x) {
                    *a = _mm_add_epi32(*a, _mm_madd_epi16(transmute::<[i16; 8], __m128i>(*x), wv));
                }
            }
            transmute::<[__m128i; BLOCK / 4], [i32; BLOCK]>(acc)
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let mut acc = [bias; BLOCK];
        for t in taps {
            let x = &xs[t.off..t.off + 2 * BLOCK];
            let (w0, w1) = t.weights();
            for (i, a) in acc.iter_mut().enumerate() {
                *a += w0 * x[2 * i] as i32 + w1 * x[2 * i + 1] as i32;
            }
        }
        acc
    }
}

fn int_conv(x: &U8Map, k: usize, out_c: usize, w: &[i16], bias: &[i32], z_in: i16, rq: &Requant) -> U8Map {
    let (h, wd, p) = (x.h, x.w, k / 2);
    // extra zero columns on the right let the last block read past the
    // image edge
    let pw = wd + 2 * p + BLOCK - 1;
    let ph = h + 2 * p;
    let pairs = x.c.div_ceil(2);
    // zero-point-shifted input with a zero border, channels interleaved in
    // pairs (an odd last channel is paired with zeros)
    let plane = 2 * ph * pw;
    let mut xs = vec![0i16; pairs * plane];
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = &mut xs[(c / 2) * plane..(c / 2 + 1) * plane];
        for y in 0..h {
            let row = &src[y * wd..(y + 1) * wd];
            for (xx, &v) in row.iter().enumerate() {
                dst[((y + p) * pw + p + xx) * 2 + c % 2] = v as i16 - z_in;
            }
        }
    }
    let tap = |o: usize, c: usize, ky: usize, kx: usize| -> i16 {
        if c < x.c {
            w[((o * x.c + c) * k + ky) * k + kx]
        } else {
            0
        }
    };
    let mut out = vec![0u8; out_c * h * wd];
    let mut taps = Vec::with_capacity(pairs * k * k);
    for o in 0..out_c {
        taps.clear();
        for pr in 0..pairs {
            for ky in 0..k {
                for kx in 0..k {
                    let (w0, w1) = (tap(o, 2 * pr, ky, kx), tap(o, 2 * pr + 1, ky, kx));
                    if w0 != 0 || w1 != 0 {
                        taps.push(Tap::new(pr * plane + (ky * pw + kx) * 2, w0, w1));
                    }
                }
            }
        }
        let max_off = taps.iter().map(|t| t.off).max().unwrap_or(0);
        let op = &mut out[o * h * wd..(o + 1) * h * wd];
        for y in 0..h {
            let row = &mut op[y * wd..(y + 1) * wd];
            for (j, qb) in row.chunks_mut(BLOCK).enumerate() {
                let acc = dot_block(&xs, (y * pw + BLOCK * j) * 2, &taps, max_off, bias[o]);
                for (q, &a) in qb.iter_mut().zip(&acc) {
                    *q = rq.apply(a);
                }
            }
        }
    }
    U8Map { c: out_c, h, w: wd, data: out }
}

fn int_upconv(x: &U8Map, out_c: usize, w: &[i16], bias: &[i32], z_in: i16, rq: &Requant) -> U8Map {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let xs: Vec<i16> = x.data.iter().map(|&v| v as i16 - z_in).collect();
    let mut out = vec![0u8; out_c * oh * ow];
    let mut acc = vec![0i32; x.w];
    for o in 0..out_c {
        let op = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for y in 0..x.h {
            for ky in 0..2 {
                for kx in 0..2 {
                    acc.fill(bias[o]);
                    for c in 0..x.c {
                        let wv = w[((o * x.c + c) * 2 + ky) * 2 + kx] as i32;
                        let src = &xs[(c * x.h + y) * x.w..(c * x.h + y + 1) * x.w];
                        axpy_i32(wv, src, &mut acc);
                    }
                    let row = &mut op[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                    for (xx, &a) in acc.iter().enumerate() {
                        row[2 * xx + kx] = rq.apply(a);
                    }
                }
            }
        }
    }
    U8Map { c: out_c, h: oh, w: ow, data: out }
}

fn int_maxpool(x: &U8Map) -> U8Map {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Vec::with_capacity(x.c * oh * ow);
    for c in 0..x.c {
        let p = x.plane(c);
        for y in 0..oh {
            let (r0, r1) = (&p[2 * y * x.w..], &p[(2 * y + 1) * x.w..]);
            for xx in 0..ow {
                out.push(r0[2 * xx].max(r0[2 * xx + 1]).max(r1[2 * xx]).max(r1[2 * xx + 1]));
            }
        }
    }
    U8Map { c: x.c, h: oh, w: ow, data: out }
}

/// Runs an integer plan on uint8 codes of a single-channel map whose
/// extents are multiples of 16. `timings`, when given, accumulates the
/// wall time of every op.
pub fn int_branch_forward(ops: &[IntOp], x: U8Map, mut timings: Option<&mut [Duration]>) -> Result<U8Map> {
    let mut skips: Vec<U8Map> = Vec::new();
    let mut cur = x;
    for (i, op) in ops.iter().enumerate() {
        let t0 = timings.is_some().then(Instant::now);
        cur = match op {
            IntOp::Conv { k, in_c, out_c, w, bias, z_in, rq } => {
                if cur.c != *in_c {
                    return Err(Error::ShapeMismatch(format!("op {i}: {} channels, expected {in_c}", cur.c)));
                }
                int_conv(&cur, *k, *out_c, w, bias, *z_in, rq)
            }
            IntOp::UpConv { in_c, out_c, w, bias, z_in, rq } => {
                if cur.c != *in_c {
                    return Err(Error::ShapeMismatch(format!("op {i}: {} channels, expected {in_c}", cur.c)));
                }
                int_upconv(&cur, *out_c, w, bias, *z_in, rq)
            }
            IntOp::MaxPool => {
                if !cur.h.is_multiple_of(2) || !cur.w.is_multiple_of(2) {
                    return Err(Error::OddSpatialDims { h: cur.h, w: cur.w });
                }
                let p = int_maxpool(&cur);
                skips.push(cur);
                p
            }
            IntOp::Concat => {
                let mut s = skips.pop().ok_or_else(|| Error::DescriptorMismatch("concat without a skip".into()))?;
                if (s.h, s.w) != (cur.h, cur.w) {
                    return Err(Error::ShapeMismatch(format!("concat {}x{} with {}x{}", s.h, s.w, cur.h, cur.w)));
                }
                s.data.extend_from_slice(&cur.data);
                s.c += cur.c;
                s
            }
        };
        if let (Some(t), Some(t0)) = (timings.as_deref_mut(), t0) {
            t[i] += t0.elapsed();
        }
    }
    Ok(cur)
}

impl IntModel {
    pub fn branch(&self, b: Branch) -> &[IntOp] {
        match b {
            Branch::Deblur => &self.deblur,
            _ => &self.despeckle,
        }
    }

    /// Integer inference on a Display8 image. Gray levels are the input
    /// codes (`s = 1/255, z = 0`) and the output codes are gray levels.
    pub fn forward(&self, img: &Image, branch: Branch) -> Result<Image> {
        self.forward_timed(img, branch, None)
    }

    /// As `forward`, adding per-op wall time of the despeckle and deblur
    /// plans to `timings` (`[despeckle ops..., deblur ops...]`).
    pub fn forward_timed(&self, img: &Image, branch: Branch, mut timings: Option<&mut [Duration]>) -> Result<Image> {
        if img.domain() != Domain::Display8 {
            return Err(Error::InvalidImage(format!("network input must be display8, got {}", img.domain().name())));
        }
        let nd = self.despeckle.len();
        let mut run = |b: Branch, x: &Image| -> Result<Image> {
            let codes = U8Map {
                c: 1,
                h: x.height(),
                w: x.width(),
                data: x.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect(),
            };
            let t = timings.as_deref_mut().map(|t| match b {
                Branch::Deblur => &mut t[nd..],
                _ => &mut t[..nd],
            });
            let y = int_branch_forward(self.branch(b), codes, t)?;
            Ok(x.same_geometry(y.data.iter().map(|&v| v as f32).collect(), Domain::Display8))
        };
        match branch {
            Branch::Fused => {
                let mid = net::with_padding(img, true, |x| run(Branch::Despeckle, x))?;
                net::with_padding(&mid, true, |x| run(Branch::Deblur, x))
            }
            b => net::with_padding(img, true, |x| run(b, x)),
        }
    }
}

/// Inference with a quantized model. `Full` runs the integer plan and
/// needs activation parameters; `WeightsOnly` runs the float path on the
/// dequantized weights.
pub fn quantized_forward(qm: &QuantizedModel, img: &Image, branch: Branch, mode: QuantMode) -> Result<Image> {
    match mode {
        QuantMode::Full => qm.compile()?.forward(img, branch),
        QuantMode::WeightsOnly => net::forward(&qm.dequantized(), img, branch),
    }
}
