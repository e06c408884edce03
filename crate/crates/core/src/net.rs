//! The dual-branch enhancement network.
//!
//! Each branch is an ordered layer list interpreted with a skip stack:
//! `MaxPool2` pushes its input (the encoder feature map) and `Concat` pops
//! it, concatenating `[skip, current]` along channels. The despeckle branch
//! is a 4-level U-shaped encoder/decoder whose bottleneck runs at 1/16 of
//! the input extent; the deblur branch is a flat stack of five conv blocks
//! followed by a projection to one channel.
//!
//! Layout with `C = 8`:
//!
//! ```text
//! despeckle: Input
//!            4 x [Conv3x3, LReLU, Conv3x3, LReLU, MaxPool2]   (first conv 1->C)
//!            2 x [Conv3x3, LReLU]                               bottleneck
//!            4 x [UpConv2x2, Concat, Conv3x3 (2C->C), LReLU]
//!            Conv1x1 (C->1), Output                            11,041 params
//! deblur:    Input, 5 x [Conv3x3, LReLU] (first 1->C), Conv3x3 (C->1), Output
//!                                                               2,489 params
//! ```

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{pad_reflect_to_multiple, Domain, Image};
use crate::nn::{self, Scalar, Tensor4};
use crate::rng::Stream;

pub const CHANNELS: usize = 8;
pub const DEPTH: usize = 4;
pub const PARAM_BUDGET: usize = 20_000;
/// Spatial multiple required by the despeckle branch (`2^DEPTH`).
pub const MULTIPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LayerKind {
    Input = 0,
    Conv3x3 = 1,
    Conv1x1 = 2,
    UpConv2x2 = 3,
    MaxPool2 = 4,
    LeakyReLU = 5,
    Concat = 6,
    Output = 7,
}

impl LayerKind {
    pub fn from_tag(t: u8) -> Result<Self> {
        use LayerKind::*;
        Ok(match t {
            0 => Input,
            1 => Conv3x3,
            2 => Conv1x1,
            3 => UpConv2x2,
            4 => MaxPool2,
            5 => LeakyReLU,
            6 => Concat,
            7 => Output,
            _ => return Err(Error::Malformed(format!("unknown layer kind {t}"))),
        })
    }

    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::UpConv2x2)
    }

    pub fn kernel(self) -> usize {
        match self {
            LayerKind::Conv3x3 => 3,
            LayerKind::Conv1x1 => 1,
            LayerKind::UpConv2x2 => 2,
            _ => 0,
        }
    }
}

/// One layer. Parameter layers carry a `(out_c, in_c, k, k)` weight and a
/// bias of length `out_c`; the others have no weight and an empty bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub kind: LayerKind,
    pub in_c: usize,
    pub out_c: usize,
    pub weight: Option<Tensor4<T>>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn plain(kind: LayerKind, in_c: usize, out_c: usize) -> Self {
        Self { kind, in_c, out_c, weight: None, bias: Vec::new() }
    }

    pub fn with_params(kind: LayerKind, in_c: usize, out_c: usize) -> Self {
        let k = kind.kernel();
        Self { kind, in_c, out_c, weight: Some(Tensor4::zeros(out_c, in_c, k, k)), bias: vec![T::zero(); out_c] }
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_ref().map_or(0, |w| w.len()) + self.bias.len()
    }

    /// `(out_c, in_c, kh, kw)`; the kernel extents are zero for layers
    /// without parameters.
    pub fn extents(&self) -> [u32; 4] {
        let k = self.kind.kernel() as u32;
        [self.out_c as u32, self.in_c as u32, k, k]
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            kind: self.kind,
            in_c: self.in_c,
            out_c: self.out_c,
            weight: self.weight.as_ref().map(|w| w.cast()),
            bias: self.bias.iter().map(|b| U::of(b.to_f64().unwrap())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Despeckle,
    Deblur,
    Fused,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Despeckle => "despeckle",
            Branch::Deblur => "deblur",
            Branch::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "despeckle" => Ok(Branch::Despeckle),
            "deblur" => Ok(Branch::Deblur),
            "fused" => Ok(Branch::Fused),
            _ => Err(Error::InvalidConfig(format!("unknown branch `{s}`"))),
        }
    }
}

/// Shape-only description of a model: the layer records of both branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureDescriptor {
    pub channels: usize,
    pub depth: usize,
    pub despeckle: Vec<(LayerKind, [u32; 4])>,
    pub deblur: Vec<(LayerKind, [u32; 4])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub channels: usize,
    pub depth: usize,
    pub despeckle: Vec<LayerParams<T>>,
    pub deblur: Vec<LayerParams<T>>,
    /// Set once trained branches have been combined by `fuse`.
    pub fused: bool,
}

fn despeckle_layout(c: usize, depth: usize) -> Vec<(LayerKind, usize, usize)> {
    use LayerKind::*;
    let mut l = vec![(Input, 1, 1)];
    let mut ch = 1;
    for _ in 0..depth {
        l.extend([(Conv3x3, ch, c), (LeakyReLU, c, c), (Conv3x3, c, c), (LeakyReLU, c, c), (MaxPool2, c, c)]);
        ch = c;
    }
    for _ in 0..2 {
        l.extend([(Conv3x3, c, c), (LeakyReLU, c, c)]);
    }
    for _ in 0..depth {
        l.extend([(UpConv2x2, c, c), (Concat, c, 2 * c), (Conv3x3, 2 * c, c), (LeakyReLU, c, c)]);
    }
    l.extend([(Conv1x1, c, 1), (Output, 1, 1)]);
    l
}

fn deblur_layout(c: usize) -> Vec<(LayerKind, usize, usize)> {
    use LayerKind::*;
    let mut l = vec![(Input, 1, 1)];
    let mut ch = 1;
    for _ in 0..5 {
        l.extend([(Conv3x3, ch, c), (LeakyReLU, c, c)]);
        ch = c;
    }
    l.extend([(Conv3x3, c, 1), (Output, 1, 1)]);
    l
}

fn instantiate<T: Scalar>(layout: &[(LayerKind, usize, usize)]) -> Vec<LayerParams<T>> {
    layout
        .iter()
        .map(|&(k, i, o)| if k.has_params() { LayerParams::with_params(k, i, o) } else { LayerParams::plain(k, i, o) })
        .collect()
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`, with `fan_in` the number
/// of terms summed per output element) and zero biases.
fn init_he_uniform<T: Scalar>(layers: &mut [LayerParams<T>], s: &mut Stream) {
    for l in layers.iter_mut() {
        if let Some(w) = l.weight.as_mut() {
            let fan_in = match l.kind {
                LayerKind::UpConv2x2 => l.in_c,
                _ => l.in_c * w.h * w.w,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in w.data.iter_mut() {
                *v = T::of(s.uniform_in(-bound, bound));
            }
            l.bias.iter_mut().for_each(|b| *b = T::zero());
        }
    }
}

/// The default model with seed 0.
pub fn build_default() -> Model {
    build_seeded(0)
}

pub fn build_seeded(seed: u64) -> Model {
    let mut m = Model {
        channels: CHANNELS,
        depth: DEPTH,
        despeckle: instantiate(&despeckle_layout(CHANNELS, DEPTH)),
        deblur: instantiate(&deblur_layout(CHANNELS)),
        fused: false,
    };
    let mut s = Stream::new(seed);
    init_he_uniform(&mut m.despeckle, &mut s);
    init_he_uniform(&mut m.deblur, &mut s);
    assert!(m.param_count() <= PARAM_BUDGET, "default model exceeds the parameter budget");
    m
}

/// Checks the channel flow of a layer list, including the skip stack.
pub fn validate_branch<T: Scalar>(layers: &[LayerParams<T>]) -> Result<()> {
    let bad = |i: usize, why: &str| Err(Error::DescriptorMismatch(format!("layer {i}: {why}")));
    if layers.first().map(|l| l.kind) != Some(LayerKind::Input)
        || layers.last().map(|l| l.kind) != Some(LayerKind::Output)
    {
        return Err(Error::DescriptorMismatch("branch must run from Input to Output".into()));
    }
    let mut ch = 1;
    let mut skips = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        if l.in_c != ch {
            return bad(i, &format!("expects {} channels, receives {ch}", l.in_c));
        }
        match l.kind {
            LayerKind::Concat => {
                let Some(s) = skips.pop() else { return bad(i, "concat without a skip") };
                if l.out_c != s + ch {
                    return bad(i, "concat width");
                }
            }
            LayerKind::MaxPool2 => skips.push(ch),
            _ => {}
        }
        if l.kind.has_params() {
            let k = l.kind.kernel();
            match &l.weight {
                Some(w) if w.shape() == [l.out_c, l.in_c, k, k] && l.bias.len() == l.out_c => {}
                _ => return bad(i, "parameter shape"),
            }
        } else if l.kind != LayerKind::Concat && l.out_c != l.in_c {
            return bad(i, "channel count changes without parameters");
        }
        ch = l.out_c;
    }
    if ch != 1 || !skips.is_empty() {
        return Err(Error::DescriptorMismatch("branch must end with one channel and no open skips".into()));
    }
    Ok(())
}

impl<T: Scalar> Model<T> {
    pub fn branch(&self, b: Branch) -> &[LayerParams<T>] {
        match b {
            Branch::Deblur => &self.deblur,
            _ => &self.despeckle,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut Vec<LayerParams<T>> {
        match b {
            Branch::Deblur => &mut self.deblur,
            _ => &mut self.despeckle,
        }
    }

    pub fn param_count(&self) -> usize {
        branch_param_count(&self.despeckle) + branch_param_count(&self.deblur)
    }

    pub fn descriptor(&self) -> ArchitectureDescriptor {
        let rec = |ls: &[LayerParams<T>]| ls.iter().map(|l| (l.kind, l.extents())).collect();
        ArchitectureDescriptor {
            channels: self.channels,
            depth: self.depth,
            despeckle: rec(&self.despeckle),
            deblur: rec(&self.deblur),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_branch(&self.despeckle)?;
        validate_branch(&self.deblur)?;
        let count = self.param_count();
        if count > PARAM_BUDGET {
            return Err(Error::BudgetExceeded { count, budget: PARAM_BUDGET });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            channels: self.channels,
            depth: self.depth,
            despeckle: self.despeckle.iter().map(|l| l.cast()).collect(),
            deblur: self.deblur.iter().map(|l| l.cast()).collect(),
            fused: self.fused,
        }
    }

    /// Parameter groups of one branch in optimizer order: weight then bias
    /// of each parameter layer.
    pub fn param_groups_mut(&mut self, b: Branch) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for l in self.branch_mut(b).iter_mut() {
            if let Some(w) = l.weight.as_mut() {
                out.push(w.data.as_mut_slice());
                out.push(l.bias.as_mut_slice());
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.despeckle.iter().chain(&self.deblur).all(|l| {
            l.bias.iter().all(|v| v.is_finite())
                && l.weight.as_ref().is_none_or(|w| w.data.iter().all(|v| v.is_finite()))
        })
    }
}

pub fn branch_param_count<T: Scalar>(layers: &[LayerParams<T>]) -> usize {
    layers.iter().map(|l| l.param_count()).sum()
}

pub fn group_sizes<T: Scalar>(layers: &[LayerParams<T>]) -> Vec<usize> {
    layers.iter().filter_map(|l| l.weight.as_ref().map(|w| [w.len(), l.bias.len()])).flatten().collect()
}

/// Floating-point operations of one layer at the given input extent:
/// `2 * in_c * k * k * out_c * H_out * W_out` for convolutions and
/// `2 * in_c * out_c * H_out * W_out` for the stride-2 upconvolution
/// (one tap per input channel per output pixel). Other layers count 0.
pub fn layer_flops(kind: LayerKind, in_c: usize, out_c: usize, h: usize, w: usize) -> u64 {
    let (in_c, out_c, h, w) = (in_c as u64, out_c as u64, h as u64, w as u64);
    match kind {
        LayerKind::Conv3x3 => 2 * in_c * 9 * out_c * h * w,
        LayerKind::Conv1x1 => 2 * in_c * out_c * h * w,
        LayerKind::UpConv2x2 => 2 * in_c * out_c * (2 * h) * (2 * w),
        _ => 0,
    }
}

pub fn branch_flops<T: Scalar>(layers: &[LayerParams<T>], h: usize, w: usize) -> u64 {
    let (mut ch, mut cw) = (h, w);
    let mut total = 0;
    for l in layers {
        total += layer_flops(l.kind, l.in_c, l.out_c, ch, cw);
        match l.kind {
            LayerKind::MaxPool2 => (ch, cw) = (ch / 2, cw / 2),
            LayerKind::UpConv2x2 => (ch, cw) = (ch * 2, cw * 2),
            _ => {}
        }
    }
    total
}

/// FLOPs of both branches at an `h x w` input (the size is rounded up to
/// the padded extent the forward pass actually runs at).
pub fn flop_count<T: Scalar>(model: &Model<T>, h: usize, w: usize) -> u64 {
    let (h, w) = (h.div_ceil(MULTIPLE) * MULTIPLE, w.div_ceil(MULTIPLE) * MULTIPLE);
    branch_flops(&model.despeckle, h, w) + branch_flops(&model.deblur, h, w)
}

/// Per-layer activation quantization applied in the forward pass:
/// `q = clamp(round(y / scale) + zero, 0, 255)`, `y <- scale * (q - zero)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuant {
    pub scale: f32,
    pub zero: i32,
}

impl ActQuant {
    /// Quantize-dequantize; the flag is true where the value lies inside
    /// the representable range (where the straight-through gradient passes).
    #[inline]
    pub fn fake<T: Scalar>(&self, v: T) -> (T, bool) {
        let s = self.scale as f64;
        let q = (v.to_f64().unwrap() / s).round() + self.zero as f64;
        let inside = (0.0..=255.0).contains(&q);
        let q = q.clamp(0.0, 255.0);
        (T::of(s * (q - self.zero as f64)), inside)
    }
}

/// Activations recorded by a forward pass, for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Input of every layer.
    pub inputs: Vec<Tensor4<T>>,
    /// Straight-through masks of fake-quantized layer outputs.
    pub masks: Vec<Option<Vec<bool>>>,
    pub output: Tensor4<T>,
}

fn layer_forward<T: Scalar>(l: &LayerParams<T>, x: &Tensor4<T>, skips: &mut Vec<Tensor4<T>>) -> Result<Tensor4<T>> {
    Ok(match l.kind {
        LayerKind::Input | LayerKind::Output => x.clone(),
        LayerKind::Conv3x3 | LayerKind::Conv1x1 => nn::conv2d_forward(x, l.weight.as_ref().unwrap(), &l.bias)?,
        LayerKind::UpConv2x2 => nn::upconv2x2_forward(x, l.weight.as_ref().unwrap(), &l.bias)?,
        LayerKind::MaxPool2 => {
            skips.push(x.clone());
            nn::maxpool2_forward(x)?
        }
        LayerKind::LeakyReLU => nn::leaky_relu_forward(x),
        LayerKind::Concat => {
            let skip = skips.pop().ok_or_else(|| Error::DescriptorMismatch("concat without a skip".into()))?;
            nn::concat_forward(&skip, x)?
        }
    })
}

/// Forward pass over a layer list. `fq` optionally fake-quantizes the
/// output of selected layers (indexed like `layers`).
pub fn branch_forward_trace<T: Scalar>(
    layers: &[LayerParams<T>],
    x: Tensor4<T>,
    fq: Option<&[Option<ActQuant>]>,
) -> Result<Trace<T>> {
    let mut skips = Vec::new();
    let mut inputs = Vec::with_capacity(layers.len());
    let mut masks = Vec::with_capacity(layers.len());
    let mut cur = x;
    for (i, l) in layers.iter().enumerate() {
        let mut y = layer_forward(l, &cur, &mut skips)?;
        let mask = match fq.and_then(|q| q.get(i).copied().flatten()) {
            Some(q) => {
                let mut m = Vec::with_capacity(y.len());
                for v in y.data.iter_mut() {
                    let (f, inside) = q.fake(*v);
                    *v = f;
                    m.push(inside);
                }
                Some(m)
            }
            None => None,
        };
        masks.push(mask);
        inputs.push(std::mem::replace(&mut cur, y));
    }
    Ok(Trace { inputs, masks, output: cur })
}

/// Forward pass without recording activations.
pub fn branch_forward<T: Scalar>(
    layers: &[LayerParams<T>],
    x: &Tensor4<T>,
    fq: Option<&[Option<ActQuant>]>,
) -> Result<Tensor4<T>> {
    branch_forward_timed(layers, x, fq, None)
}

/// As `branch_forward`, adding the wall time of every layer to `timings`.
pub fn branch_forward_timed<T: Scalar>(
    layers: &[LayerParams<T>],
    x: &Tensor4<T>,
    fq: Option<&[Option<ActQuant>]>,
    mut timings: Option<&mut [Duration]>,
) -> Result<Tensor4<T>> {
    let mut skips = Vec::new();
    let mut cur = x.clone();
    for (i, l) in layers.iter().enumerate() {
        let t0 = timings.is_some().then(Instant::now);
        cur = layer_forward(l, &cur, &mut skips)?;
        if let Some(q) = fq.and_then(|q| q.get(i).copied().flatten()) {
            for v in cur.data.iter_mut() {
                *v = q.fake(*v).0;
            }
        }
        if let (Some(t), Some(t0)) = (timings.as_deref_mut(), t0) {
            t[i] += t0.elapsed();
        }
    }
    Ok(cur)
}

/// Gradients for every parameter layer in optimizer order (weight, bias).
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub groups: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.groups.iter_mut().flatten().for_each(|v| *v = *v * s);
    }

    pub fn as_slices(&self) -> Vec<&[T]> {
        self.groups.iter().map(|g| g.as_slice()).collect()
    }
}

/// Backward pass through a recorded trace. Returns parameter gradients and
/// the gradient with respect to the branch input.
pub fn branch_backward<T: Scalar>(
    layers: &[LayerParams<T>],
    trace: &Trace<T>,
    grad_out: Tensor4<T>,
) -> Result<(Grads<T>, Tensor4<T>)> {
    let mut per_layer: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; layers.len()];
    let mut skip_grads: Vec<Tensor4<T>> = Vec::new();
    let mut g = grad_out;
    for i in (0..layers.len()).rev() {
        let l = &layers[i];
        let x = &trace.inputs[i];
        if let Some(mask) = &trace.masks[i] {
            for (v, &m) in g.data.iter_mut().zip(mask) {
                if !m {
                    *v = T::zero();
                }
            }
        }
        g = match l.kind {
            LayerKind::Input | LayerKind::Output => g,
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let (gx, gw, gb) = nn::conv2d_backward(x, l.weight.as_ref().unwrap(), &g)?;
                per_layer[i] = Some((gw.data, gb));
                gx
            }
            LayerKind::UpConv2x2 => {
                let (gx, gw, gb) = nn::upconv2x2_backward(x, l.weight.as_ref().unwrap(), &g)?;
                per_layer[i] = Some((gw.data, gb));
                gx
            }
            LayerKind::MaxPool2 => {
                let mut gx = nn::maxpool2_backward(x, &g)?;
                let skip =
                    skip_grads.pop().ok_or_else(|| Error::DescriptorMismatch("unmatched skip gradient".into()))?;
                for (a, b) in gx.data.iter_mut().zip(&skip.data) {
                    *a += *b;
                }
                gx
            }
            LayerKind::LeakyReLU => nn::leaky_relu_backward(x, &g)?,
            LayerKind::Concat => {
                let skip_c = l.out_c - l.in_c;
                let (gs, gc) = nn::concat_backward(&g, skip_c)?;
                skip_grads.push(gs);
                gc
            }
        };
    }
    let groups = per_layer.into_iter().flatten().flat_map(|(w, b)| [w, b]).collect();
    Ok((Grads { groups }, g))
}

/// Mean L2 loss and averaged parameter gradients over a batch of
/// `(input, target)` samples. Samples run in parallel; their gradients are
/// summed in sample order.
pub fn batch_grads<T: Scalar>(
    layers: &[LayerParams<T>],
    batch: &[(Tensor4<T>, Tensor4<T>)],
    fq: Option<&[Option<ActQuant>]>,
) -> Result<(f64, Grads<T>)> {
    let per: Vec<Result<(f64, Grads<T>)>> = batch
        .par_iter()
        .map(|(x, t)| {
            let trace = branch_forward_trace(layers, x.clone(), fq)?;
            let (loss, g) = nn::l2_loss(&trace.output, t)?;
            let (grads, _) = branch_backward(layers, &trace, g)?;
            Ok((loss, grads))
        })
        .collect();
    let mut it = per.into_iter();
    let (mut loss, mut grads) = it.next().ok_or(Error::EmptyCorpus("batch"))??;
    for r in it {
        let (l, g) = r?;
        loss += l;
        grads.add_assign(&g);
    }
    let n = batch.len() as f64;
    grads.scale(T::of(1.0 / n));
    Ok((loss / n, grads))
}

/// Display8 image as a `1 x 1 x h x w` tensor scaled to `[0, 1]`.
pub fn image_to_tensor<T: Scalar>(img: &Image) -> Tensor4<T> {
    let data = img.data().iter().map(|&v| T::of(v as f64 / 255.0)).collect();
    Tensor4 { n: 1, c: 1, h: img.height(), w: img.width(), data }
}

/// Clamp to `[0, 1]`, rescale to gray levels and round half away from zero.
pub fn tensor_to_display<T: Scalar>(t: &Tensor4<T>, like: &Image) -> Image {
    let data = t.data.iter().map(|v| (v.to_f64().unwrap().clamp(0.0, 1.0) * 255.0).round() as f32).collect();
    like.same_geometry(data, Domain::Display8)
}

/// Runs `f` on `img` reflect-padded to a multiple of 16 and crops the
/// result back. With `pad == false`, indivisible extents are an error.
pub fn with_padding(img: &Image, pad: bool, f: impl FnOnce(&Image) -> Result<Image>) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    if w % MULTIPLE == 0 && h % MULTIPLE == 0 {
        return f(img);
    }
    if !pad {
        return Err(Error::NonDivisibleDims { h, w, multiple: MULTIPLE });
    }
    let padded = pad_reflect_to_multiple(img, MULTIPLE);
    let out = f(&padded)?;
    out.crop(0, 0, w, h).map(|o| o.with_spacing(img.dx, img.dz))
}

fn run_branch(layers: &[LayerParams<f32>], img: &Image, timings: Option<&mut [Duration]>) -> Result<Image> {
    let out = branch_forward_timed(layers, &image_to_tensor::<f32>(img), None, timings)?;
    Ok(tensor_to_display(&out, img))
}

/// Enhances a Display8 image. The result is rounded to integer gray
/// levels, so `Fused` equals running `Despeckle` and then `Deblur` on its
/// output.
pub fn forward(model: &Model, img: &Image, branch: Branch) -> Result<Image> {
    forward_opts(model, img, branch, true)
}

pub fn forward_opts(model: &Model, img: &Image, branch: Branch, pad: bool) -> Result<Image> {
    forward_inner(model, img, branch, pad, None)
}

/// As `forward`, adding per-layer wall time to `timings`, indexed as
/// `[despeckle layers..., deblur layers...]`.
pub fn forward_timed(model: &Model, img: &Image, branch: Branch, timings: &mut [Duration]) -> Result<Image> {
    forward_inner(model, img, branch, true, Some(timings))
}

fn forward_inner(
    model: &Model,
    img: &Image,
    branch: Branch,
    pad: bool,
    mut timings: Option<&mut [Duration]>,
) -> Result<Image> {
    if img.domain() != Domain::Display8 {
        return Err(Error::InvalidImage(format!("network input must be display8, got {}", img.domain().name())));
    }
    let nd = model.despeckle.len();
    let mut run = |b: Branch, x: &Image| {
        let t = timings.as_deref_mut().map(|t| match b {
            Branch::Deblur => &mut t[nd..],
            _ => &mut t[..nd],
        });
        run_branch(model.branch(b), x, t)
    };
    match branch {
        Branch::Fused => {
            let mid = with_padding(img, pad, |x| run(Branch::Despeckle, x))?;
            with_padding(&mid, pad, |x| run(Branch::Deblur, x))
        }
        b => with_padding(img, pad, |x| run(b, x)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::{assert_close, fd, random};

    #[test]
    fn default_counts() {
        let m = build_default();
        assert_eq!(branch_param_count(&m.despeckle), 11_041);
        assert_eq!(branch_param_count(&m.deblur), 2_489);
        assert_eq!(m.param_count(), 13_530);
        assert!(m.param_count() <= PARAM_BUDGET);
        m.validate().unwrap();
        let blocks = m.deblur.iter().filter(|l| l.kind == LayerKind::LeakyReLU).count();
        assert_eq!(blocks, 5);
        assert!(m
            .despeckle
            .iter()
            .chain(&m.deblur)
            .all(|l| !l.kind.has_params() || l.out_c == CHANNELS || l.out_c == 1));
    }

    #[test]
    fn single_layer_counts() {
        let l = LayerParams::<f32>::with_params(LayerKind::Conv3x3, 1, 8);
        assert_eq!(l.param_count(), 80);
        assert_eq!(layer_flops(LayerKind::Conv3x3, 8, 8, 16, 16), 294_912);
        assert_eq!(layer_flops(LayerKind::Conv1x1, 8, 1, 16, 16), 4_096);
        assert_eq!(layer_flops(LayerKind::UpConv2x2, 8, 8, 4, 4), 2 * 64 * 64);
        assert_eq!(layer_flops(LayerKind::MaxPool2, 8, 8, 16, 16), 0);
    }

    #[test]
    fn flops_hand_total_for_deblur() {
        let m = build_default();
        let (h, w) = (32u64, 48u64);
        let want = 2 * 9 * h * w * (8 + 4 * 64 + 8);
        assert_eq!(branch_flops(&m.deblur, 32, 48), want);
    }

    #[test]
    fn bottleneck_is_one_sixteenth() {
        let m = build_default();
        let x = Tensor4::<f32>::zeros(1, 1, 64, 48);
        let t = branch_forward_trace(&m.despeckle, x, None).unwrap();
        let first_up = m.despeckle.iter().position(|l| l.kind == LayerKind::UpConv2x2).unwrap();
        assert_eq!((t.inputs[first_up].h, t.inputs[first_up].w), (4, 3));
        assert_eq!(t.output.shape(), [1, 1, 64, 48]);
    }

    #[test]
    fn zeros_give_finite_outputs() {
        let m = build_default();
        for b in [Branch::Despeckle, Branch::Deblur] {
            let y = branch_forward(m.branch(b), &Tensor4::<f32>::zeros(1, 1, 64, 64), None).unwrap();
            assert_eq!(y.shape(), [1, 1, 64, 64]);
            assert!(y.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn padding_round_trip() {
        let m = build_seeded(3);
        let data: Vec<f32> = (0..100 * 100).map(|i| (i * 37 % 256) as f32).collect();
        let img = Image::new(100, 100, data, Domain::Display8).unwrap();
        let mut seen = None;
        let out = with_padding(&img, true, |p| {
            seen = Some((p.width(), p.height()));
            run_branch(&m.despeckle, p, None)
        })
        .unwrap();
        assert_eq!(seen, Some((112, 112)));
        assert_eq!((out.width(), out.height()), (100, 100));
        assert!(out.data().iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
        assert!(matches!(
            forward_opts(&m, &img, Branch::Despeckle, false),
            Err(Error::NonDivisibleDims { h: 100, w: 100, multiple: 16 })
        ));
        let a = forward(&m, &img, Branch::Fused).unwrap();
        let b = forward(&m, &forward(&m, &img, Branch::Despeckle).unwrap(), Branch::Deblur).unwrap();
        assert_eq!(a, b);
        assert_eq!(forward(&m, &img, Branch::Fused).unwrap(), a);
    }

    fn small_model() -> Model<f64> {
        // same topology at depth 2, C = 3, for gradient checks
        let mut m = Model {
            channels: 3,
            depth: 2,
            despeckle: instantiate(&despeckle_layout(3, 2)),
            deblur: instantiate(&deblur_layout(3)),
            fused: false,
        };
        let mut s = Stream::new(11);
        init_he_uniform(&mut m.despeckle, &mut s);
        init_he_uniform(&mut m.deblur, &mut s);
        for l in m.despeckle.iter_mut().chain(m.deblur.iter_mut()) {
            for b in l.bias.iter_mut() {
                *b = s.uniform_in(-0.1, 0.1);
            }
        }
        m
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let m = small_model();
        validate_branch(&m.despeckle).unwrap();
        for b in [Branch::Despeckle, Branch::Deblur] {
            let layers = m.branch(b);
            let mut s = Stream::new(21);
            let x: Tensor4<f64> = random(&mut s, 1, 1, 8, 8);
            let r: Tensor4<f64> = random(&mut s, 1, 1, 8, 8);
            let trace = branch_forward_trace(layers, x.clone(), None).unwrap();
            let (grads, gx) = branch_backward(layers, &trace, r.clone()).unwrap();
            let f =
                |v: &[f64]| branch_forward(layers, &Tensor4::new(1, 1, 8, 8, v.to_vec()).unwrap(), None).unwrap().data;
            assert_close(&gx.data, &fd(&f, &x.data, &r.data, 1e-5), 1e-4);
            let sizes = group_sizes(layers);
            assert_eq!(grads.groups.len(), sizes.len());
            for (gi, _) in sizes.iter().enumerate() {
                let fw = |v: &[f64]| {
                    let mut mm = m.clone();
                    mm.param_groups_mut(b)[gi].copy_from_slice(v);
                    branch_forward(mm.branch(b), &x, None).unwrap().data
                };
                let mut mm = m.clone();
                let p = mm.param_groups_mut(b)[gi].to_vec();
                assert_close(&grads.groups[gi], &fd(&fw, &p, &r.data, 1e-5), 1e-4);
            }
        }
    }

    #[test]
    fn batch_is_mean_of_samples() {
        let m = small_model();
        let mut s = Stream::new(5);
        let batch: Vec<_> =
            (0..3).map(|_| (random::<f64>(&mut s, 1, 1, 8, 8), random::<f64>(&mut s, 1, 1, 8, 8))).collect();
        let (loss, g) = batch_grads(&m.despeckle, &batch, None).unwrap();
        let mut want = 0.0;
        for (x, t) in &batch {
            want += nn::l2_loss(&branch_forward(&m.despeckle, x, None).unwrap(), t).unwrap().0;
        }
        assert!((loss - want / 3.0).abs() < 1e-12);
        let (l2, g2) = batch_grads(&m.despeckle, &batch, None).unwrap();
        assert_eq!((l2, g2), (loss, g));
    }

    #[test]
    fn fake_quant_rounds_and_masks() {
        let q = ActQuant { scale: 0.5, zero: 10 };
        assert_eq!(q.fake(1.2f64), (1.0, true));
        assert_eq!(q.fake(-10.0f64), (-5.0, false));
        assert_eq!(q.fake(200.0f64), (122.5, false));
    }

    #[test]
    fn descriptor_validation_catches_errors() {
        let mut m = build_default();
        m.despeckle.remove(1);
        assert!(matches!(m.validate(), Err(Error::DescriptorMismatch(_))));
    }
}
