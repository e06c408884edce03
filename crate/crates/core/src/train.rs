//! Training: Noise2Noise-style despeckling, self-supervised deblurring,
//! corpus management and branch fusion.
//!
//! Despeckle targets are always other simulated realizations of the same
//! echogenicity map; the trainer never sees a clean image. Deblur pairs
//! use a corpus patch as the target and its degraded copy as the input.
//!
//! Every sample is produced from its own derived seed, so pair generation
//! may run on any number of threads without changing the result, and
//! (corpus, config, seed) determine the final parameters bit-exactly.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{
    make_phantom, read_image, to_display, to_echogenicity, Domain, Image, Inclusion, PhantomSpec, DEFAULT_RANGE_DB,
};
use crate::net::{self, ActQuant, Branch, LayerParams, Model};
use crate::nn::{AdamWConfig, AdamWState, Tensor4};
use crate::rng::{derive_seed, Stream};
use crate::speckle::{degrade, make_realizations, simulate_bmode, BlurConfig, SpeckleSimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub realizations_k: usize,
    /// Samples drawn from every source per epoch.
    pub pairs_per_source: usize,
    /// Average all `k - 1` other realizations instead of picking one target.
    pub average_targets: bool,
    pub seed: u64,
    /// Steps between progress callbacks (0 disables them).
    pub checkpoint_every: usize,
    /// Window of the running-average loss used to pick the best model.
    pub best_window: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            patch_size: 64,
            realizations_k: 2,
            pairs_per_source: 32,
            average_targets: false,
            seed: 0,
            checkpoint_every: 0,
            best_window: 50,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.patch_size < 32 || !self.patch_size.is_multiple_of(net::MULTIPLE) {
            return bad("patch_size must be >= 32 and divisible by 16");
        }
        if self.realizations_k < 2 {
            return bad("realizations_k must be >= 2");
        }
        if self.batch_size == 0 || self.pairs_per_source == 0 || self.best_window == 0 {
            return bad("batch_size, pairs_per_source and best_window must be >= 1");
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceRole {
    Despeckle,
    Deblur,
}

impl SourceRole {
    pub fn keyword(self) -> &'static str {
        match self {
            SourceRole::Despeckle => "despeckle_source",
            SourceRole::Deblur => "deblur_source",
        }
    }
}

/// One corpus image with its simulator and degradation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub name: String,
    /// Display8 image.
    pub image: Image,
    pub sim: SpeckleSimConfig,
    pub blur: BlurConfig,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub despeckle: Vec<Source>,
    pub deblur: Vec<Source>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub role: SourceRole,
    pub path: PathBuf,
    pub overrides: Vec<(String, String)>,
}

/// Parses `role<TAB>path<TAB>key=value...` lines. Blank lines and `#`
/// comments are skipped; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let role = match fields.next().map(str::trim) {
            Some("despeckle_source") => SourceRole::Despeckle,
            Some("deblur_source") => SourceRole::Deblur,
            other => {
                return Err(Error::Malformed(format!(
                    "manifest line {}: unknown role {:?}",
                    n + 1,
                    other.unwrap_or("")
                )))
            }
        };
        let path = fields
            .next()
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Malformed(format!("manifest line {}: missing path", n + 1)))?;
        let mut overrides = Vec::new();
        for f in fields.flat_map(|f| f.split_whitespace()) {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("manifest line {}: `{f}` is not key=value", n + 1)))?;
            overrides.push((k.to_string(), v.to_string()));
        }
        out.push(ManifestEntry { role, path: base.join(path), overrides });
    }
    Ok(out)
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::InvalidConfig(format!("`{key}` expects a number, got `{v}`")))
}

/// Applies per-entry overrides to the simulator and degradation settings.
pub fn apply_overrides(
    overrides: &[(String, String)],
    sim: &mut SpeckleSimConfig,
    blur: &mut BlurConfig,
) -> Result<()> {
    for (k, v) in overrides {
        let x = parse_f64(k, v)?;
        match k.as_str() {
            "sigma_x" => sim.sigma_x = x,
            "sigma_z" => sim.sigma_z = x,
            "cycles" => sim.cycles = x,
            "noise_std" => sim.noise_std = x,
            "floor_db" => sim.floor_db = x,
            "blur_sigma_min" => blur.blur_sigma_range.0 = x,
            "blur_sigma_max" => blur.blur_sigma_range.1 = x,
            "alpha_min" => blur.narrow_alpha_range.0 = x,
            "alpha_max" => blur.narrow_alpha_range.1 = x,
            _ => return Err(Error::InvalidConfig(format!("unknown manifest key `{k}`"))),
        }
    }
    sim.validate()?;
    blur.validate()
}

/// Loads every manifest entry. Files must exist and be Display8.
pub fn load_corpus(entries: &[ManifestEntry], sim: &SpeckleSimConfig, blur: &BlurConfig) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for e in entries {
        let image = read_image(&e.path)?;
        if image.domain() != Domain::Display8 {
            return Err(Error::InvalidImage(format!("{} is not a display image", e.path.display())));
        }
        let (mut s, mut b) = (*sim, *blur);
        apply_overrides(&e.overrides, &mut s, &mut b)?;
        let src = Source { name: e.path.display().to_string(), image, sim: s, blur: b };
        match e.role {
            SourceRole::Despeckle => corpus.despeckle.push(src),
            SourceRole::Deblur => corpus.deblur.push(src),
        }
    }
    Ok(corpus)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// A random phantom: unit background with one to four non-overlapping
/// disks that are anechoic, hypoechoic or hyperechoic.
pub fn random_phantom(size: usize, s: &mut Stream) -> Result<Image> {
    let count = 1 + s.below(4);
    let mut inclusions: Vec<Inclusion> = Vec::new();
    let mut attempts = 0;
    while inclusions.len() < count && attempts < 100 {
        attempts += 1;
        let radius = s.uniform_in(size as f64 * 0.05, size as f64 * 0.22);
        let lo = radius + 1.0;
        let hi = size as f64 - 2.0 - radius;
        let (cx, cz) = (s.uniform_in(lo, hi), s.uniform_in(lo, hi));
        let echo = match s.below(3) {
            0 => 0.0,
            1 => s.uniform_in(0.1, 0.6) as f32,
            _ => s.uniform_in(1.6, 3.0) as f32,
        };
        let clear = inclusions.iter().all(|o| {
            let d = ((o.cx - cx).powi(2) + (o.cz - cz).powi(2)).sqrt();
            d > o.radius + radius + 2.0
        });
        if clear {
            inclusions.push(Inclusion { cx, cz, radius, echo });
        }
    }
    make_phantom(&PhantomSpec { width: size, height: size, background_echo: 1.0, inclusions })
}

/// Seeded synthetic corpus of `n` despeckle sources (display images of
/// random phantom echo maps) and `n` deblur sources (simulated B-mode
/// display images of further random phantoms).
pub fn synthetic_corpus(n: usize, size: usize, seed: u64, sim: &SpeckleSimConfig) -> Result<Corpus> {
    let blur = BlurConfig::default();
    let make = |i: usize, role: SourceRole| -> Result<Source> {
        let tag = 2 * i as u64 + (role == SourceRole::Deblur) as u64;
        let mut s = Stream::new(derive_seed(seed, tag));
        let echo = random_phantom(size, &mut s)?;
        let image = match role {
            SourceRole::Despeckle => to_display(&to_decibel_of_echo(&echo)?, DEFAULT_RANGE_DB)?,
            SourceRole::Deblur => to_display(&simulate_bmode(&echo, &sim.with_seed(s.next_u64()))?, DEFAULT_RANGE_DB)?,
        };
        Ok(Source { name: format!("{}-{i}", role.keyword()), image, sim: *sim, blur })
    };
    Ok(Corpus {
        despeckle: (0..n).into_par_iter().map(|i| make(i, SourceRole::Despeckle)).collect::<Result<_>>()?,
        deblur: (0..n).into_par_iter().map(|i| make(i, SourceRole::Deblur)).collect::<Result<_>>()?,
    })
}

fn to_decibel_of_echo(echo: &Image) -> Result<Image> {
    crate::image::to_decibel(echo, -DEFAULT_RANGE_DB)
}

/// Despeckle training pair from one echogenicity source: `k` realizations
/// are simulated, one is drawn as the input and a distinct one as the
/// target (or the mean of all others), and both are cropped at a shared
/// random location. Returned images are Display8.
pub fn make_despeckle_pair(
    echo: &Image,
    sim: &SpeckleSimConfig,
    k: usize,
    patch: usize,
    average_targets: bool,
    s: &mut Stream,
) -> Result<(Image, Image)> {
    let echo = to_echogenicity(echo, DEFAULT_RANGE_DB)?;
    let (w, h) = (echo.width(), echo.height());
    if w < patch || h < patch {
        return Err(Error::InvalidImage(format!("{w}x{h} source is smaller than a {patch} patch")));
    }
    let reals = make_realizations(&echo, &sim.with_seed(s.next_u64()), k)?;
    let input = s.below(k);
    let mut target = s.below(k - 1);
    if target >= input {
        target += 1;
    }
    let (x0, z0) = (s.below(w - patch + 1), s.below(h - patch + 1));
    let crop = |i: usize| -> Result<Image> { to_display(&reals[i], DEFAULT_RANGE_DB)?.crop(x0, z0, patch, patch) };
    let a = crop(input)?;
    let b = if average_targets {
        let others: Vec<Image> = (0..k).filter(|&i| i != input).map(crop).collect::<Result<_>>()?;
        let mut acc = vec![0.0f64; patch * patch];
        for o in &others {
            for (s, &v) in acc.iter_mut().zip(o.data()) {
                *s += v as f64;
            }
        }
        let n = others.len() as f64;
        a.same_geometry(acc.into_iter().map(|v| (v / n) as f32).collect(), Domain::Display8)
    } else {
        crop(target)?
    };
    Ok((a, b))
}

/// Deblur training pair: a random patch `O` and `degrade(O)`, returned as
/// `(input, target)`.
pub fn make_deblur_pair(src: &Source, patch: usize, s: &mut Stream) -> Result<(Image, Image)> {
    let (w, h) = (src.image.width(), src.image.height());
    if w < patch || h < patch {
        return Err(Error::InvalidImage(format!("{w}x{h} source is smaller than a {patch} patch")));
    }
    let (x0, z0) = (s.below(w - patch + 1), s.below(h - patch + 1));
    let target = src.image.crop(x0, z0, patch, patch)?;
    let input = degrade(&target, &src.blur.with_seed(s.next_u64()))?;
    Ok((input, target))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Batch loss of every step.
    pub losses: Vec<f64>,
    /// Step after which the returned parameters were taken (0 = initial).
    pub best_step: usize,
}

/// Optional per-step hook: `(step, loss, current model)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64, &Model) -> Result<()>;

/// Maps float parameters to their fake-quantized copies.
pub type WeightMap<'a> = dyn Fn(&[LayerParams<f32>]) -> Vec<LayerParams<f32>> + Sync + 'a;

/// Fake quantization used by quantization-aware fine-tuning: a function
/// producing the forward-pass layers from the float layers, and the
/// activation quantizers per layer. With a teacher, the targets become the
/// teacher's clamped float output on the same input.
pub struct FakeQuant<'a> {
    pub weights: &'a WeightMap<'a>,
    pub acts: &'a [Option<ActQuant>],
    pub teacher: Option<&'a [LayerParams<f32>]>,
}

/// Float branch output clamped to the display range, as a training target.
pub fn teacher_target(teacher: &[LayerParams<f32>], x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    let mut t = net::branch_forward(teacher, x, None)?;
    t.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(t)
}

type SampleFn<'a> = dyn Fn(usize, u64) -> Result<(Image, Image)> + Sync + 'a;

/// The shared loop: per epoch every source contributes `pairs_per_source`
/// samples in a seeded random order, grouped into batches.
fn train_loop(
    model: &Model,
    branch: Branch,
    n_sources: usize,
    sample: &SampleFn,
    cfg: &TrainConfig,
    fq: Option<&FakeQuant>,
    mut progress: Option<Progress>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    let mut best = model.clone();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, losses: Vec::new(), best_step: 0 });
    }
    if n_sources == 0 {
        return Err(Error::EmptyCorpus(match branch {
            Branch::Deblur => "deblur sources",
            _ => "despeckle sources",
        }));
    }
    let per_epoch = n_sources * cfg.pairs_per_source;
    let total_steps = cfg.epochs * per_epoch.div_ceil(cfg.batch_size);
    let window = cfg.best_window.min(total_steps);
    let mut opt = AdamWState::<f32>::new(cfg.optimizer, &net::group_sizes(model.branch(branch)));
    let mut losses = Vec::with_capacity(total_steps);
    let (mut best_avg, mut best_step) = (f64::INFINITY, 0);
    let mut step = 0;
    let sample_base = derive_seed(cfg.seed, u64::MAX);
    for epoch in 0..cfg.epochs {
        let order = Stream::new(derive_seed(cfg.seed, epoch as u64)).permutation(per_epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Tensor4<f32>, Tensor4<f32>)> = chunk
                .par_iter()
                .map(|&job| {
                    let tag = (epoch * per_epoch + job) as u64;
                    let seed = derive_seed(sample_base, tag);
                    let (x, t) = sample(job % n_sources, seed)?;
                    let x = net::image_to_tensor(&x);
                    let t = match fq.and_then(|f| f.teacher) {
                        Some(teacher) => teacher_target(teacher, &x)?,
                        None => net::image_to_tensor(&t),
                    };
                    Ok((x, t))
                })
                .collect::<Result<_>>()?;
            let layers = model.branch(branch);
            let (loss, grads) = match fq {
                Some(f) => net::batch_grads(&(f.weights)(layers), &batch, Some(f.acts))?,
                None => net::batch_grads(layers, &batch, None)?,
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, what: format!("{} loss {loss}", branch.name()) });
            }
            opt.step(&mut model.param_groups_mut(branch), &grads.as_slices())?;
            if !model.all_finite() {
                return Err(Error::NonFiniteWeights);
            }
            losses.push(loss);
            step += 1;
            if step >= window {
                let avg = losses[step - window..].iter().sum::<f64>() / window as f64;
                if avg < best_avg {
                    best_avg = avg;
                    best_step = step;
                    best = model.clone();
                }
            }
            if let Some(p) = progress.as_mut() {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    p(step, loss, &model)?;
                }
            }
        }
    }
    log::info!("{} training: {step} steps, best running loss {best_avg:.6} at step {best_step}", branch.name());
    Ok(TrainOutcome { model: best, losses, best_step })
}

/// Trains the despeckle branch on despeckle sources.
pub fn train_despeckle(
    model: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    progress: Option<Progress>,
) -> Result<TrainOutcome> {
    train_despeckle_fq(model, corpus, cfg, None, progress)
}

pub fn train_despeckle_fq(
    model: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    fq: Option<&FakeQuant>,
    progress: Option<Progress>,
) -> Result<TrainOutcome> {
    let sample = |i: usize, seed: u64| {
        let src = &corpus.despeckle[i];
        let mut s = Stream::new(seed);
        make_despeckle_pair(&src.image, &src.sim, cfg.realizations_k, cfg.patch_size, cfg.average_targets, &mut s)
    };
    train_loop(model, Branch::Despeckle, corpus.despeckle.len(), &sample, cfg, fq, progress)
}

/// Trains the deblur branch on deblur sources.
pub fn train_deblur(
    model: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    progress: Option<Progress>,
) -> Result<TrainOutcome> {
    train_deblur_fq(model, corpus, cfg, None, progress)
}

pub fn train_deblur_fq(
    model: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    fq: Option<&FakeQuant>,
    progress: Option<Progress>,
) -> Result<TrainOutcome> {
    let sample = |i: usize, seed: u64| make_deblur_pair(&corpus.deblur[i], cfg.patch_size, &mut Stream::new(seed));
    train_loop(model, Branch::Deblur, corpus.deblur.len(), &sample, cfg, fq, progress)
}

/// Fixed validation pairs for a branch, drawn from the corpus with `seed`.
pub fn validation_pairs(
    corpus: &Corpus,
    branch: Branch,
    cfg: &TrainConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<(Image, Image)>> {
    (0..count)
        .into_par_iter()
        .map(|j| {
            let mut s = Stream::new(derive_seed(seed, j as u64));
            match branch {
                Branch::Deblur => {
                    let n = corpus.deblur.len();
                    if n == 0 {
                        return Err(Error::EmptyCorpus("deblur sources"));
                    }
                    make_deblur_pair(&corpus.deblur[j % n], cfg.patch_size, &mut s)
                }
                _ => {
                    let n = corpus.despeckle.len();
                    if n == 0 {
                        return Err(Error::EmptyCorpus("despeckle sources"));
                    }
                    let src = &corpus.despeckle[j % n];
                    make_despeckle_pair(&src.image, &src.sim, cfg.realizations_k, cfg.patch_size, false, &mut s)
                }
            }
        })
        .collect()
}

/// Mean L2 loss of a branch over fixed pairs.
pub fn validation_loss(
    layers: &[LayerParams<f32>],
    pairs: &[(Image, Image)],
    acts: Option<&[Option<ActQuant>]>,
) -> Result<f64> {
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|(x, t)| {
            let y = net::branch_forward(layers, &net::image_to_tensor(x), acts)?;
            Ok(crate::nn::l2_loss(&y, &net::image_to_tensor::<f32>(t))?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Combines the despeckle branch of one model with the deblur branch of
/// another. Parameters are copied verbatim.
pub fn fuse(despeckle: &Model, deblur: &Model) -> Result<Model> {
    if despeckle.descriptor() != deblur.descriptor() {
        return Err(Error::DescriptorMismatch("branches come from different architectures".into()));
    }
    Ok(Model {
        channels: despeckle.channels,
        depth: despeckle.depth,
        despeckle: despeckle.despeckle.clone(),
        deblur: deblur.deblur.clone(),
        fused: true,
    })
}

/// `step,loss` CSV with a header row.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l:.8}\n", i + 1));
    }
    s
}
