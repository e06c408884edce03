//! B-mode speckle simulator and blur/contrast degradation.
//!
//! The simulator follows the classic pulse-echo chain: a linear
//! echogenicity map multiplies white Gaussian scatterers, the result is
//! convolved with a separable PSF (lateral Gaussian beam times a
//! Gaussian-windowed axial carrier), each axial RF line is envelope-detected
//! through its analytic signal, and the envelope is log-compressed.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::image::{reflect_index, to_decibel, Domain, Image};
use crate::rng::Stream;

/// Lower and upper bound of the per-realization PSF width jitter factor.
pub const JITTER_RANGE: (f64, f64) = (0.8, 1.25);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeckleSimConfig {
    /// Lateral PSF standard deviation, pixels.
    pub sigma_x: f64,
    /// Axial envelope standard deviation, pixels.
    pub sigma_z: f64,
    /// Carrier periods spanning `[-2 sigma_z, 2 sigma_z]`.
    pub cycles: f64,
    /// Standard deviation of the Gaussian scatterers.
    pub noise_std: f64,
    pub seed: u64,
    pub floor_db: f64,
}

impl Default for SpeckleSimConfig {
    fn default() -> Self {
        Self { sigma_x: 2.0, sigma_z: 2.0, cycles: 2.0, noise_std: 1.0, seed: 0, floor_db: -55.0 }
    }
}

impl SpeckleSimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_x > 0.0
            && self.sigma_z > 0.0
            && self.cycles >= 1.0
            && self.noise_std > 0.0
            && self.floor_db < 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid speckle config {self:?}")))
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurConfig {
    pub blur_sigma_range: (f64, f64),
    pub narrow_alpha_range: (f64, f64),
    pub seed: u64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self { blur_sigma_range: (0.5, 2.0), narrow_alpha_range: (0.6, 1.0), seed: 0 }
    }
}

impl BlurConfig {
    pub fn validate(&self) -> Result<()> {
        let (bl, bh) = self.blur_sigma_range;
        let (al, ah) = self.narrow_alpha_range;
        if 0.0 < bl && bl <= bh && 0.0 < al && al <= ah && ah <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid blur config {self:?}")))
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Row-major real kernel with odd extents, centred.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2 {
    /// Lateral extent.
    pub width: usize,
    /// Axial extent.
    pub height: usize,
    pub data: Vec<f64>,
}

impl Kernel2 {
    pub fn at(&self, x: isize, z: isize) -> f64 {
        let cx = (self.width / 2) as isize;
        let cz = (self.height / 2) as isize;
        self.data[((z + cz) as usize) * self.width + (x + cx) as usize]
    }
}

/// Signed RF-domain field (scatterers or beamformed RF).
#[derive(Debug, Clone, PartialEq)]
pub struct RfField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

fn half_support(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

fn lateral_profile(sigma_x: f64) -> Vec<f64> {
    let h = half_support(sigma_x) as isize;
    (-h..=h).map(|x| (-((x * x) as f64) / (2.0 * sigma_x * sigma_x)).exp()).collect()
}

fn axial_pulse(sigma_z: f64, cycles: f64) -> Vec<f64> {
    let h = half_support(sigma_z) as isize;
    let f0 = cycles / (4.0 * sigma_z);
    (-h..=h)
        .map(|z| {
            let z = z as f64;
            (-z * z / (2.0 * sigma_z * sigma_z)).exp() * (2.0 * std::f64::consts::PI * f0 * z).cos()
        })
        .collect()
}

/// Separable PSF `exp(-x^2/2sx^2) exp(-z^2/2sz^2) cos(2 pi f0 z)`, truncated
/// at +-3 sigma per axis and normalised to unit peak magnitude.
pub fn build_psf(cfg: &SpeckleSimConfig) -> Kernel2 {
    let lat = lateral_profile(cfg.sigma_x);
    let ax = axial_pulse(cfg.sigma_z, cfg.cycles);
    let mut data: Vec<f64> = ax.iter().flat_map(|&a| lat.iter().map(move |&l| a * l)).collect();
    let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    data.iter_mut().for_each(|v| *v /= peak);
    Kernel2 { width: lat.len(), height: ax.len(), data }
}

fn scatter_from_stream(echo: &Image, noise_std: f64, stream: &mut Stream) -> RfField {
    let data = echo.data().iter().map(|&e| e as f64 * noise_std * stream.gaussian()).collect();
    RfField { width: echo.width(), height: echo.height(), data }
}

/// Multiplicative scattering field `echo(p) * g(p)`, `g ~ N(0, noise_std^2)`,
/// drawn in row-major order from the stream seeded with `seed`.
pub fn scatter_field(echo: &Image, noise_std: f64, seed: u64) -> Result<RfField> {
    expect_linear(echo)?;
    Ok(scatter_from_stream(echo, noise_std, &mut Stream::new(seed)))
}

fn expect_linear(echo: &Image) -> Result<()> {
    if echo.domain() != Domain::LinearAmplitude {
        return Err(Error::InvalidImage("echogenicity map must be linear amplitude".into()));
    }
    Ok(())
}

/// 1-D zero-padded correlation along rows (`axial == false`) or columns.
fn convolve_zero(field: &RfField, taps: &[f64], axial: bool) -> RfField {
    let (w, h) = (field.width, field.height);
    let half = (taps.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(z, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let off = k as isize - half;
                let (sx, sz) = if axial { (x as isize, z as isize + off) } else { (x as isize + off, z as isize) };
                if sx >= 0 && sz >= 0 && (sx as usize) < w && (sz as usize) < h {
                    acc += t * field.data[sz as usize * w + sx as usize];
                }
            }
            *o = acc;
        }
    });
    RfField { width: w, height: h, data: out }
}

/// Envelope of each axial line via the FFT analytic signal. Columns are
/// zero-padded to the next power of two and cropped after the inverse.
pub fn envelope_columns(rf: &RfField) -> Vec<f64> {
    let (w, h) = (rf.width, rf.height);
    let n = h.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(n);
    let inv: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(n);
    let columns: Vec<Vec<f64>> = (0..w)
        .into_par_iter()
        .map(|x| {
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            for z in 0..h {
                buf[z].re = rf.data[z * w + x];
            }
            analytic_in_place(&mut buf, fwd.as_ref(), inv.as_ref());
            buf[..h].iter().map(|c| c.norm()).collect()
        })
        .collect();
    let mut env = vec![0.0; w * h];
    for (x, col) in columns.iter().enumerate() {
        for (z, &v) in col.iter().enumerate() {
            env[z * w + x] = v;
        }
    }
    env
}

/// Zero negative frequencies, double positive ones, leave DC and Nyquist.
fn analytic_in_place(buf: &mut [Complex64], fwd: &dyn Fft<f64>, inv: &dyn Fft<f64>) {
    let n = buf.len();
    if n == 1 {
        return;
    }
    fwd.process(buf);
    for c in &mut buf[1..n / 2] {
        *c *= 2.0;
    }
    for c in &mut buf[n / 2 + 1..] {
        *c = Complex64::new(0.0, 0.0);
    }
    inv.process(buf);
    let scale = 1.0 / n as f64;
    for c in buf.iter_mut() {
        *c *= scale;
    }
}

fn rf_from_stream(echo: &Image, cfg: &SpeckleSimConfig, stream: &mut Stream) -> Result<RfField> {
    cfg.validate()?;
    expect_linear(echo)?;
    let lat = lateral_profile(cfg.sigma_x);
    let ax = axial_pulse(cfg.sigma_z, cfg.cycles);
    if echo.height() < ax.len() {
        return Err(Error::ImageTooSmall { height: echo.height(), support: ax.len() });
    }
    // same normalisation as build_psf: unit peak
    let peak = ax.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let ax: Vec<f64> = ax.iter().map(|v| v / peak).collect();
    let scatter = scatter_from_stream(echo, cfg.noise_std, stream);
    let rf = convolve_zero(&scatter, &lat, false);
    Ok(convolve_zero(&rf, &ax, true))
}

fn envelope_image(echo: &Image, env: Vec<f64>) -> Image {
    echo.same_geometry(env.into_iter().map(|v| v as f32).collect(), Domain::LinearAmplitude)
}

/// Pre-log envelope of one speckle realization.
pub fn simulate_envelope(echo: &Image, cfg: &SpeckleSimConfig) -> Result<Image> {
    let rf = rf_from_stream(echo, cfg, &mut Stream::new(cfg.seed))?;
    Ok(envelope_image(echo, envelope_columns(&rf)))
}

/// Log-compressed B-mode image of one speckle realization.
pub fn simulate_bmode(echo: &Image, cfg: &SpeckleSimConfig) -> Result<Image> {
    to_decibel(&simulate_envelope(echo, cfg)?, cfg.floor_db)
}

/// Parameters actually used for realization `index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealizationParams {
    pub seed: u64,
    pub sigma_x: f64,
    pub sigma_z: f64,
}

/// Realization `i` is seeded with `seed ^ i`; its first two uniform draws
/// jitter `sigma_x` and `sigma_z` by factors in [`JITTER_RANGE`], and the
/// scatterers continue from the same stream.
pub fn realization_params(cfg: &SpeckleSimConfig, index: usize) -> RealizationParams {
    let seed = cfg.seed ^ index as u64;
    let mut stream = Stream::new(seed);
    let jx = stream.uniform_in(JITTER_RANGE.0, JITTER_RANGE.1);
    let jz = stream.uniform_in(JITTER_RANGE.0, JITTER_RANGE.1);
    RealizationParams { seed, sigma_x: cfg.sigma_x * jx, sigma_z: cfg.sigma_z * jz }
}

fn realization(echo: &Image, cfg: &SpeckleSimConfig, index: usize) -> Result<Image> {
    let seed = cfg.seed ^ index as u64;
    let mut stream = Stream::new(seed);
    let jx = stream.uniform_in(JITTER_RANGE.0, JITTER_RANGE.1);
    let jz = stream.uniform_in(JITTER_RANGE.0, JITTER_RANGE.1);
    let jittered = SpeckleSimConfig { sigma_x: cfg.sigma_x * jx, sigma_z: cfg.sigma_z * jz, ..*cfg };
    let rf = rf_from_stream(echo, &jittered, &mut stream)?;
    to_decibel(&envelope_image(echo, envelope_columns(&rf)), cfg.floor_db)
}

/// `k` independent speckle realizations of one echogenicity map.
pub fn make_realizations(echo: &Image, cfg: &SpeckleSimConfig, k: usize) -> Result<Vec<Image>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 realizations, got {k}")));
    }
    (0..k).into_par_iter().map(|i| realization(echo, cfg, i)).collect()
}

/// Normalised 1-D Gaussian with support +-ceil(3 sigma).
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let h = half_support(sigma) as isize;
    let raw: Vec<f64> = (-h..=h).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let half = (taps.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; w * h];
    for z in 0..h {
        for x in 0..w {
            tmp[z * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * src[z * w + reflect_index(x as isize + k as isize - half, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for z in 0..h {
        for x in 0..w {
            out[z * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect_index(z as isize + k as isize - half, h) * w + x])
                .sum();
        }
    }
    out
}

/// The draws `degrade` makes for a given config.
pub fn degrade_params(cfg: &BlurConfig) -> (f64, f64) {
    let mut stream = Stream::new(cfg.seed);
    let sigma = stream.uniform_in(cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
    let alpha = stream.uniform_in(cfg.narrow_alpha_range.0, cfg.narrow_alpha_range.1);
    (sigma, alpha)
}

/// Random Gaussian blur followed by histogram narrowing
/// `v <- mean + alpha (v - mean)`, clamped to the display range.
pub fn degrade(img: &Image, cfg: &BlurConfig) -> Result<Image> {
    if img.domain() != Domain::Display8 {
        return Err(Error::InvalidImage("degrade expects a display image".into()));
    }
    cfg.validate()?;
    let (sigma, alpha) = degrade_params(cfg);
    let blurred = gaussian_blur(img, sigma);
    let mean = blurred.iter().sum::<f64>() / blurred.len() as f64;
    let data = blurred.iter().map(|&v| (mean + alpha * (v - mean)).clamp(0.0, 255.0) as f32).collect();
    Ok(img.same_geometry(data, Domain::Display8))
}
