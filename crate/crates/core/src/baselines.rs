//! Classical despeckling filters used as comparators: the Lee
//! local-statistics filter and speckle reducing anisotropic diffusion.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{reflect_index, Domain, Image, RoiSpec};
use crate::metrics::region_stats;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeeConfig {
    /// Odd window side, at least 3.
    pub window: usize,
    /// Coefficient of variation of the speckle.
    pub cu: f64,
}

impl LeeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("Lee window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.cu > 0.0 && self.cu.is_finite()) {
            return Err(Error::InvalidConfig(format!("Lee Cu must be positive, got {}", self.cu)));
        }
        Ok(())
    }

    /// Window 7 with `Cu` estimated from a homogeneous region.
    pub fn from_roi(img: &Image, roi: &RoiSpec) -> Result<Self> {
        Ok(Self { window: 7, cu: estimate_cu(img, roi)? })
    }
}

/// `std / mean` over a region.
pub fn estimate_cu(img: &Image, roi: &RoiSpec) -> Result<f64> {
    let (m, v) = region_stats(img, roi)?;
    if m == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(v.sqrt() / m.abs())
}

/// Summed-area tables of values and squares over the reflect-padded image,
/// `(w + 2r + 1) x (h + 2r + 1)` with a zero first row and column.
fn integrals(img: &Image, r: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let (w, h) = (img.width(), img.height());
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let stride = pw + 1;
    let mut s = vec![0.0; stride * (ph + 1)];
    let mut s2 = vec![0.0; stride * (ph + 1)];
    for y in 0..ph {
        let row = img.row(reflect_index(y as isize - r as isize, h));
        let (mut acc, mut acc2) = (0.0, 0.0);
        for x in 0..pw {
            let v = row[reflect_index(x as isize - r as isize, w)] as f64;
            acc += v;
            acc2 += v * v;
            s[(y + 1) * stride + x + 1] = s[y * stride + x + 1] + acc;
            s2[(y + 1) * stride + x + 1] = s2[y * stride + x + 1] + acc2;
        }
    }
    (s, s2, stride)
}

/// Per pixel: local mean `m` and variance `v` over the window, gain
/// `k = max(0, 1 - Cu^2 m^2 / v)` (0 where `v == 0`), output
/// `m + k (x - m)` clamped to `[0, 255]`.
pub fn lee_filter(img: &Image, cfg: &LeeConfig) -> Result<Image> {
    let out = lee_values(img, cfg)?;
    Ok(img.same_geometry(out.iter().map(|&v| v as f32).collect(), Domain::Display8))
}

/// The Lee filter output in double precision.
pub fn lee_values(img: &Image, cfg: &LeeConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if img.domain() != Domain::Display8 {
        return Err(Error::InvalidImage(format!("Lee filter expects display8, got {}", img.domain().name())));
    }
    let (w, h) = (img.width(), img.height());
    let r = cfg.window / 2;
    let n = (cfg.window * cfg.window) as f64;
    let (s, s2, stride) = integrals(img, r);
    let box_sum = |t: &[f64], x: usize, y: usize| {
        let (x1, y1) = (x + cfg.window, y + cfg.window);
        t[y1 * stride + x1] - t[y * stride + x1] - t[y1 * stride + x] + t[y * stride + x]
    };
    let cu2 = cfg.cu * cfg.cu;
    let mut out = vec![0f64; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let m = box_sum(&s, x, y) / n;
            let v = (box_sum(&s2, x, y) / n - m * m).max(0.0);
            let k = if v > 0.0 { (1.0 - cu2 * m * m / v).max(0.0) } else { 0.0 };
            let xv = img.get(x, y) as f64;
            *o = (m + k * (xv - m)).clamp(0.0, 255.0);
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SradConfig {
    pub iterations: usize,
    pub dt: f64,
    /// `q0(t) = q0(0) * exp(-decay * t)` with `t = iteration * dt`.
    pub q0_decay: f64,
    /// Homogeneous region for the initial `q0`; the whole image if absent.
    pub roi: Option<RoiSpec>,
}

impl Default for SradConfig {
    fn default() -> Self {
        Self { iterations: 50, dt: 0.05, q0_decay: 1.0 / 6.0, roi: None }
    }
}

impl SradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 0.25) {
            return Err(Error::NonPositiveTimestep(self.dt));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("SRAD needs at least one iteration".into()));
        }
        if !(self.q0_decay >= 0.0 && self.q0_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!("q0 decay must be >= 0, got {}", self.q0_decay)));
        }
        Ok(())
    }
}

/// Diffusion coefficient from the instantaneous coefficient of variation.
#[inline]
fn diffusion(q2: f64, q02: f64) -> f64 {
    let den = q02 * (1.0 + q02);
    if den > 0.0 {
        (1.0 / (1.0 + (q2 - q02) / den)).clamp(0.0, 1.0)
    } else if q2 > 0.0 {
        0.0
    } else {
        1.0
    }
}

/// One SRAD update of `i` (strictly positive) with boundary differences
/// taken against the reflected (edge) pixel, i.e. zero flux.
pub fn srad_step(i: &[f64], w: usize, h: usize, q0: f64, dt: f64) -> Vec<f64> {
    let at = |x: usize, y: usize| i[y * w + x];
    let q02 = q0 * q0;
    let mut c = vec![0.0; w * h];
    c.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, cv) in row.iter_mut().enumerate() {
            let v = at(x, y);
            let dn = at(x, y.saturating_sub(1)) - v;
            let ds = at(x, (y + 1).min(h - 1)) - v;
            let dw = at(x.saturating_sub(1), y) - v;
            let de = at((x + 1).min(w - 1), y) - v;
            let g2 = (dn * dn + ds * ds + dw * dw + de * de) / (v * v);
            let l = (dn + ds + dw + de) / v;
            let q2 = ((0.5 * g2 - l * l / 16.0) / ((1.0 + 0.25 * l) * (1.0 + 0.25 * l))).max(0.0);
            *cv = diffusion(q2, q02);
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let v = at(x, y);
            let (ys, xe) = ((y + 1).min(h - 1), (x + 1).min(w - 1));
            let div = c[ys * w + x] * (at(x, ys) - v)
                + c[y * w + x] * (at(x, y.saturating_sub(1)) - v)
                + c[y * w + xe] * (at(xe, y) - v)
                + c[y * w + x] * (at(x.saturating_sub(1), y) - v);
            *o = v + dt / 4.0 * div;
        }
    });
    out
}

/// SRAD on `img + 1`; the offset is removed from the result, which keeps
/// the input domain.
pub fn srad_filter(img: &Image, cfg: &SradConfig) -> Result<Image> {
    srad_filter_observed(img, cfg, |_, _| {})
}

/// As `srad_filter`, calling `observe(iteration, state)` after every
/// iteration with the offset intensity.
pub fn srad_filter_observed(img: &Image, cfg: &SradConfig, mut observe: impl FnMut(usize, &[f64])) -> Result<Image> {
    cfg.validate()?;
    if img.domain() == Domain::Decibel {
        return Err(Error::InvalidImage("SRAD needs non-negative intensities, got decibel".into()));
    }
    let (w, h) = (img.width(), img.height());
    let mut i: Vec<f64> = img.data().iter().map(|&v| v as f64 + 1.0).collect();
    let offset = img.same_geometry(i.iter().map(|&v| v as f32).collect(), img.domain());
    let (m, v) = match &cfg.roi {
        Some(r) => region_stats(&offset, r)?,
        None => region_stats(&offset, &RoiSpec::region("image", 0, 0, w, h))?,
    };
    let q0_init = v.sqrt() / m;
    for it in 0..cfg.iterations {
        let q0 = q0_init * (-cfg.q0_decay * it as f64 * cfg.dt).exp();
        i = srad_step(&i, w, h, q0, cfg.dt);
        observe(it + 1, &i);
    }
    let data = i.iter().map(|&v| (v - 1.0).max(0.0) as f32).collect();
    Ok(img.same_geometry(data, img.domain()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::enl;
    use crate::rng::Stream;
    use crate::speckle::{simulate_bmode, SpeckleSimConfig};

    fn random(w: usize, h: usize, seed: u64) -> Image {
        let mut s = Stream::new(seed);
        Image::new(w, h, (0..w * h).map(|_| s.below(256) as f32).collect(), Domain::Display8).unwrap()
    }

    fn speckle(size: usize, seed: u64) -> Image {
        let echo = Image::filled(size, size, 1.0, Domain::LinearAmplitude).unwrap();
        let b = simulate_bmode(&echo, &SpeckleSimConfig { seed, ..Default::default() }).unwrap();
        crate::image::to_display(&b, 55.0).unwrap()
    }

    /// Direct windowed statistics with explicit reflection.
    fn lee_oracle(img: &Image, window: usize, cu: f64) -> Vec<f64> {
        let (w, h) = (img.width(), img.height());
        let r = (window / 2) as isize;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut vals = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = (reflect_index(x as isize + dx, w), reflect_index(y as isize + dy, h));
                        vals.push(img.get(sx, sy) as f64);
                    }
                }
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
                let k = if v > 0.0 { (1.0 - cu * cu * m * m / v).max(0.0) } else { 0.0 };
                out.push((m + k * (img.get(x, y) as f64 - m)).clamp(0.0, 255.0));
            }
        }
        out
    }

    #[test]
    fn lee_matches_brute_force() {
        for seed in 0..20 {
            let img = random(9, 9, seed);
            for (window, cu) in [(3, 0.3), (5, 0.52), (7, 0.1)] {
                let got = lee_values(&img, &LeeConfig { window, cu }).unwrap();
                for (a, b) in got.iter().zip(lee_oracle(&img, window, cu)) {
                    assert!((a - b).abs() <= 1e-6, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn lee_constant_and_config() {
        let c = Image::filled(12, 10, 77.0, Domain::Display8).unwrap();
        assert_eq!(lee_filter(&c, &LeeConfig { window: 7, cu: 0.5 }).unwrap(), c);
        assert!(matches!(lee_filter(&c, &LeeConfig { window: 4, cu: 0.5 }), Err(Error::InvalidConfig(_))));
        assert!(matches!(lee_filter(&c, &LeeConfig { window: 3, cu: 0.0 }), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn lee_raises_speckle_snr() {
        let img = speckle(96, 3);
        let roi = RoiSpec::region("bg", 16, 16, 80, 80);
        let cfg = LeeConfig::from_roi(&img, &roi).unwrap();
        let out = lee_filter(&img, &cfg).unwrap();
        assert!(crate::metrics::ssnr(&out, &roi).unwrap() > crate::metrics::ssnr(&img, &roi).unwrap());
    }

    #[test]
    fn srad_constant_is_fixed_point() {
        let c = Image::filled(16, 12, 40.0, Domain::Display8).unwrap();
        let mut worst = 0.0f64;
        srad_filter_observed(&c, &SradConfig { iterations: 20, ..Default::default() }, |_, s| {
            worst = s.iter().fold(worst, |a, v| a.max((v - 41.0).abs()));
        })
        .unwrap();
        assert!(worst <= 1e-9);
    }

    #[test]
    fn srad_conserves_mean_and_raises_enl() {
        let img = speckle(64, 4);
        let roi = RoiSpec::region("bg", 8, 8, 56, 56);
        let m0 = img.data().iter().map(|&v| v as f64 + 1.0).sum::<f64>();
        let mut prev_mean = m0;
        let mut prev_enl = enl(&img, &roi).unwrap();
        let cfg = SradConfig { iterations: 50, roi: Some(roi.clone()), ..Default::default() };
        srad_filter_observed(&img, &cfg, |it, s| {
            let m = s.iter().sum::<f64>();
            assert!(((m - prev_mean) / prev_mean).abs() <= 1e-3, "iteration {it}");
            prev_mean = m;
            let st = img.same_geometry(s.iter().map(|&v| v as f32).collect(), Domain::LinearAmplitude);
            let e = enl(&st, &roi).unwrap();
            assert!(e > prev_enl, "iteration {it}: {e} <= {prev_enl}");
            prev_enl = e;
        })
        .unwrap();
    }

    #[test]
    fn srad_rejects_bad_timestep() {
        let c = Image::filled(8, 8, 1.0, Domain::Display8).unwrap();
        for dt in [0.0, -0.1, 0.3] {
            let cfg = SradConfig { dt, ..Default::default() };
            assert!(matches!(srad_filter(&c, &cfg), Err(Error::NonPositiveTimestep(_))));
        }
    }
}
