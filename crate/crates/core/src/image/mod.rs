//! Grayscale images with an explicit value domain, display conversions,
//! ROI geometry, synthetic phantoms and file I/O.
//!
//! All integer-producing conversions round half away from zero (`f64::round`).

mod io;
mod phantom;
mod roi;

pub use io::{read_image, read_pgm, read_raw, write_image, write_pgm, write_raw};
pub use phantom::{cyst2_preset, make_phantom, Inclusion, PhantomSpec};
pub use roi::{parse_roi_file, read_roi_file, RoiKind, RoiSpec};

use crate::error::{Error, Result};

/// Default pixel spacing in millimetres, carried as metadata only.
pub const DEFAULT_SPACING_MM: f32 = 0.1;

/// Default display dynamic range in dB.
pub const DEFAULT_RANGE_DB: f64 = 55.0;

/// Which quantity the pixel values represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    /// Envelope or echogenicity amplitude, non-negative.
    LinearAmplitude,
    /// Log-compressed, referenced to the image maximum (values <= 0).
    Decibel,
    /// Display gray levels in [0, 255].
    Display8,
}

impl Domain {
    pub fn tag(self) -> u8 {
        match self {
            Domain::LinearAmplitude => 0,
            Domain::Decibel => 1,
            Domain::Display8 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Domain::LinearAmplitude),
            1 => Ok(Domain::Decibel),
            2 => Ok(Domain::Display8),
            t => Err(Error::Malformed(format!("unknown domain tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::LinearAmplitude => "linear",
            Domain::Decibel => "db",
            Domain::Display8 => "display8",
        }
    }
}

/// Row-major 2-D image. `z` is the axial (row) axis, `x` the lateral (column) axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
    domain: Domain,
    /// Lateral spacing, mm per pixel.
    pub dx: f32,
    /// Axial spacing, mm per pixel.
    pub dz: f32,
}

impl Image {
    /// Builds an image, checking extents and the domain's value range.
    pub fn new(width: usize, height: usize, data: Vec<f32>, domain: Domain) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("extents {width}x{height} must be >= 1")));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!("data length {} != {width}x{height}", data.len())));
        }
        let bad = data.iter().position(|&v| match domain {
            Domain::LinearAmplitude => !(v >= 0.0 && v.is_finite()),
            Domain::Decibel => !(v <= 0.0),
            Domain::Display8 => !(0.0..=255.0).contains(&v),
        });
        if let Some(i) = bad {
            return Err(Error::InvalidImage(format!(
                "value {} at index {i} is outside the {} domain",
                data[i],
                domain.name()
            )));
        }
        Ok(Self::from_parts(width, height, data, domain))
    }

    /// Constructor for values that are valid by construction.
    pub(crate) fn from_parts(width: usize, height: usize, data: Vec<f32>, domain: Domain) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self { width, height, data, domain, dx: DEFAULT_SPACING_MM, dz: DEFAULT_SPACING_MM }
    }

    pub fn filled(width: usize, height: usize, value: f32, domain: Domain) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], domain)
    }

    pub fn with_spacing(mut self, dx: f32, dz: f32) -> Self {
        self.dx = dx;
        self.dz = dz;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, z: usize) -> f32 {
        self.data[z * self.width + x]
    }

    pub fn row(&self, z: usize) -> &[f32] {
        &self.data[z * self.width..(z + 1) * self.width]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Copies out the `w`x`h` window whose top-left corner is `(x0, z0)`.
    pub fn crop(&self, x0: usize, z0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || z0 + h > self.height {
            return Err(Error::ShapeMismatch(format!("crop {w}x{h}+{x0}+{z0} outside {}x{}", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(w * h);
        for z in z0..z0 + h {
            data.extend_from_slice(&self.row(z)[x0..x0 + w]);
        }
        Ok(Image { width: w, height: h, data, domain: self.domain, dx: self.dx, dz: self.dz })
    }

    /// Returns a copy with each pixel mapped through `f`, tagged with `domain`.
    pub(crate) fn map_to(&self, domain: Domain, f: impl Fn(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
            domain,
            dx: self.dx,
            dz: self.dz,
        }
    }

    pub(crate) fn same_geometry(&self, data: Vec<f32>, domain: Domain) -> Image {
        debug_assert_eq!(data.len(), self.data.len());
        Image { width: self.width, height: self.height, data, domain, dx: self.dx, dz: self.dz }
    }

    fn expect_domain(&self, domain: Domain) -> Result<()> {
        if self.domain != domain {
            return Err(Error::InvalidImage(format!("expected {} image, got {}", domain.name(), self.domain.name())));
        }
        Ok(())
    }
}

/// Log compression referenced to the image maximum:
/// `max(20 log10(v / max), floor_db)`.
pub fn to_decibel(img: &Image, floor_db: f64) -> Result<Image> {
    img.expect_domain(Domain::LinearAmplitude)?;
    if !(floor_db < 0.0) {
        return Err(Error::InvalidConfig(format!("floor_db must be negative, got {floor_db}")));
    }
    let max = img.max() as f64;
    if !(max > 0.0) {
        return Err(Error::AllZeroImage);
    }
    Ok(img.map_to(Domain::Decibel, |v| {
        let db = 20.0 * (v as f64 / max).log10();
        // log10(0) = -inf also lands on the floor
        db.max(floor_db) as f32
    }))
}

/// Linear map of `[-range_db, 0]` onto `[0, 255]`, clamped and rounded.
pub fn to_display(img: &Image, range_db: f64) -> Result<Image> {
    img.expect_domain(Domain::Decibel)?;
    if !(range_db > 0.0) {
        return Err(Error::InvalidConfig(format!("range_db must be positive, got {range_db}")));
    }
    Ok(img.map_to(Domain::Display8, |v| display_level(v as f64, range_db)))
}

#[inline]
pub(crate) fn display_level(db: f64, range_db: f64) -> f32 {
    let level = (db + range_db) / range_db * 255.0;
    level.clamp(0.0, 255.0).round() as f32
}

/// Inverts the display mapping back to a linear amplitude in `(0, 1]`.
///
/// Gray level 0 maps to amplitude 0: everything at or below the display floor
/// is treated as carrying no echo.
pub fn display_to_linear(img: &Image, range_db: f64) -> Result<Image> {
    img.expect_domain(Domain::Display8)?;
    if !(range_db > 0.0) {
        return Err(Error::InvalidConfig(format!("range_db must be positive, got {range_db}")));
    }
    Ok(img.map_to(Domain::LinearAmplitude, |v| {
        if v <= 0.0 {
            0.0
        } else {
            let db = v as f64 / 255.0 * range_db - range_db;
            10f64.powf(db / 20.0) as f32
        }
    }))
}

/// Converts any image to a linear echogenicity map, the form the speckle
/// simulator consumes.
pub fn to_echogenicity(img: &Image, range_db: f64) -> Result<Image> {
    match img.domain() {
        Domain::LinearAmplitude => Ok(img.clone()),
        Domain::Display8 => display_to_linear(img, range_db),
        Domain::Decibel => Ok(img.map_to(Domain::LinearAmplitude, |v| 10f64.powf(v as f64 / 20.0) as f32)),
    }
}

/// Half-sample symmetric reflection of an index into `0..n` (`... b a | a b c ...`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Pads the bottom and right edges by reflection so both extents become
/// multiples of `multiple`. Returns the image unchanged when already aligned.
pub fn pad_reflect_to_multiple(img: &Image, multiple: usize) -> Image {
    let w = img.width.div_ceil(multiple) * multiple;
    let h = img.height.div_ceil(multiple) * multiple;
    if w == img.width && h == img.height {
        return img.clone();
    }
    let mut data = Vec::with_capacity(w * h);
    for z in 0..h {
        let sz = reflect_index(z as isize, img.height);
        let row = img.row(sz);
        for x in 0..w {
            data.push(row[reflect_index(x as isize, img.width)]);
        }
    }
    Image { width: w, height: h, data, domain: img.domain, dx: img.dx, dz: img.dz }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(v: &[f32]) -> Image {
        Image::new(v.len(), 1, v.to_vec(), Domain::LinearAmplitude).unwrap()
    }

    #[test]
    fn decibel_powers_of_ten() {
        let out = to_decibel(&linear(&[1.0, 10.0, 100.0]), -55.0).unwrap();
        assert_eq!(out.data(), &[-40.0, -20.0, 0.0]);
        assert_eq!(out.domain(), Domain::Decibel);
    }

    #[test]
    fn decibel_constant_and_floor() {
        assert_eq!(to_decibel(&linear(&[5.0, 5.0]), -55.0).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(to_decibel(&linear(&[1.0, 1e-9]), -55.0).unwrap().data(), &[0.0, -55.0]);
        assert_eq!(to_decibel(&linear(&[1.0, 0.0]), -55.0).unwrap().data(), &[0.0, -55.0]);
    }

    #[test]
    fn decibel_all_zero_fails() {
        assert!(matches!(to_decibel(&linear(&[0.0, 0.0]), -55.0), Err(Error::AllZeroImage)));
    }

    #[test]
    fn display_levels() {
        let db = Image::new(4, 1, vec![0.0, -55.0, -27.5, -80.0], Domain::Decibel).unwrap();
        let out = to_display(&db, 55.0).unwrap();
        assert_eq!(out.data(), &[255.0, 0.0, 128.0, 0.0]);
    }

    #[test]
    fn domain_validation() {
        assert!(Image::new(2, 1, vec![-1.0, 0.0], Domain::LinearAmplitude).is_err());
        assert!(Image::new(2, 1, vec![0.5, 0.0], Domain::Decibel).is_err());
        assert!(Image::new(2, 1, vec![256.0, 0.0], Domain::Display8).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3], Domain::Display8).is_err());
        assert!(Image::new(0, 2, vec![], Domain::Display8).is_err());
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn pad_to_sixteen() {
        let img = Image::filled(100, 100, 3.0, Domain::Display8).unwrap();
        let p = pad_reflect_to_multiple(&img, 16);
        assert_eq!((p.width(), p.height()), (112, 112));
        let q = pad_reflect_to_multiple(&p, 16);
        assert_eq!((q.width(), q.height()), (112, 112));
    }

    #[test]
    fn display_inverse_recovers_levels() {
        let db = Image::new(3, 1, vec![0.0, -20.0, -40.0], Domain::Decibel).unwrap();
        let disp = to_display(&db, 55.0).unwrap();
        let lin = display_to_linear(&disp, 55.0).unwrap();
        let back = to_display(&to_decibel(&lin, -55.0).unwrap(), 55.0).unwrap();
        assert_eq!(back.data(), disp.data());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn decibel_inverts_above_floor(vals in prop::collection::vec(1e-2f32..1e3, 1..64)) {
                let img = linear(&vals);
                let max = img.max() as f64;
                let db = to_decibel(&img, -120.0).unwrap();
                for (&v, &d) in vals.iter().zip(db.data()) {
                    let back = 10f64.powf(d as f64 / 20.0) * max;
                    prop_assert!(((back - v as f64) / v as f64).abs() < 1e-6);
                }
            }

            #[test]
            fn display_is_monotone(a in -100.0f32..0.0, b in -100.0f32..0.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let img = Image::new(2, 1, vec![lo, hi], Domain::Decibel).unwrap();
                let d = to_display(&img, 55.0).unwrap();
                prop_assert!(d.data()[0] <= d.data()[1]);
            }
        }
    }
}
