use super::{Domain, Image, RoiSpec};
use crate::error::{Error, Result};

/// A disk of constant echogenicity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inclusion {
    pub cx: f64,
    pub cz: f64,
    pub radius: f64,
    pub echo: f32,
}

impl Inclusion {
    /// Pixel centres at distance <= radius from the disk centre are inside.
    #[inline]
    pub fn contains(&self, x: usize, z: usize) -> bool {
        let dx = x as f64 - self.cx;
        let dz = z as f64 - self.cz;
        dx * dx + dz * dz <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub background_echo: f32,
    pub inclusions: Vec<Inclusion>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("phantom extents must be >= 1".into()));
        }
        if !(self.background_echo >= 0.0) {
            return Err(Error::InvalidConfig("background echo must be >= 0".into()));
        }
        for (index, inc) in self.inclusions.iter().enumerate() {
            let fits = inc.radius >= 0.0
                && inc.cx - inc.radius >= 0.0
                && inc.cz - inc.radius >= 0.0
                && inc.cx + inc.radius <= (self.width - 1) as f64
                && inc.cz + inc.radius <= (self.height - 1) as f64;
            if !fits {
                return Err(Error::InclusionOutOfBounds { index, width: self.width, height: self.height });
            }
            if !(inc.echo >= 0.0) {
                return Err(Error::InvalidConfig(format!("inclusion {index} has negative echo")));
            }
        }
        Ok(())
    }
}

/// Rasterises the phantom into a linear echogenicity map. Where inclusions
/// overlap, the first listed one wins.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Image> {
    spec.validate()?;
    let mut data = Vec::with_capacity(spec.width * spec.height);
    for z in 0..spec.height {
        for x in 0..spec.width {
            let echo =
                spec.inclusions.iter().find(|inc| inc.contains(x, z)).map_or(spec.background_echo, |inc| inc.echo);
            data.push(echo);
        }
    }
    Ok(Image::from_parts(spec.width, spec.height, data, Domain::LinearAmplitude))
}

/// The two-inclusion 256x256 evaluation phantom: an anechoic cyst on the
/// left and a +6 dB hyperechoic disk on the right, with matching ROIs
/// (`background`, `cyst`, `bright`, and the lateral `profile` through both
/// inclusion centres).
pub fn cyst2_preset() -> (PhantomSpec, Vec<RoiSpec>) {
    let spec = PhantomSpec {
        width: 256,
        height: 256,
        background_echo: 1.0,
        inclusions: vec![
            Inclusion { cx: 80.0, cz: 128.0, radius: 44.0, echo: 0.0 },
            Inclusion { cx: 180.0, cz: 128.0, radius: 44.0, echo: 2.0 },
        ],
    };
    let rois = vec![
        RoiSpec::region("background", 104, 16, 152, 64),
        RoiSpec::region("cyst", 64, 112, 96, 144),
        RoiSpec::region("bright", 164, 112, 196, 144),
        RoiSpec::lateral("profile", 128, 16, 240),
    ];
    (spec, rois)
}
