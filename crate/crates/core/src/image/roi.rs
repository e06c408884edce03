use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiKind {
    Region,
    LateralProfile,
    AxialProfile,
}

impl RoiKind {
    pub fn keyword(self) -> &'static str {
        match self {
            RoiKind::Region => "region",
            RoiKind::LateralProfile => "lateral",
            RoiKind::AxialProfile => "axial",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "region" => Ok(RoiKind::Region),
            "lateral" | "lateralprofile" => Ok(RoiKind::LateralProfile),
            "axial" | "axialprofile" => Ok(RoiKind::AxialProfile),
            other => Err(Error::InvalidRoi(format!("unknown ROI kind `{other}`"))),
        }
    }
}

/// Named rectangle `[x0, x1) x [z0, z1)` in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiSpec {
    pub name: String,
    pub x0: usize,
    pub z0: usize,
    pub x1: usize,
    pub z1: usize,
    pub kind: RoiKind,
}

impl RoiSpec {
    pub fn region(name: &str, x0: usize, z0: usize, x1: usize, z1: usize) -> Self {
        Self { name: name.to_string(), x0, z0, x1, z1, kind: RoiKind::Region }
    }

    /// One-pixel-thick row segment at depth `z` covering `[x0, x1)`.
    pub fn lateral(name: &str, z: usize, x0: usize, x1: usize) -> Self {
        Self { name: name.to_string(), x0, z0: z, x1, z1: z + 1, kind: RoiKind::LateralProfile }
    }

    /// One-pixel-thick column segment at `x` covering `[z0, z1)`.
    pub fn axial(name: &str, x: usize, z0: usize, z1: usize) -> Self {
        Self { name: name.to_string(), x0: x, z0, x1: x + 1, z1, kind: RoiKind::AxialProfile }
    }

    pub fn len(&self) -> usize {
        (self.x1 - self.x0) * (self.z1 - self.z0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the geometry against an image of the given extents.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.x0 < self.x1 && self.x1 <= width && self.z0 < self.z1 && self.z1 <= height) {
            return Err(Error::InvalidRoi(format!(
                "`{}` [{}, {}) x [{}, {}) does not fit a {width}x{height} image",
                self.name, self.x0, self.x1, self.z0, self.z1
            )));
        }
        match self.kind {
            RoiKind::LateralProfile if self.z1 - self.z0 != 1 => {
                Err(Error::InvalidRoi(format!("lateral profile `{}` must be one row thick", self.name)))
            }
            RoiKind::AxialProfile if self.x1 - self.x0 != 1 => {
                Err(Error::InvalidRoi(format!("axial profile `{}` must be one column thick", self.name)))
            }
            _ => Ok(()),
        }
    }

    pub fn to_line(&self) -> String {
        format!("{} {} {} {} {} {}", self.name, self.kind.keyword(), self.x0, self.z0, self.x1, self.z1)
    }
}

/// Parses the line-oriented ROI grammar `name kind x0 z0 x1 z1`.
/// Blank lines and `#` comments are ignored.
pub fn parse_roi_file(text: &str) -> Result<Vec<RoiSpec>> {
    let mut rois = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::InvalidRoi(format!(
                "line {}: expected `name kind x0 z0 x1 z1`, got {} fields",
                lineno + 1,
                fields.len()
            )));
        }
        let coord = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::InvalidRoi(format!("line {}: bad coordinate `{s}`", lineno + 1)))
        };
        rois.push(RoiSpec {
            name: fields[0].to_string(),
            kind: RoiKind::parse(fields[1])?,
            x0: coord(fields[2])?,
            z0: coord(fields[3])?,
            x1: coord(fields[4])?,
            z1: coord(fields[5])?,
        });
    }
    Ok(rois)
}

pub fn read_roi_file(path: &Path) -> Result<Vec<RoiSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_roi_file(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_grammar() {
        let text = "# cyst phantom\nbackground region 10 20 30 40\nline lateral 0 5 64 6  # profile\n";
        let rois = parse_roi_file(text).unwrap();
        assert_eq!(rois.len(), 2);
        assert_eq!(rois[0], RoiSpec::region("background", 10, 20, 30, 40));
        assert_eq!(rois[1], RoiSpec::lateral("line", 5, 0, 64));
        assert_eq!(parse_roi_file(&rois[1].to_line()).unwrap()[0], rois[1]);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_roi_file("a region 1 2 3").is_err());
        assert!(parse_roi_file("a blob 1 2 3 4").is_err());
        assert!(parse_roi_file("a region 1 x 3 4").is_err());
    }

    #[test]
    fn validates_geometry() {
        assert!(RoiSpec::region("r", 0, 0, 4, 4).validate(4, 4).is_ok());
        assert!(RoiSpec::region("r", 2, 0, 2, 4).validate(4, 4).is_err());
        assert!(RoiSpec::region("r", 0, 0, 5, 4).validate(4, 4).is_err());
        let thick = RoiSpec { kind: RoiKind::LateralProfile, ..RoiSpec::region("p", 0, 0, 4, 2) };
        assert!(thick.validate(4, 4).is_err());
    }
}
