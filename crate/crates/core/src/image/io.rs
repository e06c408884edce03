//! On-disk image formats.
//!
//! * Display8 images are binary PGM (`P5`, maxval 255) with one comment line
//!   `# dx=<mm> dz=<mm>` carrying the pixel spacing.
//! * Linear and decibel images use the raw `ESRI1` layout, all little-endian:
//!
//! ```text
//! "ESRI1"  u32 width  u32 height  u8 domain  f32 dx  f32 dz  f32 data[width*height]
//! ```

use std::path::Path;

use super::{Domain, Image, DEFAULT_SPACING_MM};
use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 5] = b"ESRI1";
const RAW_HEADER: usize = 5 + 4 + 4 + 1 + 4 + 4;

/// Writes Display8 images as PGM and everything else as raw `ESRI1`.
pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let bytes = match img.domain() {
        Domain::Display8 => write_pgm(img),
        _ => write_raw(img),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either format, dispatching on the magic bytes.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        read_pgm(&bytes)
    } else if bytes.len() < RAW_MAGIC.len() && RAW_MAGIC.starts_with(&bytes) {
        Err(Error::TruncatedFile)
    } else if bytes.starts_with(RAW_MAGIC) {
        read_raw(&bytes)
    } else {
        Err(Error::BadMagic)
    }
}

pub fn write_raw(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER + 4 * img.data().len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.push(img.domain().tag());
    out.extend_from_slice(&img.dx.to_le_bytes());
    out.extend_from_slice(&img.dz.to_le_bytes());
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < RAW_MAGIC.len() {
        return Err(Error::TruncatedFile);
    }
    if &bytes[..5] != RAW_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < RAW_HEADER {
        return Err(Error::TruncatedFile);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let width = u32_at(5) as usize;
    let height = u32_at(9) as usize;
    let domain = Domain::from_tag(bytes[13])?;
    let (dx, dz) = (f32_at(14), f32_at(18));
    let n = width.checked_mul(height).ok_or_else(|| Error::Malformed("image extents overflow".into()))?;
    let payload = &bytes[RAW_HEADER..];
    if payload.len() < 4 * n {
        return Err(Error::TruncatedFile);
    }
    if payload.len() > 4 * n {
        return Err(Error::Malformed(format!("{} trailing bytes", payload.len() - 4 * n)));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Image::new(width, height, data, domain)?.with_spacing(dx, dz))
}

pub fn write_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n# dx={} dz={}\n{} {}\n255\n", img.dx, img.dz, img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| v.clamp(0.0, 255.0).round() as u8));
    out
}

/// Header tokenizer that skips `#` comments, remembering their text.
struct PgmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
    comments: Vec<String>,
}

impl<'a> PgmHeader<'a> {
    fn token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos >= self.bytes.len() {
                return Err(Error::TruncatedFile);
            }
            if self.bytes[self.pos] == b'#' {
                let start = self.pos + 1;
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                self.comments.push(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned());
                continue;
            }
            let start = self.pos;
            while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            return std::str::from_utf8(&self.bytes[start..self.pos])
                .map_err(|_| Error::Malformed("non-ASCII PGM header".into()));
        }
    }

    fn number(&mut self) -> Result<u32> {
        let t = self.token()?;
        t.parse().map_err(|_| Error::Malformed(format!("bad PGM header field `{t}`")))
    }
}

fn parse_spacing(comments: &[String]) -> (f32, f32) {
    let (mut dx, mut dz) = (DEFAULT_SPACING_MM, DEFAULT_SPACING_MM);
    for c in comments {
        for field in c.split_whitespace() {
            if let Some(v) = field.strip_prefix("dx=").and_then(|v| v.parse().ok()) {
                dx = v;
            } else if let Some(v) = field.strip_prefix("dz=").and_then(|v| v.parse().ok()) {
                dz = v;
            }
        }
    }
    (dx, dz)
}

pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::BadMagic);
    }
    let mut hdr = PgmHeader { bytes, pos: 2, comments: Vec::new() };
    let width = hdr.number()? as usize;
    let height = hdr.number()? as usize;
    let maxval = hdr.number()?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates maxval from the raster
    let start = hdr.pos + 1;
    let n = width * height;
    if bytes.len() < start + n {
        return Err(Error::TruncatedFile);
    }
    let data = bytes[start..start + n].iter().map(|&b| b as f32).collect();
    let (dx, dz) = parse_spacing(&hdr.comments);
    Ok(Image::new(width, height, data, Domain::Display8)?.with_spacing(dx, dz))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_with_spacing_comment() {
        let mut bytes = b"P5\n# dx=0.2 dz=0.1\n4 4\n255\n".to_vec();
        bytes.extend((0u8..16).map(|i| i * 10));
        let img = read_pgm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (4, 4));
        assert_eq!((img.dx, img.dz), (0.2, 0.1));
        assert_eq!(img.get(3, 3), 150.0);
        assert_eq!(write_pgm(&img), bytes);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(read_pgm(b"P5\n2 2\n65535\n"), Err(Error::UnsupportedMaxval(65535))));
        assert!(matches!(read_pgm(b"P5\n2 2\n255\n\x01\x02"), Err(Error::TruncatedFile)));
        assert!(matches!(read_pgm(b"P5\n2"), Err(Error::TruncatedFile)));
        assert!(matches!(read_pgm(b"P2\n"), Err(Error::BadMagic)));
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let data = vec![-0.0, -1.5, -3.25e-7, -55.0, -0.1, -12.345_678];
        let img = Image::new(3, 2, data, Domain::Decibel).unwrap().with_spacing(0.3, 0.05);
        let bytes = write_raw(&img);
        let back = read_raw(&bytes).unwrap();
        assert_eq!(write_raw(&back), bytes);
        assert_eq!((back.width(), back.height(), back.domain()), (3, 2, Domain::Decibel));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn raw_errors() {
        let img = Image::filled(3, 2, 1.0, Domain::LinearAmplitude).unwrap();
        let bytes = write_raw(&img);
        assert!(matches!(read_raw(&bytes[..7]), Err(Error::TruncatedFile)));
        assert!(matches!(read_raw(&bytes[..bytes.len() - 1]), Err(Error::TruncatedFile)));
        assert!(matches!(read_raw(b"ESRX1aaaaaaaaaaaaaaaaaaaaaaa"), Err(Error::BadMagic)));
    }

    #[test]
    fn file_dispatch() {
        let dir = std::env::temp_dir().join(format!("esrie-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let disp = Image::new(2, 2, vec![0.0, 64.0, 128.0, 255.0], Domain::Display8).unwrap();
        let lin = Image::new(2, 2, vec![0.0, 0.5, 1.0, 2.0], Domain::LinearAmplitude).unwrap();
        for (img, name) in [(&disp, "a.pgm"), (&lin, "b.raw")] {
            let p = dir.join(name);
            write_image(img, &p).unwrap();
            assert_eq!(&read_image(&p).unwrap(), img);
        }
        let p = dir.join("short.raw");
        std::fs::write(&p, &write_raw(&lin)[..7]).unwrap();
        assert!(matches!(read_image(&p), Err(Error::TruncatedFile)));
        std::fs::write(&p, b"xyz").unwrap();
        assert!(matches!(read_image(&p), Err(Error::BadMagic)));
        std::fs::remove_dir_all(&dir).ok();
    }
}
