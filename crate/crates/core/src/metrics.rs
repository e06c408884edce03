//! Image-quality metrics: CNR, SSNR, ENL, AGM and global SSIM.
//!
//! Statistics are population moments (divide by `n`) computed in f64. The
//! evaluation protocol applies these to Display8 values; the SSIM constants
//! are `(0.01 * 255)^2` and `(0.03 * 255)^2`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{Image, RoiKind, RoiSpec};

pub const SSIM_C1: f64 = 6.5025;
pub const SSIM_C2: f64 = 58.5225;

/// Mean and population variance.
pub fn moments(values: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, 0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var, n)
}

fn region_values<'a>(img: &'a Image, r: &RoiSpec) -> Result<impl Iterator<Item = f64> + 'a> {
    if r.kind != RoiKind::Region {
        return Err(Error::WrongRoiKind(format!("`{}` must be a region", r.name)));
    }
    r.validate(img.width(), img.height())?;
    let (x0, x1, z0, z1) = (r.x0, r.x1, r.z0, r.z1);
    Ok((z0..z1).flat_map(move |z| img.row(z)[x0..x1].iter().map(|&v| v as f64)))
}

/// Mean and population variance over a region ROI.
pub fn region_stats(img: &Image, r: &RoiSpec) -> Result<(f64, f64)> {
    let (m, v, _) = moments(region_values(img, r)?);
    Ok((m, v))
}

/// `20 log10(|mu_B - mu_C| / sqrt(var_B + var_C))`. Equal means give `-inf`.
pub fn cnr(img: &Image, rb: &RoiSpec, rc: &RoiSpec) -> Result<f64> {
    let (mb, vb) = region_stats(img, rb)?;
    let (mc, vc) = region_stats(img, rc)?;
    let denom = (vb + vc).sqrt();
    if denom == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(20.0 * ((mb - mc).abs() / denom).log10())
}

/// `mu / sigma` over the region.
pub fn ssnr(img: &Image, r: &RoiSpec) -> Result<f64> {
    let (m, v) = region_stats(img, r)?;
    if v == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(m / v.sqrt())
}

/// `mu^2 / sigma^2` over the region.
pub fn enl(img: &Image, r: &RoiSpec) -> Result<f64> {
    let (m, v) = region_stats(img, r)?;
    if v == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(m * m / v)
}

/// Mean absolute first difference of a profile.
pub fn agm(profile: &[f32]) -> Result<f64> {
    if profile.len() < 2 {
        return Err(Error::ProfileTooShort(profile.len()));
    }
    let total: f64 = profile.windows(2).map(|w| (w[1] as f64 - w[0] as f64).abs()).sum();
    Ok(total / (profile.len() - 1) as f64)
}

/// Global SSIM: one application of the SSIM formula over whole images.
pub fn ssim(f: &Image, g: &Image) -> Result<f64> {
    if f.width() != g.width() || f.height() != g.height() {
        return Err(Error::ShapeMismatch(format!(
            "ssim of {}x{} and {}x{}",
            f.width(),
            f.height(),
            g.width(),
            g.height()
        )));
    }
    if f.data() == g.data() {
        return Ok(1.0);
    }
    let n = f.data().len() as f64;
    let mf = f.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mg = g.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut vf, mut vg, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in f.data().iter().zip(g.data()) {
        let (da, db) = (a as f64 - mf, b as f64 - mg);
        vf += da * da;
        vg += db * db;
        cov += da * db;
    }
    let (vf, vg, cov) = (vf / n, vg / n, cov / n);
    Ok((2.0 * mf * mg + SSIM_C1) * (2.0 * cov + SSIM_C2) / ((mf * mf + mg * mg + SSIM_C1) * (vf + vg + SSIM_C2)))
}

/// Pixel values along a profile ROI in index order.
pub fn extract_profile(img: &Image, r: &RoiSpec) -> Result<Vec<f32>> {
    r.validate(img.width(), img.height())?;
    match r.kind {
        RoiKind::LateralProfile => Ok(img.row(r.z0)[r.x0..r.x1].to_vec()),
        RoiKind::AxialProfile => Ok((r.z0..r.z1).map(|z| img.get(r.x0, z)).collect()),
        RoiKind::Region => Err(Error::WrongRoiKind(format!("`{}` is not a profile", r.name))),
    }
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub image_id: String,
    pub method: String,
    pub cnr: f64,
    pub ssnr: f64,
    pub enl: f64,
    pub agm: f64,
    pub ssim: f64,
    /// Names of the background, contrast and profile ROIs used.
    pub rois: Vec<String>,
    pub params: Option<usize>,
    pub flops: Option<u64>,
    pub fps: Option<f64>,
}

impl MetricReport {
    /// Evaluates one processed image against the reference (unprocessed)
    /// input using a background ROI, a contrast ROI and a profile ROI.
    pub fn evaluate(
        image_id: &str,
        method: &str,
        processed: &Image,
        reference: &Image,
        background: &RoiSpec,
        contrast: &RoiSpec,
        profile: &RoiSpec,
    ) -> Result<Self> {
        Ok(Self {
            image_id: image_id.to_string(),
            method: method.to_string(),
            cnr: cnr(processed, background, contrast)?,
            ssnr: ssnr(processed, background)?,
            enl: enl(processed, background)?,
            agm: agm(&extract_profile(processed, profile)?)?,
            ssim: ssim(processed, reference)?,
            rois: vec![background.name.clone(), contrast.name.clone(), profile.name.clone()],
            ..Default::default()
        })
    }

    /// Line-oriented `key=value` record.
    pub fn to_record(&self) -> String {
        let mut s = format!(
            "image={} method={} cnr={:.6} ssnr={:.6} enl={:.6} agm={:.6} ssim={:.6} rois={}",
            self.image_id,
            self.method,
            self.cnr,
            self.ssnr,
            self.enl,
            self.agm,
            self.ssim,
            self.rois.join(",")
        );
        if let Some(p) = self.params {
            write!(s, " params={p}").unwrap();
        }
        if let Some(f) = self.flops {
            write!(s, " flops={f}").unwrap();
        }
        if let Some(f) = self.fps {
            write!(s, " fps={f:.3}").unwrap();
        }
        s
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Aligned plain-text table: one row per method, metric columns in the
/// order CNR, SSNR, ENL, AGM, SSIM, followed by Params/FLOPs/FPS when any
/// row carries them.
pub fn render_table(rows: &[MetricReport]) -> String {
    let with_cost = rows.iter().any(|r| r.params.is_some() || r.flops.is_some() || r.fps.is_some());
    let mut header = vec!["Method", "CNR", "SSNR", "ENL", "AGM", "SSIM"];
    if with_cost {
        header.extend(["Params", "FLOPs", "FPS"]);
    }
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let mut line = vec![
            r.method.clone(),
            format!("{:.2}", r.cnr),
            format!("{:.2}", r.ssnr),
            format!("{:.2}", r.enl),
            format!("{:.2}", r.agm),
            format!("{:.2}", r.ssim),
        ];
        if with_cost {
            line.push(opt(r.params));
            line.push(opt(r.flops));
            line.push(opt(r.fps.map(|f| format!("{f:.2}"))));
        }
        cells.push(line);
    }
    let ncol = cells[0].len();
    let widths: Vec<usize> = (0..ncol).map(|c| cells.iter().map(|row| row[c].len()).max().unwrap()).collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                write!(line, "{:<w$}", cell, w = widths[c]).unwrap();
            } else {
                write!(line, "  {:>w$}", cell, w = widths[c]).unwrap();
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (ncol - 1)));
            out.push('\n');
        }
    }
    out
}

/// CSV with a header row, `,` delimiter and LF line endings.
pub fn render_csv(rows: &[MetricReport]) -> String {
    let mut out = String::from("image,method,cnr,ssnr,enl,agm,ssim,params,flops,fps\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.image_id,
            r.method,
            r.cnr,
            r.ssnr,
            r.enl,
            r.agm,
            r.ssim,
            r.params.map(|v| v.to_string()).unwrap_or_default(),
            r.flops.map(|v| v.to_string()).unwrap_or_default(),
            r.fps.map(|v| format!("{v:.3}")).unwrap_or_default(),
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Domain;

    fn img(w: usize, h: usize, data: Vec<f32>) -> Image {
        Image::new(w, h, data, Domain::Display8).unwrap()
    }

    #[test]
    fn cnr_hand_value() {
        // left column 12,8,12,8 (mu 10, var 4); right column all 2
        let im = img(2, 4, vec![12.0, 2.0, 8.0, 2.0, 12.0, 2.0, 8.0, 2.0]);
        let rb = RoiSpec::region("b", 0, 0, 1, 4);
        let rc = RoiSpec::region("c", 1, 0, 2, 4);
        let v = cnr(&im, &rb, &rc).unwrap();
        assert!((v - 20.0 * 4f64.log10()).abs() < 1e-9);
        assert!((v - 12.0412).abs() < 1e-4);
        assert_eq!(cnr(&im, &rc, &rb).unwrap(), v);
    }

    #[test]
    fn cnr_degenerate() {
        let im = img(2, 2, vec![5.0; 4]);
        let a = RoiSpec::region("a", 0, 0, 1, 2);
        let b = RoiSpec::region("b", 1, 0, 2, 2);
        assert!(matches!(cnr(&im, &a, &b), Err(Error::ZeroDenominator)));
        let im = img(2, 2, vec![1.0, 1.0, 3.0, 3.0]);
        assert_eq!(cnr(&im, &a, &b).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn ssnr_enl_hand_values() {
        let im = img(2, 1, vec![1.0, 3.0]);
        let r = RoiSpec::region("r", 0, 0, 2, 1);
        assert!((ssnr(&im, &r).unwrap() - 2.0).abs() < 1e-12);
        assert!((enl(&im, &r).unwrap() - 4.0).abs() < 1e-12);
        let flat = img(2, 1, vec![3.0, 3.0]);
        assert!(matches!(ssnr(&flat, &r), Err(Error::ZeroVariance)));
        assert!(matches!(enl(&flat, &r), Err(Error::ZeroVariance)));
    }

    #[test]
    fn agm_hand_values() {
        assert_eq!(agm(&[0.0, 2.0, 1.0]).unwrap(), 1.5);
        assert_eq!(agm(&[4.0, 4.0, 4.0]).unwrap(), 0.0);
        assert_eq!(agm(&[0.0, 1.0, 0.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(agm(&[1.0]), Err(Error::ProfileTooShort(1))));
    }

    #[test]
    fn ssim_hand_values() {
        let f = img(3, 2, vec![0.0; 6]);
        let g = img(3, 2, vec![1.0; 6]);
        assert!((ssim(&f, &g).unwrap() - 6.5025 / 7.5025).abs() < 1e-12);
        assert_eq!(ssim(&g, &g).unwrap(), 1.0);
        assert!(matches!(ssim(&f, &img(2, 3, vec![0.0; 6])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn profiles() {
        let im = img(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(extract_profile(&im, &RoiSpec::lateral("l", 1, 0, 4)).unwrap(), vec![5.0, 6.0, 7.0, 8.0]);
        let col = img(1, 4, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(extract_profile(&col, &RoiSpec::axial("a", 0, 0, 4)).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(extract_profile(&im, &RoiSpec::region("r", 0, 0, 2, 2)), Err(Error::WrongRoiKind(_))));
        assert!(matches!(ssnr(&im, &RoiSpec::lateral("l", 0, 0, 4)), Err(Error::WrongRoiKind(_))));
    }

    #[test]
    fn step_profile_has_one_edge() {
        let w = 20;
        let data: Vec<f32> = (0..3 * w).map(|i| if i % w < 13 { 40.0 } else { 200.0 }).collect();
        let im = img(w, 3, data);
        let p = extract_profile(&im, &RoiSpec::lateral("l", 1, 0, w)).unwrap();
        assert_eq!(p.windows(2).filter(|d| d[1] != d[0]).count(), 1);
    }

    #[test]
    fn table_and_records() {
        let rows = vec![
            MetricReport {
                method: "input".into(),
                cnr: 11.69,
                ssnr: 6.55,
                enl: 42.9025,
                agm: 13.9,
                ssim: 1.0,
                ..Default::default()
            },
            MetricReport {
                method: "lee".into(),
                cnr: 17.5,
                ssnr: 10.0,
                enl: 100.0,
                agm: 5.271,
                ssim: 0.961,
                ..Default::default()
            },
        ];
        let expected = "\
Method    CNR   SSNR     ENL    AGM  SSIM
-----------------------------------------
input   11.69   6.55   42.90  13.90  1.00
lee     17.50  10.00  100.00   5.27  0.96
";
        assert_eq!(render_table(&rows), expected);
        assert!(rows[1].to_record().starts_with("image= method=lee cnr=17.500000"));
        assert_eq!(render_csv(&rows).lines().count(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn image_strategy() -> impl Strategy<Value = Image> {
            (2usize..12, 2usize..12).prop_flat_map(|(w, h)| {
                prop::collection::vec(0u8..=255, w * h)
                    .prop_map(move |v| img(w, h, v.into_iter().map(f32::from).collect()))
            })
        }

        proptest! {
            #[test]
            fn enl_is_ssnr_squared(im in image_strategy()) {
                let r = RoiSpec::region("r", 0, 0, im.width(), im.height());
                if let (Ok(s), Ok(e)) = (ssnr(&im, &r), enl(&im, &r)) {
                    prop_assert!(((s * s - e) / e).abs() <= 1e-12);
                }
            }

            #[test]
            fn ssim_symmetric_and_bounded(a in image_strategy(), seed in any::<u64>()) {
                let mut s = crate::rng::Stream::new(seed);
                let noise: Vec<f32> = (0..a.data().len()).map(|_| s.below(256) as f32).collect();
                let b = img(a.width(), a.height(), noise);
                let ab = ssim(&a, &b).unwrap();
                prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-15);
                prop_assert!(ab <= 1.0 + 1e-12);
                if a.data() != b.data() {
                    prop_assert!(ab < 1.0);
                }
            }

            #[test]
            fn agm_reversal_and_shift(p in prop::collection::vec(0f32..255.0, 2..64), c in -50f32..50.0) {
                let a = agm(&p).unwrap();
                let rev: Vec<f32> = p.iter().rev().copied().collect();
                let shifted: Vec<f32> = p.iter().map(|v| v + c).collect();
                prop_assert!((agm(&rev).unwrap() - a).abs() < 1e-9);
                prop_assert!((agm(&shifted).unwrap() - a).abs() < 1e-3);
            }

            #[test]
            fn cnr_shift_invariant(im in image_strategy(), c in 0u8..40) {
                let (w, h) = (im.width(), im.height());
                let rb = RoiSpec::region("b", 0, 0, w / 2 + w % 2, h);
                let rc = RoiSpec::region("c", w / 2 + w % 2, 0, w, h);
                if rc.validate(w, h).is_err() { return Ok(()); }
                let shifted = im.map_to(Domain::Display8, |v| (v + c as f32).min(255.0));
                if shifted.data().contains(&255.0) { return Ok(()); }
                if let (Ok(a), Ok(b)) = (cnr(&im, &rb, &rc), cnr(&shifted, &rb, &rc)) {
                    prop_assert!((a - b).abs() < 1e-9 || (a.is_infinite() && b.is_infinite()));
                    prop_assert!((cnr(&im, &rc, &rb).unwrap() - a).abs() < 1e-12 || a.is_infinite());
                }
            }
        }
    }
}
