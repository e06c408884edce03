//! Fixtures shared by the benchmarks.

use esrie_core::image::{cyst2_preset, make_phantom, to_display};
use esrie_core::net::{build_seeded, Model};
use esrie_core::quant::{calibrate, quantize, IntModel};
use esrie_core::speckle::{simulate_bmode, SpeckleSimConfig};
use esrie_core::{Image, Result};

/// The cyst2 phantom as a display image, cropped to `size x size`.
pub fn cyst2_image(size: usize) -> Result<Image> {
    let (spec, _) = cyst2_preset();
    let img = to_display(&simulate_bmode(&make_phantom(&spec)?, &SpeckleSimConfig::default())?, 55.0)?;
    img.crop(0, 0, size.min(img.width()), size.min(img.height()))
}

/// A seeded float model and its integer compilation, calibrated on `img`.
pub fn models(img: &Image) -> Result<(Model, IntModel)> {
    let m = build_seeded(0);
    let qp = calibrate(&m, std::slice::from_ref(img))?.params(&m)?;
    let im = quantize(&m, Some(&qp))?.compile()?;
    Ok((m, im))
}
