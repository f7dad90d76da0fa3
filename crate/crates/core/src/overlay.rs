//! Color overlays of predicted masks on grayscale inputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::pnm::{self, GrayImage};
use crate::tensor::Tensor;

/// Interleaved RGB bytes: each channel is `0.5 * gray + 0.5 * tint` with
/// tint red `1 - m`, green 0 and blue `m`.
pub fn blend(gray: &[f64], mask: &[f64]) -> Result<Vec<u8>> {
    if gray.len() != mask.len() {
        return Err(Error::ValueCount {
            expected: gray.len(),
            actual: mask.len(),
        });
    }
    let mut out = Vec::with_capacity(gray.len() * 3);
    for (&v, &m) in gray.iter().zip(mask) {
        let m = m.clamp(0.0, 1.0);
        out.push(pnm::quantize(0.5 * v + 0.5 * (1.0 - m)));
        out.push(pnm::quantize(0.5 * v));
        out.push(pnm::quantize(0.5 * v + 0.5 * m));
    }
    Ok(out)
}

/// Predicted mask of a segmenter for one image, row-major.
pub fn predict_mask(model: &Model, image: &GrayImage) -> Result<Vec<f64>> {
    if model.kind() != ModelKind::Segmenter {
        return Err(Error::Invalid("overlay needs a segmenter model, got a classifier".into()));
    }
    let (h, w) = model.config().input_size;
    if (image.height, image.width) != (h, w) {
        return Err(Error::ShapeMismatch(vec![h, w], vec![image.height, image.width]));
    }
    let x = Tensor::from_vec(&[1, 1, h, w], image.data.clone())?;
    Ok(model.infer(x)?.into_data())
}

/// Reads a `.wsm` segmenter and a P5 image, writes the overlay as P6.
pub fn render_overlay(model: impl AsRef<Path>, image: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<()> {
    let model = Model::load(model)?;
    let image = pnm::read_pgm(image)?;
    let mask = predict_mask(&model, &image)?;
    let out = out.as_ref();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::io::create_dir_all(parent)?;
    }
    pnm::write_ppm(out, image.width, image.height, &blend(&image.data, &mask)?)
}
