use super::image::RawImage;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const PAD_VALUE: u8 = 114;

#[derive(Debug, Clone)]
pub struct LetterboxedImage<T: Element = f32> {
    /// `[1, 3, S, S]`, values in `[0, 1]`
    pub tensor: Tensor<T>,
    pub size: usize,
    pub scale: f64,
    pub pad_left: usize,
    pub pad_top: usize,
    pub content_width: usize,
    pub content_height: usize,
}

impl<T: Element> LetterboxedImage<T> {
    /// Letterbox coordinates to original image coordinates.
    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_left as f64) / self.scale, (y - self.pad_top as f64) / self.scale)
    }

    pub fn to_letterbox(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_left as f64, y * self.scale + self.pad_top as f64)
    }
}

/// Aspect-preserving nearest-neighbour resize into an `S x S` canvas, centred,
/// padded with gray 114.
pub fn letterbox<T: Element>(raw: &RawImage, size: usize) -> Result<LetterboxedImage<T>> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Preprocess(format!("letterbox size {size} is not a positive multiple of 32")));
    }
    if raw.width == 0 || raw.height == 0 {
        return Err(Error::Preprocess("zero-sized image".into()));
    }
    let scale = (size as f64 / raw.width as f64).min(size as f64 / raw.height as f64);
    let cw = ((raw.width as f64 * scale).round() as usize).clamp(1, size);
    let ch = ((raw.height as f64 * scale).round() as usize).clamp(1, size);
    let (left, top) = ((size - cw) / 2, (size - ch) / 2);
    let pad = T::lit(PAD_VALUE as f64 / 255.0);
    let plane = size * size;
    let mut data = vec![pad; 3 * plane];
    for y in 0..ch {
        let sy = (((y as f64 + 0.5) / scale) as usize).min(raw.height - 1);
        for x in 0..cw {
            let sx = (((x as f64 + 0.5) / scale) as usize).min(raw.width - 1);
            let px = raw.pixel(sx, sy);
            let o = (top + y) * size + left + x;
            for (c, &v) in px.iter().enumerate() {
                data[c * plane + o] = T::lit(v as f64 / 255.0);
            }
        }
    }
    Ok(LetterboxedImage {
        tensor: Tensor::from_vec(vec![1, 3, size, size], data)?,
        size,
        scale,
        pad_left: left,
        pad_top: top,
        content_width: cw,
        content_height: ch,
    })
}
