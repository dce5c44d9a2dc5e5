//! 8-bit PNG persistence for image tensors.
//!
//! Images are quantized to 8 bits on save and rescaled to `[0,1]` on load,
//! so a saved image round-trips bit-exactly through `quantize`.

use crate::error::{Error, Result};
use crate::ldm::ImageTensor;
use crate::tensor::Real;
use ndarray::Array3;
use std::path::Path;

/// Quantize to the 8-bit grid: `round(v * 255) / 255`.
pub fn quantize(x: &ImageTensor) -> ImageTensor {
    ImageTensor::from_clamped(x.data().mapv(|v| (v * 255.0).round() / 255.0))
}

/// Save as RGB PNG; the stored bytes are `round(v * 255)`.
pub fn save_png(x: &ImageTensor, path: &Path) -> Result<()> {
    let (c, h, w) = x.shape();
    if c != 3 {
        return Err(Error::Argument(format!("png save expects 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |ch: usize| (x.data()[[ch, i, j]] * 255.0).round().clamp(0.0, 255.0) as u8;
            buf.put_pixel(j as u32, i as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Load an RGB PNG into `[3,H,W]` values on the 8-bit grid.
pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<Real>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[c, y as usize, x as usize]] = px.0[c] as Real / 255.0;
        }
    }
    ImageTensor::new(data)
}
