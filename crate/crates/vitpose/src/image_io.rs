//! PNG and BMP images as `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use vitpose_core::Tensor;

use crate::error::{Error, Result};

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Quantises to 8 bits; values outside `[0, 1]` are clamped. The format
/// follows the file extension (`.png` or `.bmp`).
pub fn write_image(path: impl AsRef<Path>, pixels: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let bad = |msg: String| Error::Image {
        path: path.into(),
        msg,
    };
    let [3, h, w] = pixels.shape() else {
        return Err(bad(format!("expected a [3, H, W] tensor, got {:?}", pixels.shape())));
    };
    let (h, w) = (*h, *w);
    let d = pixels.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([at(0), at(1), at(2)])
    });
    let format = ImageFormat::from_path(path).map_err(|e| bad(e.to_string()))?;
    img.save_with_format(path, format).map_err(|e| bad(e.to_string()))
}
