use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes an RGB raster, bilinearly resizes it to `size x size`, and
/// scales values into `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    if size == 0 {
        return Err(Error::config("image size must be positive"));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "image has no pixels".into(),
        });
    }
    let raw: Vec<f32> = rgb.into_raw().into_iter().map(f32::from).collect();
    let resized = resize_bilinear(&raw, h, w, 3, size, size);
    let data = resized.into_iter().map(|v| v / 255.0).collect();
    Tensor::new(vec![size, size, 3], data)
}

/// Bilinear resampling of an HWC buffer with half-pixel centers and
/// edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let axis = |out: usize, len: usize, i: usize| -> (usize, usize, f32) {
        let pos = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(out_h, h, y);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(out_w, w, x);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = lerp(at(y0, x0), at(y0, x1), fx);
                let bottom = lerp(at(y1, x0), at(y1, x1), fx);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    out
}

/// `a + (b - a) t`, exact when `a == b`.
pub(crate) fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if a == b {
        a
    } else {
        a + (b - a) * t
    }
}

/// Writes an `[H, W, 3]` tensor with values in `[0, 1]` as an 8-bit raster;
/// the format follows the extension (`.ppm` gives binary P6).
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let [h, w, 3] = img.shape()[..] else {
        return Err(Error::shape(format!(
            "save_image expects [H, W, 3], got {:?}",
            img.shape()
        )));
    };
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8).map_err(|e| {
        match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_averages_to_half() {
        let src = [0.0, 255.0, 255.0, 0.0];
        let out = resize_bilinear(&src, 2, 2, 1, 1, 1);
        assert_eq!(out, vec![127.5]);
    }

    #[test]
    fn constant_survives_resize() {
        let src = vec![77.0; 5 * 7 * 3];
        assert!(resize_bilinear(&src, 5, 7, 3, 11, 4).iter().all(|&v| v == 77.0));
    }
}
