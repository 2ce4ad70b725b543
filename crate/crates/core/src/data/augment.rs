use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::lerp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random geometric augmentation. Shifts are fractions of the image extent,
/// shear is in radians, zoom samples from `[1 - zoom, 1 + zoom]`. Pixels
/// sampled outside the image take the nearest edge value. The 1/255
/// rescale happens at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub width_shift: f64,
    pub height_shift: f64,
    pub shear: f64,
    pub zoom: f64,
    pub horizontal_flip: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            width_shift: 0.2,
            height_shift: 0.2,
            shear: 0.2,
            zoom: 0.2,
            horizontal_flip: true,
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        AugmentationConfig {
            width_shift: 0.0,
            height_shift: 0.0,
            shear: 0.0,
            zoom: 0.0,
            horizontal_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width_shift", self.width_shift),
            ("height_shift", self.height_shift),
            ("shear", self.shear),
            ("zoom", self.zoom),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("augmentation {name} {v} must be in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One image's sampled transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Content displacement in pixels.
    pub shift_x: f64,
    pub shift_y: f64,
    pub shear: f64,
    pub zoom: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        shift_x: 0.0,
        shift_y: 0.0,
        shear: 0.0,
        zoom: 1.0,
    };
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

pub fn sample_params<R: Rng + ?Sized>(
    cfg: &AugmentationConfig,
    height: usize,
    width: usize,
    rng: &mut R,
) -> AugmentParams {
    let flip = cfg.horizontal_flip && rng.gen_bool(0.5);
    let shift_x = symmetric(rng, cfg.width_shift) * width as f64;
    let shift_y = symmetric(rng, cfg.height_shift) * height as f64;
    let shear = symmetric(rng, cfg.shear);
    let zoom = 1.0 + symmetric(rng, cfg.zoom);
    AugmentParams {
        flip,
        shift_x,
        shift_y,
        shear,
        zoom,
    }
}

/// Resamples an `[H, W, C]` image under `p`. Output `(x, y)` reads the
/// input at `zoom * S * ((x, y) - center - shift) + center` where `S` is the
/// shear map, then the result is mirrored if `p.flip`.
pub fn apply_params(img: &Tensor<f32>, p: &AugmentParams) -> Result<Tensor<f32>> {
    let [h, w, c] = img.shape()[..] else {
        return Err(Error::shape(format!("augment expects [H, W, C], got {:?}", img.shape())));
    };
    let src = img.data();
    let geometric = p.shift_x != 0.0 || p.shift_y != 0.0 || p.shear != 0.0 || p.zoom != 1.0;
    let mut out = if geometric {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (sin, cos) = p.shear.sin_cos();
        let mut out = Vec::with_capacity(src.len());
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 - cx - p.shift_x;
                let v = y as f64 - cy - p.shift_y;
                let sx = (p.zoom * (u - sin * v) + cx).clamp(0.0, (w - 1) as f64);
                let sy = (p.zoom * (cos * v) + cy).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                    let top = lerp(at(y0, x0), at(y0, x1), fx);
                    let bottom = lerp(at(y1, x0), at(y1, x1), fx);
                    out.push(lerp(top, bottom, fy));
                }
            }
        }
        out
    } else {
        src.to_vec()
    };
    if p.flip {
        for row in out.chunks_mut(w * c) {
            for x in 0..w / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (w - 1 - x) * c + ch);
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub fn augment<R: Rng + ?Sized>(img: &Tensor<f32>, cfg: &AugmentationConfig, rng: &mut R) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("augment expects [H, W, C], got {shape:?}")));
    }
    let p = sample_params(cfg, shape[0], shape[1], rng);
    apply_params(img, &p)
}
