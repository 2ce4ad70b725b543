use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::data::filename::{BiopsyRecord, Magnification, Subtype};
use crate::data::image::save_image;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const MAX_SYNTHETIC_CLASSES: usize = 8;

/// Labeled `[S, S, 3]` images in `[0, 1]`, class-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub size: usize,
}

impl SyntheticSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

struct Signature {
    angle: f64,
    cycles: f64,
    blob_radius: f64,
    tint: [f64; 3],
}

fn signature(class: usize, classes: usize) -> Signature {
    let hue = 2.0 * PI * class as f64 / classes as f64;
    Signature {
        angle: (class % 4) as f64 * PI / 4.0,
        cycles: if class < 4 { 3.0 } else { 7.0 },
        blob_radius: 0.06 + 0.02 * (class % 3) as f64,
        tint: [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0].map(|off| 0.5 + 0.3 * (hue + off).cos()),
    }
}

/// Renders one texture: oriented stripes with a class-specific frequency,
/// a field of soft blobs, a class tint, and uniform noise.
fn render<R: Rng + ?Sized>(sig: &Signature, size: usize, rng: &mut R) -> Tensor<f32> {
    let phase = rng.gen_range(0.0..2.0 * PI);
    let blobs: Vec<(f64, f64)> = (0..4).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let (sin, cos) = sig.angle.sin_cos();
    let s = size as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let stripe = 0.5 + 0.5 * (2.0 * PI * sig.cycles * (u * cos + v * sin) + phase).sin();
            let blob: f64 = blobs
                .iter()
                .map(|&(bx, by)| {
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    (-d2 / (2.0 * sig.blob_radius * sig.blob_radius)).exp()
                })
                .sum::<f64>()
                .min(1.0);
            for tint in sig.tint {
                let noise = rng.gen_range(-0.08..0.08);
                let value = tint * (0.55 + 0.45 * stripe) + 0.2 * blob + noise;
                data.push(value.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("rendered buffer matches its shape")
}

pub fn make_synthetic_dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<SyntheticSet> {
    if classes == 0 || classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::config(format!(
            "synthetic classes must be in 1..={MAX_SYNTHETIC_CLASSES}, got {classes}"
        )));
    }
    if size < 4 {
        return Err(Error::config(format!("synthetic image size {size} is below 4")));
    }
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let sig = signature(class, classes);
        for _ in 0..per_class {
            images.push(render(&sig, size, &mut rng));
            labels.push(class);
        }
    }
    Ok(SyntheticSet {
        images,
        labels,
        classes,
        size,
    })
}

/// Writes a directory of PPM images named by the biopsy grammar, with
/// `counts[i]` images of subtype `Subtype::ALL[i]` textured as class `i` of
/// an eight-class synthetic set. Returns the written records.
pub fn write_synthetic_tree(root: &Path, counts: &[usize; 8], size: usize, seed: u64) -> Result<Vec<BiopsyRecord>> {
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let mut records = Vec::new();
    for (i, &n) in counts.iter().enumerate() {
        let subtype = Subtype::ALL[i];
        let sig = signature(i, MAX_SYNTHETIC_CLASSES);
        let dir: PathBuf = root.join(subtype.class().name()).join(subtype.code());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for j in 0..n {
            let img = render(&sig, size, &mut rng);
            let mut r = BiopsyRecord {
                path: PathBuf::new(),
                method: "SOB".into(),
                class: subtype.class(),
                subtype,
                patient_id: format!("14-{}", 1000 + 10 * i + j % 3),
                magnification: Magnification::ALL[j % 4],
                seq: j as u32 + 1,
            };
            r.path = dir.join(r.file_name("ppm"));
            save_image(&r.path, &img)?;
            records.push(r);
        }
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(records)
}
