//! Procedurally textured image classes for desk-scale experiments.
//!
//! A class is defined by a texture family and spatial frequency; colour,
//! orientation, phase, contrast and noise vary per image. Every image also
//! carries a fixed top-to-bottom illumination ramp and a left-to-right tint
//! ramp, so rotation and tile position are recoverable from the pixels.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::image::ImageTensor;
use super::loader::{tensor_to_rgb, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 100,
            size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Family {
    Stripes,
    Checker,
    Rings,
    Dots,
    Waves,
}

const FAMILIES: [Family; 5] = [
    Family::Stripes,
    Family::Checker,
    Family::Rings,
    Family::Dots,
    Family::Waves,
];

/// Texture value in `[-1, 1]` at normalised coordinates `(u, v)` (already
/// rotated by the per-image orientation).
fn texture(family: Family, freq: f64, u: f64, v: f64, phase: f64) -> f64 {
    let w = 2.0 * PI * freq;
    match family {
        Family::Stripes => (w * u + phase).sin(),
        Family::Checker => ((w * u + phase).sin() * (w * v + phase).sin()).signum(),
        Family::Rings => (w * (u * u + v * v).sqrt() + phase).sin(),
        Family::Dots => {
            let d = (w * u + phase).cos() + (w * v + phase).cos();
            if d > 1.0 {
                1.0
            } else {
                -1.0
            }
        }
        Family::Waves => (w * u + 1.5 * (w * 0.5 * v).sin() + phase).sin(),
    }
}

/// Renders image `index` of `class`.
pub fn render<T: Scalar, R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> ImageTensor<T> {
    let family = FAMILIES[class % FAMILIES.len()];
    let freq = 2.0 + 2.5 * (class / FAMILIES.len()) as f64 + rng.gen_range(-0.3..0.3);
    let theta: f64 = rng.gen_range(-0.35..0.35);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let contrast = rng.gen_range(0.12..0.22);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
    let noise = 0.04;
    let (s, c) = theta.sin_cos();
    let n = size as f64;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let fy = (y as f64 + 0.5) / n;
        for x in 0..size {
            let fx = (x as f64 + 0.5) / n;
            let (u0, v0) = (fx - 0.5, fy - 0.5);
            let (u, v) = (c * u0 - s * v0, s * u0 + c * v0);
            let t = contrast * texture(family, freq, u, v, phase);
            let light = 0.18 * (0.5 - fy);
            let tint = 0.14 * (fx - 0.5);
            for (ch, b) in base.iter().enumerate() {
                let ramp = match ch {
                    0 => light + tint,
                    1 => light,
                    _ => light - tint,
                };
                let value = b + t + ramp + noise * rng.gen_range(-1.0..1.0);
                pixels.push(T::lit(value.clamp(0.0, 1.0)));
            }
        }
    }
    ImageTensor::new(size, size, 3, pixels).expect("clamped pixels")
}

pub fn class_name(class: usize) -> String {
    format!("class_{class:02}")
}

/// Generates the full dataset in memory; image `i` of class `c` draws from
/// stream `(seed, "synthetic", c * per_class + i)`.
pub fn generate<T: Scalar>(config: &SyntheticConfig) -> Dataset<T> {
    let mut images = Vec::with_capacity(config.classes * config.per_class);
    for class in 0..config.classes {
        for i in 0..config.per_class {
            let mut r = rng::substream(config.seed, "synthetic", (class * config.per_class + i) as u64);
            images.push(LabeledImage {
                image: render(class, config.size, &mut r),
                class_id: class,
                source_path: format!("synthetic/{}/{i:04}.png", class_name(class)),
            });
        }
    }
    Dataset {
        class_names: (0..config.classes).map(class_name).collect(),
        images,
    }
}

/// Writes the dataset as `root/<class>/<nnnn>.png`.
pub fn write_dataset(config: &SyntheticConfig, root: &Path) -> Result<()> {
    let ds: Dataset<f32> = generate(config);
    for name in &ds.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, img) in ds.images.iter().enumerate() {
        let path = root
            .join(&ds.class_names[img.class_id])
            .join(format!("{:04}.png", i % config.per_class));
        tensor_to_rgb(&img.image).save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}
