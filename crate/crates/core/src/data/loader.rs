use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// One image with its global class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage<T> {
    pub image: ImageTensor<T>,
    pub class_id: usize,
    /// Stable identifier; the file path for on-disk data.
    pub source_path: String,
}

/// Images plus the class names their ids index into.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub class_names: Vec<String>,
    pub images: Vec<LabeledImage<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Images whose class is in `classes`, in dataset order.
    pub fn subset(&self, classes: &[usize]) -> Vec<LabeledImage<T>> {
        self.images
            .iter()
            .filter(|img| classes.contains(&img.class_id))
            .cloned()
            .collect()
    }
}

/// Loads `root/<class>/<image>` into `image_size x image_size` RGB tensors.
///
/// Class ids follow the lexicographic order of the class directory names and
/// files inside a class are visited in lexicographic order.
pub fn load_dataset<T: Scalar>(root: &Path, image_size: usize) -> Result<Dataset<T>> {
    if image_size == 0 {
        return Err(Error::InvalidArgument("image_size must be >= 1".into()));
    }
    let mut class_dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            class_dirs.push(entry.path());
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }

    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut images = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files = image_files(dir)?;
        if files.is_empty() {
            return Err(Error::EmptyClass(name));
        }
        for file in files {
            let image = load_image(&file, image_size)?;
            images.push(LabeledImage {
                image,
                class_id,
                source_path: file.to_string_lossy().into_owned(),
            });
        }
        class_names.push(name);
    }
    Ok(Dataset {
        class_names,
        images,
    })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decodes one file and applies the shorter-edge resize plus centre crop.
pub fn load_image<T: Scalar>(path: &Path, image_size: usize) -> Result<ImageTensor<T>> {
    let decoded = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = resize_and_center_crop(&decoded.to_rgb8(), image_size);
    Ok(rgb_to_tensor(&rgb))
}

/// Target `(width, height)` after scaling the shorter edge to `size`; the
/// longer edge is truncated.
pub fn shorter_edge_dims(width: u32, height: u32, size: u32) -> (u32, u32) {
    let scale = |long: u32, short: u32| -> u32 {
        ((long as u64 * size as u64 / short as u64) as u32).max(size)
    };
    if width <= height {
        (size, scale(height, width))
    } else {
        (scale(width, height), size)
    }
}

pub fn resize_and_center_crop(img: &RgbImage, size: usize) -> RgbImage {
    let size = size as u32;
    let (w, h) = shorter_edge_dims(img.width(), img.height(), size);
    let resized = if (w, h) == img.dimensions() {
        img.clone()
    } else {
        image::imageops::resize(img, w, h, FilterType::Triangle)
    };
    let left = (w - size) / 2;
    let top = (h - size) / 2;
    image::imageops::crop_imm(&resized, left, top, size, size).to_image()
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> ImageTensor<T> {
    let scale = T::lit(1.0 / 255.0);
    let pixels = img.as_raw().iter().map(|&v| T::lit(v as f64) * scale).collect();
    ImageTensor::from_raw_unchecked(img.height() as usize, img.width() as usize, 3, pixels)
}

/// Quantises a tensor to 8-bit RGB (greyscale tensors are replicated).
pub fn tensor_to_rgb<T: Scalar>(img: &ImageTensor<T>) -> RgbImage {
    let mut out = RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = std::array::from_fn(|c| {
                let ch = if img.channels() == 1 { 0 } else { c };
                (img.get(y, x, ch).as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
            });
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}
