use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An `height x width x channels` image with values in `[0, 1]`, stored
/// row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidArgument(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(clamp01(f(y, x, c)));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Copies the `h x w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({top},{left}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let start = (y * self.width + left) * c;
            pixels.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            pixels,
        })
    }

    /// Bilinear resampling with half-pixel centres. Resizing to the current
    /// size returns an exact copy.
    pub fn resize_bilinear(&self, new_h: usize, new_w: usize) -> Result<Self> {
        if new_h == 0 || new_w == 0 {
            return Err(Error::Shape("resize target must be non-empty".into()));
        }
        if new_h == self.height && new_w == self.width {
            return Ok(self.clone());
        }
        let ys = axis_weights(self.height, new_h);
        let xs = axis_weights(self.width, new_w);
        let c = self.channels;
        let mut pixels = Vec::with_capacity(new_h * new_w * c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let top = lerp(self.get(y0, x0, ch), self.get(y0, x1, ch), fx);
                    let bottom = lerp(self.get(y1, x0, ch), self.get(y1, x1, ch), fx);
                    pixels.push(clamp01(lerp(top, bottom, fy)));
                }
            }
        }
        Ok(Self {
            height: new_h,
            width: new_w,
            channels: c,
            pixels,
        })
    }

    /// Box-filter down-sampling by an integer factor. Trailing rows/columns
    /// that do not fill a whole block are averaged over the partial block.
    pub fn downsample_area(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("down-sampling factor must be >= 1".into()));
        }
        let new_h = self.height.div_ceil(factor);
        let new_w = self.width.div_ceil(factor);
        let c = self.channels;
        let mut pixels = Vec::with_capacity(new_h * new_w * c);
        for by in 0..new_h {
            let ys = by * factor..((by + 1) * factor).min(self.height);
            for bx in 0..new_w {
                let xs = bx * factor..((bx + 1) * factor).min(self.width);
                let count = T::from_usize_lossy(ys.len() * xs.len());
                for ch in 0..c {
                    // shifted mean: exact for constant blocks
                    let pivot = self.get(ys.start, xs.start, ch);
                    let mut acc = T::zero();
                    for y in ys.clone() {
                        for x in xs.clone() {
                            acc += self.get(y, x, ch) - pivot;
                        }
                    }
                    pixels.push(clamp01(pivot + acc / count));
                }
            }
        }
        Ok(Self {
            height: new_h,
            width: new_w,
            channels: c,
            pixels,
        })
    }

    /// Converts element type (e.g. `f32` storage to `f64` for gradient checks).
    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, channels: usize, pixels: Vec<T>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

#[inline]
pub(crate) fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

fn axis_weights<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, T::lit(pos - i0 as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageTensor::<f64>::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageTensor::<f64>::new(1, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(ImageTensor::<f64>::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ImageTensor::<f64>::from_fn(5, 7, 3, |y, x, c| (y * 7 + x + c) as f64 / 50.0);
        assert_eq!(img.resize_bilinear(5, 7).unwrap(), img);
        let flat = ImageTensor::<f64>::filled(5, 7, 3, 0.3);
        let up = flat.resize_bilinear(11, 3).unwrap();
        assert!(up.pixels().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = ImageTensor::<f64>::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64 / 4.0);
        let small = img.downsample_area(2).unwrap();
        assert_eq!(small.height(), 1);
        assert!((small.get(0, 0, 0) - 0.375).abs() < 1e-15);
    }
}
