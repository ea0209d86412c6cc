use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch of feature maps in channel-major `[channels][batch][height][width]`
/// layout, so a convolution over the whole batch is a single matrix product.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Stacks same-sized images into a batch.
    pub fn from_images<'a, I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ImageTensor<T>>,
    {
        let images: Vec<&ImageTensor<T>> = images.into_iter().collect();
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w, c) = (first.height(), first.width(), first.channels());
        if let Some(odd) = images
            .iter()
            .find(|i| (i.height(), i.width(), i.channels()) != (h, w, c))
        {
            return Err(Error::Shape(format!(
                "mixed image sizes in batch: {h}x{w}x{c} and {}x{}x{}",
                odd.height(),
                odd.width(),
                odd.channels()
            )));
        }
        let n = images.len();
        let mut fm = Self::zeros(c, n, h, w);
        let plane = h * w;
        for (b, img) in images.iter().enumerate() {
            for (p, px) in img.pixels().chunks_exact(c).enumerate() {
                for (ch, &v) in px.iter().enumerate() {
                    fm.data[(ch * n + b) * plane + p] = v;
                }
            }
        }
        Ok(fm)
    }

    /// Gradient (or activation) for batch item `b` as an `h x w x c` array.
    pub fn item_hwc(&self, b: usize) -> Vec<T> {
        let plane = self.plane();
        let mut out = Vec::with_capacity(plane * self.channels);
        for p in 0..plane {
            for ch in 0..self.channels {
                out.push(self.data[(ch * self.batch + b) * plane + p]);
            }
        }
        out
    }
}

/// Row-major matrix; rows index batch items.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Rows selected by `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
