//! Pixel-level transforms: jigsaw tiling, rotation and input degradation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use crate::error::{Error, Result};
use crate::permset::PermutationSet;
use crate::scalar::Scalar;

/// Sizes used to cut a jigsaw puzzle out of an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JigsawGeometry {
    /// Side of the square region split into the grid.
    pub crop: usize,
    /// Tiles per side.
    pub grid: usize,
    /// Side of the random crop taken inside each grid cell.
    pub tile: usize,
    /// Range of the crop-window scale factor, relative to the shorter edge.
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for JigsawGeometry {
    fn default() -> Self {
        Self::full_size()
    }
}

impl JigsawGeometry {
    /// 255 px region, 3x3 grid of 85 px cells, 64 px tiles.
    pub fn full_size() -> Self {
        Self {
            crop: 255,
            grid: 3,
            tile: 64,
            min_scale: 0.5,
            max_scale: 1.0,
        }
    }

    /// Keeps the 85:64 cell-to-tile ratio for an arbitrary tile size.
    pub fn for_tile(tile: usize) -> Self {
        let cell = (tile * 85 + 32) / 64;
        Self {
            crop: 3 * cell,
            tile,
            ..Self::full_size()
        }
    }

    pub fn cell(&self) -> usize {
        self.crop / self.grid
    }

    pub fn num_tiles(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.tile == 0 || self.crop % self.grid != 0 || self.tile > self.cell() {
            return Err(Error::Config(format!("inconsistent jigsaw geometry {self:?}")));
        }
        if !(0.0 < self.min_scale && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return Err(Error::Config(format!(
                "jigsaw scale range [{}, {}] must lie in (0, 1]",
                self.min_scale, self.max_scale
            )));
        }
        Ok(())
    }
}

/// Permuted tiles and the index of the permutation that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct JigsawSample<T> {
    pub tiles: Vec<ImageTensor<T>>,
    pub perm_index: usize,
}

impl<T: Scalar> JigsawSample<T> {
    /// Places `cells[perm[i]]` at slot `i`.
    pub fn from_cells(cells: &[ImageTensor<T>], perm_set: &PermutationSet, perm_index: usize) -> Result<Self> {
        let perm = perm_set.get(perm_index).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "permutation index {perm_index} outside set of {}",
                perm_set.len()
            ))
        })?;
        if perm.len() != cells.len() {
            return Err(Error::Shape(format!(
                "{} tiles for a {}-element permutation",
                cells.len(),
                perm.len()
            )));
        }
        Ok(Self {
            tiles: perm.iter().map(|&p| cells[p].clone()).collect(),
            perm_index,
        })
    }

    /// Undoes the permutation, returning tiles in raster order.
    pub fn unscrambled(&self, perm_set: &PermutationSet) -> Result<Vec<ImageTensor<T>>> {
        let perm = perm_set
            .get(self.perm_index)
            .ok_or_else(|| Error::InvalidArgument("permutation index outside set".into()))?;
        let mut out = self.tiles.clone();
        for (slot, &src) in perm.iter().enumerate() {
            out[src] = self.tiles[slot].clone();
        }
        Ok(out)
    }
}

/// Image rotated counter-clockwise by `90 * angle_index` degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSample<T> {
    pub image: ImageTensor<T>,
    pub angle_index: usize,
}

/// Cuts the grid cells (raster order) out of `image`. Returns the cells before
/// any permutation is applied.
pub fn jigsaw_cells<T: Scalar, R: Rng + ?Sized>(
    image: &ImageTensor<T>,
    geometry: &JigsawGeometry,
    rng: &mut R,
) -> Result<Vec<ImageTensor<T>>> {
    geometry.validate()?;
    let crop = geometry.crop;
    let upscaled;
    let source = if image.height().min(image.width()) < crop {
        let (h, w) = (image.height(), image.width());
        let short = h.min(w);
        let grow = |side: usize| (side * crop).div_ceil(short).max(crop);
        upscaled = image.resize_bilinear(grow(h), grow(w))?;
        &upscaled
    } else {
        image
    };

    let short = source.height().min(source.width());
    let scale = if geometry.max_scale > geometry.min_scale {
        rng.gen_range(geometry.min_scale..=geometry.max_scale)
    } else {
        geometry.max_scale
    };
    let window = ((scale * short as f64).round() as usize).clamp(1, short);
    let top = rng.gen_range(0..=source.height() - window);
    let left = rng.gen_range(0..=source.width() - window);
    let region = source.crop(top, left, window, window)?.resize_bilinear(crop, crop)?;

    let cell = geometry.cell();
    let slack = cell - geometry.tile;
    let mut cells = Vec::with_capacity(geometry.num_tiles());
    for row in 0..geometry.grid {
        for col in 0..geometry.grid {
            let dy = rng.gen_range(0..=slack);
            let dx = rng.gen_range(0..=slack);
            cells.push(region.crop(row * cell + dy, col * cell + dx, geometry.tile, geometry.tile)?);
        }
    }
    Ok(cells)
}

/// Random-scale crop, grid split, per-cell tile crop, then a permutation drawn
/// uniformly from `perm_set`.
pub fn make_jigsaw<T: Scalar, R: Rng + ?Sized>(
    image: &ImageTensor<T>,
    perm_set: &PermutationSet,
    geometry: &JigsawGeometry,
    rng: &mut R,
) -> Result<JigsawSample<T>> {
    if perm_set.n_elements() != geometry.num_tiles() {
        return Err(Error::Shape(format!(
            "permutation set over {} elements for a {}-tile grid",
            perm_set.n_elements(),
            geometry.num_tiles()
        )));
    }
    let cells = jigsaw_cells(image, geometry, rng)?;
    let perm_index = rng.gen_range(0..perm_set.len());
    JigsawSample::from_cells(&cells, perm_set, perm_index)
}

/// Exact counter-clockwise rotation by `90 * angle_index` degrees.
pub fn make_rotation<T: Scalar>(image: &ImageTensor<T>, angle_index: usize) -> Result<RotationSample<T>> {
    if angle_index > 3 {
        return Err(Error::InvalidArgument(format!(
            "rotation index {angle_index} outside 0..4"
        )));
    }
    Ok(RotationSample {
        image: rotate_ccw(image, angle_index),
        angle_index,
    })
}

fn rotate_ccw<T: Scalar>(image: &ImageTensor<T>, quarter_turns: usize) -> ImageTensor<T> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let (oh, ow) = if quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut pixels = Vec::with_capacity(h * w * c);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = match quarter_turns % 4 {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            for ch in 0..c {
                pixels.push(image.get(sy, sx, ch));
            }
        }
    }
    ImageTensor::from_raw_unchecked(oh, ow, c, pixels)
}

/// Down-samples by `factor` (box filter) and bilinearly up-samples back to
/// the original size.
pub fn degrade_low_resolution<T: Scalar>(image: &ImageTensor<T>, factor: usize) -> Result<ImageTensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("low-resolution factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let small = if h % factor == 0 && w % factor == 0 {
        image.downsample_area(factor)?
    } else {
        let shrink = |side: usize| ((side as f64 / factor as f64).round() as usize).max(1);
        image.resize_bilinear(shrink(h), shrink(w))?
    };
    small.resize_bilinear(h, w)
}

/// ITU-R 601 luma replicated to three channels. One-channel input is
/// returned unchanged.
pub fn to_greyscale<T: Scalar>(image: &ImageTensor<T>) -> ImageTensor<T> {
    if image.channels() == 1 {
        return image.clone();
    }
    let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let mut pixels = Vec::with_capacity(image.pixels().len());
    for px in image.pixels().chunks_exact(3) {
        let luma = if px[0] == px[1] && px[1] == px[2] {
            px[0]
        } else {
            (wr * px[0] + wg * px[1] + wb * px[2]).min(T::one())
        };
        pixels.extend_from_slice(&[luma, luma, luma]);
    }
    ImageTensor::from_raw_unchecked(image.height(), image.width(), 3, pixels)
}

/// Input degradation applied to every image of an experiment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degradation {
    #[default]
    None,
    Greyscale,
    Lowres,
}

impl Degradation {
    pub fn apply<T: Scalar>(self, image: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        match self {
            Degradation::None => Ok(image.clone()),
            Degradation::Greyscale => Ok(to_greyscale(image)),
            Degradation::Lowres => degrade_low_resolution(image, 4),
        }
    }
}
