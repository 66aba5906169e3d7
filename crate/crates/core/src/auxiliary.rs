//! Auxiliary images: carriers of the features to be erased.
//!
//! Five constructors: the background left after boxing out annotated
//! foreground, the four corner tiles of an 8×8 grid, randomly drawn grid
//! tiles, a 4-pixel patch shuffle of the whole image, and the most similar
//! images from a pool of out-of-task reference images.

use std::collections::VecDeque;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ForegroundMask, Image};
use crate::model::VisionLanguageModel;

/// Tiles per side of the patch grid.
pub const GRID: usize = 8;
/// Side length in pixels of a shuffle patch.
pub const SHUFFLE_PATCH: usize = 4;
/// `(row, col)` grid cells of the four corners.
pub const CORNER_CELLS: [(usize, usize); 4] = [(0, 0), (0, GRID - 1), (GRID - 1, 0), (GRID - 1, GRID - 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxStrategy {
    AnnotationBackground,
    CornerPatches,
    RandomPatches,
    Shuffle,
    Reference,
}

impl AuxStrategy {
    pub fn name(self) -> &'static str {
        match self {
            AuxStrategy::AnnotationBackground => "annotation-background",
            AuxStrategy::CornerPatches => "corner-patches",
            AuxStrategy::RandomPatches => "random-patches",
            AuxStrategy::Shuffle => "shuffle",
            AuxStrategy::Reference => "reference",
        }
    }
}

impl fmt::Display for AuxStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryImageSet {
    pub images: Vec<Image>,
    pub strategy: AuxStrategy,
    /// Originating test sample; `None` for reference images.
    pub source_id: Option<String>,
}

impl AuxiliaryImageSet {
    fn new(images: Vec<Image>, strategy: AuxStrategy) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("auxiliary set must be non-empty"));
        }
        Ok(Self {
            images,
            strategy,
            source_id: None,
        })
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }
}

/// Half-open box `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// Bounding boxes of the 4-connected foreground regions, in scan order.
pub fn foreground_boxes(mask: &ForegroundMask) -> Vec<BoundingBox> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask.get(sy, sx) || seen[sy * w + sx] {
                continue;
            }
            let mut b = BoundingBox { y0: sy, x0: sx, y1: sy + 1, x1: sx + 1 };
            seen[sy * w + sx] = true;
            queue.push_back((sy, sx));
            while let Some((y, x)) = queue.pop_front() {
                b.y0 = b.y0.min(y);
                b.x0 = b.x0.min(x);
                b.y1 = b.y1.max(y + 1);
                b.x1 = b.x1.max(x + 1);
                let neighbours = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && mask.get(ny, nx) && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            boxes.push(b);
        }
    }
    boxes
}

/// `true` for every pixel inside some foreground bounding box.
pub fn boxed_region(mask: &ForegroundMask) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let mut region = vec![false; h * w];
    for b in foreground_boxes(mask) {
        for y in b.y0..b.y1 {
            region[y * w + b.x0..y * w + b.x1].fill(true);
        }
    }
    region
}

fn check_mask(x: &Image, mask: &ForegroundMask) -> Result<()> {
    if !mask.matches(x) {
        return Err(Error::invalid(format!(
            "mask is {}x{}, image is {}x{}",
            mask.height(),
            mask.width(),
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// The image with every foreground bounding box filled with 0.
pub fn extract_background(x: &Image, mask: &ForegroundMask) -> Result<AuxiliaryImageSet> {
    check_mask(x, mask)?;
    let region = boxed_region(mask);
    if region.iter().all(|r| *r) {
        return Err(Error::EmptyBackground);
    }
    let mut out = x.clone();
    for (i, _) in region.iter().enumerate().filter(|(_, r)| **r) {
        out.clear_pixel(i / x.width(), i % x.width());
    }
    AuxiliaryImageSet::new(vec![out], AuxStrategy::AnnotationBackground)
}

/// The image with everything outside the foreground bounding boxes filled
/// with 0. Multiple boxes stay in place on one canvas.
pub fn extract_foreground(x: &Image, mask: &ForegroundMask) -> Result<Image> {
    check_mask(x, mask)?;
    if mask.count() == 0 {
        return Err(Error::NoForeground);
    }
    let region = boxed_region(mask);
    let mut out = x.clone();
    for (i, _) in region.iter().enumerate().filter(|(_, r)| !**r) {
        out.clear_pixel(i / x.width(), i % x.width());
    }
    Ok(out)
}

fn check_divisible(x: &Image, by: usize) -> Result<()> {
    if !x.height().is_multiple_of(by) || !x.width().is_multiple_of(by) {
        return Err(Error::invalid(format!(
            "{}x{} image is not divisible by {by}",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// Tile `(row, col)` of the 8×8 grid, at source resolution.
pub fn grid_tile(x: &Image, row: usize, col: usize) -> Result<Image> {
    check_divisible(x, GRID)?;
    if row >= GRID || col >= GRID {
        return Err(Error::invalid(format!("grid cell ({row}, {col}) out of range")));
    }
    let (th, tw) = (x.height() / GRID, x.width() / GRID);
    x.crop(row * th, col * tw, th, tw)
}

/// Pixel offset of grid cell `(row, col)`.
pub fn grid_offset(x: &Image, row: usize, col: usize) -> (usize, usize) {
    (row * x.height() / GRID, col * x.width() / GRID)
}

/// The four corner tiles of the 8×8 grid, each upsampled (nearest
/// neighbour) to `out_size`.
pub fn corner_patches(x: &Image, out_size: (usize, usize)) -> Result<AuxiliaryImageSet> {
    let images = CORNER_CELLS
        .iter()
        .map(|&(r, c)| Ok(grid_tile(x, r, c)?.resize_nearest(out_size.0, out_size.1)))
        .collect::<Result<Vec<_>>>()?;
    AuxiliaryImageSet::new(images, AuxStrategy::CornerPatches)
}

/// `n` grid-cell indices (`row * 8 + col`) drawn uniformly with replacement.
pub fn random_tile_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..GRID * GRID)).collect()
}

/// `n ≤ 64` distinct grid-cell indices.
pub fn distinct_tile_indices(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > GRID * GRID {
        return Err(Error::invalid(format!("cannot draw {n} distinct tiles from 64")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..GRID * GRID).collect();
    all.shuffle(&mut rng);
    all.truncate(n);
    Ok(all)
}

fn tiles_at(x: &Image, indices: &[usize], out_size: (usize, usize)) -> Result<Vec<Image>> {
    indices
        .iter()
        .map(|&i| Ok(grid_tile(x, i / GRID, i % GRID)?.resize_nearest(out_size.0, out_size.1)))
        .collect()
}

/// `n` grid tiles drawn with replacement; adjacent or foreground tiles are
/// allowed.
pub fn random_patches(x: &Image, n: usize, seed: u64, out_size: (usize, usize)) -> Result<AuxiliaryImageSet> {
    if n == 0 {
        return Err(Error::invalid("random_patches needs n >= 1"));
    }
    check_divisible(x, GRID)?;
    AuxiliaryImageSet::new(tiles_at(x, &random_tile_indices(n, seed), out_size)?, AuxStrategy::RandomPatches)
}

/// Variant of [`random_patches`] drawing without replacement.
pub fn random_patches_distinct(
    x: &Image,
    n: usize,
    seed: u64,
    out_size: (usize, usize),
) -> Result<AuxiliaryImageSet> {
    if n == 0 {
        return Err(Error::invalid("random_patches needs n >= 1"));
    }
    check_divisible(x, GRID)?;
    AuxiliaryImageSet::new(tiles_at(x, &distinct_tile_indices(n, seed)?, out_size)?, AuxStrategy::RandomPatches)
}

/// Scrambles the image as a seeded permutation of its 4×4-pixel patches.
pub fn shuffle_patches(x: &Image, seed: u64) -> Result<AuxiliaryImageSet> {
    check_divisible(x, SHUFFLE_PATCH)?;
    let (rows, cols) = (x.height() / SHUFFLE_PATCH, x.width() / SHUFFLE_PATCH);
    let mut perm: Vec<usize> = (0..rows * cols).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = x.clone();
    let c = x.channels();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = ((dst / cols) * SHUFFLE_PATCH, (dst % cols) * SHUFFLE_PATCH);
        let (sy, sx) = ((src / cols) * SHUFFLE_PATCH, (src % cols) * SHUFFLE_PATCH);
        for r in 0..SHUFFLE_PATCH {
            for q in 0..SHUFFLE_PATCH {
                for ch in 0..c {
                    out.set(dy + r, dx + q, ch, x.get(sy + r, sx + q, ch));
                }
            }
        }
    }
    AuxiliaryImageSet::new(vec![out], AuxStrategy::Shuffle)
}

/// Pool indices ranked by descending cosine similarity to `x`, ties by index.
pub fn rank_reference_pool(model: &dyn VisionLanguageModel, x: &Image, pool: &[Image]) -> Result<Vec<(usize, f64)>> {
    if pool.is_empty() {
        return Err(Error::invalid("reference pool is empty"));
    }
    let query = model.encode_image(x)?;
    let mut ranked = pool
        .iter()
        .enumerate()
        .map(|(i, p)| Ok((i, query.cosine(&model.encode_image(p)?))))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// The `n` pool images most similar to `x`, most similar first.
pub fn select_reference_images(
    model: &dyn VisionLanguageModel,
    x: &Image,
    pool: &[Image],
    n: usize,
) -> Result<AuxiliaryImageSet> {
    if n == 0 || n > pool.len() {
        return Err(Error::invalid(format!(
            "cannot select {n} references from a pool of {}",
            pool.len()
        )));
    }
    let ranked = rank_reference_pool(model, x, pool)?;
    let images = ranked.iter().take(n).map(|(i, _)| pool[*i].clone()).collect();
    AuxiliaryImageSet::new(images, AuxStrategy::Reference)
}
