//! Seeded RandAugment-style view generation.
//!
//! Each view applies `ops_per_view` operations drawn uniformly from the
//! allowed list, with strengths scaled by `magnitude / 30`. A view is a pure
//! function of `(policy, seed, view index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::derive_indexed;

pub const MAX_MAGNITUDE: u32 = 30;

// Strengths at magnitude 30.
const MAX_TRANSLATE_FRACTION: f64 = 150.0 / 331.0;
const MAX_ROTATE_DEGREES: f64 = 30.0;
const MAX_BRIGHTNESS_DELTA: f64 = 0.9;
const MAX_CUTOUT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentOp {
    Flip,
    Translate,
    Rotate,
    ColorJitter,
    Cutout,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Flip,
        AugmentOp::Translate,
        AugmentOp::Rotate,
        AugmentOp::ColorJitter,
        AugmentOp::Cutout,
    ];
}

/// A concrete transform with its sampled parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Flip,
    Translate { dy: i64, dx: i64 },
    Rotate { degrees: f64 },
    Brightness { factor: f64 },
    Cutout { y0: usize, x0: usize, size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub ops_per_view: usize,
    pub magnitude: u32,
    pub ops: Vec<AugmentOp>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            ops_per_view: 2,
            magnitude: 9,
            ops: AugmentOp::ALL.to_vec(),
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            ops_per_view: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitude > MAX_MAGNITUDE {
            return Err(Error::invalid(format!("magnitude {} exceeds 30", self.magnitude)));
        }
        if self.ops_per_view > 0 && self.ops.is_empty() {
            return Err(Error::invalid("augment policy has no allowed ops"));
        }
        Ok(())
    }

    fn strength(&self) -> f64 {
        f64::from(self.magnitude) / f64::from(MAX_MAGNITUDE)
    }

    /// The transforms of view `view_index` for an `h×w` image.
    pub fn transforms(&self, seed: u64, view_index: usize, h: usize, w: usize) -> Vec<Transform> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(seed, "augment-view", view_index as u64));
        let m = self.strength();
        (0..self.ops_per_view)
            .map(|_| {
                let op = self.ops[rng.random_range(0..self.ops.len())];
                match op {
                    AugmentOp::Flip => Transform::Flip,
                    AugmentOp::Translate => {
                        let my = (MAX_TRANSLATE_FRACTION * m * h as f64).round() as i64;
                        let mx = (MAX_TRANSLATE_FRACTION * m * w as f64).round() as i64;
                        Transform::Translate {
                            dy: rng.random_range(-my..=my),
                            dx: rng.random_range(-mx..=mx),
                        }
                    }
                    AugmentOp::Rotate => {
                        let max = MAX_ROTATE_DEGREES * m;
                        Transform::Rotate {
                            degrees: (2.0 * rng.random::<f64>() - 1.0) * max,
                        }
                    }
                    AugmentOp::ColorJitter => Transform::Brightness {
                        factor: 1.0 + (2.0 * rng.random::<f64>() - 1.0) * MAX_BRIGHTNESS_DELTA * m,
                    },
                    AugmentOp::Cutout => {
                        let size = ((MAX_CUTOUT_FRACTION * m * h.min(w) as f64).round() as usize).min(h.min(w));
                        Transform::Cutout {
                            y0: rng.random_range(0..=h - size),
                            x0: rng.random_range(0..=w - size),
                            size,
                        }
                    }
                }
            })
            .collect()
    }

    /// View `view_index` of `x`.
    pub fn view(&self, x: &Image, seed: u64, view_index: usize) -> Image {
        self.transforms(seed, view_index, x.height(), x.width())
            .iter()
            .fold(x.clone(), |img, t| apply(&img, t))
    }

    /// `n` views; view 0 is `x` itself.
    pub fn views(&self, x: &Image, n: usize, seed: u64) -> Vec<Image> {
        (0..n)
            .map(|i| if i == 0 { x.clone() } else { self.view(x, seed, i) })
            .collect()
    }
}

/// Applies one transform; pixels pulled from outside the frame are 0.
pub fn apply(x: &Image, t: &Transform) -> Image {
    let (h, w, c) = x.shape();
    match *t {
        Transform::Flip => remap(x, |y, xx| Some((y, w - 1 - xx))),
        Transform::Translate { dy, dx } => remap(x, |y, xx| {
            let sy = y as i64 - dy;
            let sx = xx as i64 - dx;
            ((0..h as i64).contains(&sy) && (0..w as i64).contains(&sx)).then_some((sy as usize, sx as usize))
        }),
        Transform::Rotate { degrees } => {
            let (s, co) = degrees.to_radians().sin_cos();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            remap(x, |y, xx| {
                let (ry, rx) = (y as f64 - cy, xx as f64 - cx);
                // inverse rotation of the destination coordinate
                let sy = (co * ry - s * rx + cy).round();
                let sx = (s * ry + co * rx + cx).round();
                (sy >= 0.0 && sx >= 0.0 && sy < h as f64 && sx < w as f64).then_some((sy as usize, sx as usize))
            })
        }
        Transform::Brightness { factor } => {
            let mut out = x.clone();
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        out.set(y, xx, ch, x.get(y, xx, ch) * factor);
                    }
                }
            }
            out
        }
        Transform::Cutout { y0, x0, size } => {
            let mut out = x.clone();
            for y in y0..(y0 + size).min(h) {
                for xx in x0..(x0 + size).min(w) {
                    out.clear_pixel(y, xx);
                }
            }
            out
        }
    }
}

fn remap(x: &Image, source: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Image {
    let (h, w, c) = x.shape();
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        for xx in 0..w {
            if let Some((sy, sx)) = source(y, xx) {
                for ch in 0..c {
                    out.set(y, xx, ch, x.get(sy, sx, ch));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        let data = (0..16 * 16 * 3).map(|i| (i % 97) as f64 / 96.0).collect();
        Image::new(16, 16, 3, data).unwrap()
    }

    #[test]
    fn views_are_deterministic() {
        let p = AugmentPolicy::default();
        let x = ramp();
        assert_eq!(p.views(&x, 6, 42), p.views(&x, 6, 42));
        assert_eq!(p.views(&x, 1, 42)[0], x);
        assert_ne!(p.views(&x, 6, 42), p.views(&x, 6, 43));
    }

    #[test]
    fn identity_policy_is_identity() {
        let x = ramp();
        assert_eq!(AugmentPolicy::identity().view(&x, 1, 3), x);
    }

    #[test]
    fn flip_twice_and_zero_rotation() {
        let x = ramp();
        assert_eq!(apply(&apply(&x, &Transform::Flip), &Transform::Flip), x);
        assert_eq!(apply(&x, &Transform::Rotate { degrees: 0.0 }), x);
        assert_eq!(apply(&x, &Transform::Translate { dy: 0, dx: 0 }), x);
        let shifted = apply(&x, &Transform::Translate { dy: 1, dx: 2 });
        assert_eq!(shifted.pixel(3, 5), x.pixel(2, 3));
        assert_eq!(shifted.pixel(0, 0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn parameters_respect_magnitude() {
        let p = AugmentPolicy { ops_per_view: 8, magnitude: 9, ops: AugmentOp::ALL.to_vec() };
        for v in 0..50 {
            for t in p.transforms(7, v, 64, 64) {
                match t {
                    Transform::Translate { dy, dx } => assert!(dy.abs() <= 9 && dx.abs() <= 9),
                    Transform::Rotate { degrees } => assert!(degrees.abs() <= 9.0),
                    Transform::Brightness { factor } => assert!((factor - 1.0).abs() <= 0.27 + 1e-12),
                    Transform::Cutout { size, .. } => assert_eq!(size, 10),
                    Transform::Flip => {}
                }
            }
        }
        assert!(AugmentPolicy { magnitude: 31, ..Default::default() }.validate().is_err());
        assert!(AugmentPolicy { ops: vec![], ..Default::default() }.validate().is_err());
    }
}
