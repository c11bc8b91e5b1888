//! Seeded single-block occlusion.
//!
//! An occlusion at ratio `p` (percent of image area) blanks one axis-aligned
//! block whose side fractions are both `sqrt(p / 100)`, placed uniformly among
//! all positions that keep it fully inside the image. The default grid
//! `{0, 0.25, 1, 4, 9, 25, 49, 81}` corresponds to side fractions
//! `{0, .05, .1, .2, .3, .5, .7, .9}`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ImageTensor;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum OcclusionError {
    #[error("occlusion ratio {0} outside [0, 100]")]
    Ratio(f64),
    #[error("fill value {0} outside [0, 1]")]
    Fill(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    ratio_percent: f64,
    seed: u64,
    fill_value: f32,
}

impl OcclusionSpec {
    pub fn new(ratio_percent: f64, seed: u64) -> Result<Self, OcclusionError> {
        Self::with_fill(ratio_percent, seed, 0.0)
    }

    pub fn with_fill(ratio_percent: f64, seed: u64, fill_value: f32) -> Result<Self, OcclusionError> {
        if !(0.0..=100.0).contains(&ratio_percent) {
            return Err(OcclusionError::Ratio(ratio_percent));
        }
        if !(0.0..=1.0).contains(&fill_value) {
            return Err(OcclusionError::Fill(fill_value));
        }
        Ok(Self {
            ratio_percent,
            seed,
            fill_value,
        })
    }

    pub fn ratio_percent(&self) -> f64 {
        self.ratio_percent
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fill_value(&self) -> f32 {
        self.fill_value
    }
}

/// Occluded block, `[top, top + block_h) × [left, left + block_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlacement {
    pub top: usize,
    pub left: usize,
    pub block_h: usize,
    pub block_w: usize,
}

impl BlockPlacement {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.block_h && col >= self.left && col < self.left + self.block_w
    }

    pub fn area(&self) -> usize {
        self.block_h * self.block_w
    }
}

/// Block size for an area ratio: each side is `round(sqrt(p/100) · side)`.
pub fn block_dims(ratio_percent: f64, height: usize, width: usize) -> (usize, usize) {
    let f = (ratio_percent.clamp(0.0, 100.0) / 100.0).sqrt();
    let side = |n: usize| ((f * n as f64).round() as usize).min(n);
    (side(height), side(width))
}

/// Deterministic placement for `(spec, height, width)`.
pub fn place_block(spec: &OcclusionSpec, height: usize, width: usize) -> BlockPlacement {
    let (block_h, block_w) = block_dims(spec.ratio_percent, height, width);
    if block_h == 0 || block_w == 0 {
        return BlockPlacement {
            top: 0,
            left: 0,
            block_h: 0,
            block_w: 0,
        };
    }
    let mut rng = seed::rng(spec.seed);
    let top = rng.random_range(0..=height - block_h);
    let left = rng.random_range(0..=width - block_w);
    BlockPlacement {
        top,
        left,
        block_h,
        block_w,
    }
}

/// Returns the occluded copy together with where the block landed.
pub fn apply_occlusion_with_placement(image: &ImageTensor, spec: &OcclusionSpec) -> (ImageTensor, BlockPlacement) {
    let placement = place_block(spec, image.height(), image.width());
    let mut out = image.clone();
    let channels = image.channels();
    let fill = spec.fill_value;
    for row in placement.top..placement.top + placement.block_h {
        let start = out.index(row, placement.left, 0);
        let end = start + placement.block_w * channels;
        out.pixels_mut()[start..end].fill(fill);
    }
    (out, placement)
}

/// Occluded copy of `image`; the input is untouched.
pub fn apply_occlusion(image: &ImageTensor, spec: &OcclusionSpec) -> ImageTensor {
    apply_occlusion_with_placement(image, spec).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DEFAULT_RATIOS;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> ImageTensor {
        let n = h * w * c;
        let px = (0..n).map(|i| 0.05 + 0.9 * (i as f32 / n as f32)).collect();
        ImageTensor::new(h, w, c, px).unwrap()
    }

    #[test]
    fn block_dims_examples() {
        assert_eq!(block_dims(25.0, 100, 100), (50, 50));
        assert_eq!(block_dims(0.0, 224, 224), (0, 0));
        assert_eq!(block_dims(81.0, 10, 20), (9, 18));
        assert_eq!(block_dims(100.0, 7, 13), (7, 13));
    }

    #[test]
    fn ratio_zero_is_identity() {
        let img = ramp(9, 11, 3);
        let spec = OcclusionSpec::new(0.0, 42).unwrap();
        assert_eq!(apply_occlusion(&img, &spec), img);
    }

    #[test]
    fn quarter_area_blanks_one_50x50_block() {
        let img = ramp(100, 100, 1);
        let spec = OcclusionSpec::new(25.0, 3).unwrap();
        let (out, pl) = apply_occlusion_with_placement(&img, &spec);
        let zeroed: Vec<(usize, usize)> = (0..100)
            .flat_map(|r| (0..100).map(move |c| (r, c)))
            .filter(|&(r, c)| out.get(r, c, 0) == 0.0)
            .collect();
        assert_eq!(zeroed.len(), 2500);
        assert!(zeroed.iter().all(|&(r, c)| pl.contains(r, c)));
        assert_eq!((pl.block_h, pl.block_w), (50, 50));
    }

    #[test]
    fn ratio_81_on_10x10_blanks_81_pixels() {
        let img = ImageTensor::filled(10, 10, 1, 1.0).unwrap();
        let out = apply_occlusion(&img, &OcclusionSpec::new(81.0, 9).unwrap());
        assert_eq!(out.pixels().iter().filter(|v| **v == 0.0).count(), 81);
    }

    #[test]
    fn fill_applies_to_all_channels() {
        let img = ramp(6, 6, 3);
        let spec = OcclusionSpec::with_fill(25.0, 1, 0.5).unwrap();
        let (out, pl) = apply_occlusion_with_placement(&img, &spec);
        for ch in 0..3 {
            assert_eq!(out.get(pl.top, pl.left, ch), 0.5);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(OcclusionSpec::new(100.5, 0), Err(OcclusionError::Ratio(100.5)));
        assert_eq!(OcclusionSpec::new(-1.0, 0), Err(OcclusionError::Ratio(-1.0)));
        assert!(OcclusionSpec::with_fill(10.0, 0, 1.5).is_err());
    }

    #[test]
    fn block_area_is_monotone_in_ratio() {
        for (h, w) in [(32, 32), (64, 128), (7, 3)] {
            let areas: Vec<usize> = DEFAULT_RATIOS
                .iter()
                .map(|&p| {
                    let (bh, bw) = block_dims(p, h, w);
                    bh * bw
                })
                .collect();
            assert!(areas.windows(2).all(|a| a[0] <= a[1]), "{areas:?}");
        }
    }

    proptest! {
        #[test]
        fn area_within_rounding_bound(p in 0.0f64..=100.0, h in 1usize..300, w in 1usize..300) {
            let (bh, bw) = block_dims(p, h, w);
            let nominal = p / 100.0 * (h * w) as f64;
            prop_assert!(((bh * bw) as f64 - nominal).abs() <= (h + w + 1) as f64);
        }

        #[test]
        fn outside_block_is_untouched(p in 0.0f64..=100.0, seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
            let img = ramp(h, w, 1);
            let spec = OcclusionSpec::new(p, seed).unwrap();
            let (out, pl) = apply_occlusion_with_placement(&img, &spec);
            prop_assert!(pl.top + pl.block_h <= h && pl.left + pl.block_w <= w);
            for r in 0..h {
                for c in 0..w {
                    if pl.contains(r, c) {
                        prop_assert_eq!(out.get(r, c, 0), 0.0);
                    } else {
                        prop_assert_eq!(out.get(r, c, 0).to_bits(), img.get(r, c, 0).to_bits());
                    }
                }
            }
            prop_assert_eq!(apply_occlusion(&img, &spec), out);
        }
    }
}
