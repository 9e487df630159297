//! Training-time augmentation: random rotation and horizontal flip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Image, UnitSlice};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub flip_probability: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            flip_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..90.0).contains(&self.max_rotation_deg) {
            return Err(format!(
                "max_rotation_deg must be in [0, 90), got {}",
                self.max_rotation_deg
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(format!(
                "flip_probability must be in [0, 1], got {}",
                self.flip_probability
            ));
        }
        Ok(())
    }

    /// No rotation and no flip.
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            flip_probability: 0.0,
            seed: 0,
        }
    }
}

/// Reverses the column order.
pub fn hflip(slice: &UnitSlice) -> UnitSlice {
    let cols = slice.cols();
    Image::from_fn(slice.rows(), cols, |r, c| slice.get(r, cols - 1 - c))
}

/// Reverses the row order.
pub fn vflip(slice: &UnitSlice) -> UnitSlice {
    let rows = slice.rows();
    Image::from_fn(rows, slice.cols(), |r, c| slice.get(rows - 1 - r, c))
}

/// Bilinear sample where taps outside the grid read as 0.
fn sample_zero_padded(src: &Image, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let tap = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= src.rows() as isize || c >= src.cols() as isize {
            0.0
        } else {
            src.get(r as usize, c as usize)
        }
    };
    let top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1) * fx;
    let bottom = tap(y0 + 1, x0) * (1.0 - fx) + tap(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates about the slice center by `angle_deg` (counter-clockwise as
/// displayed, rows pointing down) with bilinear inverse mapping. Samples
/// falling outside the source read as 0; the output keeps the input shape.
pub fn rotate(slice: &UnitSlice, angle_deg: f64) -> UnitSlice {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (slice.rows() as f64 - 1.0) / 2.0;
    let cx = (slice.cols() as f64 - 1.0) / 2.0;
    Image::from_fn(slice.rows(), slice.cols(), |r, c| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        let sx = cx + cos * dx - sin * dy;
        let sy = cy + sin * dx + cos * dy;
        sample_zero_padded(slice, sy, sx).clamp(0.0, 1.0)
    })
}

/// Draws an angle uniformly in `[-max, max]` and a flip decision, then
/// rotates and (maybe) flips. Always consumes exactly two draws from `rng`.
pub fn augment_sample<R: Rng + ?Sized>(slice: &UnitSlice, cfg: &AugmentConfig, rng: &mut R) -> UnitSlice {
    let u_angle: f64 = rng.random();
    let u_flip: f64 = rng.random();
    let angle = (2.0 * u_angle - 1.0) * cfg.max_rotation_deg;
    let rotated = if angle == 0.0 {
        slice.clone()
    } else {
        rotate(slice, angle)
    };
    if u_flip < cfg.flip_probability {
        hflip(&rotated)
    } else {
        rotated
    }
}
