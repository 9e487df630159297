//! Depth normalization around the anatomical center slice and bilinear
//! resizing to a uniform slice shape.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::PatientRecord;
use crate::grid::{Image, UnitSlice, UnitVolume};
use crate::hu::{raw_to_hu, window_rescale};

#[derive(Debug, Error, PartialEq)]
pub enum PrepError {
    #[error("need at least {depth} slices, patient has {n}")]
    TooFewSlices { n: usize, depth: usize },
    #[error("slice of {rows}x{cols} is too small to resample")]
    DegenerateInput { rows: usize, cols: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceSelectConfig {
    /// Fraction of the stack, counted from the vertex, where the window is centered.
    pub center_position: f64,
    /// Number of slices kept.
    pub depth: usize,
}

impl Default for SliceSelectConfig {
    fn default() -> Self {
        Self {
            center_position: 2.0 / 3.0,
            depth: 30,
        }
    }
}

impl SliceSelectConfig {
    pub fn validate(&self) -> Result<(), PrepError> {
        if !(self.center_position > 0.0 && self.center_position < 1.0) {
            return Err(PrepError::InvalidConfig(format!(
                "center_position must lie in (0, 1), got {}",
                self.center_position
            )));
        }
        if self.depth == 0 {
            return Err(PrepError::InvalidConfig("depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResizeConfig {
    pub target_rows: usize,
    pub target_cols: usize,
    pub majority_rows: usize,
    pub majority_cols: usize,
}

impl Default for ResizeConfig {
    fn default() -> Self {
        Self {
            target_rows: 256,
            target_cols: 256,
            majority_rows: 512,
            majority_cols: 512,
        }
    }
}

impl ResizeConfig {
    pub fn validate(&self) -> Result<(), PrepError> {
        if [
            self.target_rows,
            self.target_cols,
            self.majority_rows,
            self.majority_cols,
        ]
        .contains(&0)
        {
            return Err(PrepError::InvalidConfig(
                "resize dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Guards against `n * fraction` landing one ulp below an integer.
const CENTER_EPS: f64 = 1e-9;

/// Index of the central slice, `floor(n * center_position)`.
pub fn center_index(n: usize, center_position: f64) -> usize {
    (n as f64 * center_position + CENTER_EPS).floor() as usize
}

/// Contiguous window of `depth` slice indices centered on the central slice,
/// shifted as little as needed to stay inside `[0, n)`.
pub fn select_slices(n: usize, cfg: &SliceSelectConfig) -> Result<Range<usize>, PrepError> {
    cfg.validate()?;
    if n < cfg.depth {
        return Err(PrepError::TooFewSlices {
            n,
            depth: cfg.depth,
        });
    }
    let p = center_index(n, cfg.center_position);
    let start = p.saturating_sub(cfg.depth / 2).min(n - cfg.depth);
    Ok(start..start + cfg.depth)
}

/// Bilinear resampling with corner-aligned sampling: output pixel `i` reads
/// source coordinate `i * (in - 1) / (out - 1)`.
pub fn resize_bilinear(src: &Image, out_rows: usize, out_cols: usize) -> Result<Image, PrepError> {
    let (rows, cols) = src.shape();
    if rows < 2 || cols < 2 {
        return Err(PrepError::DegenerateInput { rows, cols });
    }
    if out_rows == 0 || out_cols == 0 {
        return Err(PrepError::InvalidConfig("output size must be positive".into()));
    }
    if (out_rows, out_cols) == (rows, cols) {
        return Ok(src.clone());
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, f64)> {
        let scale = if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        };
        (0..n_out)
            .map(|i| {
                let x = i as f64 * scale;
                let i0 = (x.floor() as usize).min(n_in - 2);
                (i0, x - i0 as f64)
            })
            .collect()
    };
    let ys = axis(rows, out_rows);
    let xs = axis(cols, out_cols);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for &(y0, fy) in &ys {
        let top = src.row(y0);
        let bottom = src.row(y0 + 1);
        for &(x0, fx) in &xs {
            let t = top[x0] + fx * (top[x0 + 1] - top[x0]);
            let b = bottom[x0] + fx * (bottom[x0 + 1] - bottom[x0]);
            out.push(t + fy * (b - t));
        }
    }
    Ok(Image::from_vec(out_rows, out_cols, out))
}

/// Brings a unit slice to the target shape. Slices whose shape is neither the
/// majority shape nor already the target are first resampled to the majority
/// shape. Outputs are clamped to `[0, 1]`.
pub fn resize_slice(slice: &UnitSlice, cfg: &ResizeConfig) -> Result<UnitSlice, PrepError> {
    cfg.validate()?;
    let (rows, cols) = slice.shape();
    if rows < 2 || cols < 2 {
        return Err(PrepError::DegenerateInput { rows, cols });
    }
    let majority = (cfg.majority_rows, cfg.majority_cols);
    let target = (cfg.target_rows, cfg.target_cols);
    let out = if slice.shape() != majority && slice.shape() != target {
        let mid = resize_bilinear(slice, majority.0, majority.1)?;
        resize_bilinear(&mid, target.0, target.1)?
    } else {
        resize_bilinear(slice, target.0, target.1)?
    };
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// HU conversion, windowing, depth selection and resizing for one patient.
///
/// Conversion and windowing are pointwise, so only the selected slices are
/// converted.
pub fn prepare_volume(
    record: &PatientRecord,
    select: &SliceSelectConfig,
    resize: &ResizeConfig,
) -> Result<UnitVolume, PrepError> {
    let range = select_slices(record.slices.len(), select)?;
    let slices = record.slices[range]
        .iter()
        .map(|s| resize_slice(&window_rescale(&raw_to_hu(s)), resize))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(UnitVolume::new(record.patient_id.clone(), slices))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_for_ninety_slices() {
        let r = select_slices(90, &SliceSelectConfig::default()).unwrap();
        assert_eq!(r, 45..75);
    }

    #[test]
    fn exact_depth_uses_whole_stack() {
        assert_eq!(select_slices(30, &SliceSelectConfig::default()).unwrap(), 0..30);
    }

    #[test]
    fn too_few_slices() {
        assert_eq!(
            select_slices(29, &SliceSelectConfig::default()),
            Err(PrepError::TooFewSlices { n: 29, depth: 30 })
        );
    }

    #[test]
    fn window_shifts_at_the_end() {
        let cfg = SliceSelectConfig {
            center_position: 0.95,
            depth: 10,
        };
        assert_eq!(select_slices(20, &cfg).unwrap(), 10..20);
    }

    #[test]
    fn invalid_configs() {
        for (cp, depth) in [(0.0, 3), (1.0, 3), (0.5, 0), (f64::NAN, 3)] {
            let cfg = SliceSelectConfig {
                center_position: cp,
                depth,
            };
            assert!(matches!(
                select_slices(50, &cfg),
                Err(PrepError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn constant_slice_stays_constant() {
        let s = Image::filled(512, 512, 0.37);
        let out = resize_slice(&s, &ResizeConfig::default()).unwrap();
        assert_eq!(out.shape(), (256, 256));
        assert!(out.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn degenerate_input() {
        let s = Image::zeros(1, 5);
        assert_eq!(
            resize_slice(&s, &ResizeConfig::default()),
            Err(PrepError::DegenerateInput { rows: 1, cols: 5 })
        );
    }

    #[test]
    fn target_shaped_slice_is_untouched() {
        let s = Image::from_fn(256, 256, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        assert_eq!(resize_slice(&s, &ResizeConfig::default()).unwrap(), s);
    }
}
