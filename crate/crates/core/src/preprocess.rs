//! Preprocessing variants applied to windowed slices.
//!
//! * A: no additional processing.
//! * B: band filter removing calcification/skull and water intensities,
//!   followed by a grayscale opening with a 4×4 flat element.
//! * C: 3×3 mean filter, contrast stretch to `[low, high]`, and removal of
//!   saturated pixels.
//!
//! All windowed operators use replicate (edge-clamp) padding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Image, UnitSlice};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("slice of {rows}x{cols} is smaller than the {need_rows}x{need_cols} window")]
    DegenerateInput {
        rows: usize,
        cols: usize,
        need_rows: usize,
        need_cols: usize,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariantId {
    A,
    B,
    C,
}

impl VariantId {
    pub const ALL: [VariantId; 3] = [VariantId::A, VariantId::B, VariantId::C];
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VariantId::A => "A",
            VariantId::B => "B",
            VariantId::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for VariantId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(VariantId::A),
            "B" | "b" => Ok(VariantId::B),
            "C" | "c" => Ok(VariantId::C),
            other => Err(format!("unknown variant {other:?}, expected A, B or C")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandFilterParams {
    pub low_cut: f64,
    pub high_cut: f64,
}

impl Default for BandFilterParams {
    fn default() -> Self {
        Self {
            low_cut: 0.18,
            high_cut: 0.8,
        }
    }
}

impl BandFilterParams {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(0.0 <= self.low_cut && self.low_cut < self.high_cut && self.high_cut <= 1.0) {
            return Err(PreprocessError::InvalidParams(format!(
                "band filter needs 0 <= low_cut < high_cut <= 1, got {} / {}",
                self.low_cut, self.high_cut
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastParams {
    pub low: f64,
    pub high: f64,
}

impl Default for ContrastParams {
    fn default() -> Self {
        Self {
            low: 0.15,
            high: 0.65,
        }
    }
}

impl ContrastParams {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(0.0 <= self.low && self.low < self.high && self.high <= 1.0) {
            return Err(PreprocessError::InvalidParams(format!(
                "contrast stretch needs 0 <= low < high <= 1, got {} / {}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Zeroes pixels at or beyond either cut; in-band values pass unchanged.
pub fn band_filter(slice: &UnitSlice, p: &BandFilterParams) -> UnitSlice {
    slice.map(|x| {
        if x >= p.high_cut || x <= p.low_cut {
            0.0
        } else {
            x
        }
    })
}

fn check_window(slice: &Image, rows: usize, cols: usize) -> Result<(), PreprocessError> {
    if slice.rows() < rows || slice.cols() < cols || rows == 0 || cols == 0 {
        return Err(PreprocessError::DegenerateInput {
            rows: slice.rows(),
            cols: slice.cols(),
            need_rows: rows,
            need_cols: cols,
        });
    }
    Ok(())
}

/// Separable rectangular min/max filter. The window at `i` spans
/// `i + lo ..= i + hi` along each axis, clamped to the grid.
fn rank_filter(
    src: &Image,
    (row_lo, row_hi): (isize, isize),
    (col_lo, col_hi): (isize, isize),
    pick: fn(f64, f64) -> f64,
) -> Image {
    let (rows, cols) = src.shape();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut horiz = Image::zeros(rows, cols);
    for r in 0..rows {
        let row = src.row(r);
        for c in 0..cols {
            let (a, b) = (clamp(c as isize + col_lo, cols), clamp(c as isize + col_hi, cols));
            let v = row[a..=b].iter().copied().reduce(pick).unwrap();
            horiz.set(r, c, v);
        }
    }
    let mut out = Image::zeros(rows, cols);
    for r in 0..rows {
        let (a, b) = (clamp(r as isize + row_lo, rows), clamp(r as isize + row_hi, rows));
        for c in 0..cols {
            let mut v = horiz.get(a, c);
            for rr in a + 1..=b {
                v = pick(v, horiz.get(rr, c));
            }
            out.set(r, c, v);
        }
    }
    out
}

/// Anchor of an even or odd flat element: `(size - 1) / 2` from its top-left,
/// i.e. `(1, 1)` for 4×4.
fn anchor(size: usize) -> isize {
    (size as isize - 1) / 2
}

/// Grayscale erosion with a flat `se_rows × se_cols` element.
pub fn erode(slice: &UnitSlice, se_rows: usize, se_cols: usize) -> Result<UnitSlice, PreprocessError> {
    check_window(slice, se_rows, se_cols)?;
    let (ar, ac) = (anchor(se_rows), anchor(se_cols));
    Ok(rank_filter(
        slice,
        (-ar, se_rows as isize - 1 - ar),
        (-ac, se_cols as isize - 1 - ac),
        f64::min,
    ))
}

/// Grayscale dilation with the element reflected about its anchor.
pub fn dilate(slice: &UnitSlice, se_rows: usize, se_cols: usize) -> Result<UnitSlice, PreprocessError> {
    check_window(slice, se_rows, se_cols)?;
    let (ar, ac) = (anchor(se_rows), anchor(se_cols));
    Ok(rank_filter(
        slice,
        (-(se_rows as isize - 1 - ar), ar),
        (-(se_cols as isize - 1 - ac), ac),
        f64::max,
    ))
}

/// Grayscale opening: erosion then dilation with the reflected element.
pub fn morph_open(slice: &UnitSlice, se_rows: usize, se_cols: usize) -> Result<UnitSlice, PreprocessError> {
    dilate(&erode(slice, se_rows, se_cols)?, se_rows, se_cols)
}

/// Mean of the `k × k` neighborhood (odd or even `k`, anchored like the
/// structuring elements).
pub fn mean_filter(slice: &UnitSlice, k: usize) -> Result<UnitSlice, PreprocessError> {
    check_window(slice, k, k)?;
    let a = anchor(k);
    let n = (k * k) as f64;
    Ok(Image::from_fn(slice.rows(), slice.cols(), |r, c| {
        let mut sum = 0.0;
        for dr in 0..k as isize {
            for dc in 0..k as isize {
                sum += slice.get_clamped(r as isize + dr - a, c as isize + dc - a);
            }
        }
        sum / n
    }))
}

/// `clamp((x - low) / (high - low), 0, 1)`.
pub fn contrast_stretch(slice: &UnitSlice, p: &ContrastParams) -> UnitSlice {
    let span = p.high - p.low;
    slice.map(|x| ((x - p.low) / span).clamp(0.0, 1.0))
}

/// Pixels exactly equal to 1 become 0.
pub fn saturation_zero(slice: &UnitSlice) -> UnitSlice {
    slice.map(|x| if x == 1.0 { 0.0 } else { x })
}

pub const OPENING_SIZE: usize = 4;
pub const MEAN_KERNEL: usize = 3;

pub fn apply_variant(slice: &UnitSlice, variant: VariantId) -> Result<UnitSlice, PreprocessError> {
    match variant {
        VariantId::A => Ok(slice.clone()),
        VariantId::B => morph_open(
            &band_filter(slice, &BandFilterParams::default()),
            OPENING_SIZE,
            OPENING_SIZE,
        ),
        VariantId::C => {
            let smoothed = mean_filter(slice, MEAN_KERNEL)?;
            let stretched = contrast_stretch(&smoothed, &ContrastParams::default());
            Ok(saturation_zero(&stretched))
        }
    }
}
