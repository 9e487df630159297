//! Hounsfield-unit conversion, the brain window, and unit-volume file formats.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::dicom::DicomSlice;
use crate::grid::{Image, UnitSlice, UnitVolume};

/// Lower edge of the brain window in HU.
pub const WINDOW_LOW_HU: f64 = 0.0;
/// Upper edge of the brain window in HU.
pub const WINDOW_HIGH_HU: f64 = 100.0;

const UVOL_MAGIC: &[u8; 4] = b"UVOL";

#[derive(Debug, Error)]
pub enum HuError {
    #[error("water and air absorption coefficients coincide ({0})")]
    DegenerateCalibration(f64),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad unit-volume file: {0}")]
    BadFormat(String),
}

/// Physical HU definition from absorption coefficients. Reference form; files
/// carry the linear rescale parameters instead, see [`raw_to_hu`].
pub fn hu_definition(mu: f64, mu_water: f64, mu_air: f64) -> Result<f64, HuError> {
    let span = mu_water - mu_air;
    if span == 0.0 {
        return Err(HuError::DegenerateCalibration(mu_water));
    }
    Ok((mu - mu_water) / span * 1000.0)
}

/// `slope * raw + intercept` per pixel.
pub fn raw_to_hu(slice: &DicomSlice) -> Image {
    let (m, b) = (slice.rescale_slope, slice.rescale_intercept);
    Image::from_vec(
        slice.rows,
        slice.cols,
        slice.raw_pixels.iter().map(|&v| m * v as f64 + b).collect(),
    )
}

/// Maps one HU value into `[0, 1]` through the `<0, 100>` HU window.
#[inline]
pub fn window_value(x: f64) -> f64 {
    if x >= WINDOW_HIGH_HU {
        1.0
    } else if x < WINDOW_LOW_HU {
        0.0
    } else {
        x / WINDOW_HIGH_HU
    }
}

pub fn window_rescale(hu: &Image) -> UnitSlice {
    hu.map(window_value)
}

/// Writes the `UVOL` format: magic, `u32` depth, rows, cols (little endian),
/// then every value as a little-endian `f64`, slice by slice in row-major order.
pub fn write_unit_volume<W: Write>(mut w: W, volume: &UnitVolume) -> Result<(), HuError> {
    let (rows, cols) = volume.slice_shape();
    w.write_all(UVOL_MAGIC)?;
    for v in [volume.depth(), rows, cols] {
        let v = u32::try_from(v).map_err(|_| HuError::BadFormat("dimension exceeds u32".into()))?;
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(rows * cols * 8);
    for slice in volume.slices() {
        buf.clear();
        for &v in slice.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a `UVOL` file. The patient id is not stored and is set to `patient_id`.
pub fn read_unit_volume<R: Read>(mut r: R, patient_id: &str) -> Result<UnitVolume, HuError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != UVOL_MAGIC {
        return Err(HuError::BadFormat("missing UVOL magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (depth, rows, cols) = (dim(4), dim(8), dim(12));
    let mut slices = Vec::with_capacity(depth);
    let mut buf = vec![0u8; rows * cols * 8];
    for _ in 0..depth {
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        slices.push(Image::from_vec(rows, cols, data));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(HuError::BadFormat("trailing bytes after volume".into()));
    }
    Ok(UnitVolume::new(patient_id, slices))
}

/// 8-bit gray level of a unit value: `round(255 v)` with halves away from zero.
pub fn to_gray8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary (P5) PGM rendering of a unit slice.
pub fn write_pgm<W: Write>(mut w: W, slice: &UnitSlice) -> io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", slice.cols(), slice.rows())?;
    let bytes: Vec<u8> = slice.data().iter().map(|&v| to_gray8(v)).collect();
    w.write_all(&bytes)
}
