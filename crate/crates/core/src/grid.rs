//! Dense row-major 2D grids of `f64` used for HU slices, unit slices and heatmaps.

use std::fmt;

/// A row-major 2D grid of real values.
#[derive(Clone, PartialEq)]
pub struct Image {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Slice of windowed intensities. Values are expected to lie in `[0, 1]`.
pub type UnitSlice = Image;

impl Image {
    /// Wraps `data` as a `rows × cols` grid.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "grid data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Value at `(r, c)` with coordinates clamped to the grid (replicate padding).
    #[inline]
    pub fn get_clamped(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.rows as isize - 1) as usize;
        let c = c.clamp(0, self.cols as isize - 1) as usize;
        self.get(r, c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// True when every value lies in `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Index of the first maximum in row-major order, as `(row, col)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{}", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

/// Ordered stack of equally sized unit slices for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVolume {
    pub patient_id: String,
    slices: Vec<UnitSlice>,
}

impl UnitVolume {
    /// Panics if the slices do not share one shape.
    pub fn new(patient_id: impl Into<String>, slices: Vec<UnitSlice>) -> Self {
        if let Some(first) = slices.first() {
            assert!(
                slices.iter().all(|s| s.shape() == first.shape()),
                "all slices of a volume must share one shape"
            );
        }
        Self {
            patient_id: patient_id.into(),
            slices,
        }
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    /// `(rows, cols)` of each slice, `(0, 0)` for an empty volume.
    pub fn slice_shape(&self) -> (usize, usize) {
        self.slices.first().map_or((0, 0), Image::shape)
    }

    pub fn slices(&self) -> &[UnitSlice] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<UnitSlice> {
        self.slices
    }

    pub fn is_unit_range(&self) -> bool {
        self.slices.iter().all(Image::is_unit_range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamped_access_replicates_edges() {
        let img = Image::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        assert_eq!(img.get_clamped(-4, -1), 0.0);
        assert_eq!(img.get_clamped(5, 7), 5.0);
        assert_eq!(img.get_clamped(1, -2), 3.0);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let img = Image::from_vec(2, 2, vec![0.1, 0.7, 0.7, 0.2]);
        assert_eq!(img.argmax(), (0, 1));
    }

    #[test]
    #[should_panic]
    fn length_mismatch_panics() {
        let _ = Image::from_vec(2, 2, vec![0.0; 3]);
    }
}
