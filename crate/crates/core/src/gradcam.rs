//! Gradient-weighted class activation maps and their rendering.

use std::io::{self, Write};

use thiserror::Error;

use crate::cnn::{CnnError, CnnModel, LayerId, Tensor3};
use crate::grid::{Image, UnitSlice};
use crate::hu::{to_gray8, write_pgm};
use crate::volume_prep::resize_bilinear;

#[derive(Debug, Error)]
pub enum GradcamError {
    #[error("model has no convolutional layer {0}")]
    UnknownLayer(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

/// Which class score the map explains. The network has a single logit, so
/// the negative class uses the negated logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetClass {
    Positive,
    Negative,
}

impl TargetClass {
    fn sign(self) -> f64 {
        match self {
            TargetClass::Positive => 1.0,
            TargetClass::Negative => -1.0,
        }
    }
}

/// Relevance map in `[0, 1]` at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: Image,
    pub source_layer: LayerId,
}

impl Heatmap {
    pub fn argmax(&self) -> (usize, usize) {
        self.grid.argmax()
    }

    /// Writes the map as a binary PGM scaled to 0–255.
    pub fn write_pgm<W: Write>(&self, w: W) -> io::Result<()> {
        write_pgm(w, &self.grid)
    }

    /// Writes one CSV line per row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in 0..self.grid.rows() {
            let line: Vec<String> = self.grid.row(r).iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// `ReLU(Σ_k α_k · A_k)` at the resolution of `layer`, before upsampling or
/// normalization, for the score `score_scale · logit`.
pub fn class_activation(
    model: &CnnModel,
    input: &Tensor3,
    layer: LayerId,
    score_scale: f64,
) -> Result<Image, GradcamError> {
    let blocks = &model.layout().blocks;
    let Some(block) = blocks.get(layer.0) else {
        return Err(GradcamError::UnknownLayer(layer.0 + 1));
    };
    let (_, cache) = model.forward(std::slice::from_ref(input))?;
    let grads = model
        .activation_gradients(&cache, layer, score_scale)?
        .pop()
        .expect("one sample");
    let acts = cache.samples[0].blocks[layer.0].post();
    let size = block.conv_size;
    let plane = size * size;
    let mut cam = vec![0.0; plane];
    for (g, a) in grads.chunks_exact(plane).zip(acts.chunks_exact(plane)) {
        let alpha = g.iter().sum::<f64>() / plane as f64;
        for (c, &v) in cam.iter_mut().zip(a) {
            *c += alpha * v;
        }
    }
    Ok(Image::from_vec(size, size, cam).map(|v| v.max(0.0)))
}

/// Grad-CAM for `target` at `layer`, upsampled to the input resolution and
/// divided by its maximum (all zeros when nothing is positive).
pub fn gradcam(
    model: &CnnModel,
    input: &Tensor3,
    layer: LayerId,
    target: TargetClass,
) -> Result<Heatmap, GradcamError> {
    gradcam_scaled(model, input, layer, target.sign())
}

/// Like [`gradcam`], explaining `score_scale · logit`.
pub fn gradcam_scaled(
    model: &CnnModel,
    input: &Tensor3,
    layer: LayerId,
    score_scale: f64,
) -> Result<Heatmap, GradcamError> {
    let cam = class_activation(model, input, layer, score_scale)?;
    let (h, w) = (input.height, input.width);
    let up = if cam.rows() < 2 {
        Image::filled(h, w, cam.get(0, 0))
    } else {
        resize_bilinear(&cam, h, w).expect("map is at least 2x2")
    };
    let max = up.max();
    let grid = if max > 0.0 {
        up.map(|v| v / max)
    } else {
        Image::zeros(h, w)
    };
    Ok(Heatmap {
        grid,
        source_layer: layer,
    })
}

/// Grad-CAM of a grayscale slice at the last convolution.
pub fn gradcam_slice(
    model: &CnnModel,
    slice: &UnitSlice,
    target: TargetClass,
) -> Result<Heatmap, GradcamError> {
    let input = Tensor3::replicate(slice, model.architecture().input_channels);
    let last = LayerId(model.layout().blocks.len() - 1);
    gradcam(model, &input, last, target)
}

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = 3 * (r * self.cols + c);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn write_png<W: Write>(&self, w: W) -> Result<(), GradcamError> {
        let mut enc = png::Encoder::new(w, self.cols as u32, self.rows as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&self.data)?;
        writer.finish()?;
        Ok(())
    }
}

/// Black → red → yellow → white; each channel non-decreasing in `h`.
pub fn hot_ramp(h: f64) -> [f64; 3] {
    let h = h.clamp(0.0, 1.0);
    [
        (3.0 * h).min(1.0),
        (3.0 * h - 1.0).clamp(0.0, 1.0),
        (3.0 * h - 2.0).clamp(0.0, 1.0),
    ]
}

/// Blends the grayscale slice with the hot ramp of the heatmap:
/// `(1 - alpha) · gray + alpha · ramp(h)` per channel.
pub fn overlay(slice: &UnitSlice, heatmap: &Heatmap, alpha: f64) -> Result<RgbImage, GradcamError> {
    if slice.shape() != heatmap.grid.shape() {
        return Err(GradcamError::ShapeMismatch(format!(
            "slice {}x{} vs heatmap {}x{}",
            slice.rows(),
            slice.cols(),
            heatmap.grid.rows(),
            heatmap.grid.cols()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GradcamError::ShapeMismatch(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut data = Vec::with_capacity(3 * slice.len());
    for (&g, &h) in slice.data().iter().zip(heatmap.grid.data()) {
        for ramp in hot_ramp(h) {
            data.push(to_gray8((1.0 - alpha) * g + alpha * ramp));
        }
    }
    Ok(RgbImage {
        rows: slice.rows(),
        cols: slice.cols(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Architecture;

    fn slice(size: usize) -> Image {
        Image::from_fn(size, size, |r, c| ((r * 5 + c * 3) % 11) as f64 / 10.0)
    }

    #[test]
    fn zero_conv3_gives_zero_map() {
        let mut m = CnnModel::new(Architecture::three_layer(32), 4).unwrap();
        m.conv_weight_mut(LayerId::CONV3).fill(0.0);
        m.conv_bias_mut(LayerId::CONV3).fill(0.0);
        let h = gradcam_slice(&m, &slice(32), TargetClass::Positive).unwrap();
        assert_eq!(h.grid, Image::zeros(32, 32));
        assert_eq!(h.source_layer, LayerId::CONV3);
    }

    #[test]
    fn nonzero_maps_peak_at_one() {
        let m = CnnModel::new(Architecture::three_layer(32), 9).unwrap();
        for target in [TargetClass::Positive, TargetClass::Negative] {
            let h = gradcam_slice(&m, &slice(32), target).unwrap();
            assert!(h.grid.is_unit_range());
            let max = h.grid.max();
            assert!(max == 0.0 || max == 1.0);
        }
    }

    #[test]
    fn unknown_layer() {
        let m = CnnModel::new(Architecture::three_layer(32), 1).unwrap();
        let x = Tensor3::replicate(&slice(32), 3);
        assert!(matches!(
            gradcam(&m, &x, LayerId(3), TargetClass::Positive),
            Err(GradcamError::UnknownLayer(4))
        ));
    }

    #[test]
    fn overlay_extremes() {
        let s = slice(8);
        let zero = Heatmap {
            grid: Image::zeros(8, 8),
            source_layer: LayerId::CONV3,
        };
        let gray = overlay(&s, &zero, 0.0).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let v = to_gray8(s.get(r, c));
                assert_eq!(gray.pixel(r, c), [v, v, v]);
            }
        }
        let black = overlay(&s, &zero, 1.0).unwrap();
        assert!(black.data.iter().all(|&b| b == 0));
        assert!(overlay(&slice(9), &zero, 0.5).is_err());
    }

    #[test]
    fn ramp_is_monotone() {
        let mut prev = hot_ramp(0.0);
        assert_eq!(prev, [0.0, 0.0, 0.0]);
        for i in 1..=100 {
            let cur = hot_ramp(i as f64 / 100.0);
            assert!((0..3).all(|k| cur[k] >= prev[k]));
            prev = cur;
        }
        assert_eq!(prev, [1.0, 1.0, 1.0]);
    }
}
