//! Independent reference implementations shared by the integration tests and
//! the acceptance harness. Nothing here calls into the code it checks.

#![allow(dead_code)]

use leukoct::cnn::{CnnModel, Tensor3};
use leukoct::dicom::{DicomSlice, PixelRepresentation};
use leukoct::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, rows: usize, cols: usize) -> Image {
    Image::from_fn(rows, cols, |_, _| rng.random::<f64>())
}

pub fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Corner-aligned bilinear resampling, one output pixel at a time, written as
/// the explicit four-tap weighted sum.
pub fn bilinear_oracle(src: &Image, out_rows: usize, out_cols: usize) -> Image {
    let (h, w) = src.shape();
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, f64) {
        let x = if n_out == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let mut i0 = x.floor() as usize;
        if i0 > n_in - 2 {
            i0 = n_in - 2;
        }
        (i0, x - i0 as f64)
    };
    let mut out = Image::zeros(out_rows, out_cols);
    for r in 0..out_rows {
        let (y0, fy) = coord(r, h, out_rows);
        for c in 0..out_cols {
            let (x0, fx) = coord(c, w, out_cols);
            let v = (1.0 - fy) * (1.0 - fx) * src.get(y0, x0)
                + (1.0 - fy) * fx * src.get(y0, x0 + 1)
                + fy * (1.0 - fx) * src.get(y0 + 1, x0)
                + fy * fx * src.get(y0 + 1, x0 + 1);
            out.set(r, c, v);
        }
    }
    out
}

/// Rotation by inverse mapping about the grid centre: output (r, c) reads the
/// source at the point obtained by rotating (r, c) by the angle, with taps
/// outside the grid contributing 0.
pub fn rotation_oracle(src: &Image, angle_deg: f64) -> Image {
    let (h, w) = src.shape();
    let t = angle_deg * std::f64::consts::PI / 180.0;
    let cy = (h - 1) as f64 * 0.5;
    let cx = (w - 1) as f64 * 0.5;
    let px = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            src.get(r as usize, c as usize)
        }
    };
    let mut out = Image::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 - cy, c as f64 - cx);
            let sy = cy + t.sin() * x + t.cos() * y;
            let sx = cx + t.cos() * x - t.sin() * y;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let v = (1.0 - fy) * (1.0 - fx) * px(y0, x0)
                + (1.0 - fy) * fx * px(y0, x0 + 1)
                + fy * (1.0 - fx) * px(y0 + 1, x0)
                + fy * fx * px(y0 + 1, x0 + 1);
            out.set(r, c, v.clamp(0.0, 1.0));
        }
    }
    out
}

fn clamp_at(img: &Image, r: i64, c: i64) -> f64 {
    let r = r.clamp(0, img.rows() as i64 - 1) as usize;
    let c = c.clamp(0, img.cols() as i64 - 1) as usize;
    img.get(r, c)
}

/// Flat `k × k` erosion anchored at `((k-1)/2, (k-1)/2)`, replicate padding.
pub fn erode_oracle(img: &Image, k: usize) -> Image {
    let a = (k as i64 - 1) / 2;
    Image::from_fn(img.rows(), img.cols(), |r, c| {
        let mut m = f64::INFINITY;
        for i in 0..k as i64 {
            for j in 0..k as i64 {
                m = m.min(clamp_at(img, r as i64 + i - a, c as i64 + j - a));
            }
        }
        m
    })
}

/// Dilation with the same element reflected about its anchor.
pub fn dilate_oracle(img: &Image, k: usize) -> Image {
    let a = (k as i64 - 1) / 2;
    Image::from_fn(img.rows(), img.cols(), |r, c| {
        let mut m = f64::NEG_INFINITY;
        for i in 0..k as i64 {
            for j in 0..k as i64 {
                m = m.max(clamp_at(img, r as i64 - i + a, c as i64 - j + a));
            }
        }
        m
    })
}

pub fn opening_oracle(img: &Image, k: usize) -> Image {
    dilate_oracle(&erode_oracle(img, k), k)
}

fn bce_of_logit(z: f64, y: f64) -> f64 {
    let p = (1.0 / (1.0 + (-z).exp())).clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Geometry of one `conv → ReLU → 2×2 pool` block.
#[derive(Debug, Clone, Copy)]
struct Block {
    cin: usize,
    sin: usize,
    filters: usize,
    k: usize,
    n: usize,
    p: usize,
}

/// Plain-loop forward pass that keeps every layer, so that nudging one
/// parameter only recomputes the channel it feeds, updates the next layer
/// by the difference and reruns the (small) rest.
struct Forward {
    blocks: Vec<Block>,
    /// Per block: pre-activation conv output and pooled output.
    z: Vec<Vec<f64>>,
    pooled: Vec<Vec<f64>>,
    logit: f64,
}

fn blocks_of(model: &CnnModel) -> Vec<Block> {
    let arch = model.architecture();
    let (mut cin, mut sin) = (arch.input_channels, arch.input_size);
    arch.convs
        .iter()
        .map(|c| {
            let n = sin - c.kernel + 1;
            let b = Block { cin, sin, filters: c.filters, k: c.kernel, n, p: n / 2 };
            (cin, sin) = (c.filters, n / 2);
            b
        })
        .collect()
}

/// Valid convolution of `input` (cin × sin × sin) with one filter.
fn conv_channel(input: &[f64], b: &Block, w: &[f64], bias: f64) -> Vec<f64> {
    let mut out = vec![bias; b.n * b.n];
    for c in 0..b.cin {
        let plane = &input[c * b.sin * b.sin..(c + 1) * b.sin * b.sin];
        for i in 0..b.k {
            for j in 0..b.k {
                let wv = w[(c * b.k + i) * b.k + j];
                for y in 0..b.n {
                    let row = &plane[(y + i) * b.sin + j..];
                    for x in 0..b.n {
                        out[y * b.n + x] += wv * row[x];
                    }
                }
            }
        }
    }
    out
}

/// ReLU then non-overlapping 2×2 max, dropping an odd trailing row/column.
fn relu_pool(z: &[f64], n: usize) -> Vec<f64> {
    let p = n / 2;
    let mut out = vec![0.0; p * p];
    for y in 0..p {
        for x in 0..p {
            let mut m = 0.0f64;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                m = m.max(z[(2 * y + dy) * n + 2 * x + dx]);
            }
            out[y * p + x] = m;
        }
    }
    out
}

impl Forward {
    fn conv_weights<'a>(model: &CnnModel, params: &'a [f64], l: usize) -> (&'a [f64], &'a [f64]) {
        let lay = model.layout();
        (&params[lay.conv_weight[l].clone()], &params[lay.conv_bias[l].clone()])
    }

    fn layer(model: &CnnModel, params: &[f64], b: &Block, l: usize, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w, bias) = Self::conv_weights(model, params, l);
        let per = b.cin * b.k * b.k;
        let (mut z, mut pooled) = (Vec::new(), Vec::new());
        for f in 0..b.filters {
            let zf = conv_channel(input, b, &w[f * per..(f + 1) * per], bias[f]);
            pooled.extend(relu_pool(&zf, b.n));
            z.extend(zf);
        }
        (z, pooled)
    }

    fn dense(model: &CnnModel, params: &[f64], last: &[f64]) -> f64 {
        let lay = model.layout();
        let w = &params[lay.dense_weight.clone()];
        params[lay.dense_bias] + w.iter().zip(last).map(|(a, b)| a * b).sum::<f64>()
    }

    fn new(model: &CnnModel, params: &[f64], x: &Tensor3) -> Self {
        let blocks = blocks_of(model);
        let (mut z, mut pooled) = (Vec::new(), Vec::<Vec<f64>>::new());
        for (l, b) in blocks.iter().enumerate() {
            let (zl, pl) = Self::layer(model, params, b, l, pooled.last().unwrap_or(&x.data));
            z.push(zl);
            pooled.push(pl);
        }
        let logit = Self::dense(model, params, pooled.last().unwrap());
        Self { blocks, z, pooled, logit }
    }

    /// Logit after `params[idx]` changed; everything cached is for the
    /// unchanged parameters.
    fn logit_with(&self, model: &CnnModel, params: &[f64], idx: usize, x: &Tensor3) -> f64 {
        let lay = model.layout();
        let hit = (0..self.blocks.len()).find_map(|l| {
            let b = &self.blocks[l];
            let (w, bias) = (&lay.conv_weight[l], &lay.conv_bias[l]);
            if w.contains(&idx) {
                Some((l, (idx - w.start) / (b.cin * b.k * b.k)))
            } else if bias.contains(&idx) {
                Some((l, idx - bias.start))
            } else {
                None
            }
        });
        let Some((l, f)) = hit else {
            // dense weight or bias
            return Self::dense(model, params, self.pooled.last().unwrap());
        };
        let b = self.blocks[l];
        let input = if l == 0 { &x.data } else { &self.pooled[l - 1] };
        let (w, bias) = Self::conv_weights(model, params, l);
        let per = b.cin * b.k * b.k;
        let new_pool = relu_pool(&conv_channel(input, &b, &w[f * per..(f + 1) * per], bias[f]), b.n);
        let pp = b.p * b.p;
        let mut pooled = self.pooled[l].clone();
        pooled[f * pp..(f + 1) * pp].copy_from_slice(&new_pool);
        if l + 1 == self.blocks.len() {
            return Self::dense(model, params, &pooled);
        }
        // next layer: add the change of channel f only
        let nb = self.blocks[l + 1];
        let delta: Vec<f64> = new_pool.iter().zip(&self.pooled[l][f * pp..]).map(|(a, b)| a - b).collect();
        let (nw, _) = Self::conv_weights(model, params, l + 1);
        let mut z = self.z[l + 1].clone();
        let mut next = Vec::with_capacity(nb.filters * nb.p * nb.p);
        for g in 0..nb.filters {
            let zg = &mut z[g * nb.n * nb.n..(g + 1) * nb.n * nb.n];
            for i in 0..nb.k {
                for j in 0..nb.k {
                    let wv = nw[((g * nb.cin + f) * nb.k + i) * nb.k + j];
                    for y in 0..nb.n {
                        for xx in 0..nb.n {
                            zg[y * nb.n + xx] += wv * delta[(y + i) * nb.sin + xx + j];
                        }
                    }
                }
            }
            next.extend(relu_pool(zg, nb.n));
        }
        for (m, b) in self.blocks.iter().enumerate().skip(l + 2) {
            next = Self::layer(model, params, b, m, &next).1;
        }
        Self::dense(model, params, &next)
    }
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_index: usize,
}

/// Gradient magnitudes below this are compared absolutely; central
/// differences at step 1e-6 carry ~1e-11 of rounding noise, far below it.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares every entry of `grads` with `(L(θ+h) − L(θ−h)) / 2h`, where the
/// loss comes from a separate plain-loop forward pass (checked against the
/// library's at the unperturbed point).
pub fn check_gradients(
    model: &CnnModel,
    batch: &[Tensor3],
    labels: &[f64],
    grads: &[f64],
    h: f64,
) -> GradCheck {
    let mut params = model.params().to_vec();
    let base: Vec<Forward> = batch.iter().map(|x| Forward::new(model, &params, x)).collect();
    let lib = model.logits(batch).unwrap();
    for (f, l) in base.iter().zip(&lib) {
        assert!((f.logit - l).abs() <= 1e-9 * l.abs().max(1.0), "oracle logit {} vs {l}", f.logit);
    }
    let loss = |params: &[f64], i: usize| -> f64 {
        base.iter()
            .zip(batch)
            .zip(labels)
            .map(|((f, x), &y)| bce_of_logit(f.logit_with(model, params, i, x), y))
            .sum::<f64>()
            / labels.len() as f64
    };
    let mut worst = GradCheck {
        checked: 0,
        worst_rel_err: 0.0,
        worst_index: 0,
    };
    for i in 0..grads.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = loss(&params, i);
        params[i] = orig - h;
        let down = loss(&params, i);
        params[i] = orig;
        let e = rel_err(grads[i], (up - down) / (2.0 * h));
        if e > worst.worst_rel_err {
            worst.worst_rel_err = e;
            worst.worst_index = i;
        }
        worst.checked += 1;
    }
    worst
}

/// Random parameters (Glorot-scale, including biases) and a random batch.
/// Even draws use replicated grayscale inputs, odd draws independent channels.
pub fn gradient_draw(input_size: usize, draw: u64) -> (CnnModel, Vec<Tensor3>, Vec<f64>) {
    use leukoct::cnn::Architecture;
    let mut r = rng(1000 + draw);
    let mut model = CnnModel::new(Architecture::three_layer(input_size), draw).unwrap();
    for layer in 0..3 {
        for b in model.conv_bias_mut(leukoct::cnn::LayerId(layer)) {
            *b = r.random_range(-0.1..0.1);
        }
    }
    *model.dense_bias_mut() = r.random_range(-0.5..0.5);
    let channels = model.architecture().input_channels;
    let batch: Vec<Tensor3> = (0..2)
        .map(|_| {
            if draw % 2 == 0 {
                Tensor3::replicate(&random_image(&mut r, input_size, input_size), channels)
            } else {
                let n = channels * input_size * input_size;
                Tensor3::new(
                    channels,
                    input_size,
                    input_size,
                    (0..n).map(|_| r.random::<f64>()).collect(),
                )
            }
        })
        .collect();
    (model, batch, vec![1.0, 0.0])
}

/// A decodable slice with random geometry, encoding and calibration.
pub fn random_slice(r: &mut impl Rng) -> DicomSlice {
    let rows = r.random_range(1..=12);
    let cols = r.random_range(1..=12);
    let bits_allocated = if r.random::<bool>() { 16 } else { 8 };
    let pixel_representation = if r.random::<bool>() {
        PixelRepresentation::Signed
    } else {
        PixelRepresentation::Unsigned
    };
    let (lo, hi) = match (bits_allocated, pixel_representation) {
        (8, PixelRepresentation::Unsigned) => (0, 255),
        (8, PixelRepresentation::Signed) => (-128, 127),
        (_, PixelRepresentation::Unsigned) => (0, 65535),
        (_, PixelRepresentation::Signed) => (-32768, 32767),
    };
    DicomSlice {
        rows,
        cols,
        bits_allocated,
        pixel_representation,
        // DS values are decimal strings; keep them exactly representable
        rescale_slope: r.random_range(1..=8) as f64 * 0.25,
        rescale_intercept: r.random_range(-2048..=0) as f64,
        instance_number: r.random_range(1..=500),
        slice_position: if r.random::<bool>() {
            Some(r.random_range(-400..=400) as f64 * 0.5)
        } else {
            None
        },
        raw_pixels: (0..rows * cols).map(|_| r.random_range(lo..=hi)).collect(),
    }
}
