//! A small convolutional classifier with hand-written forward and backward
//! passes.
//!
//! The default architecture stacks three `conv → ReLU → 2×2 max-pool` blocks
//! with 32 5×5, 16 4×4 and 8 3×3 filters, followed by a single-logit dense
//! layer and a sigmoid. Convolutions are valid (no padding) with stride 1;
//! pooling uses stride 2 and drops a trailing odd row/column.
//!
//! All parameters live in one flat `Vec<f64>`; [`Layout`] maps layers onto it.

mod adam;
mod io;
mod train;

use std::ops::Range;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Image;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use io::{read_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{
    bce_loss, evaluate_samples, train, EpochRecord, EvalSummary, Sample, TrainConfig,
    TrainHistory, BCE_EPS, DECISION_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training set contains a single class")]
    SingleClassTrainSet,
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("bad model file: {0}")]
    BadModelFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_size: usize,
    pub convs: Vec<ConvSpec>,
}

/// Spatial bookkeeping for one conv block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub in_channels: usize,
    pub in_size: usize,
    pub filters: usize,
    pub kernel: usize,
    pub conv_size: usize,
    pub pool_size: usize,
}

impl Architecture {
    /// Three conv blocks (32×5×5, 16×4×4, 8×3×3) on 3-channel square inputs.
    pub fn three_layer(input_size: usize) -> Self {
        Self {
            input_channels: 3,
            input_size,
            convs: vec![
                ConvSpec { filters: 32, kernel: 5 },
                ConvSpec { filters: 16, kernel: 4 },
                ConvSpec { filters: 8, kernel: 3 },
            ],
        }
    }

    pub fn blocks(&self) -> Result<Vec<BlockShape>, CnnError> {
        if self.input_channels == 0 || self.convs.is_empty() {
            return Err(CnnError::InvalidArchitecture(
                "need at least one input channel and one conv layer".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.convs.len());
        let (mut ch, mut size) = (self.input_channels, self.input_size);
        for (i, spec) in self.convs.iter().enumerate() {
            if spec.filters == 0 || spec.kernel == 0 {
                return Err(CnnError::InvalidArchitecture(format!(
                    "conv{} has zero filters or kernel size",
                    i + 1
                )));
            }
            if size < spec.kernel {
                return Err(CnnError::InvalidArchitecture(format!(
                    "conv{} kernel {} does not fit a {size}x{size} input (input_size {})",
                    i + 1,
                    spec.kernel,
                    self.input_size
                )));
            }
            let conv_size = size - spec.kernel + 1;
            let pool_size = conv_size / 2;
            if pool_size == 0 {
                return Err(CnnError::InvalidArchitecture(format!(
                    "conv{} output {conv_size}x{conv_size} vanishes under 2x2 pooling (input_size {})",
                    i + 1,
                    self.input_size
                )));
            }
            out.push(BlockShape {
                in_channels: ch,
                in_size: size,
                filters: spec.filters,
                kernel: spec.kernel,
                conv_size,
                pool_size,
            });
            ch = spec.filters;
            size = pool_size;
        }
        Ok(out)
    }

    /// Number of inputs of the dense head.
    pub fn dense_inputs(&self) -> Result<usize, CnnError> {
        let last = *self.blocks()?.last().unwrap();
        Ok(last.filters * last.pool_size * last.pool_size)
    }
}

/// Offsets of every parameter tensor in the flat parameter vector, in
/// declaration order: per conv block weight `[filters][in][k][k]` then bias,
/// then dense weight and dense bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub blocks: Vec<BlockShape>,
    pub conv_weight: Vec<Range<usize>>,
    pub conv_bias: Vec<Range<usize>>,
    pub dense_weight: Range<usize>,
    pub dense_bias: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Result<Self, CnnError> {
        let blocks = arch.blocks()?;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let mut conv_weight = Vec::new();
        let mut conv_bias = Vec::new();
        for b in &blocks {
            conv_weight.push(take(b.filters * b.in_channels * b.kernel * b.kernel));
            conv_bias.push(take(b.filters));
        }
        let dense_weight = take(arch.dense_inputs()?);
        let dense_bias = take(1).start;
        Ok(Self {
            blocks,
            conv_weight,
            conv_bias,
            dense_weight,
            dense_bias,
            len: at,
        })
    }
}

/// A `channels × height × width` tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Stacks `channels` copies of a grayscale slice.
    pub fn replicate(slice: &Image, channels: usize) -> Self {
        let mut data = Vec::with_capacity(channels * slice.len());
        for _ in 0..channels {
            data.extend_from_slice(slice.data());
        }
        Self::new(channels, slice.rows(), slice.cols(), data)
    }

    /// True when every channel holds the same values.
    pub fn is_replicated(&self) -> bool {
        let plane = self.height * self.width;
        (1..self.channels).all(|c| self.data[c * plane..(c + 1) * plane] == self.data[..plane])
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Which conv block a caller refers to (0-based index into the architecture).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerId(pub usize);

impl LayerId {
    pub const CONV1: LayerId = LayerId(0);
    pub const CONV2: LayerId = LayerId(1);
    pub const CONV3: LayerId = LayerId(2);
}

/// Activations of one conv block for one sample.
#[derive(Debug, Clone)]
pub struct BlockCache {
    /// Block input, `in_channels × in_size²`.
    pub input: Vec<f64>,
    /// Convolution output before the ReLU, `filters × conv_size²`.
    pub pre: Vec<f64>,
    /// After pooling, `filters × pool_size²`.
    pub pooled: Vec<f64>,
    /// For each pooled value, the index into `pre` it was taken from.
    pub argmax: Vec<u32>,
}

impl BlockCache {
    /// Post-ReLU activations.
    pub fn post(&self) -> Vec<f64> {
        self.pre.iter().map(|&v| v.max(0.0)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SampleCache {
    pub blocks: Vec<BlockCache>,
    /// Every input channel was identical, so conv1 ran on one folded plane.
    pub replicated: bool,
    pub logit: f64,
    pub probability: f64,
}

/// Everything the backward pass and Grad-CAM need from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    pub samples: Vec<SampleCache>,
}

impl ForwardCache {
    pub fn probabilities(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.probability).collect()
    }

    pub fn logits(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.logit).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    arch: Architecture,
    layout: Layout,
    params: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product, every operand addressed
/// through explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every index the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Layers with at least this many input channels use the wide convolution.
const WIDE_MIN_CHANNELS: usize = 8;

/// Reusable work buffers for the backward pass.
#[derive(Default)]
struct Scratch {
    col: Vec<f64>,
    padded: Vec<f64>,
    wide: Vec<f64>,
}

/// Makes `buf` at least `len` long. Callers overwrite the prefix they use,
/// so the buffer is never cleared.
fn grow(buf: &mut Vec<f64>, len: usize) {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
}

/// Unfolds `input` (`ch × size²`) into a `(ch·k·k) × out²` patch matrix.
fn im2col(input: &[f64], ch: usize, size: usize, k: usize, col: &mut Vec<f64>) {
    let out = size - k + 1;
    let p = out * out;
    grow(col, ch * k * k * p);
    let mut q = 0;
    for c in 0..ch {
        let plane = &input[c * size * size..(c + 1) * size * size];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[q * p..(q + 1) * p];
                for oy in 0..out {
                    let src = &plane[(oy + ky) * size + kx..(oy + ky) * size + kx + out];
                    dst[oy * out..(oy + 1) * out].copy_from_slice(src);
                }
                q += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back onto the input grid.
fn col2im(col: &[f64], ch: usize, size: usize, k: usize) -> Vec<f64> {
    let out = size - k + 1;
    let p = out * out;
    let mut grad = vec![0.0; ch * size * size];
    let mut q = 0;
    for c in 0..ch {
        let plane = &mut grad[c * size * size..(c + 1) * size * size];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[q * p..(q + 1) * p];
                for oy in 0..out {
                    let dst = &mut plane[(oy + ky) * size + kx..(oy + ky) * size + kx + out];
                    for (d, s) in dst.iter_mut().zip(&src[oy * out..(oy + 1) * out]) {
                        *d += s;
                    }
                }
                q += 1;
            }
        }
    }
    grad
}

// The "wide" convolution evaluates a valid convolution on an `out × size`
// grid: output (oy, ox) lives at column `oy·size + ox`, and columns with
// `ox >= out` are scratch. Every kernel offset (ky, kx) then reads the input
// planes at a fixed shift `ky·size + kx`, so it is one strided GEMM with no
// patch matrix. The input needs `k - 1` trailing pad values for the shifted
// reads of the last scratch columns.

fn pad_input(input: &[f64], k: usize, padded: &mut Vec<f64>) {
    padded.clear();
    padded.extend_from_slice(input);
    padded.resize(input.len() + k - 1, 0.0);
}

/// Forward convolution of all channels; writes compact `filters × out²`.
fn conv_wide_forward(b: &BlockShape, w: &[f64], input: &[f64], scratch: &mut Scratch, pre: &mut [f64]) {
    let (s, k, o, ch) = (b.in_size, b.kernel, b.conv_size, b.in_channels);
    let cols = o * s;
    pad_input(input, k, &mut scratch.padded);
    grow(&mut scratch.wide, b.filters * cols);
    for ky in 0..k {
        for kx in 0..k {
            let beta = if ky == 0 && kx == 0 { 0.0 } else { 1.0 };
            gemm(
                b.filters,
                ch,
                cols,
                &w[ky * k + kx..],
                (ch * k * k, k * k),
                &scratch.padded[ky * s + kx..],
                (s * s, 1),
                beta,
                &mut scratch.wide,
                (cols, 1),
            );
        }
    }
    for f in 0..b.filters {
        for oy in 0..o {
            let src = &scratch.wide[f * cols + oy * s..][..o];
            pre[(f * o + oy) * o..][..o].copy_from_slice(src);
        }
    }
}

/// Spreads compact `filters × out²` gradients onto the wide grid, zeroing the
/// scratch columns.
fn widen(b: &BlockShape, dpre: &[f64], wide: &mut Vec<f64>) {
    let (s, o) = (b.in_size, b.conv_size);
    wide.clear();
    wide.resize(b.filters * o * s, 0.0);
    for f in 0..b.filters {
        for oy in 0..o {
            wide[f * o * s + oy * s..][..o].copy_from_slice(&dpre[(f * o + oy) * o..][..o]);
        }
    }
}

/// Accumulates the weight gradient; `scratch.wide` holds the widened `dpre`.
fn conv_wide_weight_grad(b: &BlockShape, input: &[f64], scratch: &mut Scratch, gw: &mut [f64]) {
    let (s, k, o, ch) = (b.in_size, b.kernel, b.conv_size, b.in_channels);
    let cols = o * s;
    pad_input(input, k, &mut scratch.padded);
    for ky in 0..k {
        for kx in 0..k {
            gemm(
                b.filters,
                cols,
                ch,
                &scratch.wide,
                (cols, 1),
                &scratch.padded[ky * s + kx..],
                (1, s * s),
                1.0,
                &mut gw[ky * k + kx..],
                (ch * k * k, k * k),
            );
        }
    }
}

/// Input gradient; `scratch.wide` holds the widened `dpre`.
fn conv_wide_input_grad(b: &BlockShape, w: &[f64], scratch: &Scratch) -> Vec<f64> {
    let (s, k, o, ch) = (b.in_size, b.kernel, b.conv_size, b.in_channels);
    let cols = o * s;
    let mut dx = vec![0.0; ch * s * s + k - 1];
    for ky in 0..k {
        for kx in 0..k {
            gemm(
                ch,
                b.filters,
                cols,
                &w[ky * k + kx..],
                (k * k, ch * k * k),
                &scratch.wide,
                (cols, 1),
                1.0,
                &mut dx[ky * s + kx..],
                (s * s, 1),
            );
        }
    }
    dx.truncate(ch * s * s);
    dx
}

/// 2×2 max pool of `relu(pre)`; ties go to the first position in scan order.
fn relu_max_pool(pre: &[f64], ch: usize, size: usize) -> (Vec<f64>, Vec<u32>) {
    let post = |i: usize| pre[i].max(0.0);
    let ps = size / 2;
    let mut pooled = Vec::with_capacity(ch * ps * ps);
    let mut argmax = Vec::with_capacity(ch * ps * ps);
    for c in 0..ch {
        let base = c * size * size;
        for py in 0..ps {
            for px in 0..ps {
                let mut best = base + 2 * py * size + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * py + dy) * size + 2 * px + dx;
                    if post(i) > post(best) {
                        best = i;
                    }
                }
                pooled.push(post(best));
                argmax.push(best as u32);
            }
        }
    }
    (pooled, argmax)
}

/// FNV-1a over the parameter bit patterns.
fn fingerprint(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl CnnModel {
    /// Every weight and bias zero.
    pub fn zeros(arch: Architecture) -> Result<Self, CnnError> {
        let layout = Layout::new(&arch)?;
        let params = vec![0.0; layout.len];
        Ok(Self {
            arch,
            layout,
            params,
        })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, CnnError> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: Range<usize>, fan_in: usize, fan_out: usize, params: &mut [f64]| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for p in &mut params[range] {
                *p = dist.sample(&mut rng);
            }
        };
        let layout = model.layout.clone();
        for (b, w) in layout.blocks.iter().zip(&layout.conv_weight) {
            let kk = b.kernel * b.kernel;
            fill(w.clone(), b.in_channels * kk, b.filters * kk, &mut model.params);
        }
        let dense = layout.dense_weight.clone();
        let n = dense.len();
        fill(dense, n, 1, &mut model.params);
        Ok(model)
    }

    pub(crate) fn from_parts(arch: Architecture, params: Vec<f64>) -> Result<Self, CnnError> {
        let layout = Layout::new(&arch)?;
        if params.len() != layout.len {
            return Err(CnnError::ShapeMismatch(format!(
                "architecture needs {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Self {
            arch,
            layout,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_size
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn conv_weight_mut(&mut self, layer: LayerId) -> &mut [f64] {
        let r = self.layout.conv_weight[layer.0].clone();
        &mut self.params[r]
    }

    pub fn conv_bias_mut(&mut self, layer: LayerId) -> &mut [f64] {
        let r = self.layout.conv_bias[layer.0].clone();
        &mut self.params[r]
    }

    pub fn dense_weight_mut(&mut self) -> &mut [f64] {
        let r = self.layout.dense_weight.clone();
        &mut self.params[r]
    }

    pub fn dense_bias_mut(&mut self) -> &mut f64 {
        &mut self.params[self.layout.dense_bias]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, x: &Tensor3) -> Result<(), CnnError> {
        let a = &self.arch;
        if x.channels != a.input_channels || x.height != a.input_size || x.width != a.input_size {
            return Err(CnnError::ShapeMismatch(format!(
                "expected {}x{}x{} input, got {}x{}x{}",
                a.input_channels, a.input_size, a.input_size, x.channels, x.height, x.width
            )));
        }
        Ok(())
    }

    /// Conv1 weights summed over input channels, used when every input
    /// channel holds the same plane.
    fn folded_conv1(&self) -> Vec<f64> {
        let b = self.layout.blocks[0];
        let kk = b.kernel * b.kernel;
        let w = &self.params[self.layout.conv_weight[0].clone()];
        let mut folded = vec![0.0; b.filters * kk];
        for (f, dst) in folded.chunks_exact_mut(kk).enumerate() {
            for c in 0..b.in_channels {
                let src = &w[(f * b.in_channels + c) * kk..][..kk];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        folded
    }

    fn forward_sample(&self, x: &Tensor3, folded: &[f64], scratch: &mut Scratch) -> SampleCache {
        let replicated = x.is_replicated();
        let mut input = x.data.clone();
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for (l, b) in self.layout.blocks.iter().enumerate() {
            let p = b.conv_size * b.conv_size;
            let mut pre = vec![0.0; b.filters * p];
            let w = &self.params[self.layout.conv_weight[l].clone()];
            if l == 0 && replicated {
                let plane = b.in_size * b.in_size;
                let col = &mut scratch.col;
                im2col(&input[..plane], 1, b.in_size, b.kernel, col);
                let q = b.kernel * b.kernel;
                gemm(b.filters, q, p, folded, (q, 1), col, (p, 1), 0.0, &mut pre, (p, 1));
            } else if b.in_channels < WIDE_MIN_CHANNELS {
                let col = &mut scratch.col;
                im2col(&input, b.in_channels, b.in_size, b.kernel, col);
                let q = b.in_channels * b.kernel * b.kernel;
                gemm(b.filters, q, p, w, (q, 1), col, (p, 1), 0.0, &mut pre, (p, 1));
            } else {
                conv_wide_forward(b, w, &input, scratch, &mut pre);
            }
            let bias = &self.params[self.layout.conv_bias[l].clone()];
            for (f, row) in pre.chunks_exact_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[f]);
            }
            let (pooled, argmax) = relu_max_pool(&pre, b.filters, b.conv_size);
            let next = pooled.clone();
            blocks.push(BlockCache {
                input,
                pre,
                pooled,
                argmax,
            });
            input = next;
        }
        let w = &self.params[self.layout.dense_weight.clone()];
        let logit = w.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>()
            + self.params[self.layout.dense_bias];
        SampleCache {
            blocks,
            replicated,
            logit,
            probability: sigmoid(logit),
        }
    }

    /// Runs the network on a batch; returns per-sample probabilities and the
    /// activation cache.
    pub fn forward(&self, batch: &[Tensor3]) -> Result<(Vec<f64>, ForwardCache), CnnError> {
        for x in batch {
            self.check_input(x)?;
        }
        let mut scratch = Scratch::default();
        let folded = self.folded_conv1();
        let samples: Vec<SampleCache> = batch
            .iter()
            .map(|x| self.forward_sample(x, &folded, &mut scratch))
            .collect();
        let cache = ForwardCache {
            fingerprint: fingerprint(&self.params),
            samples,
        };
        Ok((cache.probabilities(), cache))
    }

    /// Pre-sigmoid scores without keeping the activations around.
    pub fn logits(&self, batch: &[Tensor3]) -> Result<Vec<f64>, CnnError> {
        let mut scratch = Scratch::default();
        let folded = self.folded_conv1();
        batch
            .iter()
            .map(|x| {
                self.check_input(x)?;
                Ok(self.forward_sample(x, &folded, &mut scratch).logit)
            })
            .collect()
    }

    /// Probability of the positive class for one grayscale slice of
    /// `input_size × input_size`.
    pub fn predict(&self, slice: &Image) -> Result<f64, CnnError> {
        let x = Tensor3::replicate(slice, self.arch.input_channels);
        Ok(sigmoid(self.logits(std::slice::from_ref(&x))?[0]))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<(), CnnError> {
        if cache.fingerprint != fingerprint(&self.params) {
            return Err(CnnError::StaleCache);
        }
        Ok(())
    }

    /// Gradients of the mean binary cross-entropy over the cached batch with
    /// respect to every parameter, laid out like [`CnnModel::params`].
    ///
    /// Uses the fused sigmoid/BCE derivative `(p - y) / n` at the logit.
    pub fn backward(&self, cache: &ForwardCache, labels: &[f64]) -> Result<Vec<f64>, CnnError> {
        self.check_cache(cache)?;
        if labels.len() != cache.samples.len() {
            return Err(CnnError::ShapeMismatch(format!(
                "{} labels for a batch of {}",
                labels.len(),
                cache.samples.len()
            )));
        }
        let n = labels.len() as f64;
        let mut grads = vec![0.0; self.params.len()];
        let mut scratch = Scratch::default();
        for (s, &y) in cache.samples.iter().zip(labels) {
            let dlogit = (s.probability - y) / n;
            self.backprop_sample(s, dlogit, Some(&mut grads), None, &mut scratch);
        }
        Ok(grads)
    }

    /// Probabilities and mean-BCE gradients for a batch, same values as
    /// [`CnnModel::forward`] followed by [`CnnModel::backward`], but each
    /// sample's activations are dropped as soon as it has been backpropagated.
    pub fn loss_gradient(
        &self,
        batch: &[Tensor3],
        labels: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), CnnError> {
        if labels.len() != batch.len() {
            return Err(CnnError::ShapeMismatch(format!(
                "{} labels for a batch of {}",
                labels.len(),
                batch.len()
            )));
        }
        for x in batch {
            self.check_input(x)?;
        }
        let n = labels.len() as f64;
        let folded = self.folded_conv1();
        let mut scratch = Scratch::default();
        let mut grads = vec![0.0; self.params.len()];
        let mut probs = Vec::with_capacity(batch.len());
        for (x, &y) in batch.iter().zip(labels) {
            let s = self.forward_sample(x, &folded, &mut scratch);
            let dlogit = (s.probability - y) / n;
            self.backprop_sample(&s, dlogit, Some(&mut grads), None, &mut scratch);
            probs.push(s.probability);
        }
        Ok((probs, grads))
    }

    /// Gradient of `dscore_dlogit · logit` with respect to the post-ReLU
    /// activations of `layer`, for every cached sample.
    pub fn activation_gradients(
        &self,
        cache: &ForwardCache,
        layer: LayerId,
        dscore_dlogit: f64,
    ) -> Result<Vec<Vec<f64>>, CnnError> {
        self.check_cache(cache)?;
        if layer.0 >= self.layout.blocks.len() {
            return Err(CnnError::InvalidArchitecture(format!(
                "no conv layer {}",
                layer.0 + 1
            )));
        }
        let mut scratch = Scratch::default();
        Ok(cache
            .samples
            .iter()
            .map(|s| {
                self.backprop_sample(s, dscore_dlogit, None, Some(layer.0), &mut scratch)
                    .expect("capture layer exists")
            })
            .collect())
    }

    /// Backpropagates `dlogit` through one sample. Accumulates parameter
    /// gradients into `grads` when given; returns the gradient at the
    /// post-ReLU activations of `capture` when given.
    fn backprop_sample(
        &self,
        s: &SampleCache,
        dlogit: f64,
        mut grads: Option<&mut Vec<f64>>,
        capture: Option<usize>,
        scratch: &mut Scratch,
    ) -> Option<Vec<f64>> {
        let lay = &self.layout;
        let last = s.blocks.last().expect("at least one block");
        if let Some(g) = grads.as_deref_mut() {
            for (gw, &a) in g[lay.dense_weight.clone()].iter_mut().zip(&last.pooled) {
                *gw += dlogit * a;
            }
            g[lay.dense_bias] += dlogit;
        }
        let mut dpooled: Vec<f64> = self.params[lay.dense_weight.clone()]
            .iter()
            .map(|w| w * dlogit)
            .collect();

        let mut captured = None;
        for l in (0..lay.blocks.len()).rev() {
            let b = lay.blocks[l];
            let cache = &s.blocks[l];
            let mut dpost = vec![0.0; cache.pre.len()];
            for (&i, &d) in cache.argmax.iter().zip(&dpooled) {
                dpost[i as usize] += d;
            }
            if capture == Some(l) {
                if grads.is_none() {
                    return Some(dpost);
                }
                captured = Some(dpost.clone());
            }
            let mut dpre = dpost;
            for (d, &z) in dpre.iter_mut().zip(&cache.pre) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            let p = b.conv_size * b.conv_size;
            let q = b.in_channels * b.kernel * b.kernel;
            let w = &self.params[lay.conv_weight[l].clone()];
            let wide = l > 0 && b.in_channels >= WIDE_MIN_CHANNELS;
            if wide {
                widen(&b, &dpre, &mut scratch.wide);
            }
            if let Some(g) = grads.as_deref_mut() {
                let gb = &mut g[lay.conv_bias[l].clone()];
                for (f, row) in dpre.chunks_exact(p).enumerate() {
                    gb[f] += row.iter().sum::<f64>();
                }
                let gw = &mut g[lay.conv_weight[l].clone()];
                if l == 0 && s.replicated {
                    // identical channels share one weight gradient
                    let kk = b.kernel * b.kernel;
                    let col = &mut scratch.col;
                    im2col(&cache.input[..b.in_size * b.in_size], 1, b.in_size, b.kernel, col);
                    let mut shared = vec![0.0; b.filters * kk];
                    gemm(b.filters, p, kk, &dpre, (p, 1), col, (1, p), 0.0, &mut shared, (kk, 1));
                    for (f, src) in shared.chunks_exact(kk).enumerate() {
                        for c in 0..b.in_channels {
                            let dst = &mut gw[(f * b.in_channels + c) * kk..][..kk];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                } else if wide {
                    conv_wide_weight_grad(&b, &cache.input, scratch, gw);
                } else {
                    let col = &mut scratch.col;
                    im2col(&cache.input, b.in_channels, b.in_size, b.kernel, col);
                    gemm(b.filters, p, q, &dpre, (p, 1), col, (1, p), 1.0, gw, (q, 1));
                }
            }
            if l > 0 {
                dpooled = if wide {
                    conv_wide_input_grad(&b, w, scratch)
                } else {
                    let mut dcol = vec![0.0; q * p];
                    gemm(q, b.filters, p, w, (1, q), &dpre, (p, 1), 0.0, &mut dcol, (p, 1));
                    col2im(&dcol, b.in_channels, b.in_size, b.kernel)
                };
            }
        }
        captured
    }
}
