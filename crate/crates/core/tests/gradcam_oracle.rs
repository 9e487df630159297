mod common;

use leukoct::cnn::{Architecture, CnnModel, ConvSpec, LayerId, Tensor3};
use leukoct::gradcam::{gradcam, gradcam_slice, overlay, TargetClass};
use leukoct::Image;
use rand::Rng;

const SIZE: usize = 8;
const K: usize = 3;
const FILTERS: usize = 2;

fn toy_model(seed: u64) -> CnnModel {
    let arch = Architecture {
        input_channels: 1,
        input_size: SIZE,
        convs: vec![ConvSpec { filters: FILTERS, kernel: K }],
    };
    let mut m = CnnModel::new(arch, seed).unwrap();
    let mut r = common::rng(seed + 100);
    for b in m.conv_bias_mut(LayerId(0)) {
        *b = r.random_range(-0.2..0.2);
    }
    m
}

/// Grad-CAM of a one-block network worked out by hand: valid convolution,
/// ReLU, 2×2 max pool (first maximum wins), dense head.
fn toy_oracle(m: &CnnModel, img: &Image, sign: f64) -> Image {
    let conv = SIZE - K + 1;
    let pool = conv / 2;
    let lay = m.layout();
    let w = &m.params()[lay.conv_weight[0].clone()];
    let b = &m.params()[lay.conv_bias[0].clone()];
    let dense = &m.params()[lay.dense_weight.clone()];
    let mut cam = vec![0.0; conv * conv];
    for f in 0..FILTERS {
        let act = Image::from_fn(conv, conv, |y, x| {
            let mut s = b[f];
            for i in 0..K {
                for j in 0..K {
                    s += w[f * K * K + i * K + j] * img.get(y + i, x + j);
                }
            }
            s.max(0.0)
        });
        // d score / d activation: the dense weight at each pool winner
        let mut grad = Image::zeros(conv, conv);
        for py in 0..pool {
            for px in 0..pool {
                let mut best = (2 * py, 2 * px);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let c = (2 * py + dy, 2 * px + dx);
                    if act.get(c.0, c.1) > act.get(best.0, best.1) {
                        best = c;
                    }
                }
                grad.set(best.0, best.1, sign * dense[f * pool * pool + py * pool + px]);
            }
        }
        let alpha = grad.data().iter().sum::<f64>() / (conv * conv) as f64;
        for (c, a) in cam.iter_mut().zip(act.data()) {
            *c += alpha * a;
        }
    }
    let cam = Image::from_vec(conv, conv, cam).map(|v| v.max(0.0));
    let up = common::bilinear_oracle(&cam, SIZE, SIZE);
    let max = up.max();
    if max > 0.0 {
        up.map(|v| v / max)
    } else {
        Image::zeros(SIZE, SIZE)
    }
}

#[test]
fn one_block_network_matches_hand_computation() {
    let mut nonzero = 0;
    for seed in 0..25 {
        let m = toy_model(seed);
        let img = common::random_image(&mut common::rng(seed), SIZE, SIZE);
        let x = Tensor3::replicate(&img, 1);
        for (target, sign) in [(TargetClass::Positive, 1.0), (TargetClass::Negative, -1.0)] {
            let got = gradcam(&m, &x, LayerId(0), target).unwrap();
            let want = toy_oracle(&m, &img, sign);
            assert!(
                common::max_abs_diff(&got.grid, &want) <= 1e-12,
                "seed {seed} {target:?}"
            );
            if want.max() > 0.0 {
                nonzero += 1;
            }
        }
    }
    assert!(nonzero > 10, "oracle exercised only {nonzero} non-trivial maps");
}

#[test]
fn zero_weight_model_gives_all_zero_heatmaps() {
    let m = CnnModel::zeros(Architecture::three_layer(64)).unwrap();
    let slice = common::random_image(&mut common::rng(1), 64, 64);
    for target in [TargetClass::Positive, TargetClass::Negative] {
        let h = gradcam_slice(&m, &slice, target).unwrap();
        assert_eq!(h.grid, Image::zeros(64, 64));
    }
}

#[test]
fn heatmaps_are_normalised() {
    let m = CnnModel::new(Architecture::three_layer(40), 2).unwrap();
    for seed in 0..5 {
        let slice = common::random_image(&mut common::rng(seed), 40, 40);
        let h = gradcam_slice(&m, &slice, TargetClass::Positive).unwrap();
        assert!(h.grid.is_unit_range());
        assert!(h.grid.max() == 0.0 || h.grid.max() == 1.0);
        let rgb = overlay(&slice, &h, 0.5).unwrap();
        assert_eq!(rgb.data.len(), 3 * 40 * 40);
    }
}
