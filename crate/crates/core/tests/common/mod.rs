#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slsdeep::data::Sample;
use slsdeep::metrics::{ConfusionCounts, Mask};
use slsdeep::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Direct six-loop convolution with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().dims();
    let [o, _, kh, kw] = w.shape().dims();
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    Tensor::from_fn([n, o, oh, ow], |[bn, bo, y, xo]| {
        let mut acc = b.map_or(0.0, |b| b.data()[bo]);
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (y * stride + ky * dil) as isize - pad as isize;
                    let ix = (xo * stride + kx * dil) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.at(bn, ci, iy as usize, ix as usize) * w.at(bo, ci, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

pub fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| r.random_bool(p) as u8).collect()).unwrap()
}

pub fn count_oracle(pred: &Mask, gt: &Mask) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..pred.data.len() {
        match (pred.data[i], gt.data[i]) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    c
}

/// `[acc, dic, jac, sen, spe]` from counts; empty denominators score 1.
pub fn score_oracle(c: &ConfusionCounts) -> [f64; 5] {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let ratio = |a: f64, b: f64| if b == 0.0 { 1.0 } else { a / b };
    [
        (tp + tn) / (tp + fp + tn + fn_),
        ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        ratio(tp, tp + fp + fn_),
        ratio(tp, tp + fn_),
        ratio(tn, tn + fp),
    ]
}

/// Dark textured disk of radius `r` centred in a `size × size` light image.
pub fn disk_sample(size: usize, r: f64) -> Sample {
    let c = size as f64 / 2.0;
    let inside = |y: usize, x: usize| (y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2) <= r * r;
    let image = Tensor::from_fn([1, 3, size, size], |[_, ch, y, x]| {
        let t = ((x * 7 + y * 13) % 11) as f32 / 100.0;
        if inside(y, x) {
            [0.35, 0.2, 0.15][ch] + t
        } else {
            [0.85, 0.65, 0.5][ch] - t
        }
    });
    let mask = Tensor::from_fn([1, 1, size, size], |[_, _, y, x]| if inside(y, x) { 1.0 } else { 0.0 });
    Sample::new(image, mask).unwrap()
}
