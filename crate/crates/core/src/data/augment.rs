use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::ops::pointwise::derive_seed;
use crate::tensor::{Shape, Tensor};

const STREAM_TAG: u64 = 0x4155_474d;

/// Random scale and rotation about the image centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_range: (f64, f64),
    pub rotation_range_deg: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, scale_range: (0.5, 1.5), rotation_range_deg: (-10.0, 10.0), seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub scale: f64,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { scale: 1.0, rotation_deg: 0.0 };
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.scale_range;
        let (r0, r1) = self.rotation_range_deg;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::Config(format!("augment.scale_range ({s0}, {s1}) must satisfy 0 < lo <= hi")));
        }
        if !(r0 <= r1 && r0.is_finite() && r1.is_finite()) {
            return Err(Error::Config(format!("augment.rotation_range_deg ({r0}, {r1}) must satisfy lo <= hi")));
        }
        Ok(())
    }

    /// Parameters for sample `index` in `epoch`; independent of batch composition.
    pub fn draw(&self, epoch: u64, index: u64) -> AugmentParams {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[STREAM_TAG, epoch, index]));
        let scale = uniform(&mut rng, self.scale_range);
        let rotation_deg = uniform(&mut rng, self.rotation_range_deg);
        AugmentParams { scale, rotation_deg }
    }
}

/// Scales by `s` and rotates by `θ` about the centre, keeping the input size (centre crop
/// when enlarged, zero border when shrunk or rotated). The image is sampled bilinearly,
/// the mask by nearest neighbour, both in a single pass.
pub fn augment(sample: &Sample, params: AugmentParams) -> Sample {
    let mut out = sample.clone();
    out.provenance.augment = Some(params);
    if params == AugmentParams::IDENTITY {
        return out;
    }
    let s = sample.image.shape();
    let (h, w) = (s.h, s.w);
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let inv = 1.0 / params.scale;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    // source position (continuous, pixel centres at i + 0.5) of each output pixel
    let src = |y: usize, x: usize| {
        let (u, v) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        ((cos * u + sin * v) * inv + cx, (-sin * u + cos * v) * inv + cy)
    };

    let planes: Vec<&[f32]> = (0..3).map(|c| sample.image.plane(0, c)).collect();
    let mut image = vec![0f32; 3 * h * w];
    let mask_src = sample.mask.data();
    let mut mask = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(y, x);
            let o = y * w + x;
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                mask[o] = mask_src[sy as usize * w + sx as usize];
            }
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (lx, ly) = (fx - x0, fy - y0);
            let taps = [
                (y0, x0, (1.0 - ly) * (1.0 - lx)),
                (y0, x0 + 1.0, (1.0 - ly) * lx),
                (y0 + 1.0, x0, ly * (1.0 - lx)),
                (y0 + 1.0, x0 + 1.0, ly * lx),
            ];
            for (c, plane) in planes.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(ty, tx, wt) in &taps {
                    if ty >= 0.0 && tx >= 0.0 && (ty as usize) < h && (tx as usize) < w {
                        acc += wt * plane[ty as usize * w + tx as usize] as f64;
                    }
                }
                image[c * h * w + o] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out.image = Tensor::new(Shape::new(1, 3, h, w), image).expect("sized");
    out.mask = Tensor::new(Shape::new(1, 1, h, w), mask).expect("sized");
    out
}
