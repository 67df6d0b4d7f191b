use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape(), data)
}

/// Identifies one dropout draw: the same key always yields the same mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for an independent random stream identified by `parts`.
pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed ^ 0x6a09_e667_f3bc_c908), |h, &p| mix64(h ^ mix64(p.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}

impl DropoutKey {
    /// Uniform draw in `[0, 1)` for element `index`.
    pub fn uniform(&self, index: u64) -> f64 {
        let mut h = mix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        h = mix64(h ^ self.layer.wrapping_mul(0xd6e8_feb8_6659_fd93));
        h = mix64(h ^ self.step.wrapping_mul(0xa076_1d64_78bd_642f));
        h = mix64(h ^ index.wrapping_mul(0xe703_7ed1_a0b4_28db));
        (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Multiplicative dropout mask: `0` with probability `p`, else `1/(1−p)`.
pub fn dropout_mask<T: Real>(shape: Shape, p: f64, key: DropoutKey) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    Ok((0..shape.numel() as u64)
        .map(|i| if key.uniform(i) < p { T::zero() } else { keep })
        .collect())
}

/// Softmax across channels at every pixel.
pub fn softmax_channels_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c < 2 {
        return Err(Error::invalid("softmax_channels", format!("needs at least 2 channels, got {}", s.c)));
    }
    let p = s.plane();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let at = |c: usize| base + c * p + i;
            let max = (0..s.c).map(|c| x.data()[at(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (x.data()[at(c)] - max).exp();
                out[at(c)] = e;
                z = z + e;
            }
            for c in 0..s.c {
                out[at(c)] = out[at(c)] / z;
            }
        }
    }
    Ok(Tensor::from_parts(s, out))
}

/// `dx_c = y_c (dy_c − Σ_k dy_k y_k)`.
pub fn softmax_channels_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let p = s.plane();
    let mut dx = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let dot = (0..s.c).fold(T::zero(), |a, c| a + dy.data()[base + c * p + i] * y.data()[base + c * p + i]);
            for c in 0..s.c {
                let k = base + c * p + i;
                dx[k] = y.data()[k] * (dy.data()[k] - dot);
            }
        }
    }
    Tensor::from_parts(s, dx)
}

pub fn concat_channels_forward<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?.shape();
    for (index, t) in inputs.iter().enumerate() {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::ConcatMismatch { index, expected: first, found: s });
        }
    }
    let c: usize = inputs.iter().map(|t| t.shape().c).sum();
    let os = Shape::new(first.n, c, first.h, first.w);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for t in inputs {
            let len = t.shape().c * first.plane();
            out.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
        }
    }
    Ok(Tensor::from_parts(os, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps() {
        let x = Tensor::<f32>::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_is_reproducible() {
        let key = DropoutKey { seed: 7, layer: 1, step: 3 };
        let a: Vec<f32> = dropout_mask(Shape::new(2, 3, 4, 4), 0.5, key).unwrap();
        let b: Vec<f32> = dropout_mask(Shape::new(2, 3, 4, 4), 0.5, key).unwrap();
        assert_eq!(a, b);
        let c: Vec<f32> = dropout_mask(Shape::new(2, 3, 4, 4), 0.5, DropoutKey { step: 4, ..key }).unwrap();
        assert_ne!(a, c);
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_rejects_p_one() {
        assert!(dropout_mask::<f32>(Shape::scalar(), 1.0, DropoutKey { seed: 0, layer: 0, step: 0 }).is_err());
    }

    #[test]
    fn softmax_needs_two_channels() {
        assert!(softmax_channels_forward(&Tensor::<f32>::zeros([1, 1, 2, 2])).is_err());
    }

    #[test]
    fn concat_names_offending_input() {
        let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let c = Tensor::<f32>::zeros([1, 1, 4, 3]);
        match concat_channels_forward(&[&a, &b, &c]) {
            Err(Error::ConcatMismatch { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
