//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of one training-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (used for normalization).
    pub var: Vec<T>,
    /// Number of values per channel.
    pub count: usize,
}

impl<T: Real> BatchStats<T> {
    /// Moves running statistics towards this batch. The running variance tracks the
    /// same biased variance that normalized the batch, so evaluation reproduces training
    /// normalization on a stationary input even when few values per channel are seen.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let keep = T::one() - momentum;
        for c in 0..self.mean.len() {
            running_mean[c] = keep * running_mean[c] + momentum * self.mean[c];
            running_var[c] = keep * running_var[c] + momentum * self.var[c];
        }
    }
}

fn check_channels<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = x.shape().c;
    for (name, t) in [("gamma length", gamma), ("beta length", beta)] {
        if t.numel() != c {
            return Err(Error::DimMismatch {
                op: "batchnorm2d",
                lhs_name: "input channels",
                lhs: c,
                rhs_name: name,
                rhs: t.numel(),
            });
        }
    }
    Ok(())
}

/// Training mode: normalizes with batch statistics. Returns `(y, x_hat, inv_std, stats)`.
#[allow(clippy::type_complexity)]
pub fn batchnorm_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>, BatchStats<T>)> {
    check_channels(x, gamma, beta)?;
    let s = x.shape();
    let count = s.n * s.plane();
    if count < 2 {
        return Err(Error::invalid(
            "batchnorm2d",
            format!("training mode needs N·H·W >= 2 per channel, input is {s}"),
        ));
    }
    let m = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc = x.plane(n, c).iter().fold(acc, |a, &v| a + v);
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for n in 0..s.n {
            sq = x.plane(n, c).iter().fold(sq, |a, &v| a + (v - mu) * (v - mu));
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(s.numel());
    let mut y = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            for &v in x.plane(n, c) {
                let h = (v - mean[c]) * inv_std[c];
                xhat.push(h);
                y.push(g * h + b);
            }
        }
    }
    Ok((
        Tensor::from_parts(s, y),
        Tensor::from_parts(s, xhat),
        inv_std,
        BatchStats { mean, var, count },
    ))
}

/// Evaluation mode: normalizes with running statistics.
pub fn batchnorm_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    check_channels(x, gamma, beta)?;
    check_channels(x, running_mean, running_var)?;
    let s = x.shape();
    let mut y = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma.data()[c] / (running_var.data()[c] + eps).sqrt();
            let (m, b) = (running_mean.data()[c], beta.data()[c]);
            y.extend(x.plane(n, c).iter().map(|&v| (v - m) * scale + b));
        }
    }
    Ok(Tensor::from_parts(s, y))
}

/// Per-channel `(sum(dy), sum(dy · x_hat))`.
pub(crate) fn channel_sums<T: Real>(dy: &Tensor<T>, xhat: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = dy.shape();
    let mut sd = vec![T::zero(); s.c];
    let mut sdx = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for (&g, &h) in dy.plane(n, c).iter().zip(xhat.plane(n, c)) {
                sd[c] = sd[c] + g;
                sdx[c] = sdx[c] + g * h;
            }
        }
    }
    (sd, sdx)
}

/// Input gradient in training mode:
/// `dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))`.
pub fn batchnorm_train_backward_input<T: Real>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &Tensor<T>,
    inv_std: &[T],
) -> Tensor<T> {
    let s: Shape = dy.shape();
    let m = T::from_usize(s.n * s.plane()).unwrap();
    let (sd, sdx) = channel_sums(dy, xhat);
    let mut dx = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let k = gamma.data()[c] * inv_std[c] / m;
            for (&g, &h) in dy.plane(n, c).iter().zip(xhat.plane(n, c)) {
                dx.push(k * (m * g - sd[c] - h * sdx[c]));
            }
        }
    }
    Tensor::from_parts(s, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros([2, 3, 2, 2]);
        let g = Tensor::<f32>::zeros([1, 2, 1, 1]);
        assert!(batchnorm_train_forward(&x, &g, &g, 1e-5).is_err());
    }

    #[test]
    fn single_value_per_channel_rejected() {
        let x = Tensor::<f32>::zeros([1, 2, 1, 1]);
        let g = Tensor::<f32>::zeros([1, 2, 1, 1]);
        assert!(batchnorm_train_forward(&x, &g, &g, 1e-5).is_err());
    }

    #[test]
    fn zero_variance_is_finite() {
        let x = Tensor::<f32>::full([2, 1, 3, 3], 4.0);
        let g = Tensor::<f32>::full([1, 1, 1, 1], 1.0);
        let b = Tensor::<f32>::zeros([1, 1, 1, 1]);
        let (y, ..) = batchnorm_train_forward(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_update() {
        let stats = BatchStats { mean: vec![2.0f64], var: vec![3.0], count: 4 };
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        stats.update_running(&mut m, &mut v, 0.1);
        assert!((m[0] - 0.2).abs() < 1e-15);
        assert!((v[0] - (0.9 + 0.1 * 3.0)).abs() < 1e-15);
    }
}
