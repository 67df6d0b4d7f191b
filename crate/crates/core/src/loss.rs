//! Segmentation objective: per-pixel negative log likelihood of the foreground
//! probability plus an end-point error between the spatial derivative fields of the
//! predicted probability map and the ground-truth mask.
//!
//! `L_total = L_log + α · L_epe`, both terms averaged over all pixels of the batch.
//!
//! Symbols: `v` is the ground-truth mask, `p` (also `u`) the predicted foreground
//! probability, `u₀/u₁` and `v₀/v₁` the forward differences of `u` and `v` along x and y.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Algebraic form of the end-point error term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpeForm {
    /// `sqrt((u₀ − v₀)² + (u₁ − v₁)² + ε)`: prediction derivatives against ground-truth
    /// derivatives.
    #[default]
    Classical,
    /// `sqrt((u₀ − u₁)² + (v₀ − v₁)² + ε)`: the literal typeset variant, kept for audits.
    AsPrinted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub prob_epsilon: f64,
    pub epe_epsilon: f64,
    pub use_epe: bool,
    pub epe_form: EpeForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.5, prob_epsilon: 1e-7, epe_epsilon: 1e-8, use_epe: true, epe_form: EpeForm::Classical }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("loss.alpha = {} must satisfy 0 <= alpha < 1", self.alpha)));
        }
        if !(self.prob_epsilon > 0.0 && self.prob_epsilon < 0.5) {
            return Err(Error::Config(format!("loss.prob_epsilon = {} must be in (0, 0.5)", self.prob_epsilon)));
        }
        if self.epe_epsilon <= 0.0 {
            return Err(Error::Config(format!("loss.epe_epsilon = {} must be positive", self.epe_epsilon)));
        }
        Ok(())
    }

    /// The EPE term only runs when it contributes to the total.
    pub fn epe_active(&self) -> bool {
        self.use_epe && self.alpha != 0.0
    }
}

/// Per-batch mean loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_log: f64,
    pub l_epe: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn combine(l_log: f64, l_epe: f64, alpha: f64) -> Self {
        LossBreakdown { l_log, l_epe, l_total: l_log + alpha * l_epe }
    }
}

fn check_pair<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    if a.shape().c != 1 {
        return Err(Error::invalid(op, format!("expected a single-channel map, got {}", a.shape())));
    }
    Ok(())
}

fn check_binary<T: Real>(op: &'static str, v: &Tensor<T>) -> Result<()> {
    if v.data().iter().all(|&x| x == T::zero() || x == T::one()) {
        Ok(())
    } else {
        Err(Error::invalid(op, "target mask must contain only 0 and 1"))
    }
}

pub(crate) fn nll_value<T: Real>(p: &Tensor<T>, v: &Tensor<T>, eps: T) -> Result<T> {
    check_pair("nll_loss", p, v)?;
    check_binary("nll_loss", v)?;
    let hi = T::one() - eps;
    let sum = p.data().iter().zip(v.data()).fold(T::zero(), |acc, (&p, &v)| {
        // comparisons rather than max/min, so NaN reaches the total
        let p = if p < eps { eps } else if p > hi { hi } else { p };
        acc - (v * p.ln() + (T::one() - v) * (T::one() - p).ln())
    });
    Ok(sum / T::from_usize(p.numel()).unwrap())
}

pub(crate) fn nll_grad<T: Real>(p: &Tensor<T>, v: &Tensor<T>, eps: T, upstream: T) -> Tensor<T> {
    let hi = T::one() - eps;
    let scale = upstream / T::from_usize(p.numel()).unwrap();
    let data = p
        .data()
        .iter()
        .zip(v.data())
        .map(|(&p, &v)| {
            if p < eps || p > hi {
                T::zero()
            } else {
                -scale * (v / p - (T::one() - v) / (T::one() - p))
            }
        })
        .collect();
    Tensor::from_parts(p.shape(), data)
}

/// Forward differences: `d[i, j] = m[i, j+1] − m[i, j]` along x (zero in the last column),
/// analogously along y.
pub(crate) fn spatial_diff<T: Real>(m: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let s = m.shape();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let p = m.plane(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    out[base + i * s.w + j] = match axis {
                        Axis::X if j + 1 < s.w => p[i * s.w + j + 1] - p[i * s.w + j],
                        Axis::Y if i + 1 < s.h => p[(i + 1) * s.w + j] - p[i * s.w + j],
                        _ => T::zero(),
                    };
                }
            }
        }
    }
    Tensor::from_parts(s, out)
}

pub(crate) fn spatial_diff_adjoint<T: Real>(g: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let s: Shape = g.shape();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let gp = g.plane(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    let v = gp[i * s.w + j];
                    let here = base + i * s.w + j;
                    let next = match axis {
                        Axis::X if j + 1 < s.w => here + 1,
                        Axis::Y if i + 1 < s.h => here + s.w,
                        _ => continue,
                    };
                    out[next] = out[next] + v;
                    out[here] = out[here] - v;
                }
            }
        }
    }
    Tensor::from_parts(s, out)
}

/// The two error components per pixel, before the square root.
fn epe_fields<T: Real>(u: &Tensor<T>, v: &Tensor<T>, form: EpeForm) -> (Vec<T>, Vec<T>) {
    let (ux, uy) = (spatial_diff(u, Axis::X), spatial_diff(u, Axis::Y));
    let (vx, vy) = (spatial_diff(v, Axis::X), spatial_diff(v, Axis::Y));
    match form {
        EpeForm::Classical => (
            ux.data().iter().zip(vx.data()).map(|(&a, &b)| a - b).collect(),
            uy.data().iter().zip(vy.data()).map(|(&a, &b)| a - b).collect(),
        ),
        EpeForm::AsPrinted => (
            ux.data().iter().zip(uy.data()).map(|(&a, &b)| a - b).collect(),
            vx.data().iter().zip(vy.data()).map(|(&a, &b)| a - b).collect(),
        ),
    }
}

pub(crate) fn epe_value<T: Real>(u: &Tensor<T>, v: &Tensor<T>, eps: T, form: EpeForm) -> Result<T> {
    check_pair("epe_loss", u, v)?;
    let (e0, e1) = epe_fields(u, v, form);
    let sum = e0.iter().zip(&e1).fold(T::zero(), |acc, (&a, &b)| acc + (a * a + b * b + eps).sqrt());
    Ok(sum / T::from_usize(u.numel()).unwrap())
}

pub(crate) fn epe_grad<T: Real>(u: &Tensor<T>, v: &Tensor<T>, eps: T, form: EpeForm, upstream: T) -> Tensor<T> {
    let s = u.shape();
    let (e0, e1) = epe_fields(u, v, form);
    let scale = upstream / T::from_usize(u.numel()).unwrap();
    let mut g0 = Vec::with_capacity(s.numel());
    let mut g1 = Vec::with_capacity(s.numel());
    for (&a, &b) in e0.iter().zip(&e1) {
        let k = scale / (a * a + b * b + eps).sqrt();
        g0.push(a * k);
        g1.push(b * k);
    }
    let (g0, g1) = (Tensor::from_parts(s, g0), Tensor::from_parts(s, g1));
    match form {
        EpeForm::Classical => {
            let dx = spatial_diff_adjoint(&g0, Axis::X);
            let dy = spatial_diff_adjoint(&g1, Axis::Y);
            Tensor::from_parts(s, dx.data().iter().zip(dy.data()).map(|(&a, &b)| a + b).collect())
        }
        EpeForm::AsPrinted => {
            // only the first component depends on u: e0 = u₀ − u₁
            let dx = spatial_diff_adjoint(&g0, Axis::X);
            let dy = spatial_diff_adjoint(&g0, Axis::Y);
            Tensor::from_parts(s, dx.data().iter().zip(dy.data()).map(|(&a, &b)| a - b).collect())
        }
    }
}

/// Mean binary negative log likelihood of `p = Pr(v = 1)` with `p` clamped to `[ε, 1−ε]`.
pub fn nll_loss<T: Real>(tape: &mut Tape<T>, p: Var, v: &Tensor<T>, prob_epsilon: f64) -> Result<Var> {
    tape.nll(p, Arc::new(v.clone()), T::from_f64_lossy(prob_epsilon))
}

/// Forward differences of a map along x and y.
pub fn spatial_gradients<T: Real>(tape: &mut Tape<T>, m: Var) -> (Var, Var) {
    let dx = tape.spatial_gradient(m, Axis::X);
    let dy = tape.spatial_gradient(m, Axis::Y);
    (dx, dy)
}

/// Mean per-pixel end-point error between the derivative fields of `u` and `v`.
pub fn epe_loss<T: Real>(tape: &mut Tape<T>, u: Var, v: &Tensor<T>, epe_epsilon: f64, form: EpeForm) -> Result<Var> {
    tape.epe(u, Arc::new(v.clone()), T::from_f64_lossy(epe_epsilon), form)
}

/// Combined objective on a softmax output `(N, 2, H, W)`; the foreground probability is
/// channel 1. Returns the differentiable total and the component values.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    prediction: Var,
    v: &Tensor<T>,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    let ps = tape.shape(prediction);
    if ps.c != 2 {
        return Err(Error::invalid("total_loss", format!("prediction must have 2 channels, got {ps}")));
    }
    let p = tape.slice_channels(prediction, 1, 1)?;
    let nll = nll_loss(tape, p, v, config.prob_epsilon)?;
    let l_log = tape.value(nll).item().to_f64_lossy();
    if !config.epe_active() {
        return Ok((nll, LossBreakdown::combine(l_log, 0.0, config.alpha)));
    }
    let epe = epe_loss(tape, p, v, config.epe_epsilon, config.epe_form)?;
    let l_epe = tape.value(epe).item().to_f64_lossy();
    let total = tape.add_scaled(nll, epe, T::from_f64_lossy(config.alpha))?;
    Ok((total, LossBreakdown::combine(l_log, l_epe, config.alpha)))
}

/// Loss values without recording gradients.
pub fn evaluate_loss<T: Real>(prediction: &Tensor<T>, v: &Tensor<T>, config: &LossConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = tape.constant(prediction.clone());
    Ok(total_loss(&mut tape, p, v, config)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::new([1, 1, h, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn nll_uniform_half_is_ln2() {
        let p = Tensor::full([2, 1, 3, 3], 0.5);
        for v in [0.0, 1.0] {
            let l = nll_value(&p, &Tensor::full([2, 1, 3, 3], v), 1e-7).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_perfect_prediction_hits_clamp() {
        let p = Tensor::full([1, 1, 2, 2], 1.0);
        let l = nll_value(&p, &p, 1e-7).unwrap();
        assert_eq!(l, -(1.0f64 - 1e-7).ln());
    }

    #[test]
    fn nll_rejects_soft_targets() {
        let p = Tensor::full([1, 1, 2, 2], 0.5);
        assert!(nll_value(&p, &Tensor::full([1, 1, 2, 2], 0.3), 1e-7).is_err());
    }

    #[test]
    fn spatial_diff_step() {
        let m = map(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(spatial_diff(&m, Axis::X).data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(spatial_diff(&m, Axis::Y).data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn adjoint_identity() {
        // <D a, b> == <a, Dᵀ b>
        let a = Tensor::<f64>::from_fn([1, 1, 3, 4], |[_, _, h, w]| (h * 7 + w * 3) as f64 % 5.0);
        let b = Tensor::<f64>::from_fn([1, 1, 3, 4], |[_, _, h, w]| (h + 2 * w) as f64 - 2.0);
        for axis in [Axis::X, Axis::Y] {
            let lhs: f64 = spatial_diff(&a, axis).data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let rhs: f64 = a.data().iter().zip(spatial_diff_adjoint(&b, axis).data()).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn epe_offset_blind() {
        let u = Tensor::<f64>::full([1, 1, 3, 3], 0.0);
        let v = Tensor::full([1, 1, 3, 3], 1.0);
        let l = epe_value(&u, &v, 1e-8, EpeForm::Classical).unwrap();
        assert!((l - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::combine(0.40, 0.20, 0.5);
        assert_eq!(b.l_total, 0.5);
        assert_eq!(LossBreakdown::combine(0.3, 0.9, 0.0).l_total, 0.3);
    }

    #[test]
    fn alpha_bounds() {
        let mut c = LossConfig::default();
        c.alpha = 1.0;
        assert!(c.validate().is_err());
        c.alpha = 0.0;
        assert!(c.validate().is_ok());
    }
}
