use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Group, ParameterSet};
use crate::tensor::Tensor;

/// `base · (1 − iter/max_iter)^power`; iterations past `max_iter` give 0.
pub fn poly_lr(base_lr: f64, iter: u64, max_iter: u64, power: f64) -> f64 {
    if iter >= max_iter {
        if iter > max_iter {
            log::warn!("poly_lr: iteration {iter} beyond max_iter {max_iter}, using 0");
        }
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per trainable parameter, and the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet<f32>) -> Self {
        let moments = params
            .trainable()
            .map(|(n, p)| (n.to_string(), (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))))
            .collect();
        OptimizerState { t: 0, moments }
    }
}

/// Learning rate per optimizer group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub encoder: f64,
    pub decoder: f64,
}

impl GroupRates {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Encoder => self.encoder,
            Group::Decoder => self.decoder,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter. Missing gradients count as
/// zero. Any non-finite gradient aborts the step before anything is modified.
pub fn adam_step(
    params: &mut ParameterSet<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    rates: GroupRates,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.tensor(name)?;
        if g.shape() != p.shape() {
            return Err(Error::ParameterShape { name: name.clone(), expected: p.shape(), found: g.shape() });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = (1.0 - cfg.beta1.powi(t)) as f32;
    let c2 = (1.0 - cfg.beta2.powi(t)) as f32;
    let eps = cfg.eps as f32;
    let names: Vec<(String, Group)> =
        params.trainable().map(|(n, p)| (n.to_string(), p.group().expect("trainable"))).collect();
    for (name, group) in names {
        let lr = rates.get(group) as f32;
        let p = params.tensor_mut(&name)?;
        let shape = p.shape();
        let (m, v) = state.moments.entry(name.clone()).or_insert_with(|| (Tensor::zeros(shape), Tensor::zeros(shape)));
        let g = grads.get(&name);
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
        assert_eq!(poly_lr(0.01, 150, 100, 0.9), 0.0);
        assert!((poly_lr(0.001, 50, 100, 0.9) - 5.358867312681466e-4).abs() < 1e-12);
    }
}
