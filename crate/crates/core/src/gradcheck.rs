//! Central finite-difference verification of tape gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub rel_tol: f64,
    /// Denominator floor: entries whose gradients are smaller than this are compared
    /// absolutely against `rel_tol · abs_tol`.
    pub abs_tol: f64,
    /// Check at most this many randomly chosen entries per input.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Base of the step rule `h = max(step, step·|x|)`.
    pub step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { rel_tol: 1e-3, abs_tol: 1e-6, max_entries: None, seed: 0, step: DEFAULT_STEP }
    }
}

impl GradCheckOptions {
    pub fn tolerance(rel_tol: f64, abs_tol: f64) -> Self {
        GradCheckOptions { rel_tol, abs_tol, ..Default::default() }
    }

    pub fn step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn sampled(mut self, max_entries: usize, seed: u64) -> Self {
        self.max_entries = Some(max_entries);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_entry: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub const DEFAULT_STEP: f64 = 1e-4;

/// `max(base, base·|x|)`.
pub fn fd_step_with(x: f64, base: f64) -> f64 {
    (base * x.abs()).max(base)
}

/// Finite-difference step for an entry with value `x`.
pub fn fd_step(x: f64) -> f64 {
    fd_step_with(x, DEFAULT_STEP)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], requires_grad: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compares the tape gradient of the scalar function `f` with central differences
/// `(f(x+h) − f(x−h)) / 2h`, `h = max(1e-4, 1e-4·|x|)` unless overridden, for every
/// input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < numel => {
                let mut e = sample(&mut rng, numel, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..numel).collect(),
        };
        let mut report = InputReport {
            input: i,
            checked: entries.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_entry: 0,
            passed: true,
        };
        for &e in &entries {
            let x = input.data()[e];
            let h = fd_step_with(x, opts.step);
            probe[i].data_mut()[e] = x + h;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let plus = t.value(o).item();
            probe[i].data_mut()[e] = x - h;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let minus = t.value(o).item();
            probe[i].data_mut()[e] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.abs_tol);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_entry = e;
            }
        }
        report.passed = report.max_rel_err <= opts.rel_tol;
        reports.push(report);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradCheckReport { inputs: reports, max_rel_err, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // sum(relu(x)) with a deliberately wrong function shape: a 2x scaled value whose
        // gradient the checker must reproduce.
        let x = Tensor::<f64>::from_fn([1, 1, 2, 3], |[_, _, h, w]| (h as f64 - 0.5) * (w as f64 + 1.0));
        let ok = grad_check(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            std::slice::from_ref(&x),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(ok.passed, "{ok:?}");
        assert!(ok.max_rel_err < 1e-4);
    }

    #[test]
    fn sampling_limits_entries() {
        let x = Tensor::<f64>::full([1, 1, 10, 10], 0.3);
        let r = grad_check(|t, v| Ok(t.sum(v[0])), &[x], GradCheckOptions::default().sampled(7, 3)).unwrap();
        assert_eq!(r.inputs[0].checked, 7);
    }
}
