//! Finite-difference gradient suites for every differentiable operation, the losses and
//! the assembled network.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::loss::{epe_loss, nll_loss, spatial_gradients, total_loss, EpeForm, LossConfig};
use crate::network::{build, Bound, Mode, NetworkConfig};
use crate::ops::{ConvSpec, DropoutKey, PoolSpec};
use crate::tensor::{Shape, Tensor};
use crate::Axis;

pub const SCOPES: &[&str] = &[
    "conv2d",
    "maxpool2d",
    "bilinear_upsample",
    "adaptive_avg_pool2d",
    "batchnorm2d",
    "relu",
    "dropout",
    "concat_channels",
    "slice_channels",
    "softmax_channels",
    "spatial_gradients",
    "nll_loss",
    "epe_loss",
    "total_loss",
    "network",
];

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub scope: &'static str,
    pub case: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn new(seed: u64) -> Self {
        Gen(ChaCha8Rng::seed_from_u64(seed))
    }

    fn normal(&mut self, shape: impl Into<Shape>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.sample::<f64, _>(StandardNormal))
    }

    fn uniform(&mut self, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.random_range(lo..hi))
    }

    /// Values bounded away from 0 (ReLU kink).
    fn away_from_zero(&mut self, shape: impl Into<Shape>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.random_range(0.05..1.5);
            if self.0.random_bool(0.5) { m } else { -m }
        })
    }

    /// Distinct values at least 0.01 apart (no max-pool ties within the probe step).
    fn distinct(&mut self, shape: impl Into<Shape>) -> Tensor<f64> {
        let shape = shape.into();
        let mut v: Vec<f64> = (0..shape.numel()).map(|i| i as f64 * 0.01).collect();
        v.shuffle(&mut self.0);
        Tensor::new(shape, v).expect("sized")
    }

    fn binary(&mut self, shape: impl Into<Shape>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| if self.0.random_bool(0.5) { 1.0 } else { 0.0 })
    }
}

/// `⟨R, y⟩` with a fixed random `R`, so every output element carries a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = Gen::new(seed ^ 0x5eed).normal(tape.shape(y));
    tape.weighted_sum(y, &r)
}

struct Suite {
    scope: &'static str,
    opts: GradCheckOptions,
    results: Vec<CaseResult>,
}

impl Suite {
    fn new(scope: &'static str) -> Self {
        Suite { scope, opts: GradCheckOptions::default(), results: Vec::new() }
    }

    fn case<F>(&mut self, name: impl Into<String>, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let report = grad_check(f, inputs, self.opts)?;
        self.results.push(CaseResult { scope: self.scope, case: name.into(), report });
        Ok(())
    }
}

/// Runs one suite. `scope` must be one of [`SCOPES`].
pub fn run_scope(scope: &str) -> Result<Vec<CaseResult>> {
    let scope: &'static str = SCOPES
        .iter()
        .copied()
        .find(|s| *s == scope)
        .ok_or_else(|| Error::Config(format!("unknown gradcheck scope `{scope}`; valid: {}", SCOPES.join(", "))))?;
    let mut s = Suite::new(scope);
    let mut g = Gen::new(0xC0FFEE ^ scope.len() as u64);
    match scope {
        "conv2d" => {
            let specs = [
                ("k3 s1 p1 bias", ConvSpec::new(4, 3).padding(1).bias(true)),
                ("k3 s2 p1", ConvSpec::new(3, 3).stride(2).padding(1)),
                ("k3 d2 p2 bias", ConvSpec::new(2, 3).padding(2).dilation(2).bias(true)),
                ("k3 s2 d4 p4", ConvSpec::new(2, 3).stride(2).padding(4).dilation(4)),
                ("k1 s2 bias", ConvSpec::new(4, 1).stride(2).bias(true)),
                ("k2x3 s1 p0", ConvSpec { kernel: (2, 3), ..ConvSpec::new(3, 1) }),
            ];
            for (i, (name, spec)) in specs.into_iter().enumerate() {
                let x = g.normal([2, 3, 7, 8]);
                let w = g.normal(spec.weight_shape(3));
                let mut inputs = vec![x, w];
                if spec.has_bias {
                    inputs.push(g.normal([1, spec.out_channels, 1, 1]));
                }
                s.case(name, &inputs, move |t, v| {
                    let y = t.conv2d(v[0], v[1], v.get(2).copied(), &spec)?;
                    project(t, y, i as u64)
                })?;
            }
        }
        "maxpool2d" => {
            for (name, spec) in [("3x3 s2 p1", PoolSpec::STEM), ("2x2 s2", PoolSpec { kernel: 2, stride: 2, padding: 0 })] {
                s.case(name, &[g.distinct([2, 3, 8, 8])], move |t, v| {
                    let y = t.maxpool2d(v[0], spec)?;
                    project(t, y, 1)
                })?;
            }
        }
        "bilinear_upsample" => {
            for f in [2usize, 4, 8] {
                s.case(format!("x{f}"), &[g.normal([2, 3, 4, 3])], move |t, v| {
                    let y = t.bilinear_upsample(v[0], f)?;
                    project(t, y, f as u64)
                })?;
            }
            s.case("resize 3x6 -> 8x4", &[g.normal([2, 2, 3, 6])], |t, v| {
                let y = t.bilinear_resize(v[0], 8, 4)?;
                project(t, y, 9)
            })?;
        }
        "adaptive_avg_pool2d" => {
            for k in [1usize, 2, 3, 6] {
                s.case(format!("{k}x{k}"), &[g.normal([2, 4, 8, 8])], move |t, v| {
                    let y = t.adaptive_avg_pool2d(v[0], k, k)?;
                    project(t, y, k as u64)
                })?;
            }
        }
        "batchnorm2d" => {
            let inputs = [g.normal([2, 4, 4, 4]), g.uniform([1, 4, 1, 1], 0.5, 1.5), g.normal([1, 4, 1, 1])];
            s.case("train", &inputs, |t, v| {
                let (y, _) = t.batchnorm2d_train(v[0], v[1], v[2], 1e-5)?;
                project(t, y, 2)
            })?;
            let (rm, rv) = (g.normal([1, 4, 1, 1]), g.uniform([1, 4, 1, 1], 0.5, 2.0));
            s.case("eval", &inputs, move |t, v| {
                let y = t.batchnorm2d_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
                project(t, y, 3)
            })?;
        }
        "relu" => {
            s.case("(2,4,8,8)", &[g.away_from_zero([2, 4, 8, 8])], |t, v| {
                let y = t.relu(v[0]);
                project(t, y, 4)
            })?;
        }
        "dropout" => {
            let key = DropoutKey { seed: 11, layer: 1, step: 5 };
            s.case("p=0.5 train", &[g.normal([2, 4, 8, 8])], move |t, v| {
                let y = t.dropout(v[0], 0.5, true, key)?;
                project(t, y, 5)
            })?;
        }
        "concat_channels" => {
            let inputs = [g.normal([2, 1, 5, 5]), g.normal([2, 3, 5, 5]), g.normal([2, 2, 5, 5])];
            s.case("1+3+2 channels", &inputs, |t, v| {
                let y = t.concat_channels(v)?;
                project(t, y, 6)
            })?;
        }
        "slice_channels" => {
            s.case("channels 1..3 of 4", &[g.normal([2, 4, 5, 5])], |t, v| {
                let y = t.slice_channels(v[0], 1, 2)?;
                project(t, y, 7)
            })?;
        }
        "softmax_channels" => {
            for c in [2usize, 4] {
                s.case(format!("{c} channels"), &[g.normal([2, c, 6, 6])], move |t, v| {
                    let y = t.softmax_channels(v[0])?;
                    project(t, y, c as u64)
                })?;
            }
        }
        "spatial_gradients" => {
            s.case("dx and dy", &[g.normal([2, 1, 8, 8])], |t, v| {
                let (dx, dy) = spatial_gradients(t, v[0]);
                let a = project(t, dx, 10)?;
                let b = project(t, dy, 11)?;
                t.add(a, b)
            })?;
            s.case("x only", &[g.normal([1, 2, 4, 7])], |t, v| {
                let d = t.spatial_gradient(v[0], Axis::X);
                project(t, d, 12)
            })?;
        }
        "nll_loss" => {
            let v = g.binary([2, 1, 8, 8]);
            s.case("p in (0.05, 0.95)", &[g.uniform([2, 1, 8, 8], 0.05, 0.95)], move |t, x| nll_loss(t, x[0], &v, 1e-7))?;
        }
        "epe_loss" => {
            for form in [EpeForm::Classical, EpeForm::AsPrinted] {
                if form == EpeForm::AsPrinted {
                    // its second component v₀ − v₁ vanishes on flat mask regions, leaving
                    // sqrt(e² + ε) whose curvature scale √ε = 1e-4 equals the default step
                    s.opts = GradCheckOptions::default().step(1e-6);
                }
                let v = g.binary([2, 1, 8, 8]);
                s.case(format!("{form:?}"), &[g.uniform([2, 1, 8, 8], 0.0, 1.0)], move |t, x| {
                    epe_loss(t, x[0], &v, 1e-8, form)
                })?;
            }
        }
        "total_loss" => {
            for (name, cfg) in [
                ("alpha 0.5", LossConfig::default()),
                ("use_epe false", LossConfig { use_epe: false, ..Default::default() }),
            ] {
                let v = g.binary([2, 1, 8, 8]);
                s.case(name, &[g.normal([2, 2, 8, 8])], move |t, x| {
                    let p = t.softmax_channels(x[0])?;
                    Ok(total_loss(t, p, &v, &cfg)?.0)
                })?;
            }
        }
        "network" => network_case(&mut s)?,
        _ => unreachable!("scope list checked above"),
    }
    Ok(s.results)
}

/// Width 1/16, 48×48 inputs, batch 2, training mode (batch statistics, fixed dropout
/// mask). Checks the image and a sample of entries of every trainable tensor.
///
/// Perturbing one encoder weight moves a whole feature channel, and at `h = 1e-4` some
/// activation routinely crosses a ReLU or max-pool kink, which corrupts the difference
/// quotient. The case therefore probes with `h = 1e-6`, and floors the relative-error
/// denominator at 1e-3: forward rounding (~1e-13·|f|) divided by this step leaves about
/// 1e-7 of noise on gradients that are essentially zero.
fn network_case(s: &mut Suite) -> Result<()> {
    let cfg = NetworkConfig::desk(16, 48);
    let (model, params) = build(&cfg, 7)?;
    let params = params.cast::<f64>();
    let mut g = Gen::new(21);
    let mut names = Vec::new();
    let mut inputs = vec![g.uniform([2, 3, 48, 48], 0.0, 1.0)];
    let mut constants = Vec::new();
    for (name, p) in params.iter() {
        if p.group().is_some() {
            names.push(name.to_string());
            inputs.push((*p.value).clone());
        } else {
            constants.push((name.to_string(), p.value.clone()));
        }
    }
    s.opts = GradCheckOptions::tolerance(1e-3, 1e-3).step(1e-6).sampled(4, 99);
    s.case("ws=1/16 48x48 batch 2", &inputs, move |t, v| {
        let mut pairs: Vec<(String, Var)> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        pairs.extend(constants.iter().map(|(n, val)| (n.clone(), t.leaf_shared(val.clone(), false))));
        let bound = Bound::from_pairs(pairs);
        let out = model.forward(t, &bound, v[0], Mode::Train { seed: 3, step: 0 })?;
        project(t, out.probs, 13)
    })
}

/// Every suite, in [`SCOPES`] order.
pub fn run_all() -> Result<Vec<CaseResult>> {
    let mut all = Vec::new();
    for scope in SCOPES {
        all.extend(run_scope(scope)?);
    }
    Ok(all)
}
