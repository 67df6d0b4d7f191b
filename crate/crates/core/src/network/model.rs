//! Encoder–decoder graph.
//!
//! Encoder: 3x3/2 convolution, batch norm, ReLU, 3x3/2 max pooling, then bottleneck
//! residual stages whose later members replace striding with dilation (overall /8).
//! Decoder: adaptive average pooling of the encoder map onto each pyramid grid, a 1x1
//! convolution and ReLU per level, bilinear restore to the encoder resolution, channel
//! concatenation with the encoder map, two 3x3 convolutions with batch norm, x2 bilinear
//! upsampling, dropout, x4 bilinear upsampling and a channel softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::config::{check_input_size, NetworkConfig, SkipMode, ENCODER_DOWNSAMPLE, STEM_DOWNSAMPLE};
use super::params::{Bound, Group, ParamKind, ParameterSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, ConvSpec, DropoutKey, PoolSpec, BN_EPSILON};
use crate::tensor::{Real, Shape, Tensor};

const DROPOUT_LAYER: u64 = 1;
const IMAGE_CHANNELS: usize = 3;

/// Forward-pass mode. Training mode uses batch statistics and samples dropout masks from
/// `(seed, step)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64, step: u64 },
    Eval,
}

/// Layer name with its `(channels, height, width)` output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PlanEntry {
    pub name: String,
    pub shape: [usize; 3],
}

impl PlanEntry {
    fn new(name: impl Into<String>, s: Shape) -> Self {
        PlanEntry { name: name.into(), shape: [s.c, s.h, s.w] }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    in_c: usize,
    spec: ConvSpec,
    group: Group,
}

impl ConvLayer {
    fn new(name: impl Into<String>, in_c: usize, spec: ConvSpec, group: Group) -> Self {
        ConvLayer { name: name.into(), in_c, spec, group }
    }
}

#[derive(Clone, Debug)]
struct UnitLayout {
    name: String,
    in_c: usize,
    mid_c: usize,
    out_c: usize,
    stride: usize,
    dilation: usize,
}

impl UnitLayout {
    fn projection(&self) -> bool {
        self.in_c != self.out_c || self.stride != 1
    }

    fn convs(&self) -> Vec<(ConvLayer, String)> {
        let g = Group::Encoder;
        let n = &self.name;
        let mut v = vec![
            (ConvLayer::new(format!("{n}.conv1"), self.in_c, ConvSpec::new(self.mid_c, 1), g), format!("{n}.bn1")),
            (
                ConvLayer::new(
                    format!("{n}.conv2"),
                    self.mid_c,
                    ConvSpec::new(self.mid_c, 3).stride(self.stride).padding(self.dilation).dilation(self.dilation),
                    g,
                ),
                format!("{n}.bn2"),
            ),
            (ConvLayer::new(format!("{n}.conv3"), self.mid_c, ConvSpec::new(self.out_c, 1), g), format!("{n}.bn3")),
        ];
        if self.projection() {
            v.push((
                ConvLayer::new(format!("{n}.proj"), self.in_c, ConvSpec::new(self.out_c, 1).stride(self.stride), g),
                format!("{n}.proj_bn"),
            ));
        }
        v
    }
}

/// Static structure derived from a [`NetworkConfig`].
#[derive(Clone, Debug)]
struct Layout {
    stem: ConvLayer,
    stages: Vec<Vec<UnitLayout>>,
    skips: Vec<ConvLayer>,
    pyramid: Vec<(usize, ConvLayer)>,
    head1: ConvLayer,
    head2: ConvLayer,
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> Self {
        let stem_c = cfg.ch(cfg.stem_channels);
        let stem = ConvLayer::new(
            "encoder.stem.conv",
            IMAGE_CHANNELS,
            ConvSpec::new(stem_c, 3).stride(2).padding(1),
            Group::Encoder,
        );
        let mut in_c = stem_c;
        let mut stages = Vec::new();
        for (s, &c) in cfg.stage_channels.iter().enumerate() {
            let out_c = cfg.ch(c);
            let mid_c = cfg.ch((c / 4).max(1));
            let units = (0..cfg.stage_depths[s])
                .map(|u| UnitLayout {
                    name: format!("encoder.stage{}.unit{}", s + 1, u + 1),
                    in_c: if u == 0 { in_c } else { out_c },
                    mid_c,
                    out_c,
                    stride: if u == 0 { cfg.stage_strides[s] } else { 1 },
                    dilation: cfg.stage_dilations[s],
                })
                .collect();
            stages.push(units);
            in_c = out_c;
        }
        let pyr_c = cfg.ch(cfg.pyramid_channels);
        let enc_c = in_c;
        let pyramid = cfg
            .pyramid_scales
            .iter()
            .map(|&s| {
                (s, ConvLayer::new(format!("decoder.pyramid{s}.conv"), enc_c, ConvSpec::new(pyr_c, 1).bias(true), Group::Decoder))
            })
            .collect();
        let mut skips = Vec::new();
        if cfg.skip_mode == SkipMode::All {
            // earlier stages, brought to the encoder resolution by a strided 1x1 conv
            let mut down = ENCODER_DOWNSAMPLE / STEM_DOWNSAMPLE;
            for (s, &c) in cfg.stage_channels.iter().enumerate().take(cfg.num_stages() - 1) {
                down /= cfg.stage_strides[s];
                skips.push(ConvLayer::new(
                    format!("decoder.skip{}.conv", s + 1),
                    cfg.ch(c),
                    ConvSpec::new(pyr_c, 1).stride(down).bias(true),
                    Group::Decoder,
                ));
            }
        }
        let head1 = ConvLayer::new(
            "decoder.head.conv1",
            cfg.concat_channels(),
            ConvSpec::new(cfg.ch(cfg.head_conv1_channels), 3).padding(1),
            Group::Decoder,
        );
        let head2 = ConvLayer::new(
            "decoder.head.conv2",
            cfg.ch(cfg.head_conv1_channels),
            ConvSpec::new(cfg.num_classes, 3).padding(1),
            Group::Decoder,
        );
        Layout { stem, stages, skips, pyramid, head1, head2 }
    }

    /// Every convolution with the batch-norm layer that follows it, in build order.
    fn declarations(&self) -> Vec<(ConvLayer, Option<String>)> {
        let mut v = vec![(self.stem.clone(), Some("encoder.stem.bn".to_string()))];
        for unit in self.stages.iter().flatten() {
            v.extend(unit.convs().into_iter().map(|(c, b)| (c, Some(b))));
        }
        v.extend(self.skips.iter().map(|c| (c.clone(), None)));
        v.extend(self.pyramid.iter().map(|(_, c)| (c.clone(), None)));
        v.push((self.head1.clone(), Some("decoder.head.bn1".into())));
        v.push((self.head2.clone(), Some("decoder.head.bn2".into())));
        v
    }
}

/// The segmentation network: structure only. Values live in a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Model {
    config: NetworkConfig,
    layout: Layout,
}

/// Builds the graph and draws initial parameters: fan-in scaled normal convolution
/// weights (`std = sqrt(2 / fan_in)`), zero biases, `γ = 1`, `β = 0`, running mean 0 and
/// running variance 1.
pub fn build(config: &NetworkConfig, init_seed: u64) -> Result<(Model, ParameterSet<f32>)> {
    let model = Model::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut params = ParameterSet::new();
    for (conv, bn) in model.layout.declarations() {
        let ws = conv.spec.weight_shape(conv.in_c);
        let fan_in = (ws.c * ws.h * ws.w) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data: Vec<f32> = (0..ws.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
        let kind = ParamKind::Trainable(conv.group);
        params.insert(format!("{}.weight", conv.name), Tensor::new(ws, data)?, kind);
        let oc = conv.spec.out_channels;
        let vec_shape = Shape::new(1, oc, 1, 1);
        if conv.spec.has_bias {
            params.insert(format!("{}.bias", conv.name), Tensor::zeros(vec_shape), kind);
        }
        if let Some(bn) = bn {
            params.insert(format!("{bn}.gamma"), Tensor::full(vec_shape, 1.0), kind);
            params.insert(format!("{bn}.beta"), Tensor::zeros(vec_shape), kind);
            params.insert(format!("{bn}.running_mean"), Tensor::zeros(vec_shape), ParamKind::RunningMean);
            params.insert(format!("{bn}.running_var"), Tensor::full(vec_shape, 1.0), ParamKind::RunningVar);
        }
    }
    Ok((model, params))
}

/// Handles of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnVars {
    pub name: String,
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BnVars {
    pub fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(BnVars {
            name: name.into(),
            gamma: bound.var(&format!("{name}.gamma"))?,
            beta: bound.var(&format!("{name}.beta"))?,
            running_mean: bound.var(&format!("{name}.running_mean"))?,
            running_var: bound.var(&format!("{name}.running_var"))?,
        })
    }
}

/// Weights of one bottleneck residual unit.
#[derive(Clone, Debug)]
pub struct UnitParams {
    pub conv1: Var,
    pub bn1: BnVars,
    pub conv2: Var,
    pub bn2: BnVars,
    pub conv3: Var,
    pub bn3: BnVars,
    pub projection: Option<(Var, BnVars)>,
}

impl UnitParams {
    pub fn bind(bound: &Bound, unit: &str, projection: bool) -> Result<Self> {
        let w = |c: &str| bound.var(&format!("{unit}.{c}.weight"));
        let bn = |b: &str| BnVars::bind(bound, &format!("{unit}.{b}"));
        Ok(UnitParams {
            conv1: w("conv1")?,
            bn1: bn("bn1")?,
            conv2: w("conv2")?,
            bn2: bn("bn2")?,
            conv3: w("conv3")?,
            bn3: bn("bn3")?,
            projection: if projection { Some((w("proj")?, bn("proj_bn")?)) } else { None },
        })
    }
}

/// Batch-norm behaviour during a forward pass; training mode collects batch statistics.
pub enum BnMode<T> {
    Train(Vec<(String, BatchStats<T>)>),
    Eval,
}

pub fn batchnorm<T: Real>(tape: &mut Tape<T>, x: Var, bn: &BnVars, mode: &mut BnMode<T>) -> Result<Var> {
    let eps = T::from_f64_lossy(BN_EPSILON);
    match mode {
        BnMode::Train(stats) => {
            let (y, s) = tape.batchnorm2d_train(x, bn.gamma, bn.beta, eps)?;
            stats.push((bn.name.clone(), s));
            Ok(y)
        }
        BnMode::Eval => {
            let mean = tape.value(bn.running_mean).clone();
            let var = tape.value(bn.running_var).clone();
            tape.batchnorm2d_eval(x, bn.gamma, bn.beta, &mean, &var, eps)
        }
    }
}

/// `ReLU(shortcut(x) + bottleneck(x))` with bottleneck
/// `1x1 reduce → BN/ReLU → 3x3 (stride, dilation, pad = dilation) → BN/ReLU → 1x1 expand → BN`
/// and shortcut either the identity or a strided 1x1 projection with BN.
pub fn residual_unit<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    unit: &UnitParams,
    stride: usize,
    dilation: usize,
    mode: &mut BnMode<T>,
) -> Result<Var> {
    let in_c = tape.shape(x).c;
    let mid_c = tape.shape(unit.conv1).n;
    let out_c = tape.shape(unit.conv3).n;
    let h = tape.conv2d(x, unit.conv1, None, &ConvSpec::new(mid_c, 1))?;
    let h = batchnorm(tape, h, &unit.bn1, mode)?;
    let h = tape.relu(h);
    let spec = ConvSpec::new(mid_c, 3).stride(stride).padding(dilation).dilation(dilation);
    let h = tape.conv2d(h, unit.conv2, None, &spec)?;
    let h = batchnorm(tape, h, &unit.bn2, mode)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, unit.conv3, None, &ConvSpec::new(out_c, 1))?;
    let h = batchnorm(tape, h, &unit.bn3, mode)?;
    let shortcut = match &unit.projection {
        Some((w, bn)) => {
            let s = tape.conv2d(x, *w, None, &ConvSpec::new(out_c, 1).stride(stride))?;
            batchnorm(tape, s, bn, mode)?
        }
        None if in_c != out_c || stride != 1 => {
            return Err(Error::invalid(
                "residual_unit",
                format!("identity shortcut cannot map {in_c} channels at stride {stride} to {out_c} channels"),
            ))
        }
        None => x,
    };
    let sum = tape.add(shortcut, h)?;
    Ok(tape.relu(sum))
}

/// Result of [`Model::forward`].
pub struct ForwardOutput<T> {
    /// Per-pixel class probabilities `(N, classes, H, W)`.
    pub probs: Var,
    /// Output shape of every named layer, in execution order.
    pub trace: Vec<PlanEntry>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

impl Model {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config: config.clone(), layout: Layout::new(config) })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let xs = tape.shape(x);
        if xs.c != IMAGE_CHANNELS {
            return Err(Error::DimMismatch {
                op: "forward",
                lhs_name: "input channels",
                lhs: xs.c,
                rhs_name: "image channels",
                rhs: IMAGE_CHANNELS,
            });
        }
        if xs.n == 0 {
            return Err(Error::invalid("forward", "empty batch"));
        }
        check_input_size(cfg, xs.h, xs.w)?;
        let mut bn_mode = match mode {
            Mode::Train { .. } => BnMode::Train(Vec::new()),
            Mode::Eval => BnMode::Eval,
        };
        let mut trace = Vec::new();
        let mut record = |tape: &Tape<T>, name: &str, v: Var| trace.push(PlanEntry::new(name, tape.shape(v)));

        let l = &self.layout;
        let h = tape.conv2d(x, bound.var("encoder.stem.conv.weight")?, None, &l.stem.spec)?;
        record(tape, "encoder.stem.conv", h);
        let h = batchnorm(tape, h, &BnVars::bind(bound, "encoder.stem.bn")?, &mut bn_mode)?;
        let h = tape.relu(h);
        let mut h = tape.maxpool2d(h, PoolSpec::STEM)?;
        record(tape, "encoder.stem.pool", h);

        let mut stage_outputs = Vec::new();
        for (s, units) in l.stages.iter().enumerate() {
            for unit in units {
                let p = UnitParams::bind(bound, &unit.name, unit.projection())?;
                h = residual_unit(tape, h, &p, unit.stride, unit.dilation, &mut bn_mode)?;
            }
            record(tape, &format!("encoder.stage{}", s + 1), h);
            stage_outputs.push(h);
        }
        let enc = h;
        let es = tape.shape(enc);

        let mut parts = vec![enc];
        for (scale, conv) in &l.pyramid {
            let p = tape.adaptive_avg_pool2d(enc, *scale, *scale)?;
            let b = bound.var(&format!("{}.bias", conv.name))?;
            let p = tape.conv2d(p, bound.var(&format!("{}.weight", conv.name))?, Some(b), &conv.spec)?;
            let p = tape.relu(p);
            let p = tape.bilinear_resize(p, es.h, es.w)?;
            record(tape, &format!("decoder.pyramid{scale}"), p);
            parts.push(p);
        }
        for (s, conv) in l.skips.iter().enumerate() {
            let b = bound.var(&format!("{}.bias", conv.name))?;
            let k = tape.conv2d(stage_outputs[s], bound.var(&format!("{}.weight", conv.name))?, Some(b), &conv.spec)?;
            let k = tape.relu(k);
            record(tape, &format!("decoder.skip{}", s + 1), k);
            parts.push(k);
        }
        let cat = tape.concat_channels(&parts)?;
        record(tape, "decoder.concat", cat);

        let h = tape.conv2d(cat, bound.var("decoder.head.conv1.weight")?, None, &l.head1.spec)?;
        let h = batchnorm(tape, h, &BnVars::bind(bound, "decoder.head.bn1")?, &mut bn_mode)?;
        let h = tape.relu(h);
        record(tape, "decoder.head.conv1", h);
        let h = tape.conv2d(h, bound.var("decoder.head.conv2.weight")?, None, &l.head2.spec)?;
        let h = batchnorm(tape, h, &BnVars::bind(bound, "decoder.head.bn2")?, &mut bn_mode)?;
        record(tape, "decoder.head.conv2", h);
        let h = tape.bilinear_upsample(h, 2)?;
        record(tape, "decoder.upsample1", h);
        let (train, key) = match mode {
            Mode::Train { seed, step } => (true, DropoutKey { seed, layer: DROPOUT_LAYER, step }),
            Mode::Eval => (false, DropoutKey { seed: 0, layer: DROPOUT_LAYER, step: 0 }),
        };
        let h = tape.dropout(h, cfg.dropout_p, train, key)?;
        record(tape, "decoder.dropout", h);
        let h = tape.bilinear_upsample(h, 4)?;
        record(tape, "decoder.upsample2", h);
        let probs = tape.softmax_channels(h)?;
        record(tape, "output", probs);

        let batch_stats = match bn_mode {
            BnMode::Train(s) => s,
            BnMode::Eval => Vec::new(),
        };
        Ok(ForwardOutput { probs, trace, batch_stats })
    }

    /// Evaluation-mode probabilities for a batch of images, without gradients.
    pub fn predict(&self, params: &ParameterSet<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let frozen = FrozenBind::new(params, &mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &frozen.0, x, Mode::Eval)?;
        Ok(tape.value(out.probs).clone())
    }
}

/// Binds parameters as constants (no gradients recorded).
struct FrozenBind(Bound);

impl FrozenBind {
    fn new<T: Real>(params: &ParameterSet<T>, tape: &mut Tape<T>) -> Self {
        FrozenBind(Bound::from_pairs(
            params.iter().map(|(k, p)| (k.to_string(), tape.leaf_shared(p.value.clone(), false))),
        ))
    }
}

/// Static shape audit: every named layer output of [`Model::forward`] at the configured
/// input size, computed without allocating tensors.
pub fn shape_plan(config: &NetworkConfig) -> Result<Vec<PlanEntry>> {
    config.validate()?;
    let (h, w) = config.input_size;
    let l = Layout::new(config);
    let mut plan = Vec::new();
    let mut s = l.stem.spec.output_shape(Shape::new(1, IMAGE_CHANNELS, h, w))?;
    plan.push(PlanEntry::new("encoder.stem.conv", s));
    s = PoolSpec::STEM.output_shape(s)?;
    plan.push(PlanEntry::new("encoder.stem.pool", s));
    let mut stage_shapes = Vec::new();
    for (i, units) in l.stages.iter().enumerate() {
        for u in units {
            let mid = ConvSpec::new(u.mid_c, 3).stride(u.stride).padding(u.dilation).dilation(u.dilation);
            s = mid.output_shape(Shape::new(1, u.mid_c, s.h, s.w))?;
            s.c = u.out_c;
        }
        plan.push(PlanEntry::new(format!("encoder.stage{}", i + 1), s));
        stage_shapes.push(s);
    }
    let enc = s;
    for (scale, conv) in &l.pyramid {
        plan.push(PlanEntry::new(format!("decoder.pyramid{scale}"), Shape::new(1, conv.spec.out_channels, enc.h, enc.w)));
    }
    for (i, conv) in l.skips.iter().enumerate() {
        plan.push(PlanEntry::new(format!("decoder.skip{}", i + 1), conv.spec.output_shape(stage_shapes[i])?));
    }
    plan.push(PlanEntry::new("decoder.concat", Shape::new(1, config.concat_channels(), enc.h, enc.w)));
    let c1 = l.head1.spec.output_shape(Shape::new(1, config.concat_channels(), enc.h, enc.w))?;
    plan.push(PlanEntry::new("decoder.head.conv1", c1));
    let c2 = l.head2.spec.output_shape(c1)?;
    plan.push(PlanEntry::new("decoder.head.conv2", c2));
    let u1 = Shape::new(1, c2.c, c2.h * 2, c2.w * 2);
    plan.push(PlanEntry::new("decoder.upsample1", u1));
    plan.push(PlanEntry::new("decoder.dropout", u1));
    let u2 = Shape::new(1, c2.c, u1.h * 4, u1.w * 4);
    plan.push(PlanEntry::new("decoder.upsample2", u2));
    plan.push(PlanEntry::new("output", u2));
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn find<'a>(plan: &'a [PlanEntry], name: &str) -> &'a PlanEntry {
        plan.iter().find(|e| e.name == name).unwrap()
    }

    #[test]
    fn plan_default_config() {
        let plan = shape_plan(&NetworkConfig::default()).unwrap();
        assert_eq!(find(&plan, "encoder.stage4").shape, [2048, 48, 48]);
        assert_eq!(find(&plan, "decoder.concat").shape, [6144, 48, 48]);
        assert_eq!(find(&plan, "output").shape, [2, 384, 384]);
    }

    #[test]
    fn plan_desk_config() {
        let plan = shape_plan(&NetworkConfig::desk(16, 96)).unwrap();
        assert_eq!(find(&plan, "encoder.stage4").shape, [128, 12, 12]);
    }

    #[test]
    fn half_width_halves_channels() {
        let full = shape_plan(&NetworkConfig::default()).unwrap();
        let mut cfg = NetworkConfig::default();
        cfg.width_scale = "1/2".parse().unwrap();
        let half = shape_plan(&cfg).unwrap();
        for (a, b) in full.iter().zip(&half) {
            assert_eq!(a.name, b.name);
            if a.name.starts_with("decoder.head.conv2") || a.name.starts_with("decoder.up") || a.name == "decoder.dropout" || a.name == "output" {
                assert_eq!(a.shape, b.shape, "class maps keep num_classes channels");
            } else {
                assert_eq!(a.shape[0], 2 * b.shape[0], "{}", a.name);
                assert_eq!(a.shape[1..], b.shape[1..]);
            }
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut cfg = NetworkConfig::desk(16, 96);
        cfg.input_size = (100, 96);
        let err = shape_plan(&cfg).unwrap_err().to_string();
        assert!(err.contains("multiples of 8"), "{err}");
    }

    #[test]
    fn classes_drive_output_channels() {
        let (model, params) = build(&NetworkConfig::desk(16, 48), 3).unwrap();
        assert_eq!(params.tensor("decoder.head.conv2.weight").unwrap().shape().n, 2);
        let probs = model.predict(&params, &Tensor::full([1, 3, 48, 48], 0.5)).unwrap();
        assert_eq!(probs.shape(), Shape::new(1, 2, 48, 48));
    }
}
