mod common;

use common::*;
use slsdeep::network::{build, shape_plan, Mode, NetworkConfig, PlanEntry, SkipMode};
use slsdeep::{Shape, Tape, Tensor};

/// Trainable scalars of the default network, counted layer by layer from the
/// architecture: convolutions `out·in·k·k (+ out)`, batch norms `2·C`.
fn default_param_count_oracle() -> usize {
    let conv = |o: usize, i: usize, k: usize, bias: bool| o * i * k * k + if bias { o } else { 0 };
    let bn = |c: usize| 2 * c;
    let mut total = conv(64, 3, 3, false) + bn(64);
    let mut in_c = 64;
    for out in [256, 512, 1024, 2048] {
        let mid = out / 4;
        total += conv(mid, in_c, 1, false) + bn(mid);
        total += conv(mid, mid, 3, false) + bn(mid);
        total += conv(out, mid, 1, false) + bn(out);
        total += conv(out, in_c, 1, false) + bn(out);
        in_c = out;
    }
    total += 4 * conv(1024, 2048, 1, true);
    total += conv(512, 6144, 3, false) + bn(512);
    total += conv(2, 512, 3, false) + bn(2);
    total
}

#[test]
fn default_parameter_count() {
    let (_, params) = build(&NetworkConfig::default(), 0).unwrap();
    assert_eq!(params.trainable_count(), default_param_count_oracle());
}

#[test]
fn desk_96_encoder_shape() {
    let cfg = NetworkConfig::desk(16, 96);
    let plan = shape_plan(&cfg).unwrap();
    let enc = plan.iter().find(|e| e.name == "encoder.stage4").unwrap();
    assert_eq!(enc.shape, [128, 12, 12]);
    build(&cfg, 1).unwrap();
}

fn forward_trace(cfg: &NetworkConfig, n: usize, seed: u64) -> (Vec<PlanEntry>, Tensor<f32>) {
    let (model, params) = build(cfg, seed).unwrap();
    let (h, w) = cfg.input_size;
    let mut r = rng(seed);
    let x = uniform(&mut r, [n, 3, h, w], 0.0, 1.0).cast::<f32>();
    let mut tape = Tape::new();
    let bound = params.cast::<f32>().bind(&mut tape);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, &bound, xv, Mode::Eval).unwrap();
    (out.trace, tape.value(out.probs).clone())
}

fn audit(cfg: &NetworkConfig) -> Tensor<f32> {
    let (trace, probs) = forward_trace(cfg, 1, 2);
    let plan = shape_plan(cfg).unwrap();
    assert_eq!(trace, plan);
    let (h, w) = cfg.input_size;
    assert_eq!(probs.shape(), Shape::new(1, cfg.num_classes, h, w));
    for i in 0..h * w {
        let s: f32 = (0..cfg.num_classes).map(|c| probs.plane(0, c)[i]).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
    probs
}

#[test]
fn shape_audit_desk_configs() {
    audit(&NetworkConfig::desk(16, 96));
    audit(&NetworkConfig::desk(8, 192));
    audit(&NetworkConfig::desk(16, 64).with_skip_mode(SkipMode::All));
}

#[test]
fn shape_audit_full_width_384() {
    audit(&NetworkConfig::default());
}

#[test]
fn skip_all_only_adds_skip_edges() {
    let single = shape_plan(&NetworkConfig::default()).unwrap();
    let all = shape_plan(&NetworkConfig::default().with_skip_mode(SkipMode::All)).unwrap();
    let extra: Vec<&str> = all.iter().filter(|e| !single.iter().any(|s| s.name == e.name)).map(|e| e.name.as_str()).collect();
    assert_eq!(extra, ["decoder.skip1", "decoder.skip2", "decoder.skip3"]);
    for e in &all {
        if let Some(s) = single.iter().find(|s| s.name == e.name) {
            if e.name == "decoder.concat" {
                assert_eq!(s.shape, [6144, 48, 48]);
                assert_eq!(e.shape, [6144 + 3 * 1024, 48, 48]);
            } else {
                assert_eq!(e.shape, s.shape, "{}", e.name);
            }
        }
    }
    for name in extra {
        assert_eq!(all.iter().find(|e| e.name == name).unwrap().shape, [1024, 48, 48]);
    }
}

#[test]
fn builds_and_eval_forwards_are_deterministic() {
    let cfg = NetworkConfig::desk(16, 64);
    let (_, a) = build(&cfg, 9).unwrap();
    let (_, b) = build(&cfg, 9).unwrap();
    let (_, c) = build(&cfg, 10).unwrap();
    for (name, p) in a.iter() {
        assert_eq!(b.tensor(name).unwrap(), &*p.value);
    }
    assert_ne!(a.tensor("encoder.stem.conv.weight").unwrap(), c.tensor("encoder.stem.conv.weight").unwrap());
    let (model, params) = build(&cfg, 9).unwrap();
    let x = uniform(&mut rng(0), [2, 3, 64, 64], 0.0, 1.0).cast::<f32>();
    assert_eq!(model.predict(&params, &x).unwrap(), model.predict(&params, &x).unwrap());
}

#[test]
fn every_trainable_parameter_gets_gradient() {
    for skip in [SkipMode::Single, SkipMode::All] {
        let cfg = NetworkConfig::desk(16, 64).with_skip_mode(skip);
        let (model, params) = build(&cfg, 5).unwrap();
        let mut r = rng(6);
        let x = uniform(&mut r, [2, 3, 64, 64], 0.0, 1.0).cast::<f32>();
        let proj = uniform(&mut r, [2, 2, 64, 64], -1.0, 1.0).cast::<f32>();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &bound, xv, Mode::Train { seed: 1, step: 0 }).unwrap();
        let loss = tape.weighted_sum(out.probs, &proj).unwrap();
        tape.backward(loss).unwrap();
        for (name, p) in params.iter() {
            let g = tape.grad(bound.var(name).unwrap());
            if p.group().is_none() {
                assert!(g.is_none(), "{name}");
                continue;
            }
            let g = g.unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.data().iter().any(|v| *v != 0.0), "{name} gradient is zero");
        }
    }
}
