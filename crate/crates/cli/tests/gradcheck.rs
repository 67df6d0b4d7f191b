mod common;

use common::*;

#[test]
fn conv2d_scope_passes_and_prints_cases() {
    let o = run(&["gradcheck", "conv2d"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let cases: Vec<&str> = out.lines().filter(|l| l.starts_with("conv2d")).collect();
    assert!(cases.len() >= 3, "{out}");
    for l in cases {
        assert!(l.ends_with("pass"), "{l}");
        let err: f64 = l.split("max_rel_err").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
        assert!(err < 1e-3, "{l}");
    }
}

#[test]
fn network_scope_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "network", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("gradcheck_report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["scope"], "network");
    assert_eq!(report[0]["report"]["passed"], true);
}

#[test]
fn unknown_scope_lists_valid_ones() {
    let o = run(&["gradcheck", "conv3d"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for scope in slsdeep::checks::SCOPES {
        assert!(err.contains(scope), "{err}");
    }
}

#[test]
fn bad_invocations_exit_two() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["infer"])), 2);
    assert_eq!(code(&run(&["gradcheck", "relu", "--loss.alpha"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}
