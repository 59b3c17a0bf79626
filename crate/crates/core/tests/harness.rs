use std::path::{Path, PathBuf};

use ndarray::{array, Array2};
use reachnn::closed_loop::{reach_step, NeuralFeedbackLoop, StateSet};
use reachnn::geometry::Hyperrect;
use reachnn::harness::commands::{run_analyze, run_bench, run_carrl, run_reach, run_verify, RunOptions, EXIT_NOT_VERIFIED, EXIT_OK};
use reachnn::harness::config::{parse, AnalyzeConfig, BenchConfig, CarrlConfig, NetSource, ReachConfig};
use reachnn::harness::results::{strip_timings, AnalyzeOutput, Payload, ReachOutput, RunResult};
use reachnn::harness::svg::{plot_svg, render, Figure};
use reachnn::network::Network;
use reachnn::propagators::{output_box, PropagatorKind};
use reachnn::{save_network, Error};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn quick() -> RunOptions {
    RunOptions {
        repetitions: 1,
        ..RunOptions::default()
    }
}

fn write_net(name: &str, net: &Network) -> PathBuf {
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::write(&path, save_network(net)).unwrap();
    path
}

fn analyze_cfg(network: NetSource, budget: usize, partitioner: &str) -> AnalyzeConfig {
    let text = format!(
        r#"{{
        "network": {},
        "problem": {{ "kind": "output_ball", "input": {{ "lower": [0.0, 0.0], "upper": [1.0, 1.0] }} }},
        "analyzer": {{
            "propagator": "crown",
            "partitioner": {partitioner},
            "output_shape": "linf_ball",
            "termination": {{ "propagator_call_budget": {budget}, "time_budget_s": null, "min_cell_fraction": null }},
            "mc_samples": 500,
            "seed": 3
        }}
    }}"#,
        serde_json::to_string(&network).unwrap()
    );
    parse(&text).unwrap()
}

fn analyze_payload(r: &RunResult) -> &AnalyzeOutput {
    match &r.result {
        Payload::Analyze(a) => a,
        _ => panic!("expected analyze payload"),
    }
}

fn reach_payload(r: &RunResult) -> &ReachOutput {
    match &r.result {
        Payload::Reach(a) => a,
        _ => panic!("expected reach payload"),
    }
}

fn reach_cfg() -> ReachConfig {
    parse(&std::fs::read_to_string(configs().join("reach_double_integrator.json")).unwrap()).unwrap()
}

#[test]
fn identity_net_output_box_is_input_box() {
    let id = Network::from_rows(&[(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0])]).unwrap();
    let path = write_net("identity.json", &id);
    let cfg = analyze_cfg(NetSource::File(path), 10, r#"{ "kind": "greedy_sim_guided" }"#);
    let out = run_analyze(&cfg, Path::new("."), &quick()).unwrap();
    let b = analyze_payload(&out.result).output_box.clone().unwrap();
    for i in 0..2 {
        assert!((b.lower()[i] - 0.0).abs() < 1e-12 && (b.upper()[i] - 1.0).abs() < 1e-12, "{b:?}");
    }
}

#[test]
fn single_call_gsg_matches_raw_propagator() {
    let src = NetSource::Random { dims: vec![2, 10, 2], seed: 5 };
    let cfg = analyze_cfg(src.clone(), 1, r#"{ "kind": "greedy_sim_guided" }"#);
    let out = run_analyze(&cfg, Path::new("."), &quick()).unwrap();
    let raw = output_box(PropagatorKind::Crown, &src.load(Path::new(".")).unwrap(), &Hyperrect::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap()).unwrap();
    let a = analyze_payload(&out.result);
    assert_eq!(a.output_box.as_ref().unwrap(), &raw);
    assert_eq!(a.propagator_calls, 1);
}

#[test]
fn area_non_increasing_in_budget() {
    for seed in 0..3 {
        let mut prev = f64::INFINITY;
        for budget in [1, 5, 25, 50, 100] {
            let cfg = analyze_cfg(NetSource::Random { dims: vec![2, 20, 2], seed }, budget, r#"{ "kind": "greedy_sim_guided" }"#);
            let out = run_analyze(&cfg, Path::new("."), &quick()).unwrap();
            let area = analyze_payload(&out.result).output_box.as_ref().unwrap().volume();
            assert!(area <= prev, "seed {seed} budget {budget}: {area} > {prev}");
            prev = area;
        }
    }
}

#[test]
fn verify_label_and_minimal_eps_configs() {
    let opts = RunOptions { self_check: true, ..quick() };
    for name in ["analyze_verify.json", "analyze_minimal_eps.json", "analyze_output_ball.json"] {
        let cfg: AnalyzeConfig = parse(&std::fs::read_to_string(configs().join(name)).unwrap()).unwrap();
        let out = run_analyze(&cfg, &configs(), &opts).unwrap();
        assert_eq!(out.exit_code, EXIT_OK, "{name}");
        assert_eq!(out.result.self_check.as_ref().unwrap().violations, 0, "{name}");
    }
}

#[test]
fn unverifiable_classification_exits_one() {
    let mut cfg: AnalyzeConfig = parse(&std::fs::read_to_string(configs().join("analyze_verify.json")).unwrap()).unwrap();
    cfg.problem = parse(r#"{ "kind": "verify", "input": { "lower": [-2.0, -2.0], "upper": [2.0, 2.0] }, "label": 0 }"#).unwrap();
    let out = run_analyze(&cfg, &configs(), &quick()).unwrap();
    assert_eq!(out.exit_code, EXIT_NOT_VERIFIED);
}

fn zero_policy_cfg(horizon: usize) -> ReachConfig {
    let zero = Network::from_rows(&[(vec![vec![0.0, 0.0]; 3], vec![0.0; 3]), (vec![vec![0.0; 3]], vec![0.0])]).unwrap();
    let path = write_net(&format!("zero_{horizon}.json"), &zero);
    let mut cfg = reach_cfg();
    cfg.policy = NetSource::File(path);
    cfg.system.control_limits = None;
    cfg.partitioner = parse(r#"{ "kind": "none" }"#).unwrap();
    cfg.x0 = StateSet::Rect(Hyperrect::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap());
    cfg.horizon = horizon;
    cfg
}

#[test]
fn zero_policy_sets_follow_interval_recursion() {
    let cfg = zero_policy_cfg(4);
    let out = run_reach(&cfg, Path::new("."), &quick()).unwrap();
    let sets = &reach_payload(&out.result).sets;
    let a = array![[1.0, 1.0], [0.0, 1.0]];
    let (mut lo, mut hi) = (array![0.0, 0.0], array![1.0, 1.0]);
    for s in sets.iter().skip(1) {
        let (ap, an) = (a.mapv(|v: f64| v.max(0.0)), a.mapv(|v: f64| v.min(0.0)));
        let (nlo, nhi) = (ap.dot(&lo) + an.dot(&hi), ap.dot(&hi) + an.dot(&lo));
        lo = nlo;
        hi = nhi;
        let r = s.as_rect().unwrap();
        for i in 0..2 {
            assert!((r.lower()[i] - lo[i]).abs() < 1e-9 && (r.upper()[i] - hi[i]).abs() < 1e-9, "{r:?} vs {lo} {hi}");
        }
    }
}

#[test]
fn one_step_run_matches_reach_step() {
    let mut cfg = reach_cfg();
    cfg.horizon = 1;
    cfg.partitioner = parse(r#"{ "kind": "none" }"#).unwrap();
    let out = run_reach(&cfg, Path::new("."), &quick()).unwrap();
    let nfl = NeuralFeedbackLoop::new(cfg.system.build().unwrap(), cfg.policy.load(Path::new(".")).unwrap()).unwrap();
    let step = reach_step(&nfl, 0, &cfg.x0, &Array2::eye(2)).unwrap();
    let sets = &reach_payload(&out.result).sets;
    assert_eq!(sets.len(), 2);
    assert_eq!(sets[1], step.to_set().unwrap());
}

#[test]
fn partitioned_error_is_strictly_smaller() {
    let mut cfg = reach_cfg();
    let fine = run_reach(&cfg, Path::new("."), &quick()).unwrap();
    cfg.partitioner = parse(r#"{ "kind": "uniform", "counts": [1, 1] }"#).unwrap();
    let coarse = run_reach(&cfg, Path::new("."), &quick()).unwrap();
    let (f, c) = (reach_payload(&fine.result).final_error.unwrap(), reach_payload(&coarse.result).final_error.unwrap());
    assert!(f < c, "{f} vs {c}");
}

#[test]
fn reach_self_check_is_clean() {
    let opts = RunOptions { self_check: true, ..quick() };
    let out = run_reach(&reach_cfg(), Path::new("."), &opts).unwrap();
    assert_eq!(out.result.self_check.unwrap().violations, 0);
}

#[test]
fn trivial_goal_verifies_and_avoiding_x0_fails() {
    let mut cfg = reach_cfg();
    cfg.reach_avoid = Some(parse(r#"{ "goal": { "type": "rect", "lower": [-100.0, -100.0], "upper": [100.0, 100.0] } }"#).unwrap());
    assert_eq!(run_verify(&cfg, Path::new("."), &quick()).unwrap().exit_code, EXIT_OK);

    let x0 = serde_json::to_string(&cfg.x0).unwrap();
    let later = vec!["[]"; cfg.horizon].join(", ");
    cfg.reach_avoid = Some(parse(&format!(r#"{{ "goal": null, "avoid": [[{x0}], {later}] }}"#)).unwrap());
    assert_eq!(run_verify(&cfg, Path::new("."), &quick()).unwrap().exit_code, EXIT_NOT_VERIFIED);
}

fn boxes_overlap(a: &Hyperrect, b: &Hyperrect) -> bool {
    (0..a.dim()).all(|i| a.lower()[i] <= b.upper()[i] && b.lower()[i] <= a.upper()[i])
}

#[test]
fn shipped_verdicts_match_box_geometry() {
    for (name, expect) in [("verify_reach_avoid.json", EXIT_OK), ("verify_reach_avoid_fails.json", EXIT_NOT_VERIFIED)] {
        let cfg: ReachConfig = parse(&std::fs::read_to_string(configs().join(name)).unwrap()).unwrap();
        let out = run_verify(&cfg, Path::new("."), &quick()).unwrap();
        let sets: Vec<Hyperrect> = reach_payload(&out.result).sets.iter().map(|s| s.as_rect().unwrap().clone()).collect();
        let spec = cfg.reach_avoid.as_ref().unwrap();
        let goal = spec.goal.as_ref().unwrap().as_rect().unwrap();
        let last = sets.last().unwrap();
        let mut ok = (0..2).all(|i| goal.lower()[i] <= last.lower()[i] && last.upper()[i] <= goal.upper()[i]);
        for (t, avoid) in spec.avoid.iter().enumerate() {
            for a in avoid {
                ok &= !boxes_overlap(&sets[t], a.as_rect().unwrap());
            }
        }
        assert_eq!(out.exit_code, if ok { EXIT_OK } else { EXIT_NOT_VERIFIED }, "{name}");
        assert_eq!(out.exit_code, expect, "{name}");
    }
}

#[test]
fn verify_without_reach_avoid_is_a_config_error() {
    let err = run_verify(&reach_cfg(), Path::new("."), &quick()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(configs().join("reach_double_integrator.json")).unwrap()).unwrap();
    v["horizn"] = 3.into();
    assert!(matches!(parse::<ReachConfig>(&v.to_string()), Err(Error::Config(_))));

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(configs().join("analyze_output_ball.json")).unwrap()).unwrap();
    v["analyzer"]["termination"]["budget"] = 3.into();
    assert!(matches!(parse::<AnalyzeConfig>(&v.to_string()), Err(Error::Config(_))));

    assert!(parse::<CarrlConfig>(r#"{ "qnet": { "crafted_qnet": { "k": [1, 1] } }, "adversary": { "eps": [0.1], "p": "inf", "extra": 1 }, "horizon": 2, "episodes": 1, "seed": 0 }"#).is_err());
}

#[test]
fn shipped_configs_parse() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        let text = std::fs::read_to_string(&path).unwrap_or_default();
        let ok = match name.split('_').next().unwrap().trim_end_matches(".json") {
            "analyze" => parse::<AnalyzeConfig>(&text).is_ok(),
            "reach" | "verify" => parse::<ReachConfig>(&text).is_ok(),
            "carrl" => parse::<CarrlConfig>(&text).is_ok(),
            "bench" => parse::<BenchConfig>(&text).is_ok(),
            _ => true,
        };
        assert!(ok, "{name}");
    }
}

#[test]
fn runs_are_deterministic_apart_from_timings() {
    let reach = || run_reach(&reach_cfg(), Path::new("."), &quick()).unwrap().result.to_json();
    assert_eq!(strip_timings(&reach()).unwrap(), strip_timings(&reach()).unwrap());

    let cfg: CarrlConfig = parse(&std::fs::read_to_string(configs().join("carrl.json")).unwrap()).unwrap();
    let carrl = || run_carrl(&cfg, Path::new("."), &quick()).unwrap().result.to_json();
    assert_eq!(strip_timings(&carrl()).unwrap(), strip_timings(&carrl()).unwrap());
}

#[test]
fn seed_override_changes_recorded_seed() {
    let opts = RunOptions { seed: Some(11), ..quick() };
    let out = run_reach(&reach_cfg(), Path::new("."), &opts).unwrap();
    assert_eq!(out.result.seed, 11);
    assert_eq!(out.result.config["seed"], 11);
}

#[test]
fn small_bench_reports_both_tables() {
    let mut cfg = BenchConfig::default();
    cfg.repetitions = 1;
    if let Some(r) = cfg.reach.as_mut() {
        r.controller_seeds = vec![0];
        r.samples = 200;
    }
    if let Some(a) = cfg.analyzer.as_mut() {
        a.net_seeds = vec![0];
        a.dims = vec![2, 8, 2];
    }
    let out = run_bench(&cfg, &quick()).unwrap();
    match &out.result.result {
        Payload::Bench(b) => {
            assert_eq!(b.reach.len(), 2);
            assert_eq!(b.analyzer.len(), 8);
        }
        _ => panic!("expected bench payload"),
    }
}

#[test]
fn empty_result_renders_minimal_svg() {
    let svg = render(&Figure::default());
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    let result = RunResult {
        command: "analyze".into(),
        seed: 0,
        config: serde_json::Value::Null,
        result: Payload::Analyze(AnalyzeOutput::default()),
        self_check: None,
        timings: Default::default(),
    };
    let svg = plot_svg(&result, "partition").unwrap();
    assert!(svg.contains("</svg>"));
}

#[test]
fn malformed_plot_kind_is_an_error() {
    let out = run_reach(&reach_cfg(), Path::new("."), &quick()).unwrap();
    assert!(plot_svg(&out.result, "histogram").is_err());
    assert!(plot_svg(&out.result, "partition").is_err());
}

#[test]
fn reach_plot_matches_golden_file() {
    let mut cfg = reach_cfg();
    cfg.samples = 100;
    let out = run_reach(&cfg, Path::new("."), &quick()).unwrap();
    let svg = plot_svg(&out.result, "reach").unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/reach.svg");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &svg).unwrap();
    }
    let expected = std::fs::read_to_string(&golden).expect("golden file missing; rerun with UPDATE_GOLDEN=1");
    assert_eq!(svg, expected);
}

#[test]
fn ball_initial_set_runs_unpartitioned() {
    let mut cfg = reach_cfg();
    cfg.partitioner = parse(r#"{ "kind": "none" }"#).unwrap();
    cfg.x0 = parse(r#"{ "type": "ball", "center": [2.75, 0.0], "radius": [0.25, 0.25], "p": 2 }"#).unwrap();
    let opts = RunOptions { self_check: true, ..quick() };
    let out = run_reach(&cfg, Path::new("."), &opts).unwrap();
    assert_eq!(out.result.self_check.unwrap().violations, 0);
}
