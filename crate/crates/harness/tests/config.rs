use free_core::engine::ExitPolicy;
use free_harness::config::{EstimatorConfig, ExperimentConfig, Overrides, PolicyGrid, PolicyKind};
use free_harness::HarnessError;

fn config_err(text: &str) -> String {
    match ExperimentConfig::from_json(text) {
        Err(e @ HarnessError::Config(_)) => {
            assert_eq!(e.exit_code(), 1);
            e.to_string()
        }
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn empty_object_gives_defaults() {
    assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
}

#[test]
fn defaults_match_documented_estimator() {
    let e = EstimatorConfig::default();
    assert_eq!((e.initial_threshold, e.zeta, e.warmup_fraction), (0.9, 0.4, 0.03));
}

#[test]
fn partial_config_parses() {
    let cfg = ExperimentConfig::from_json(
        r#"{"seed": 3, "max_new": 5, "policies": [{"kind": "shallow_deep", "grid": [0.5, 0.1, 0.5]}]}"#,
    )
    .unwrap();
    assert_eq!(cfg.seed, 3);
    let points = cfg.policies[0].points().unwrap();
    let params: Vec<_> = points.iter().map(|p| p.0).collect();
    assert_eq!(params, vec![Some(0.1), Some(0.5)]);
    assert_eq!(points[1].1, ExitPolicy::shallow_deep(0.5));
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(config_err(r#"{"bogus": 1}"#).contains("bogus"));
    assert!(config_err(r#"{"policies": []}"#).contains("at least one policy"));
    assert!(config_err(r#"{"policies": [{"kind": "conventional"}]}"#).contains("non-empty grid"));
    assert!(config_err(r#"{"policies": [{"kind": "static", "grid": [1.5]}]}"#).contains("static depth"));
    assert!(config_err(r#"{"analyses": ["oracle", "nope"]}"#).contains("unknown analysis nope"));
    assert!(config_err(r#"{"estimator": {"zeta": 1.0}}"#).contains("zeta"));
    assert!(config_err(r#"{"max_new": 0}"#).contains("max_new"));
    assert!(config_err(r#"{"threads": 0}"#).contains("threads"));
    config_err("not json");
}

#[test]
fn policy_names_parse() {
    assert_eq!(PolicyKind::parse("shallow_deep_sc").unwrap(), PolicyKind::ShallowDeepSc);
    assert!(PolicyKind::parse("fast").is_err());
    let grid = PolicyGrid::new(PolicyKind::Oracle, vec![]);
    assert_eq!(grid.points().unwrap(), vec![(None, ExitPolicy::Oracle)]);
}

#[test]
fn overrides_replace_grids() {
    let mut cfg = ExperimentConfig::default();
    cfg.apply(&Overrides {
        seed: Some(42),
        policy: Some(PolicyKind::Conventional),
        lambdas: Some(vec![0.2, 0.4]),
        shallow_depth: Some(3),
        max_new: Some(9),
        ..Overrides::default()
    })
    .unwrap();
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.policies, vec![PolicyGrid::new(PolicyKind::Conventional, vec![0.2, 0.4])]);
    assert_eq!(cfg.analysis_thresholds, vec![0.2, 0.4]);
    assert_eq!(cfg.max_new, 9);
    let w = cfg.build_weights().unwrap();
    assert_eq!(w.config().shallow_depth, 3);
    assert_eq!(w.config().seed, 42);
}

#[test]
fn bad_shallow_depth_override_is_a_config_error() {
    let mut cfg = ExperimentConfig::default();
    cfg.apply(&Overrides { shallow_depth: Some(8), ..Overrides::default() }).unwrap();
    assert!(matches!(cfg.build_weights(), Err(HarnessError::Config(_))));
}

#[test]
fn warmup_length_is_ceiling_of_fraction() {
    let e = |f| EstimatorConfig { warmup_fraction: f, ..EstimatorConfig::default() };
    assert_eq!(e(0.03).warmup_sentences(100), 3);
    assert_eq!(e(0.03).warmup_sentences(60), 2);
    assert_eq!(e(0.03).warmup_sentences(1), 1);
    assert_eq!(e(0.1).warmup_sentences(60), 6);
    assert_eq!(e(1.0).warmup_sentences(7), 7);
}
