use sdde_mp_cli::{Case, ModeChoice, ScenarioConfig};

#[test]
fn minimal_config_gets_defaults() {
    let cfg = ScenarioConfig::parse(r#"{"scenario": "lq-scalar"}"#).unwrap();
    assert_eq!(cfg.steps, 200);
    assert_eq!(cfg.paths, 1000);
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.eps, vec![0.04, 0.02, 0.01]);
    assert_eq!(cfg.case, Case::General);
    assert_eq!(cfg.mode, ModeChoice::Auto);
    assert_eq!(cfg, ScenarioConfig::minimal("lq-scalar"));
}

#[test]
fn out_of_range_delta_names_the_key() {
    let e = ScenarioConfig::parse(r#"{"scenario": "lq-scalar", "delta": 1.5}"#).unwrap_err();
    assert_eq!(e.key, "delta");
    assert!(e.to_string().contains("delta"), "{e}");
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let e = ScenarioConfig::parse(r#"{"scenario": "lq-scalar", "foo": 1}"#).unwrap_err();
    assert_eq!(e.key, "foo");
    let e = ScenarioConfig::parse(r#"{"scenario": "lq-scalar", "params": {"foo": 1}}"#).unwrap_err();
    assert_eq!(e.key, "params.foo");
    let e = ScenarioConfig::parse(r#"{"scenario": "nope"}"#).unwrap_err();
    assert_eq!(e.key, "scenario");
}

#[test]
fn schedule_and_grid_validation() {
    let bad = [
        (r#"{"scenario": "lq-scalar", "eps": [0.01, 0.02]}"#, "eps"),
        (r#"{"scenario": "lq-scalar", "eps": [0.3]}"#, "eps"),
        (r#"{"scenario": "lq-scalar", "eps": [0.0123]}"#, "eps"),
        (r#"{"scenario": "lq-scalar", "taus": [1.0]}"#, "taus"),
        (r#"{"scenario": "lq-scalar", "taus": [0.1234]}"#, "taus"),
        (r#"{"scenario": "lq-scalar", "steps": 0}"#, "steps"),
        (r#"{"scenario": "lq-scalar", "paths": 0}"#, "paths"),
        (r#"{"scenario": "lq-scalar", "steps": 202}"#, "steps"),
        (r#"{"scenario": "pointwise-cost", "candidate": 0.7}"#, "candidate"),
        (r#"{"scenario": "consumption", "params": {"gamma": 1.5}}"#, "gamma"),
    ];
    for (text, key) in bad {
        let e = ScenarioConfig::parse(text).unwrap_err();
        assert_eq!(e.key, key, "{text}: {e}");
    }
}

#[test]
fn round_trip() {
    let text = r#"{"scenario": "delayed-drift", "steps": 100, "paths": 7, "seed": 3, "lambda": 0.5,
                   "eps": [0.04, 0.02], "taus": [0.1, 0.2], "case": "lq", "mode": "regression",
                   "params": {"ay": 0.5}, "candidate": 1.0}"#;
    let cfg = ScenarioConfig::parse(text).unwrap();
    let back = ScenarioConfig::parse(&cfg.to_json()).unwrap();
    assert_eq!(cfg, back);
    assert_eq!(back.merged_params()["lambda"], 0.5);
    assert_eq!(back.merged_params()["ay"], 0.5);
}
