use rfpsis_web_demo::{diagnostics_json, screening_json, selection_json};
use serde_json::Value;

const OC: &str = r#"{"n": 80, "p": 60, "contamination": "oc-bad", "eps": 0.2, "seed": 9}"#;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn injected_orthogonal_outliers_are_flagged() {
    let v = parse(diagnostics_json(OC).unwrap());
    let pts = v["points"].as_array().unwrap();
    let injected: Vec<&Value> = pts.iter().filter(|q| q["truth"] == "oc").collect();
    assert_eq!(injected.len(), 16);
    assert!(injected.iter().all(|q| q["flag"] == "oc"));
}

#[test]
fn outputs_are_deterministic() {
    assert_eq!(screening_json(OC).unwrap(), screening_json(OC).unwrap());
    assert_eq!(selection_json(OC).unwrap(), selection_json(OC).unwrap());
}

#[test]
fn empty_settings_use_defaults() {
    let v = parse(diagnostics_json("").unwrap());
    assert_eq!(v["points"].as_array().unwrap().len(), 100);
}
