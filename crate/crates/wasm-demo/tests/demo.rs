use gridtopo_wasm::{learn_json, random_grid_json, sweep_point_json};
use serde_json::Value;

#[test]
fn random_grid_is_valid_json_grid() {
    let text = random_grid_json(25, 5, 3).unwrap();
    let g = gridtopo::Grid::from_json(&text).unwrap();
    assert_eq!(g.len(), 25);
    assert!(g.validate().is_valid());
    assert_eq!(text, random_grid_json(25, 5, 3).unwrap());
}

#[test]
fn random_grid_rejects_bad_sizes() {
    assert!(random_grid_json(3, 5, 0).is_err());
    assert!(random_grid_json(10_000, 5, 0).is_err());
}

#[test]
fn learn_recovers_small_grid() {
    let g = random_grid_json(12, 5, 4).unwrap();
    let out: Value = serde_json::from_str(&learn_json(&g, 20_000, 0.15, 1).unwrap()).unwrap();
    assert_eq!(out["report"]["exact_recovery"], Value::Bool(true));
    assert_eq!(out["report"]["edge_difference"], 0);
    let matching = out["matching"].as_object().unwrap();
    let learned = out["learned"]["nodes"].as_array().unwrap();
    assert_eq!(matching.len(), learned.len());
}

#[test]
fn learn_reports_errors_as_text() {
    assert!(learn_json("{", 1000, 0.15, 1).unwrap_err().contains("JSON"));
    let g = random_grid_json(12, 5, 4).unwrap();
    assert!(learn_json(&g, 0, 0.15, 1).is_err());
}

#[test]
fn sweep_point_summarises_one_cell() {
    let cell: Value = serde_json::from_str(&sweep_point_json(10, 5000, 0.15, 4, 2).unwrap()).unwrap();
    assert_eq!(cell["trials"], 4);
    assert_eq!(cell["samples"], 5000);
    assert!(cell["recovery_rate"].as_f64().unwrap() <= 1.0);
}
