//! Browser bindings for the grid learner. Every export takes and returns
//! JSON strings; the `*_json` functions hold the logic so they can be tested
//! natively.

use gridtopo::benchmark::{
    match_hidden_and_diff, evaluate, random_radial_grid, run_experiment, CellSummary, EvalReport, ExperimentConfig,
    GridSpec, RunOptions,
};
use gridtopo::lcpf::LcpfModel;
use gridtopo::learner::learn_from_samples;
use gridtopo::{Grid, InjectionSpec, LearnConfig, LearnedGrid};
use serde::Serialize;
use std::collections::BTreeMap;
use wasm_bindgen::prelude::*;

/// Largest grid the page will build; keeps a click under a second or two.
pub const MAX_NODES: usize = 200;
pub const MAX_SAMPLES: usize = 100_000;

#[derive(Serialize)]
struct LearnOutput {
    truth: Grid,
    learned: LearnedGrid,
    report: EvalReport,
    /// Learned node id to the true node it stands for.
    matching: BTreeMap<String, String>,
}

fn check_size(n: usize) -> Result<(), String> {
    if n > MAX_NODES {
        return Err(format!("at most {MAX_NODES} buses in the demo, got {n}"));
    }
    Ok(())
}

pub fn random_grid_json(nodes: usize, max_degree: usize, seed: u64) -> Result<String, String> {
    check_size(nodes)?;
    let spec = GridSpec {
        nodes,
        max_degree,
        ..GridSpec::default()
    };
    let g = random_radial_grid(&spec, seed).map_err(|e| e.to_string())?;
    Ok(g.to_json())
}

/// Simulates `samples` measurements on the grid, learns it back and scores
/// the result.
pub fn learn_json(grid_json: &str, samples: usize, eps0: f64, seed: u64) -> Result<String, String> {
    if !(1..=MAX_SAMPLES).contains(&samples) {
        return Err(format!("samples must be in 1..={MAX_SAMPLES}, got {samples}"));
    }
    let truth = Grid::from_json(grid_json).map_err(|e| format!("grid JSON: {e}"))?;
    check_size(truth.len())?;
    truth.ensure_valid().map_err(|e| e.to_string())?;
    let model = LcpfModel::new(&truth).map_err(|e| e.to_string())?;
    let ms = model
        .simulate(&InjectionSpec::default(), samples, seed)
        .map_err(|e| e.to_string())?;
    let mut cfg = LearnConfig::default();
    cfg.rg.eps0 = eps0;
    let learned = learn_from_samples(&ms, &cfg).map_err(|e| e.to_string())?;
    let report = evaluate(&truth, &learned).map_err(|e| e.to_string())?;
    let matching = match_hidden_and_diff(&truth, &learned).map_err(|e| e.to_string())?.map;
    let out = LearnOutput {
        truth,
        learned,
        report,
        matching,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// One cell of a recovery sweep: `trials` random grids of `nodes` buses.
pub fn sweep_point_json(nodes: usize, samples: usize, eps0: f64, trials: usize, seed: u64) -> Result<String, String> {
    check_size(nodes)?;
    if !(1..=MAX_SAMPLES).contains(&samples) {
        return Err(format!("samples must be in 1..={MAX_SAMPLES}, got {samples}"));
    }
    if !(1..=200).contains(&trials) {
        return Err(format!("trials must be in 1..=200, got {trials}"));
    }
    let mut cfg = ExperimentConfig {
        samples: vec![samples],
        eps0: vec![eps0],
        trials,
        seed,
        ..ExperimentConfig::default()
    };
    cfg.grid.nodes = nodes;
    let result = run_experiment(&cfg, RunOptions::default()).map_err(|e| e.to_string())?;
    let cell: &CellSummary = result.cells.first().ok_or("empty sweep")?;
    serde_json::to_string(cell).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn random_grid(nodes: usize, max_degree: usize, seed: u32) -> Result<String, JsValue> {
    random_grid_json(nodes, max_degree, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn learn(grid_json: &str, samples: usize, eps0: f64, seed: u32) -> Result<String, JsValue> {
    learn_json(grid_json, samples, eps0, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sweep_point(nodes: usize, samples: usize, eps0: f64, trials: usize, seed: u32) -> Result<String, JsValue> {
    sweep_point_json(nodes, samples, eps0, trials, seed as u64).map_err(|e| JsValue::from_str(&e))
}
