//! Browser bindings for a small two-level, finite-state equi-energy demo.
//!
//! Every exported function returns a JSON string; the `*_json` functions
//! hold the logic and are what the native tests exercise.

use eesampler::config::{Experiment, ExperimentConfig};
use eesampler::oracle::{ee_jump_nonlinear_matrix, geometric_rate_estimate, nonlinear_matrix, stationary};
use eesampler::{run, tv_distance, EmpiricalMeasure, KernelVariant, State};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn experiment(target: &[f64], labels: &[u32], epsilon: f64, ee_jump: bool, rounds: u64, seed: u64) -> Result<Experiment, String> {
    let rings = labels.iter().max().map_or(1, |m| m + 1);
    let config = json!({
        "space": {"kind": "finite", "size": target.len()},
        "ladder": {"levels": [{"kind": "uniform"}, {"kind": "weights", "values": target}]},
        "partition": {"kind": "labels", "labels": labels},
        "proposal": {"kind": "uniform-independent"},
        "kernel": if ee_jump { "ee-jump" } else { "selection-mutation" },
        "epsilon": [epsilon],
        "schedule": [20],
        "initial_states": [0, 0],
        "total_rounds": rounds.max(21),
        "seed": seed,
        "test_functions": [],
        "stability": {"theta": 0.5 / rings as f64, "abort": false},
        "rate_grid": [rounds.max(21)],
    });
    let config: ExperimentConfig = serde_json::from_value(config).map_err(|e| e.to_string())?;
    config.build().map_err(|e| e.to_string())
}

fn variant(exp: &Experiment) -> bool {
    exp.config.kernel == KernelVariant::EeJump
}

/// Invariant law of the target-level kernel when the feeder is the
/// empirical measure with the given per-state counts.
pub fn fixed_point_json(target: &[f64], labels: &[u32], epsilon: f64, ee_jump: bool, feeder_counts: &[u32]) -> Result<Value, String> {
    let exp = experiment(target, labels, epsilon, ee_jump, 21, 0)?;
    if feeder_counts.len() != target.len() {
        return Err(format!("expected {} feeder counts, got {}", target.len(), feeder_counts.len()));
    }
    let atoms: Vec<State> = feeder_counts
        .iter()
        .enumerate()
        .flat_map(|(x, &c)| std::iter::repeat_n(State::Index(x), c as usize))
        .collect();
    let feed = EmpiricalMeasure::from_states(exp.model.space(), exp.model.partition(), &atoms).map_err(|e| e.to_string())?;
    let mu = feed.probability_vector(target.len());
    let p = if variant(&exp) {
        ee_jump_nonlinear_matrix(&exp.model, 1, &mu, epsilon)
    } else {
        nonlinear_matrix(&exp.model, 1, &mu, epsilon)
    }
    .map_err(|e| e.to_string())?;
    let omega = stationary(&p).map_err(|e| e.to_string())?;
    let pi = exp.model.ladder().distribution(1).map_err(|e| e.to_string())?;
    let tv = tv_distance(&omega, &pi).map_err(|e| e.to_string())?;
    Ok(json!({"target": pi, "feeder": mu, "invariant": omega, "tv": tv}))
}

/// Runs the two-chain sampler and reports the target chain's running
/// occupancy error every `every` rounds.
pub fn simulate_json(target: &[f64], labels: &[u32], epsilon: f64, ee_jump: bool, rounds: u32, seed: u32, every: u32) -> Result<Value, String> {
    let exp = experiment(target, labels, epsilon, ee_jump, rounds as u64, seed as u64)?;
    let trace = run(&exp.model, exp.settings.clone(), &exp.run_spec(seed as u64, rounds as u64)).map_err(|e| e.to_string())?;
    let pi = exp.model.ladder().distribution(1).map_err(|e| e.to_string())?;
    let every = every.max(1) as u64;
    let mut counts = vec![0u64; pi.len()];
    let (mut n, mut rounds_out, mut errors) = (0u64, Vec::new(), Vec::new());
    for r in trace.chain_records(1).filter(|r| !r.holds() && r.branch != "init") {
        counts[r.state.index().unwrap_or(0)] += 1;
        n += 1;
        if n % every == 0 {
            let occ: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
            rounds_out.push(r.round);
            errors.push(tv_distance(&occ, &pi).map_err(|e| e.to_string())?);
        }
    }
    let occupancy: Vec<f64> = counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect();
    Ok(json!({
        "target": pi,
        "occupancy": occupancy,
        "samples": n,
        "rounds": rounds_out,
        "tv": errors,
        "min_ring_mass": trace.min_ring_mass,
    }))
}

/// Convergence profile of the target-level kernel fed by the exact
/// lower-level law.
pub fn mixing_profile_json(target: &[f64], labels: &[u32], epsilon: f64, ee_jump: bool) -> Result<Value, String> {
    let exp = experiment(target, labels, epsilon, ee_jump, 21, 0)?;
    let mu = exp.model.ladder().distribution(0).map_err(|e| e.to_string())?;
    let p = if variant(&exp) {
        ee_jump_nonlinear_matrix(&exp.model, 1, &mu, epsilon)
    } else {
        nonlinear_matrix(&exp.model, 1, &mu, epsilon)
    }
    .map_err(|e| e.to_string())?;
    let r = geometric_rate_estimate(&p).map_err(|e| e.to_string())?;
    Ok(json!({
        "phi": r.phi,
        "doeblin_rho": r.doeblin_rho,
        "fitted_rho": r.fitted_rho,
        "tv": r.tv_sequence,
    }))
}

fn export(v: Result<Value, String>) -> Result<String, JsValue> {
    v.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn fixed_point(target: &[f64], labels: &[u32], epsilon: f64, ee_jump: bool, feeder_counts: &[u32]) -> Result<String, JsValue> {
    export(fixed_point_json(target, labels, epsilon, ee_jump, feeder_counts))
}

#[wasm_bindgen]
pub fn simulate(target: &[f64], labels: &[u32], epsilon: f64, ee_jump: bool, rounds: u32, seed: u32, every: u32) -> Result<String, JsValue> {
    export(simulate_json(target, labels, epsilon, ee_jump, rounds, seed, every))
}

#[wasm_bindgen]
pub fn mixing_profile(target: &[f64], labels: &[u32], epsilon: f64, ee_jump: bool) -> Result<String, JsValue> {
    export(mixing_profile_json(target, labels, epsilon, ee_jump))
}
