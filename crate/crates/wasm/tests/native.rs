use eesampler_wasm::{fixed_point, fixed_point_json, mixing_profile_json, simulate, simulate_json};

const TARGET: [f64; 4] = [1.0, 1.0, 2.0, 4.0];
const LABELS: [u32; 4] = [0, 0, 1, 1];

fn floats(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn exact_feeder_reproduces_target() {
    // counts proportional to the uniform lower level
    let v = fixed_point_json(&TARGET, &LABELS, 0.5, false, &[3, 3, 3, 3]).unwrap();
    assert!(v["tv"].as_f64().unwrap() < 1e-12);
    let omega = floats(&v["invariant"]);
    for (a, b) in omega.iter().zip([0.125, 0.125, 0.25, 0.5]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn unbalanced_feeder_biases_both_variants() {
    for ee in [false, true] {
        let v = fixed_point_json(&TARGET, &LABELS, 0.5, ee, &[5, 1, 1, 3]).unwrap();
        assert!(v["tv"].as_f64().unwrap() > 0.01, "ee_jump={ee}");
    }
}

#[test]
fn bad_inputs_are_reported() {
    assert!(fixed_point_json(&TARGET, &LABELS, 0.5, false, &[1, 1]).is_err());
    assert!(fixed_point_json(&TARGET, &LABELS, 1.5, false, &[1, 1, 1, 1]).is_err());
    assert!(mixing_profile_json(&[1.0, -1.0], &[0, 0], 0.5, false).is_err());
}

#[test]
fn simulation_error_shrinks_and_is_seeded() {
    let v = simulate_json(&TARGET, &LABELS, 0.5, false, 20_000, 3, 500).unwrap();
    let tv = floats(&v["tv"]);
    assert!(tv.len() >= 30);
    assert!(tv.last().unwrap() < &0.05);
    assert_eq!(v["samples"].as_u64().unwrap(), 20_000 - 20);
    assert_eq!(simulate(&TARGET, &LABELS, 0.5, false, 5000, 9, 100).unwrap(), simulate(&TARGET, &LABELS, 0.5, false, 5000, 9, 100).unwrap());
}

#[test]
fn mixing_profile_decays_within_doeblin_bound() {
    let v = mixing_profile_json(&TARGET, &LABELS, 0.5, false).unwrap();
    let rho = v["doeblin_rho"].as_f64().unwrap();
    assert!(rho < 1.0);
    for (n, t) in floats(&v["tv"]).iter().enumerate() {
        assert!(*t <= rho.powi(n as i32 + 1) + 1e-12);
    }
}

#[test]
fn exported_wrappers_return_json() {
    let s = fixed_point(&TARGET, &LABELS, 0.25, true, &[2, 2, 2, 2]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(floats(&v["target"]).len(), 4);
}
