use std::path::Path;

use eesampler::config::{Experiment, ExperimentConfig};
use eesampler::diagnostics::batch_means_se;
use eesampler::oracle::{nonlinear_matrix, ee_jump_nonlinear_matrix, stationary};
use eesampler::{run, DensityLadder, KernelVariant, LogDensity, Model, Proposal, RingPartition, StateSpace};
use proptest::prelude::*;

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)).unwrap()
}

fn occupancy_z(exp: &Experiment, rounds: u64) -> f64 {
    let trace = run(&exp.model, exp.settings.clone(), &exp.run_spec(exp.config.seed, rounds)).unwrap();
    let burn = exp.burn_in();
    let samples: Vec<Vec<f64>> = trace
        .chain_records(1)
        .filter(|r| r.round > burn)
        .map(|r| {
            let mut v = vec![0.0; 4];
            v[r.state.index().unwrap()] = 1.0;
            v
        })
        .collect();
    let n = samples.len() as f64;
    let occ: Vec<f64> = (0..4).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let se = batch_means_se(&samples, 50);
    let pi2 = [0.125, 0.125, 0.25, 0.5];
    (0..4).map(|j| (occ[j] - pi2[j]).abs() / se[j]).fold(0.0, f64::max)
}

#[test]
fn target_chain_occupancy_matches_target() {
    let exp = load("four_state.json").build().unwrap();
    let z = occupancy_z(&exp, 100_000);
    assert!(z <= 3.0, "max z {z}");
}

#[test]
fn ee_jump_variant_occupancy_matches_target() {
    let mut c = load("four_state.json");
    c.kernel = KernelVariant::EeJump;
    let z = occupancy_z(&c.build().unwrap(), 100_000);
    assert!(z <= 3.0, "max z {z}");
}

#[test]
fn gaussian_mixture_target_chain_visits_both_modes() {
    let mut c = load("gaussian_mixture.json");
    c.replicates = 1;
    let exp = c.build().unwrap();
    let trace = run(&exp.model, exp.settings.clone(), &exp.run_spec(exp.config.seed, 20_000)).unwrap();
    let xs: Vec<f64> = trace
        .chain_records(1)
        .filter(|r| r.round > exp.burn_in())
        .map(|r| r.state.coords().unwrap()[0])
        .collect();
    let right = xs.iter().filter(|&&x| x > 0.0).count() as f64 / xs.len() as f64;
    assert!((0.2..=0.8).contains(&right), "right-mode share {right}");
}

fn model(lo: &[f64], hi: &[f64], labels: Vec<usize>) -> Model {
    let ladder = DensityLadder::new(
        StateSpace::finite(lo.len()).unwrap(),
        vec![LogDensity::from_weights(lo).unwrap(), LogDensity::from_weights(hi).unwrap()],
    )
    .unwrap();
    Model::new(ladder, RingPartition::from_labels(labels).unwrap(), Proposal::UniformIndependent).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_feeder_leaves_target_invariant(
        lo in prop::collection::vec(0.1f64..5.0, 5),
        hi in prop::collection::vec(0.1f64..5.0, 5),
        labels in prop::collection::vec(0usize..2, 5),
        eps in 0.0f64..1.0,
    ) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let m = model(&lo, &hi, labels);
        let pi1 = m.ladder().distribution(0).unwrap();
        let pi2 = m.ladder().distribution(1).unwrap();
        for p in [nonlinear_matrix(&m, 1, &pi1, eps).unwrap(), ee_jump_nonlinear_matrix(&m, 1, &pi1, eps).unwrap()] {
            let omega = stationary(&p).unwrap();
            for (a, b) in omega.iter().zip(&pi2) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
