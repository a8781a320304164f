use rand::Rng as _;

use wring::basis::kink_strings;
use wring::dynamics::{evolve_closed, evolve_open, evolve_trajectories, preparation_fidelity, EvolveOptions};
use wring::inference::{estimate_fidelity, fidelity_from_counts, px_from_samples};
use wring::lattice::{interaction_matrix, ring_positions, InteractionMatrix, Truncation, C6_DEFAULT};
use wring::measurement::{
    apply_readout_noise, mitigate_readout, sample_bitstrings, sample_distribution, Basis, ConfusionModel, Negativity,
    ShotSet,
};
use wring::observables::{kink_populations, px_expectation};
use wring::pulse::{build_prep_schedule, PrepParams};
use wring::rng::{derive_seed, rng_from_seed};
use wring::state::QuantumState;

fn ring(sites: usize) -> InteractionMatrix {
    interaction_matrix(&ring_positions(sites, 6.0).unwrap(), C6_DEFAULT, Truncation::Full).unwrap()
}

fn prepared(sites: usize) -> QuantumState {
    let prep = build_prep_schedule(&PrepParams::new(11.46, 29.0, 2.0, 0.25)).unwrap();
    let g = QuantumState::all_ground(sites).unwrap();
    evolve_closed(&ring(sites), &prep, &g, &EvolveOptions::with_max_step(1e-2)).unwrap().state
}

#[test]
fn mitigation_is_unbiased_on_average() {
    let sites = 5;
    let cm = ConfusionModel::uniform(sites, 0.01, 0.08).unwrap();
    let mut rng = rng_from_seed(1);
    let mut truth: Vec<f64> = (0..1 << sites).map(|_| 0.01 * rng.random::<f64>()).collect();
    for k in kink_strings(sites).unwrap() {
        truth[k.index()] += rng.random::<f64>();
    }
    let total: f64 = truth.iter().sum();
    truth.iter_mut().for_each(|p| *p /= total);
    let mut mean = vec![0.0; truth.len()];
    for seed in 0..50 {
        let shots = sample_distribution(&truth, sites, Basis::Z, 100_000, derive_seed(seed, 0)).unwrap();
        let noisy = apply_readout_noise(&shots, &cm, derive_seed(seed, 1)).unwrap();
        let m = mitigate_readout(&noisy.frequencies().unwrap(), &cm, Negativity::Clip).unwrap();
        assert!((m.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        mean.iter_mut().zip(&m.quasi).for_each(|(a, q)| *a += q / 50.0);
    }
    let tv = 0.5 * mean.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv < 0.005, "{tv}");
}

#[test]
fn sampled_correlators_track_the_state() {
    let state = prepared(5);
    let exact = px_expectation(&state);
    let shots = sample_bitstrings(&state, Basis::X, 20_000, 9).unwrap();
    let (px, err) = px_from_samples(&shots).unwrap();
    assert!((px - exact).abs() < 5.0 * err, "{px} ± {err} vs {exact}");

    let z = sample_bitstrings(&state, Basis::Z, 20_000, 10).unwrap();
    let report = estimate_fidelity(&z, &shots, &ConfusionModel::identity(5), Negativity::Clip, 100, 11).unwrap();
    let f = fidelity_from_counts(&kink_populations(&state).unwrap(), exact, 5).unwrap().value;
    assert!((report.fidelity - f).abs() < 5.0 * report.stderr, "{report:?} vs {f}");
}

#[test]
fn noisy_shots_survive_the_file_format() {
    let state = prepared(7);
    let cm = ConfusionModel::uniform(7, 0.01, 0.08).unwrap();
    let shots = apply_readout_noise(&sample_bitstrings(&state, Basis::Z, 500, 3).unwrap(), &cm, 4).unwrap();
    let text = shots.to_text().unwrap();
    let back = ShotSet::from_text(&text).unwrap();
    assert_eq!(back.frequencies().unwrap(), shots.frequencies().unwrap());
    assert_eq!(back.to_text().unwrap(), text);
}

#[test]
fn trajectories_agree_with_the_density_matrix() {
    let (sites, gamma) = (3, 0.5);
    let u = ring(sites);
    let prep = build_prep_schedule(&PrepParams::new(11.46, 20.0, 1.5, 0.25)).unwrap();
    let g = QuantumState::all_ground(sites).unwrap();
    let opts = EvolveOptions::with_max_step(5e-3);
    let rho = evolve_open(&u, &prep, &g, gamma, &opts).unwrap().state.probabilities();
    let traj = evolve_trajectories(&u, &prep, &g, gamma, 2000, 5, &opts).unwrap();
    for (a, b) in traj.mean_probabilities().iter().zip(&rho) {
        assert!((a - b).abs() < 0.03, "{a} vs {b}");
    }
    let f_traj = preparation_fidelity(&traj.to_density().unwrap()).unwrap();
    let f_rho = preparation_fidelity(&evolve_open(&u, &prep, &g, gamma, &opts).unwrap().state).unwrap();
    assert!((f_traj - f_rho).abs() < 0.03);
}
