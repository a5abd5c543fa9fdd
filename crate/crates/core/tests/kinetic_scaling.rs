//! Sampling noise and sign symmetry of the particle solver.

use vptrap::kinetic::{self, RunOptions};
use vptrap::linear::InitialData;
use vptrap::SimConfig;

/// RMS difference between deposits of two independent ensembles of size `n`.
fn pair_discrepancy(n: usize, seed: u64, cfg: &SimConfig) -> f64 {
    let f0 = InitialData::standard_gaussian(2, 1.0);
    let a = kinetic::deposit_density(&kinetic::sample_initial(&f0, n, seed).unwrap(), 0.0, cfg).unwrap();
    let b = kinetic::deposit_density(&kinetic::sample_initial(&f0, n, seed + 1000).unwrap(), 0.0, cfg).unwrap();
    let sum: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).powi(2)).sum();
    (sum / a.data.len() as f64).sqrt()
}

#[test]
fn doubling_particles_shrinks_noise_by_root_two() {
    let cfg = SimConfig { grid_cells: 32, grid_radius0: 4.0, ..SimConfig::default() };
    let mean = |n: usize| (0..8).map(|s| pair_discrepancy(n, 10 * s, &cfg)).sum::<f64>() / 8.0;
    let ratio = mean(5000) / mean(10000);
    assert!((ratio - 2f64.sqrt()).abs() < 0.15, "ratio {ratio}");
}

#[test]
fn force_decay_rate_does_not_depend_on_the_sign() {
    let slope = |mu: f64| {
        let cfg = SimConfig { mu, n_particles: 5000, t_max: 4.0, ..SimConfig::default() };
        let f0 = kinetic::default_initial_data(&cfg);
        let out = kinetic::run_simulation_with(&cfg, &f0, RunOptions::default()).unwrap();
        out.report.force_fit(1.0, cfg.t_max).unwrap().slope
    };
    let (attract, repel) = (slope(1.0), slope(-1.0));
    assert!((attract - repel).abs() < 0.05, "{attract} vs {repel}");
    assert!((attract + 1.0).abs() < 0.15, "{attract}");
}
