//! Saving and reloading a recorded run.

use vptrap::dynamics::ForceSampler;
use vptrap::history::FieldHistory;
use vptrap::kinetic::{self, RunOptions};
use vptrap::trapped::{self, TrappedOptions};
use vptrap::{Error, SimConfig};

#[test]
fn saved_history_reproduces_forces_and_trapped_points() {
    let cfg = SimConfig { n_particles: 2000, t_max: 1.0, ..SimConfig::default() };
    let f0 = kinetic::default_initial_data(&cfg);
    let run = kinetic::run_simulation_with(&cfg, &f0, RunOptions { keep_potentials: true, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.vptrap");
    run.history.save(&path).unwrap();
    let back = FieldHistory::load(&path).unwrap();

    assert!(back.potentials.is_none());
    assert_eq!(back.times, run.history.times);
    assert_eq!(back.forces, run.history.forces);
    let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
    for t in [0.0, 0.33, 0.9] {
        run.history.force(t, &[0.2, -0.4], &mut a).unwrap();
        back.force(t, &[0.2, -0.4], &mut b).unwrap();
        assert_eq!(a, b);
    }
    let opts = TrappedOptions::from_config(&cfg);
    let m1 = trapped::solve_trapped_velocity(&[0.5, 0.1], &run.history, cfg.mu, &opts, None).unwrap();
    let m2 = trapped::solve_trapped_velocity(&[0.5, 0.1], &back, cfg.mu, &opts, None).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn missing_or_corrupt_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(FieldHistory::load(&dir.path().join("absent")), Err(Error::Io(_))));
    let junk = dir.path().join("junk");
    std::fs::write(&junk, b"not a history").unwrap();
    assert!(matches!(FieldHistory::load(&junk), Err(Error::Format(_))));
}
