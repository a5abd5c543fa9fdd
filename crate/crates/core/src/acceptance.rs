//! Acceptance criteria, one runner per criterion.
//!
//! The reference runs are expensive, so a [`Lab`] computes each one on first
//! use and shares it between criteria. Criterion parameters (dimension,
//! amplitude, particle count, horizon) are fixed here; the base config
//! supplies the seed, interaction sign, step, grid radius and 2D grid cells.

use std::f64::consts::PI;
use std::fmt;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{PhasePoint, SimConfig};
use crate::dynamics::{duhamel_residual, integrate_characteristic, FrozenSources, ZeroField};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::kinetic::{self, decay_fit, FieldMode, RunOptions, SimulationOutput};
use crate::linear::{self, InitialData, InitialKind};
use crate::modfields::{self, ModCoefficients};
use crate::poisson::{self, SourceSet};
use crate::trapped::{self, ManifoldSample, TrappedOptions};
use crate::vfalgebra::{self, all_fields, DensityIdentity, FieldKind, Scope, VectorFieldId};
use crate::DecaySeries;

/// One measured quantity against its limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub label: String,
    pub value: f64,
    pub limit: String,
    pub passed: bool,
}

impl Check {
    pub fn at_most(label: &str, value: f64, limit: f64) -> Self {
        Self { label: label.into(), value, limit: format!("<= {limit:e}"), passed: value <= limit }
    }

    pub fn below(label: &str, value: f64, limit: f64) -> Self {
        Self { label: label.into(), value, limit: format!("< {limit:e}"), passed: value < limit }
    }

    pub fn within(label: &str, value: f64, target: f64, tol: f64) -> Self {
        Self {
            label: label.into(),
            value,
            limit: format!("{target} +- {tol}"),
            passed: (value - target).abs() <= tol,
        }
    }

    pub fn holds(label: &str, ok: bool) -> Self {
        Self { label: label.into(), value: f64::from(u8::from(ok)), limit: "true".into(), passed: ok }
    }

    /// A reported quantity with no limit of its own.
    pub fn report(label: &str, value: f64) -> Self {
        Self { label: label.into(), value, limit: "reported".into(), passed: true }
    }

    fn failed(label: &str, err: &Error) -> Self {
        Self { label: format!("{label}: {err}"), value: f64::NAN, limit: "no error".into(), passed: false }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.limit == "true" {
            write!(f, "{} {}", self.label, if self.passed { "ok" } else { "FAILED" })
        } else {
            write!(f, "{} = {:.4e} ({})", self.label, self.value, self.limit)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl CriterionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.elapsed <= self.budget
    }

    /// One line: verdict, name, runtime, then every check.
    pub fn line(&self) -> String {
        let checks: Vec<String> = self.checks.iter().map(|c| c.to_string()).collect();
        format!(
            "{} {:<22} {:>7.1}s/{:.0}s  {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs_f64(),
            checks.join("; ")
        )
    }
}

type Runner = fn(&Lab) -> Vec<Check>;

pub const CRITERIA: [&str; 7] =
    ["algebra", "kernel", "linear-decay", "nonlinear-decay", "integrator", "trapped-set", "modified-coefficients"];

/// Lazily computed reference runs shared by the criteria.
pub struct Lab {
    base: SimConfig,
    run2d: OnceLock<Result<SimulationOutput>>,
    half2d: OnceLock<Result<SimulationOutput>>,
    run3d: OnceLock<Result<SimulationOutput>>,
    manifold: OnceLock<Result<(ManifoldSample, ManifoldSample)>>,
    coefficients: OnceLock<Result<ModCoefficients>>,
}

impl Lab {
    pub fn new(base: SimConfig) -> Self {
        Self {
            base,
            run2d: OnceLock::new(),
            half2d: OnceLock::new(),
            run3d: OnceLock::new(),
            manifold: OnceLock::new(),
            coefficients: OnceLock::new(),
        }
    }

    /// Two-dimensional reference: `eps = 1e-2`, `2e4` particles, `t_max = 5`.
    pub fn config_2d(&self) -> SimConfig {
        SimConfig { dim: 2, eps: 1e-2, n_particles: 20_000, t_max: 5.0, ..self.base.clone() }
    }

    /// Three-dimensional reference: `eps = 1e-2`, `4e4` particles, `t_max = 4`, 32 cells.
    pub fn config_3d(&self) -> SimConfig {
        SimConfig { dim: 3, eps: 1e-2, n_particles: 40_000, t_max: 4.0, grid_cells: 32, ..self.base.clone() }
    }

    fn run(cfg: &SimConfig) -> Result<SimulationOutput> {
        cfg.validate()?;
        let opts = RunOptions { mode: FieldMode::SelfConsistent, keep_potentials: cfg.dim == 2 };
        kinetic::run_simulation_with(cfg, &kinetic::default_initial_data(cfg), opts)
    }

    pub fn reference_2d(&self) -> Result<&SimulationOutput> {
        self.run2d.get_or_init(|| Self::run(&self.config_2d())).as_ref().map_err(Clone::clone)
    }

    /// The 2D reference at half the amplitude.
    pub fn half_2d(&self) -> Result<&SimulationOutput> {
        self.half2d
            .get_or_init(|| {
                let cfg = self.config_2d();
                Self::run(&SimConfig { eps: cfg.eps / 2.0, ..cfg })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn reference_3d(&self) -> Result<&SimulationOutput> {
        self.run3d.get_or_init(|| Self::run(&self.config_3d())).as_ref().map_err(Clone::clone)
    }

    fn trapped_options(&self) -> TrappedOptions {
        TrappedOptions::from_config(&self.config_2d())
    }

    /// Manifold samples on the 9 x 9 grid over `[-1, 1]^2`, for the reference
    /// run and its half-amplitude twin.
    pub fn manifolds(&self) -> Result<&(ManifoldSample, ManifoldSample)> {
        self.manifold
            .get_or_init(|| {
                let xs = trapped::box_grid(2, 9, 1.0);
                let opts = self.trapped_options();
                let mu = self.config_2d().mu;
                let full = trapped::sample_manifold(&xs, &self.reference_2d()?.history, mu, &opts);
                let half = trapped::sample_manifold(&xs, &self.half_2d()?.history, mu, &opts);
                Ok((full, half))
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn coefficients(&self) -> Result<&ModCoefficients> {
        self.coefficients
            .get_or_init(|| {
                let cfg = self.config_2d();
                let run = self.reference_2d()?;
                modfields::transport_coefficients(&run.ensemble, &run.history, cfg.mu, &cfg, 64)
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn run_criterion(&self, name: &str) -> Result<CriterionReport> {
        let (name, budget, runner): (&'static str, u64, Runner) = match name {
            "algebra" => ("algebra", 10, algebra_checks),
            "kernel" => ("kernel", 30, kernel_checks),
            "linear-decay" => ("linear-decay", 120, linear_decay_checks),
            "nonlinear-decay" => ("nonlinear-decay", 900, nonlinear_decay_checks),
            "integrator" => ("integrator", 60, integrator_checks),
            "trapped-set" => ("trapped-set", 300, trapped_checks),
            "modified-coefficients" => ("modified-coefficients", 180, modfield_checks),
            other => return Err(Error::InvalidInput(format!("unknown criterion {other}"))),
        };
        let start = Instant::now();
        let checks = runner(self);
        Ok(CriterionReport { name, checks, elapsed: start.elapsed(), budget: Duration::from_secs(budget) })
    }

    pub fn run_all(&self) -> Vec<CriterionReport> {
        CRITERIA.iter().map(|c| self.run_criterion(c).expect("known criterion")).collect()
    }
}

/// Collects `Ok` checks, turning an error into a single failed check.
fn guarded(label: &str, f: impl FnOnce() -> Result<Vec<Check>>) -> Vec<Check> {
    f().unwrap_or_else(|e| vec![Check::failed(label, &e)])
}

fn algebra_checks(_: &Lab) -> Vec<Check> {
    let mut out = Vec::new();
    let mismatches: usize = [2, 3].iter().map(|&n| vfalgebra::table_mismatches(n).len()).sum();
    out.push(Check::at_most("commutator table mismatches", mismatches as f64, 0.0));
    let jacobi: usize = [2, 3].iter().map(|&n| vfalgebra::jacobi_failures(n).len()).sum();
    out.push(Check::at_most("Jacobi failures", jacobi as f64, 0.0));
    out.extend(guarded("weight identity", || {
        let g = GridField::from_fn(2, 128, 6.0, |x| (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp());
        let res = (0..2).map(|j| vfalgebra::weight_decomposition_check(j, &g)).collect::<Result<Vec<_>>>()?;
        Ok(vec![Check::at_most("weight identity residual", res.into_iter().fold(0.0, f64::max), 1e-6)])
    }));
    out.extend(guarded("density commutation", || {
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let cfg = density_check_config();
        let res = all_fields(2, Scope::Macroscopic)
            .into_iter()
            .map(|z| vfalgebra::density_commutation_check(&f0, z, 1.0, &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(vec![Check::at_most("density commutation residual", res.into_iter().fold(0.0, f64::max), 1e-5)])
    }));
    out
}

fn density_check_config() -> SimConfig {
    SimConfig { grid_radius0: 4.0, grid_cells: 128, ..SimConfig::default() }
}

fn kernel_checks(_: &Lab) -> Vec<Check> {
    guarded("kernel", || {
        let mut out = Vec::new();
        for n in [2, 3] {
            let v = poisson::kernel_bound_quadrature(n, &vec![0.0; n])?;
            out.push(Check::within(&format!("kernel bound n={n} at 0"), v, 2.0 * PI, 1e-3));
        }
        let mut worst = 0.0f64;
        for n in [2usize, 3] {
            for t in [0.0, 1.0, 2.0] {
                for x in [vec![0.0; n], (0..n).map(|a| 0.7 + a as f64).collect(), (0..n).map(|a| -3.0 * (a as f64 + 1.0)).collect()] {
                    match poisson::scaled_kernel_decay(n, t, &x) {
                        Ok(k) => worst = worst.max(k.relative_difference),
                        Err(_) => worst = f64::INFINITY,
                    }
                }
            }
        }
        out.push(Check::at_most("scaled kernel relative gap", worst, 1e-3));
        Ok(out)
    })
}

/// Gaussian data off the origin, so every first-order energy is nonzero.
pub fn linear_test_data(amplitude: f64) -> InitialData {
    let center = PhasePoint { x: vec![0.5, 0.0], v: vec![0.0, 0.3] };
    InitialData::new(InitialKind::Gaussian, amplitude, center, 1.0, 1.0).expect("valid gaussian data")
}

fn linear_decay_checks(lab: &Lab) -> Vec<Check> {
    guarded("linear decay", || {
        let f0 = linear_test_data(1.0);
        let cfg = SimConfig { dim: 2, ..lab.base.clone() };
        let mut sup = DecaySeries { times: vec![], values: vec![] };
        let mut weighted = Vec::new();
        for k in 0..=10 {
            let t = 1.5 + 0.25 * k as f64;
            let rho = linear::linear_density_on_grid(&f0, t, &cfg)?;
            sup.push(t, rho.sup_norm());
            weighted.push(kinetic::weighted_sup_density(&rho, t, 2));
        }
        let fit = decay_fit(&sup, 1.5, 4.0)?;
        let (lo, hi) = weighted.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        let mut out = vec![
            Check::within("sup density slope", fit.slope, -2.0, 0.1),
            Check::at_most("weighted sup variation", (hi - lo) / lo, 0.5),
        ];
        let run_cfg = SimConfig { n_particles: 20_000, t_max: 4.0, ..cfg };
        let opts = RunOptions { mode: FieldMode::Linear, keep_potentials: false };
        let run = kinetic::run_simulation_with(&run_cfg, &f0, opts)?;
        let mut worst = 0.0f64;
        for (s, se) in run.report.energies.iter().zip(&run.report.energy_stderr) {
            let dev = s.values.iter().map(|v| (v - s.values[0]).abs()).fold(0.0, f64::max);
            worst = worst.max(dev / (3.0 * se.values[0]));
        }
        out.push(Check::at_most("energy drift / (3 se)", worst, 1.0));
        Ok(out)
    })
}

fn series_growth(s: &DecaySeries) -> f64 {
    s.max() / s.values[0]
}

fn relative_mass_drift(s: &DecaySeries) -> f64 {
    s.values.iter().map(|m| (m - s.values[0]).abs()).fold(0.0, f64::max) / s.values[0].abs().max(f64::MIN_POSITIVE)
}

fn nonlinear_decay_checks(lab: &Lab) -> Vec<Check> {
    let mut out = guarded("2D reference run", || {
        let cfg = lab.config_2d();
        let run = lab.reference_2d()?;
        let fit = run.report.force_fit(1.0, cfg.t_max)?;
        Ok(vec![
            Check::within("2D force slope", fit.slope, -1.0, 0.15),
            Check::at_most("2D energy growth", series_growth(&run.report.total_energy()), 2.0),
            Check::at_most("2D mass drift", relative_mass_drift(&run.report.mass), 1e-12),
        ])
    });
    out.extend(guarded("3D reference run", || {
        let cfg = lab.config_3d();
        let run = lab.reference_3d()?;
        let fit = run.report.force_fit(1.0, cfg.t_max)?;
        Ok(vec![
            Check::within("3D force slope", fit.slope, -2.0, 0.3),
            Check::at_most("3D energy growth", series_growth(&run.report.total_energy()), 2.0),
            Check::at_most("3D mass drift", relative_mass_drift(&run.report.mass), 1e-12),
        ])
    }));
    out
}

/// A fixed cloud of softened sources with total mass `mass`.
pub fn test_sources(dim: usize, mass: f64) -> FrozenSources {
    let mut pos = Vec::new();
    for k in 0..20 {
        let a = k as f64 * 0.7;
        pos.extend([0.5 * a.cos(), 0.4 * (1.3 * a).sin()]);
        if dim == 3 {
            pos.push(0.3 * (0.9 * a).cos());
        }
    }
    let sources = SourceSet::new(dim, pos, vec![mass / 20.0; 20]).expect("valid sources");
    FrozenSources { sources, softening: 0.5, support: None }
}

fn random_points(dim: usize, count: usize, seed: u64) -> Vec<PhasePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..2 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            PhasePoint::from_slice(&z)
        })
        .collect()
}

fn integrator_checks(lab: &Lab) -> Vec<Check> {
    guarded("integrator", || {
        let mut out = Vec::new();
        let cfg = |dt: f64, stride: usize| SimConfig { dt, snapshot_stride: stride, ..lab.base.clone() };

        let mut worst = 0.0f64;
        for dim in [2, 3] {
            for p in random_points(dim, 20, 1) {
                let traj = integrate_characteristic(&p, 0.0, 5.0, &cfg(0.01, 50), &ZeroField { dim }, false)?;
                for (t, q) in traj.times.iter().zip(&traj.points) {
                    let exact = linear::linear_flow(*t, &p)?;
                    let err = q.to_vec().iter().zip(exact.to_vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    worst = worst.max(err / exact.norm());
                }
            }
        }
        out.push(Check::at_most("zero-field relative error", worst, 1e-12));

        let field = test_sources(2, 1.0);
        let p = PhasePoint { x: vec![0.4, -0.2], v: vec![-0.5, 0.3] };
        let end = |dt: f64| -> Result<PhasePoint> {
            Ok(integrate_characteristic(&p, 0.0, 2.0, &cfg(dt, 1000), &field, false)?.last().clone())
        };
        let (a, b, c) = (end(0.04)?, end(0.02)?, end(0.01)?);
        let dist = |u: &PhasePoint, w: &PhasePoint| {
            u.to_vec().iter().zip(w.to_vec()).map(|(s, r)| (s - r).powi(2)).sum::<f64>().sqrt()
        };
        out.push(Check::within("Richardson ratio", dist(&a, &b) / dist(&b, &c), 4.0, 0.4));

        let weak = test_sources(2, 1e-2);
        let mut det = 0.0f64;
        let mut duhamel = 0.0f64;
        for q in random_points(2, 10, 2) {
            let traj = integrate_characteristic(&q, 0.0, 5.0, &cfg(0.01, 1), &weak, true)?;
            for j in traj.tangents.as_ref().expect("tangents requested") {
                det = det.max((j.determinant() - 1.0).abs());
            }
            let (u, s) = duhamel_residual(&traj, &q, 1.0, &weak)?;
            duhamel = u.iter().chain(&s).fold(duhamel, |m, r| m.max(*r));
        }
        out.push(Check::at_most("tangent determinant deviation", det, 1e-8));
        out.push(Check::at_most("Duhamel residual", duhamel, 1e-5));

        let mut fd_gap = 0.0f64;
        for dim in [2, 3] {
            let f = test_sources(dim, 0.5);
            let base = &random_points(dim, 1, 3)[0];
            let c = cfg(0.01, 1000);
            let j = integrate_characteristic(base, 0.0, 2.0, &c, &f, true)?.tangents.expect("tangents").pop().expect("end");
            let off = 1e-6;
            for col in 0..2 * dim {
                let mut zp = base.to_vec();
                let mut zm = base.to_vec();
                zp[col] += off;
                zm[col] -= off;
                let ep = integrate_characteristic(&PhasePoint::from_slice(&zp), 0.0, 2.0, &c, &f, false)?;
                let em = integrate_characteristic(&PhasePoint::from_slice(&zm), 0.0, 2.0, &c, &f, false)?;
                let (a, b) = (ep.last().to_vec(), em.last().to_vec());
                for row in 0..2 * dim {
                    let fd = (a[row] - b[row]) / (2.0 * off);
                    fd_gap = fd_gap.max((fd - j.get(row, col)).abs() / j.max_abs_entry());
                }
            }
        }
        out.push(Check::at_most("tangent vs finite differences", fd_gap, 1e-4));
        Ok(out)
    })
}

fn trapped_checks(lab: &Lab) -> Vec<Check> {
    guarded("trapped set", || {
        let cfg = lab.config_2d();
        let run = lab.reference_2d()?;
        let (full, half) = lab.manifolds()?;
        let opts = lab.trapped_options();
        let mut out = vec![
            Check::at_most("failed solves", (full.failures.len() + half.failures.len()) as f64, 0.0),
            Check::at_most("Picard iterations", full.max_iterations() as f64, 25.0),
            Check::at_most("contraction ratio", full.max_contraction(), 0.5),
        ];
        let sup = full.sup_unstable();
        out.push(Check::report("sup|x+v| / eps", sup / cfg.eps));
        out.push(Check::within("eps scaling of sup|x+v|", sup / half.sup_unstable(), 2.0, 0.5));
        let mut invariance = 0.0f64;
        let mut bound_excess = f64::NEG_INFINITY;
        for m in &full.points {
            invariance = invariance.max(trapped::invariance_check(m, &run.history, cfg.mu, &opts, 1.0)?);
            let ex = trapped::trapped_excursion(m, &run.history, cfg.mu, &opts)?;
            bound_excess = bound_excess.max(ex.max_norm - (2.0 * m.p.norm() + 0.1));
        }
        out.push(Check::at_most("invariance defect", invariance, 1e-6));
        let target = (10.0 * 2f64.sqrt() / 1e-3).ln();
        let (mut time_gap, mut slope_gap) = (0.0f64, 0.0f64);
        for x in [[0.0, 0.0], [0.5, -0.5], [-1.0, 0.25]] {
            let m = full
                .points
                .iter()
                .find(|m| m.p.x == x)
                .ok_or_else(|| Error::Internal(format!("no manifold point at {x:?}")))?;
            let e = trapped::escape_test(m, 1e-3, &run.history, cfg.mu, &opts)?;
            time_gap = time_gap.max((e.time - target).abs());
            slope_gap = slope_gap.max((e.slope - 1.0).abs());
        }
        out.push(Check::at_most("escape time gap", time_gap, 1.0));
        out.push(Check::at_most("escape slope gap", slope_gap, 0.05));
        out.push(Check::at_most("excursion above 2|p| + 0.1", bound_excess, 0.0));
        Ok(out)
    })
}

fn modfield_checks(lab: &Lab) -> Vec<Check> {
    guarded("modified coefficients", || {
        let cfg = lab.config_2d();
        let run = lab.reference_2d()?;
        let coeffs = lab.coefficients()?;
        let m = modfields::bootstrap_check(coeffs, &run.report, cfg.eps);
        let slope = modfields::unstable_growth_slope(coeffs);
        let mut out = vec![
            Check::below("coefficient margin", m.coefficients, 1.0),
            Check::below("gradient margin", m.gradients, 1.0),
            Check::below("force margin", m.force, 1.0),
            Check::at_most("growth slope / sqrt(eps)", slope / cfg.eps.sqrt(), 1.5),
        ];
        // mutation: the scaling identity without its n rho correction
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let z = VectorFieldId::macro_(FieldKind::Scaling);
        let wrong = vfalgebra::density_commutation_check_with(
            &f0,
            z,
            1.0,
            &density_check_config(),
            DensityIdentity::OmitScalingCorrection,
        )?;
        out.push(Check::holds("omitted correction detected", wrong > 1e-5));
        // mutation: a coefficient series growing like t^2
        let fake = ModCoefficients {
            values: coeffs
                .times
                .iter()
                .map(|t| coeffs.values[0].iter().map(|row| vec![t * t; row.len()]).collect())
                .collect(),
            ..coeffs.clone()
        };
        let fm = modfields::bootstrap_check(&fake, &run.report, cfg.eps);
        out.push(Check::holds("quadratic growth detected", !fm.passed()));
        Ok(out)
    })
}
