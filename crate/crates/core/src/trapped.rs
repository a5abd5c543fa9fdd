//! The trapped set as a graph `v = v(x)` over position space.
//!
//! A point is trapped when `x + v` equals the discounted force integral
//! `phi_map(x, v) = int_0^T e^-t mu grad phi(t, X(t)) dt` along its own future
//! characteristic. The recorded field vanishes after its last snapshot, so
//! truncating at that time is exact for the recorded model. For each `x` the
//! fixed point of `v -> -x + phi_map(x, v)` is found by Picard iteration.
//!
//! The quadrature is the trapezoid rule on the integrator steps, which is the
//! discrete variation-of-constants identity of the kick-drift-kick scheme, so
//! the computed set is invariant under the discrete flow up to round-off.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::domain::{DecaySeries, PhasePoint, SimConfig};
use crate::dynamics::{step_schedule, Characteristic, ForceSampler, TangentMap, TimeShifted};
use crate::error::{Error, Result};
use crate::history::FieldHistory;
use crate::kinetic::decay_fit;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrappedOptions {
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Phase-space radius that counts as escaped.
    pub escape_radius: f64,
    /// How long [`escape_test`] integrates before giving up.
    pub escape_horizon: f64,
}

impl Default for TrappedOptions {
    fn default() -> Self {
        Self { dt: 0.01, tol: 1e-10, max_iter: 100, escape_radius: 10.0, escape_horizon: 20.0 }
    }
}

impl TrappedOptions {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self { dt: cfg.dt, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint {
    pub p: PhasePoint,
    pub phi_value: Vec<f64>,
    /// `|x + v - phi_map(x, v)|`.
    pub defect: f64,
    pub iterations: usize,
    /// Largest ratio of successive Picard increments.
    pub contraction: f64,
}

impl ManifoldPoint {
    /// `|x + v|`.
    pub fn unstable_size(&self) -> f64 {
        self.p.unstable().iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

fn euclid(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `int_0^horizon e^-t mu F(t, X(t)) dt` along the characteristic from `p`,
/// trapezoid rule on steps of `dt`.
pub fn phi_map<S: ForceSampler + ?Sized>(p: &PhasePoint, sampler: &S, mu: f64, horizon: f64, dt: f64) -> Result<Vec<f64>> {
    let n = p.dim();
    let mut c = Characteristic::new(p, 0.0, mu, sampler, None)?;
    let mut acc = vec![0.0; n];
    let mut prev: Vec<f64> = c.force().to_vec();
    let mut covered = sampler.covers(0.0, &p.x);
    for (t, h) in step_schedule(0.0, horizon, dt) {
        c.t = t;
        c.step(h)?;
        let (w0, w1) = (0.5 * h * mu * (-t).exp(), 0.5 * h * mu * (-c.t).exp());
        for (a, (f0, f1)) in acc.iter_mut().zip(prev.iter().zip(c.force())) {
            *a += w0 * f0 + w1 * f1;
        }
        prev.copy_from_slice(c.force());
        let inside = sampler.covers(c.t, &c.x);
        if covered && !inside {
            let outward: f64 = c.x.iter().zip(&c.v).map(|(x, v)| x * v).sum();
            if outward > 0.0 {
                return Err(Error::Escaped(c.t));
            }
        }
        covered = inside;
    }
    Ok(acc)
}

/// [`phi_map`] over the whole recorded history.
pub fn evaluate_phi(p: &PhasePoint, h: &FieldHistory, mu: f64, opts: &TrappedOptions) -> Result<Vec<f64>> {
    phi_map(p, h, mu, h.t_end(), opts.dt)
}

/// `x + v - phi_map(x, v)`.
pub fn psi_defect(p: &PhasePoint, h: &FieldHistory, mu: f64, opts: &TrappedOptions) -> Result<Vec<f64>> {
    let phi = evaluate_phi(p, h, mu, opts)?;
    Ok(p.unstable().iter().zip(&phi).map(|(u, f)| u - f).collect())
}

fn solve_with<S: ForceSampler + ?Sized>(
    x: &[f64],
    sampler: &S,
    mu: f64,
    horizon: f64,
    opts: &TrappedOptions,
    start: Option<&[f64]>,
) -> Result<ManifoldPoint> {
    let n = x.len();
    let mut v: Vec<f64> = match start {
        Some(s) => s.to_vec(),
        None => x.iter().map(|a| -a).collect(),
    };
    let mut prev_step = f64::NAN;
    let mut contraction = 0.0f64;
    for k in 1..=opts.max_iter {
        let p = PhasePoint::new(x.to_vec(), v.clone())?;
        let phi = phi_map(&p, sampler, mu, horizon, opts.dt)?;
        let next: Vec<f64> = (0..n).map(|a| -x[a] + phi[a]).collect();
        let step = euclid(&next.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        if prev_step > 1e3 * opts.tol {
            contraction = contraction.max(step / prev_step);
        }
        prev_step = step;
        v = next;
        if step < opts.tol {
            let p = PhasePoint::new(x.to_vec(), v)?;
            let phi_value = phi_map(&p, sampler, mu, horizon, opts.dt)?;
            let defect = euclid(&p.unstable().iter().zip(&phi_value).map(|(u, f)| u - f).collect::<Vec<_>>());
            return Ok(ManifoldPoint { p, phi_value, defect, iterations: k, contraction });
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, ratio: contraction })
}

/// Picard iteration `v <- -x + phi_map(x, v)` from `start` (default `-x`).
pub fn solve_trapped_velocity(
    x: &[f64],
    h: &FieldHistory,
    mu: f64,
    opts: &TrappedOptions,
    start: Option<&[f64]>,
) -> Result<ManifoldPoint> {
    if x.len() != h.dim {
        return Err(Error::InvalidInput("position and history dimensions differ".into()));
    }
    solve_with(x, h, mu, h.t_end(), opts, start)
}

/// Tensor grid with `per_axis` points on `[-half_width, half_width]^dim`.
pub fn box_grid(dim: usize, per_axis: usize, half_width: f64) -> Vec<Vec<f64>> {
    let coord = |k: usize| {
        if per_axis == 1 {
            0.0
        } else {
            -half_width + 2.0 * half_width * k as f64 / (per_axis - 1) as f64
        }
    };
    let total = per_axis.pow(dim as u32);
    (0..total)
        .map(|mut i| {
            let mut x = vec![0.0; dim];
            for a in (0..dim).rev() {
                x[a] = coord(i % per_axis);
                i /= per_axis;
            }
            x
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSample {
    pub dim: usize,
    pub points: Vec<ManifoldPoint>,
    /// Positions where the solve failed, with the reason.
    pub failures: Vec<(Vec<f64>, String)>,
}

impl ManifoldSample {
    /// `max |x + v|` over the solved points.
    pub fn sup_unstable(&self) -> f64 {
        self.points.iter().map(|m| m.unstable_size()).fold(0.0, f64::max)
    }

    pub fn max_iterations(&self) -> usize {
        self.points.iter().map(|m| m.iterations).max().unwrap_or(0)
    }

    pub fn max_contraction(&self) -> f64 {
        self.points.iter().map(|m| m.contraction).fold(0.0, f64::max)
    }

    pub fn max_defect(&self) -> f64 {
        self.points.iter().map(|m| m.defect).fold(0.0, f64::max)
    }

    /// Manifold CSV: `x1,..,xn,v1,..,vn,phi1,..,phin,defect,iters`.
    pub fn to_csv(&self) -> String {
        let n = self.dim;
        let cols: Vec<String> = ["x", "v", "phi"]
            .iter()
            .flat_map(|p| (1..=n).map(move |i| format!("{p}{i}")))
            .chain(["defect".to_string(), "iters".to_string()])
            .collect();
        let mut out = cols.join(",");
        out.push('\n');
        for m in &self.points {
            let vals: Vec<String> =
                m.p.x.iter().chain(&m.p.v).chain(&m.phi_value).chain([&m.defect]).map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{},{}", vals.join(","), m.iterations);
        }
        out
    }
}

/// Solves at every position, in parallel; failures are collected, not fatal.
pub fn sample_manifold(xs: &[Vec<f64>], h: &FieldHistory, mu: f64, opts: &TrappedOptions) -> ManifoldSample {
    let results: Vec<Result<ManifoldPoint>> =
        xs.par_iter().map(|x| solve_trapped_velocity(x, h, mu, opts, None)).collect();
    let mut sample = ManifoldSample { dim: h.dim, points: Vec::new(), failures: Vec::new() };
    for (x, r) in xs.iter().zip(results) {
        match r {
            Ok(m) => sample.points.push(m),
            Err(e) => sample.failures.push((x.clone(), e.to_string())),
        }
    }
    sample
}

/// Flows `m.p` forward by `dt_shift` and returns its defect against the
/// history seen from time `dt_shift` on.
pub fn invariance_check(m: &ManifoldPoint, h: &FieldHistory, mu: f64, opts: &TrappedOptions, dt_shift: f64) -> Result<f64> {
    if !(dt_shift >= 0.0 && dt_shift <= h.t_end() / 4.0) {
        return Err(Error::InvalidInput(format!("dt_shift {dt_shift} outside [0, T/4]")));
    }
    let mut c = Characteristic::new(&m.p, 0.0, mu, h, None)?;
    for (t, step) in step_schedule(0.0, dt_shift, opts.dt) {
        c.t = t;
        c.step(step)?;
    }
    let q = c.point();
    let shifted = TimeShifted { inner: h, shift: dt_shift };
    let phi = phi_map(&q, &shifted, mu, h.t_end() - dt_shift, opts.dt)?;
    Ok(euclid(&q.unstable().iter().zip(&phi).map(|(u, f)| u - f).collect::<Vec<_>>()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Escape {
    pub time: f64,
    /// Slope of `log |(X, V)|` over the last e-fold before escape.
    pub slope: f64,
}

/// Perturbs `v_1` by `delta` and integrates until `|(X, V)| > escape_radius`.
pub fn escape_test(m: &ManifoldPoint, delta: f64, h: &FieldHistory, mu: f64, opts: &TrappedOptions) -> Result<Escape> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput("delta must be positive".into()));
    }
    let mut p = m.p.clone();
    p.v[0] += delta;
    let mut c = Characteristic::new(&p, 0.0, mu, h, None)?;
    let mut times = vec![0.0];
    let mut norms = vec![c.norm()];
    for (t, step) in step_schedule(0.0, opts.escape_horizon, opts.dt) {
        c.t = t;
        c.step(step)?;
        let r = c.norm();
        times.push(c.t);
        norms.push(r);
        if r > opts.escape_radius {
            let k = norms.len() - 1;
            let (l0, l1) = (norms[k - 1].ln(), r.ln());
            let target = opts.escape_radius.ln();
            let time = times[k - 1] + (times[k] - times[k - 1]) * (target - l0) / (l1 - l0);
            let from = norms.iter().rposition(|&v| v < opts.escape_radius / std::f64::consts::E).unwrap_or(0);
            let series = DecaySeries::new(times[from..].to_vec(), norms[from..].to_vec())?;
            let fit = decay_fit(&series, times[from], times[k])?;
            return Ok(Escape { time, slope: fit.slope });
        }
    }
    Err(Error::DidNotEscape(opts.escape_horizon))
}

/// Behaviour of a trapped characteristic over the recorded horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Excursion {
    /// `|(X, V)(t)|` at every step.
    pub norms: DecaySeries,
    pub max_norm: f64,
    /// `max_t max |dX/d(x, v)| e^-t`.
    pub tangent_growth: f64,
}

impl Excursion {
    /// Whether the norm never increases on `[t_a, t_b]`.
    pub fn decreasing_on(&self, t_a: f64, t_b: f64) -> bool {
        let (_, v) = self.norms.window(t_a, t_b);
        v.windows(2).all(|w| w[1] <= w[0])
    }
}

pub fn trapped_excursion(m: &ManifoldPoint, h: &FieldHistory, mu: f64, opts: &TrappedOptions) -> Result<Excursion> {
    let n = m.p.dim();
    let mut c = Characteristic::new(&m.p, 0.0, mu, h, Some(TangentMap::identity(n)))?;
    let mut norms = DecaySeries { times: vec![0.0], values: vec![c.norm()] };
    let mut growth = 1.0f64;
    for (t, step) in step_schedule(0.0, h.t_end(), opts.dt) {
        c.t = t;
        c.step(step)?;
        norms.push(c.t, c.norm());
        if let Some(j) = &c.tangent {
            growth = growth.max(j.max_position_entry() * (-c.t).exp());
        }
    }
    let max_norm = norms.max();
    Ok(Excursion { norms, max_norm, tangent_growth: growth })
}

/// Frobenius norm of the finite-difference Jacobian of the Picard map in `v`.
pub fn picard_lipschitz(m: &ManifoldPoint, h: &FieldHistory, mu: f64, opts: &TrappedOptions, offset: f64) -> Result<f64> {
    let n = m.p.dim();
    let mut sum = 0.0;
    for j in 0..n {
        let mut plus = m.p.clone();
        let mut minus = m.p.clone();
        plus.v[j] += offset;
        minus.v[j] -= offset;
        let a = evaluate_phi(&plus, h, mu, opts)?;
        let b = evaluate_phi(&minus, h, mu, opts)?;
        sum += a.iter().zip(&b).map(|(x, y)| ((x - y) / (2.0 * offset)).powi(2)).sum::<f64>();
    }
    Ok(sum.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridField;

    fn zero_history(dim: usize) -> FieldHistory {
        let mut h = FieldHistory::new(dim, 16);
        for k in 0..=10 {
            let t = 0.5 * k as f64;
            h.push(t, GridField::zeros(dim, 16, 6.0 * t.exp(), dim), None).unwrap();
        }
        h
    }

    /// Uniform field of size `eps e^-t` along the first axis.
    fn decaying_history(eps: f64) -> FieldHistory {
        let mut h = FieldHistory::new(2, 16);
        for k in 0..=250 {
            let t = 0.02 * k as f64;
            let mut g = GridField::zeros(2, 16, 6.0 * t.exp(), 2);
            for node in 0..g.n_nodes() {
                g.data[2 * node] = eps * (-t).exp();
            }
            h.push(t, g, None).unwrap();
        }
        h
    }

    #[test]
    fn zero_history_gives_the_linear_plane() {
        let h = zero_history(2);
        let opts = TrappedOptions::default();
        let p = PhasePoint::new(vec![0.3, -0.2], vec![0.1, 0.5]).unwrap();
        assert_eq!(evaluate_phi(&p, &h, 1.0, &opts).unwrap(), vec![0.0, 0.0]);
        assert_eq!(psi_defect(&p, &h, 1.0, &opts).unwrap(), p.unstable());
        let m = solve_trapped_velocity(&[0.3, -0.2], &h, 1.0, &opts, None).unwrap();
        assert_eq!(m.p.v, vec![-0.3, 0.2]);
        assert_eq!(m.iterations, 1);
        let sample = sample_manifold(&box_grid(2, 3, 1.0), &h, 1.0, &opts);
        assert!(sample.failures.is_empty());
        assert!(sample.points.iter().all(|m| m.p.x.iter().zip(&m.p.v).all(|(x, v)| *v == -*x)));
        assert_eq!(invariance_check(&m, &h, 1.0, &opts, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn decaying_field_bound() {
        // |phi_map| <= eps int e^-2t = eps / 2
        let eps = 1e-2;
        let h = decaying_history(eps);
        let opts = TrappedOptions::default();
        let p = PhasePoint::new(vec![0.5, 0.5], vec![-0.5, -0.5]).unwrap();
        let phi = evaluate_phi(&p, &h, 1.0, &opts).unwrap();
        let exact = eps / 2.0 * (1.0 - (-10.0f64).exp());
        assert!((phi[0] - exact).abs() < 1e-6 && phi[1] == 0.0, "{phi:?}");
        let far = PhasePoint::new(vec![0.5, 0.0], vec![0.5, 0.0]).unwrap();
        let psi = psi_defect(&far, &h, 1.0, &opts).unwrap();
        assert!(euclid(&psi) > 0.9);
    }

    #[test]
    fn truncation_bound() {
        let eps = 1e-2;
        let h = decaying_history(eps);
        let opts = TrappedOptions::default();
        let p = PhasePoint::new(vec![0.2, 0.1], vec![-0.2, -0.1]).unwrap();
        let full = phi_map(&p, &h, 1.0, 5.0, opts.dt).unwrap();
        let short = phi_map(&p, &h, 1.0, 4.0, opts.dt).unwrap();
        let bound = eps * (-4.0f64).exp() * (-4.0f64).exp();
        assert!(euclid(&[full[0] - short[0], full[1] - short[1]]) <= bound);
    }

    #[test]
    fn solver_on_uniform_decaying_field() {
        let h = decaying_history(1e-2);
        let opts = TrappedOptions::default();
        let m = solve_trapped_velocity(&[0.4, -0.3], &h, 1.0, &opts, None).unwrap();
        assert!(m.defect <= 10.0 * opts.tol && m.iterations <= 25);
        let inv = invariance_check(&m, &h, 1.0, &opts, 1.0).unwrap();
        assert!(inv <= 1e-9, "{inv}");
        assert_eq!(invariance_check(&m, &h, 1.0, &opts, 0.0).unwrap(), m.defect);
        for s in [0.1, -0.1] {
            let start: Vec<f64> = m.p.x.iter().map(|x| -x + s).collect();
            let other = solve_trapped_velocity(&[0.4, -0.3], &h, 1.0, &opts, Some(&start)).unwrap();
            assert!(euclid(&[other.p.v[0] - m.p.v[0], other.p.v[1] - m.p.v[1]]) <= 10.0 * opts.tol);
        }
    }

    #[test]
    fn escape_matches_linear_oracle() {
        let h = zero_history(2);
        let opts = TrappedOptions::default();
        let m = solve_trapped_velocity(&[0.0, 0.0], &h, 1.0, &opts, None).unwrap();
        let e = escape_test(&m, 1e-3, &h, 1.0, &opts).unwrap();
        let want = (10.0 * 2f64.sqrt() / 1e-3).ln();
        assert!((e.time - want).abs() < 1e-3, "{}", e.time);
        assert!((e.slope - 1.0).abs() < 0.05);
        let short = TrappedOptions { escape_horizon: 5.0, ..opts };
        assert!(matches!(escape_test(&m, 1e-3, &h, 1.0, &short), Err(Error::DidNotEscape(_))));
    }

    #[test]
    fn escaping_evaluation_is_reported() {
        let mut h = FieldHistory::new(2, 16);
        for k in 0..=10 {
            let t = 0.5 * k as f64;
            h.push(t, GridField::zeros(2, 16, 2.0 * t.exp(), 2), None).unwrap();
        }
        let p = PhasePoint::new(vec![1.5, 0.0], vec![3.5, 0.0]).unwrap();
        assert!(matches!(evaluate_phi(&p, &h, 1.0, &TrappedOptions::default()), Err(Error::Escaped(t)) if t < 1.0));
    }

    #[test]
    fn excursion_of_trapped_point() {
        let h = decaying_history(1e-2);
        let opts = TrappedOptions::default();
        let m = solve_trapped_velocity(&[0.5, 0.5], &h, 1.0, &opts, None).unwrap();
        let ex = trapped_excursion(&m, &h, 1.0, &opts).unwrap();
        assert!(ex.max_norm <= 2.0 * m.p.norm() + 0.1);
        assert!(ex.decreasing_on(1.0, 4.0));
        assert!(ex.tangent_growth <= 1.0 + 2.0 * 0.1);
        // uniform field: phi_map does not depend on v
        assert!(picard_lipschitz(&m, &h, 1.0, &opts, 1e-4).unwrap() < 1e-9);
    }

    #[test]
    fn csv_header_and_rows() {
        let h = zero_history(3);
        let s = sample_manifold(&box_grid(3, 2, 1.0), &h, 1.0, &TrappedOptions::default());
        let csv = s.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "x1,x2,x3,v1,v2,v3,phi1,phi2,phi3,defect,iters");
        assert_eq!(lines.count(), 8);
        assert!(csv.lines().nth(1).unwrap().ends_with(",1"));
    }

    #[test]
    fn grid_layout() {
        let g = box_grid(2, 9, 1.0);
        assert_eq!(g.len(), 81);
        assert_eq!(g[0], vec![-1.0, -1.0]);
        assert_eq!(g[80], vec![1.0, 1.0]);
        assert_eq!(g[40], vec![0.0, 0.0]);
    }
}
