//! Particle solver: sample, deposit, solve for the force, push.
//!
//! Particles carry constant weights and their tangent maps; the loop records
//! force snapshots into a [`FieldHistory`] and decay diagnostics into a
//! [`DiagnosticsReport`].

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{grid_scale, DecaySeries, PhasePoint, SimConfig};
use crate::dynamics::{step_schedule, TangentMap, JACOBIAN_OFFSET};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::history::FieldHistory;
use crate::linear::InitialData;
use crate::poisson;
use crate::vfalgebra::{self, all_fields, FieldKind, Scope, VectorFieldId};

/// Deposit bandwidth in cell widths.
pub const DEPOSIT_BANDWIDTH: f64 = 1.2;
/// Deposit stencil half-width in cells.
pub const DEPOSIT_RADIUS: usize = 5;
/// Lost-mass fraction that is recorded as a warning.
pub const MASS_WARNING: f64 = 1e-3;
/// Lost-mass fraction that aborts the run.
pub const MASS_ERROR: f64 = 5e-2;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub dim: usize,
    /// `N x dim`, particle-major.
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub weights: Vec<f64>,
    pub tangents: Option<Vec<TangentMap>>,
    /// `N x 2 dim` initial phase points.
    pub origins: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, x: vec![], v: vec![], weights: vec![], tangents: None, origins: vec![] }
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn point(&self, p: usize) -> PhasePoint {
        let n = self.dim;
        PhasePoint { x: self.x[p * n..(p + 1) * n].to_vec(), v: self.v[p * n..(p + 1) * n].to_vec() }
    }

    pub fn origin(&self, p: usize) -> PhasePoint {
        PhasePoint::from_slice(&self.origins[p * 2 * self.dim..(p + 1) * 2 * self.dim])
    }

    /// First `k` particles (tangents included).
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.len());
        let n = self.dim;
        Self {
            dim: n,
            x: self.x[..k * n].to_vec(),
            v: self.v[..k * n].to_vec(),
            weights: self.weights[..k].to_vec(),
            tangents: self.tangents.as_ref().map(|t| t[..k].to_vec()),
            origins: self.origins[..k * 2 * n].to_vec(),
        }
    }
}

/// I.i.d. samples of `f0 / mass` with equal weights `mass / N` and identity
/// tangent maps. Deterministic for a fixed seed.
pub fn sample_initial(f0: &InitialData, count: usize, seed: u64) -> Result<ParticleEnsemble> {
    let n = f0.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profiles: Vec<_> = (0..2 * n).map(|j| f0.profile(j)).collect();
    let mut origins = Vec::with_capacity(count * 2 * n);
    let mut proposals = 0usize;
    for _ in 0..count {
        for p in &profiles {
            let (z, tries) = p.sample(&mut rng);
            proposals += tries;
            origins.push(z);
        }
    }
    if count > 0 {
        let efficiency = (count * 2 * n) as f64 / proposals as f64;
        if efficiency < 0.01 {
            return Err(Error::RejectionEfficiency(efficiency));
        }
    }
    let mut x = Vec::with_capacity(count * n);
    let mut v = Vec::with_capacity(count * n);
    for z in origins.chunks_exact(2 * n) {
        x.extend_from_slice(&z[..n]);
        v.extend_from_slice(&z[n..]);
    }
    let w = if count > 0 { f0.mass() / count as f64 } else { 0.0 };
    Ok(ParticleEnsemble {
        dim: n,
        x,
        v,
        weights: vec![w; count],
        tangents: Some(vec![TangentMap::identity(n); count]),
        origins,
    })
}

/// Normalized 1D kernel weights on the nodes around `x`; returns the first
/// node index (possibly negative) and fills `w` with `2 * DEPOSIT_RADIUS + 1`
/// weights summing to one.
fn kernel_weights_1d(x: f64, g: &GridField, w: &mut [f64; 2 * DEPOSIT_RADIUS + 1]) -> isize {
    let h = g.spacing();
    let u = (x + g.scale) / h;
    let center = u.round() as isize;
    let first = center - DEPOSIT_RADIUS as isize;
    let inv = 1.0 / (2.0 * DEPOSIT_BANDWIDTH * DEPOSIT_BANDWIDTH);
    let mut sum = 0.0;
    for (k, wk) in w.iter_mut().enumerate() {
        let d = (first + k as isize) as f64 - u;
        *wk = (-d * d * inv).exp();
        sum += *wk;
    }
    w.iter_mut().for_each(|a| *a /= sum);
    first
}

/// Adds each particle's kernel (or squared kernel) into `grid`; returns the
/// weight that fell outside the grid. The kernel is a product of 1D weights,
/// so the clipped part factorizes over axes.
fn deposit_chunk(g: &mut GridField, x: &[f64], weights: &[f64], squared: bool) -> f64 {
    const K: usize = 2 * DEPOSIT_RADIUS + 1;
    let dim = g.dim;
    let m = g.nodes_per_axis() as isize;
    let inv_vol = 1.0 / g.cell_volume();
    let mut lost = 0.0;
    let mut w = [[0.0; K]; 3];
    let mut first = [0isize; 3];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for (p, &wp) in x.chunks_exact(dim).zip(weights) {
        if wp == 0.0 {
            continue;
        }
        let mut kept = 1.0;
        for a in 0..dim {
            first[a] = kernel_weights_1d(p[a], g, &mut w[a]);
            lo[a] = (-first[a]).clamp(0, K as isize) as usize;
            hi[a] = (m - first[a]).clamp(0, K as isize) as usize;
            kept *= w[a][lo[a]..hi[a].max(lo[a])].iter().sum::<f64>();
            if squared {
                w[a].iter_mut().for_each(|v| *v *= *v);
            }
        }
        lost += wp * (1.0 - kept).max(0.0);
        if (0..dim).any(|a| lo[a] >= hi[a]) {
            continue;
        }
        let amp = if squared { wp * wp * inv_vol * inv_vol } else { wp * inv_vol };
        if dim == 2 {
            for i in lo[0]..hi[0] {
                let start = ((first[0] + i as isize) * m + first[1] + lo[1] as isize) as usize;
                let wi = amp * w[0][i];
                let dst = &mut g.data[start..start + hi[1] - lo[1]];
                for (d, wj) in dst.iter_mut().zip(&w[1][lo[1]..hi[1]]) {
                    *d += wi * wj;
                }
            }
        } else {
            for i in lo[0]..hi[0] {
                let wi = amp * w[0][i];
                for j in lo[1]..hi[1] {
                    let row = ((first[0] + i as isize) * m + first[1] + j as isize) * m;
                    let start = (row + first[2] + lo[2] as isize) as usize;
                    let wij = wi * w[1][j];
                    let dst = &mut g.data[start..start + hi[2] - lo[2]];
                    for (d, wl) in dst.iter_mut().zip(&w[2][lo[2]..hi[2]]) {
                        *d += wij * wl;
                    }
                }
            }
        }
    }
    lost
}

fn deposit_generic(e: &ParticleEnsemble, t: f64, cfg: &SimConfig, squared: bool) -> (GridField, f64) {
    let dim = e.dim;
    let scale = grid_scale(t, cfg);
    let template = GridField::zeros(dim, cfg.grid_cells, scale, 1);
    let parts: Vec<(GridField, f64)> = e
        .x
        .par_chunks(CHUNK * dim)
        .zip(e.weights.par_chunks(CHUNK))
        .map(|(x, w)| {
            let mut g = template.clone();
            let lost = deposit_chunk(&mut g, x, w, squared);
            (g, lost)
        })
        .collect();
    let mut out = template;
    let mut lost = 0.0;
    for (g, l) in parts {
        out.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        lost += l;
    }
    (out, lost)
}

/// Kernel density estimate on the time-`t` grid and the lost-mass fraction.
pub fn deposit_density_with_loss(e: &ParticleEnsemble, t: f64, cfg: &SimConfig) -> Result<(GridField, f64)> {
    let (g, lost) = deposit_generic(e, t, cfg, false);
    let total = e.total_weight();
    let fraction = if total > 0.0 { lost / total } else { 0.0 };
    if fraction > MASS_ERROR {
        return Err(Error::MassOutsideGrid { t, fraction });
    }
    Ok((g, fraction))
}

/// Gaussian-kernel density on the time-`t` grid (bandwidth 1.2 cells, each
/// kernel normalized to its particle weight).
pub fn deposit_density(e: &ParticleEnsemble, t: f64, cfg: &SimConfig) -> Result<GridField> {
    deposit_density_with_loss(e, t, cfg).map(|(g, _)| g)
}

/// Monte Carlo variance of [`deposit_density`] at each node.
pub fn deposit_density_variance(e: &ParticleEnsemble, t: f64, cfg: &SimConfig) -> Result<GridField> {
    let (mean, _) = deposit_density_with_loss(e, t, cfg)?;
    let (mut second, _) = deposit_generic(e, t, cfg, true);
    let n = e.len().max(1) as f64;
    for (s, m) in second.data.iter_mut().zip(&mean.data) {
        *s = (*s - m * m / n).max(0.0);
    }
    Ok(second)
}

/// Softening for the grid solve: the configured value, or one cell width.
pub fn effective_softening(rho: &GridField, cfg: &SimConfig) -> f64 {
    if cfg.softening > 0.0 {
        cfg.softening
    } else {
        poisson::default_softening(rho)
    }
}

/// `max_x (e^t + |x|)^n rho(x)`.
pub fn weighted_sup_density(rho: &GridField, t: f64, n: usize) -> f64 {
    vfalgebra::weighted_sup(rho, t, n as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Least-squares line through `(t, log value)` over `[t_a, t_b]`.
pub fn decay_fit(s: &DecaySeries, t_a: f64, t_b: f64) -> Result<DecayFit> {
    let (t, v) = s.window(t_a, t_b);
    if t.len() < 5 {
        return Err(Error::InvalidInput(format!("{} samples in window, need at least 5", t.len())));
    }
    if v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidInput("non-positive value in fit window".into()));
    }
    let y: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    let m = t.len() as f64;
    let tm = t.iter().sum::<f64>() / m;
    let ym = y.iter().sum::<f64>() / m;
    let sxx: f64 = t.iter().map(|a| (a - tm).powi(2)).sum();
    let sxy: f64 = t.iter().zip(&y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let ssr: f64 = t.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let stderr = (ssr / (m - 2.0) / sxx).sqrt();
    Ok(DecayFit { slope, intercept, stderr, samples: t.len() })
}

/// Coefficient vector of the microscopic field `z` at phase point `(x, v)`.
pub fn field_vector(z: VectorFieldId, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
    let n = x.len();
    out[..2 * n].iter_mut().for_each(|o| *o = 0.0);
    match z.kind {
        FieldKind::Unstable(i) => {
            out[i] = t.exp();
            out[n + i] = t.exp();
        }
        FieldKind::Stable(i) => {
            out[i] = (-t).exp();
            out[n + i] = -(-t).exp();
        }
        FieldKind::Scaling => {
            out[..n].copy_from_slice(x);
            out[n..2 * n].copy_from_slice(v);
        }
        FieldKind::Rotation(i, j) => {
            out[j] = x[i];
            out[i] = -x[j];
            out[n + j] = v[i];
            out[n + i] = -v[j];
        }
    }
}

/// Monte Carlo estimates of `||Z f(t)||_{L^1}` with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyEstimate {
    pub fields: Vec<VectorFieldId>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub skipped: usize,
}

/// `||Z f(t)||_1 ~ (mass/N) sum_p |(J_p^-1 Z(t, z_p)) . grad log f0(z0_p)|` for
/// every microscopic field, using `f(t) = f0 o (flow)^-1`.
pub fn estimate_energy_first_order(e: &ParticleEnsemble, f0: &InitialData, t: f64) -> Result<EnergyEstimate> {
    let tangents = e
        .tangents
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("ensemble carries no tangent maps".into()))?;
    let n = e.dim;
    let m = 2 * n;
    let fields = all_fields(n, Scope::Microscopic);
    let k = fields.len();
    let rows: Vec<Option<Vec<f64>>> = (0..e.len())
        .into_par_iter()
        .map(|p| {
            let z0 = &e.origins[p * m..(p + 1) * m];
            let mut logg = [0.0; 6];
            let mut shape = 1.0;
            for j in 0..m {
                let (val, d1, _) = f0.profile(j).eval3(z0[j]);
                shape *= val;
                logg[j] = if val > 0.0 { d1 / val } else { 0.0 };
            }
            if !(shape >= 1e-300) {
                return None;
            }
            let inv = tangents[p].inverse()?;
            let x = &e.x[p * n..(p + 1) * n];
            let v = &e.v[p * n..(p + 1) * n];
            let mut zv = [0.0; 6];
            let mut out = Vec::with_capacity(k);
            for &z in &fields {
                field_vector(z, t, x, v, &mut zv);
                let mut acc = 0.0;
                for r in 0..m {
                    let w: f64 = (0..m).map(|c| inv[(r, c)] * zv[c]).sum();
                    acc += w * logg[r];
                }
                out.push(acc.abs());
            }
            Some(out)
        })
        .collect();
    let mut sums = vec![0.0; k];
    let mut sq = vec![0.0; k];
    let mut skipped = 0;
    for r in &rows {
        match r {
            Some(vals) => {
                for (i, v) in vals.iter().enumerate() {
                    sums[i] += v;
                    sq[i] += v * v;
                }
            }
            None => skipped += 1,
        }
    }
    let count = e.len().max(1) as f64;
    let mass = f0.mass();
    let values: Vec<f64> = sums.iter().map(|s| mass * s / count).collect();
    let stderr = sums
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let mean = s / count;
            let var = (q / count - mean * mean).max(0.0) * count / (count - 1.0).max(1.0);
            mass * (var / count).sqrt()
        })
        .collect();
    Ok(EnergyEstimate { fields, values, stderr, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub dim: usize,
    pub sup_force: DecaySeries,
    pub weighted_sup_rho: DecaySeries,
    pub mass: DecaySeries,
    /// Lost-mass fraction at each snapshot.
    pub lost_mass: DecaySeries,
    pub energy_fields: Vec<VectorFieldId>,
    pub energies: Vec<DecaySeries>,
    pub energy_stderr: Vec<DecaySeries>,
    pub skipped_particles: usize,
    pub warnings: Vec<String>,
}

impl DiagnosticsReport {
    fn new(dim: usize) -> Self {
        let fields = all_fields(dim, Scope::Microscopic);
        let empty = || DecaySeries { times: vec![], values: vec![] };
        Self {
            dim,
            sup_force: empty(),
            weighted_sup_rho: empty(),
            mass: empty(),
            lost_mass: empty(),
            energies: fields.iter().map(|_| empty()).collect(),
            energy_stderr: fields.iter().map(|_| empty()).collect(),
            energy_fields: fields,
            skipped_particles: 0,
            warnings: Vec::new(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.mass.times
    }

    /// `sum_Z ||Z f||` at each snapshot.
    pub fn total_energy(&self) -> DecaySeries {
        let mut out = DecaySeries { times: self.times().to_vec(), values: vec![0.0; self.times().len()] };
        for s in &self.energies {
            out.values.iter_mut().zip(&s.values).for_each(|(o, v)| *o += v);
        }
        out
    }

    pub fn force_fit(&self, t_a: f64, t_b: f64) -> Result<DecayFit> {
        decay_fit(&self.sup_force, t_a, t_b)
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("t,sup_force,weighted_sup_rho,mass");
        for z in &self.energy_fields {
            let _ = write!(h, ",E_{z}");
        }
        h
    }

    /// Diagnostics CSV, one row per snapshot, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for k in 0..self.times().len() {
            let _ = write!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.mass.times[k], self.sup_force.values[k], self.weighted_sup_rho.values[k], self.mass.values[k]
            );
            for s in &self.energies {
                let _ = write!(out, ",{:.16e}", s.values[k]);
            }
            out.push('\n');
        }
        out
    }
}

/// How the particles are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldMode {
    /// Force from the deposited density at every step.
    SelfConsistent,
    /// No force: the linear flow, with the same diagnostics.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub mode: FieldMode,
    pub keep_potentials: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { mode: FieldMode::SelfConsistent, keep_potentials: false }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub history: FieldHistory,
    pub report: DiagnosticsReport,
    pub ensemble: ParticleEnsemble,
}

/// The initial data used for a config: isotropic unit gaussian of mass `eps`.
pub fn default_initial_data(cfg: &SimConfig) -> InitialData {
    InitialData::standard_gaussian(cfg.dim, cfg.eps)
}

pub fn run_simulation(cfg: &SimConfig, f0: &InitialData) -> Result<SimulationOutput> {
    run_simulation_with(cfg, f0, RunOptions::default())
}

struct FieldState {
    force: GridField,
    potential: Option<GridField>,
    rho: GridField,
    lost: f64,
}

fn solve_fields(e: &ParticleEnsemble, t: f64, cfg: &SimConfig, opts: RunOptions) -> Result<FieldState> {
    let (rho, lost) = deposit_density_with_loss(e, t, cfg)?;
    let soft = effective_softening(&rho, cfg);
    let force = match opts.mode {
        FieldMode::SelfConsistent => poisson::grid_force_with_softening(&rho, soft)?,
        FieldMode::Linear => GridField::zeros(rho.dim, rho.cells, rho.scale, rho.dim),
    };
    let potential = if opts.keep_potentials {
        Some(match opts.mode {
            FieldMode::SelfConsistent => poisson::grid_potential_with_softening(&rho, soft)?,
            FieldMode::Linear => GridField::zeros(rho.dim, rho.cells, rho.scale, 1),
        })
    } else {
        None
    };
    Ok(FieldState { force, potential, rho, lost })
}

/// Kick `v -= tau mu F(x)` with the force interpolated from `grid`, updating
/// tangent maps with the finite-difference force Jacobian.
fn kick(e: &mut ParticleEnsemble, grid: &GridField, tau: f64, mu: f64, t: f64) -> Result<()> {
    let n = e.dim;
    let k = tau * mu;
    let delta = JACOBIAN_OFFSET * grid.scale;
    let bad = std::sync::Mutex::new(None);
    let process = |x: &[f64], v: &mut [f64], tangent: Option<&mut TangentMap>| {
        let mut f = [0.0; 3];
        grid.interpolate(x, &mut f);
        if f[..n].iter().any(|c| !c.is_finite()) {
            *bad.lock().expect("lock") = Some(x.to_vec());
            return;
        }
        for a in 0..n {
            v[a] -= k * f[a];
        }
        if let Some(j) = tangent {
            let mut jac = [0.0; 9];
            let mut xp = [0.0; 3];
            let mut fp = [0.0; 3];
            let mut fm = [0.0; 3];
            xp[..n].copy_from_slice(x);
            for c in 0..n {
                xp[c] = x[c] + delta;
                grid.interpolate(&xp, &mut fp);
                xp[c] = x[c] - delta;
                grid.interpolate(&xp, &mut fm);
                xp[c] = x[c];
                for r in 0..n {
                    jac[r * n + c] = -k * (fp[r] - fm[r]) / (2.0 * delta);
                }
            }
            j.kick(&jac[..n * n]);
        }
    };
    match e.tangents.as_mut() {
        Some(ts) => e
            .x
            .par_chunks(n)
            .zip(e.v.par_chunks_mut(n))
            .zip(ts.par_iter_mut())
            .for_each(|((x, v), j)| process(x, v, Some(j))),
        None => e.x.par_chunks(n).zip(e.v.par_chunks_mut(n)).for_each(|(x, v)| process(x, v, None)),
    }
    if let Some(x) = bad.into_inner().expect("lock") {
        return Err(Error::NonFiniteForce { t, x });
    }
    Ok(())
}

fn drift(e: &mut ParticleEnsemble, h: f64) {
    let (s, c) = (h.sinh(), h.cosh());
    e.x.par_iter_mut().zip(e.v.par_iter_mut()).for_each(|(x, v)| {
        let (x0, v0) = (*x, *v);
        *x = x0 * c + v0 * s;
        *v = x0 * s + v0 * c;
    });
    if let Some(ts) = e.tangents.as_mut() {
        ts.par_iter_mut().for_each(|j| j.drift(h));
    }
}

fn record(
    report: &mut DiagnosticsReport,
    history: &mut FieldHistory,
    state: &FieldState,
    e: &ParticleEnsemble,
    f0: &InitialData,
    t: f64,
) -> Result<()> {
    let sup_force = state.force.sup_norm();
    let weighted = weighted_sup_density(&state.rho, t, e.dim);
    let mass = e.total_weight();
    let energy = estimate_energy_first_order(e, f0, t)?;
    let values = [sup_force, weighted, mass];
    if values.iter().chain(&energy.values).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDiagnostic(t));
    }
    report.sup_force.push(t, sup_force);
    report.weighted_sup_rho.push(t, weighted);
    report.mass.push(t, mass);
    report.lost_mass.push(t, state.lost);
    for (k, (v, s)) in energy.values.iter().zip(&energy.stderr).enumerate() {
        report.energies[k].push(t, *v);
        report.energy_stderr[k].push(t, *s);
    }
    report.skipped_particles = report.skipped_particles.max(energy.skipped);
    if state.lost > MASS_WARNING {
        report.warnings.push(format!("t={t:.4}: {:.3}% of mass outside the grid", 100.0 * state.lost));
    }
    history.push(t, state.force.clone(), state.potential.clone())
}

/// Runs the particle solver from `t = 0` to `cfg.t_max`, recording a snapshot
/// every `cfg.snapshot_stride` steps and at the final time.
pub fn run_simulation_with(cfg: &SimConfig, f0: &InitialData, opts: RunOptions) -> Result<SimulationOutput> {
    cfg.validate()?;
    if f0.dim() != cfg.dim {
        return Err(Error::InvalidInput("initial data dimension differs from the config".into()));
    }
    let mut e = sample_initial(f0, cfg.n_particles, cfg.seed)?;
    let mut report = DiagnosticsReport::new(cfg.dim);
    let mut history = FieldHistory::new(cfg.dim, cfg.grid_cells);
    let mut state = solve_fields(&e, 0.0, cfg, opts)?;
    record(&mut report, &mut history, &state, &e, f0, 0.0)?;
    let schedule = step_schedule(0.0, cfg.t_max, cfg.dt);
    // Leapfrog: the closing half kick of one step and the opening half kick of
    // the next use the same field, so they are applied together unless the
    // state is recorded in between.
    let mut pending = schedule.first().map_or(0.0, |s| 0.5 * s.1);
    for (k, &(t, h)) in schedule.iter().enumerate() {
        kick(&mut e, &state.force, pending, cfg.mu, t)?;
        drift(&mut e, h);
        let last = k + 1 == schedule.len();
        let t_next = if last { cfg.t_max } else { t + h };
        state = solve_fields(&e, t_next, cfg, opts)?;
        let next_half = schedule.get(k + 1).map_or(0.0, |s| 0.5 * s.1);
        if (k + 1) % cfg.snapshot_stride == 0 || last {
            kick(&mut e, &state.force, 0.5 * h, cfg.mu, t_next)?;
            record(&mut report, &mut history, &state, &e, f0, t_next)?;
            pending = next_half;
        } else {
            pending = 0.5 * h + next_half;
        }
    }
    Ok(SimulationOutput { history, report, ensemble: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{self, InitialKind};
    use std::f64::consts::PI;

    fn small_cfg() -> SimConfig {
        SimConfig { n_particles: 4000, t_max: 1.0, dt: 0.02, grid_cells: 32, snapshot_stride: 5, ..Default::default() }
    }

    #[test]
    fn sampling_is_deterministic_and_weighted() {
        let f0 = InitialData::standard_gaussian(2, 0.01);
        let a = sample_initial(&f0, 1000, 7).unwrap();
        let b = sample_initial(&f0, 1000, 7).unwrap();
        assert_eq!(a, b);
        assert!((a.total_weight() - 0.01).abs() < 1e-15);
        let c = sample_initial(&f0, 1000, 8).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn gaussian_sample_moments() {
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let n = 20000;
        let e = sample_initial(&f0, n, 3).unwrap();
        let tol = 5.0 / (n as f64).sqrt();
        for j in 0..4 {
            let vals: Vec<f64> = e.origins.chunks(4).map(|z| z[j]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < tol && (var - 1.0).abs() < 2.0 * tol, "{j}: {mean} {var}");
        }
    }

    #[test]
    fn bump_sampling_stays_in_support() {
        let f0 = InitialData::new(InitialKind::Product, 1.0, PhasePoint::origin(3), 0.5, 0.4).unwrap();
        let e = sample_initial(&f0, 2000, 1).unwrap();
        assert!(e.v.iter().all(|v| v.abs() < 1.2));
    }

    #[test]
    fn single_particle_deposit() {
        let cfg = SimConfig { grid_cells: 32, ..Default::default() };
        let e = ParticleEnsemble {
            dim: 2,
            x: vec![0.3, -0.2],
            v: vec![0.0, 0.0],
            weights: vec![0.7],
            tangents: None,
            origins: vec![0.3, -0.2, 0.0, 0.0],
        };
        let g = deposit_density(&e, 0.0, &cfg).unwrap();
        assert!((g.integral()[0] - 0.7).abs() < 1e-12);
        let empty = ParticleEnsemble::empty(2);
        assert!(deposit_density(&empty, 0.0, &cfg).unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deposit_mass_and_loss() {
        let cfg = small_cfg();
        let f0 = InitialData::standard_gaussian(2, 0.5);
        let e = sample_initial(&f0, 5000, 1).unwrap();
        let (g, lost) = deposit_density_with_loss(&e, 0.0, &cfg).unwrap();
        assert!((g.integral()[0] - 0.5).abs() < 1e-10 && lost < 1e-12);
        let far = SimConfig { grid_radius0: 1.0, ..cfg };
        assert!(matches!(deposit_density(&e, 0.0, &far), Err(Error::MassOutsideGrid { .. })));
    }

    #[test]
    fn weighted_sup_of_gaussian() {
        // max_r (1 + r)^2 e^{-r^2/2} / (2 pi) is attained where r (1 + r) = 2, r = 1.
        let g = GridField::from_fn(2, 400, 4.0, |x| (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp() / (2.0 * PI));
        let want = 4.0 * (-0.5f64).exp() / (2.0 * PI);
        assert!((weighted_sup_density(&g, 0.0, 2) - want).abs() < 1e-4 * want);
        assert_eq!(weighted_sup_density(&GridField::zeros(2, 16, 1.0, 1), 1.0, 2), 0.0);
    }

    #[test]
    fn decay_fit_examples() {
        let t: Vec<f64> = (0..20).map(|k| k as f64 * 0.2).collect();
        let s = DecaySeries::new(t.clone(), t.iter().map(|x| 3.0 * (-2.0 * x).exp()).collect()).unwrap();
        let fit = decay_fit(&s, 0.0, 4.0).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-12 && (fit.intercept - 3f64.ln()).abs() < 1e-12);

        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy = DecaySeries::new(
            t.clone(),
            t.iter().map(|x| (-2.0 * x).exp() * (1.0 + 0.01 * rng.random_range(-1.0..1.0))).collect(),
        )
        .unwrap();
        assert!((decay_fit(&noisy, 0.0, 4.0).unwrap().slope + 2.0).abs() < 0.05);
        assert!(decay_fit(&s, 0.0, 0.5).is_err());
        let bad = DecaySeries::new(t.clone(), vec![0.0; 20]).unwrap();
        assert!(decay_fit(&bad, 0.0, 4.0).is_err());
    }

    #[test]
    fn zero_mass_run_is_the_linear_flow() {
        let cfg = small_cfg();
        let f0 = InitialData::standard_gaussian(2, 0.0);
        let out = run_simulation(&cfg, &f0).unwrap();
        assert!(out.history.forces.iter().all(|g| g.data.iter().all(|v| *v == 0.0)));
        for p in (0..out.ensemble.len()).step_by(97) {
            let exact = linear::linear_flow(cfg.t_max, &out.ensemble.origin(p)).unwrap();
            let got = out.ensemble.point(p);
            for (a, b) in got.to_vec().iter().zip(exact.to_vec()) {
                assert!((a - b).abs() <= 1e-12 * exact.norm().max(1.0));
            }
        }
    }

    #[test]
    fn mass_is_exactly_conserved() {
        let cfg = small_cfg();
        let out = run_simulation(&cfg, &InitialData::standard_gaussian(2, 0.01)).unwrap();
        let m0 = out.report.mass.values[0];
        assert!(out.report.mass.values.iter().all(|m| *m == m0));
        assert_eq!(out.history.times.first(), Some(&0.0));
        assert!((out.history.t_end() - cfg.t_max).abs() < 1e-12);
        assert_eq!(out.history.len(), 11);
    }

    #[test]
    fn linear_energies_are_constant() {
        let cfg = small_cfg();
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let opts = RunOptions { mode: FieldMode::Linear, keep_potentials: false };
        let out = run_simulation_with(&cfg, &f0, opts).unwrap();
        let scale = out.report.energies.iter().map(|s| s.values[0]).fold(0.0, f64::max);
        for s in &out.report.energies {
            let v0 = s.values[0];
            assert!(s.values.iter().all(|v| (v - v0).abs() <= 1e-9 * scale), "{s:?}");
        }
    }

    #[test]
    fn initial_energies_match_closed_forms() {
        // For a gaussian, U_i f0 / f0 and S_i f0 / f0 are centered normals with
        // variance 1/wx^2 + 1/wv^2, so E|.| = sqrt(2/pi) * sqrt(1/wx^2 + 1/wv^2).
        let center = PhasePoint::new(vec![0.3, 0.0], vec![0.0, -0.2]).unwrap();
        let f0 = InitialData::new(InitialKind::Gaussian, 1.0, center, 1.0, 0.8).unwrap();
        let e = sample_initial(&f0, 20000, 5).unwrap();
        let est = estimate_energy_first_order(&e, &f0, 0.0).unwrap();
        let want = (2.0 / PI).sqrt() * (1.0 + 1.0 / 0.64f64).sqrt();
        for k in 0..4 {
            assert!((est.values[k] - want).abs() <= 4.0 * est.stderr[k], "{}: {} vs {want}", est.fields[k], est.values[k]);
        }
        // L f0 / f0 = -|z|^2 for the unit gaussian, whose mean is 2n; R12 f0 = 0.
        let g = InitialData::standard_gaussian(2, 1.0);
        let e = sample_initial(&g, 20000, 6).unwrap();
        let est = estimate_energy_first_order(&e, &g, 0.0).unwrap();
        assert!((est.values[4] - 4.0).abs() <= 4.0 * est.stderr[4]);
        assert!(est.values[5] < 1e-12);
        assert_eq!(est.skipped, 0);
    }

    #[test]
    fn csv_layout() {
        let cfg = SimConfig { t_max: 0.1, ..small_cfg() };
        let out = run_simulation(&cfg, &InitialData::standard_gaussian(2, 0.01)).unwrap();
        let csv = out.report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,sup_force,weighted_sup_rho,mass,E_U1,E_U2,E_S1,E_S2,E_L,E_R12");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 10);
        assert_eq!(row[0], "0.0000000000000000e0");
        assert!(row[3].parse::<f64>().unwrap() == out.report.mass.values[0]);
    }

    #[test]
    fn attraction_and_repulsion_bracket_the_linear_flow() {
        let cfg = SimConfig { eps: 0.1, ..small_cfg() };
        let f0 = InitialData::standard_gaussian(2, 0.1);
        let radial = |mu: f64, mode: FieldMode| {
            let opts = RunOptions { mode, keep_potentials: false };
            let out = run_simulation_with(&SimConfig { mu, ..cfg.clone() }, &f0, opts).unwrap();
            let e = &out.ensemble;
            e.x.iter().zip(&e.v).map(|(x, v)| x * v).sum::<f64>() / e.len() as f64
        };
        let a = run_simulation(&SimConfig { t_max: 0.1, ..cfg.clone() }, &f0).unwrap();
        let b = run_simulation(&SimConfig { t_max: 0.1, mu: -1.0, ..cfg.clone() }, &f0).unwrap();
        // the stored gradient is identical, so the acceleration -mu grad phi flips exactly
        assert_eq!(a.history.forces[0], b.history.forces[0]);
        let attract = radial(1.0, FieldMode::SelfConsistent);
        let free = radial(1.0, FieldMode::Linear);
        let repel = radial(-1.0, FieldMode::SelfConsistent);
        assert!(attract < free && free < repel, "{attract} {free} {repel}");
    }

    #[test]
    fn free_deposit_matches_smoothed_linear_density() {
        // x(t) = x cosh t + v sinh t has variance cosh 2t per axis; the kernel adds b^2.
        let cfg = SimConfig { n_particles: 40000, t_max: 1.0, grid_cells: 32, grid_radius0: 3.0, ..small_cfg() };
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let opts = RunOptions { mode: FieldMode::Linear, keep_potentials: false };
        let out = run_simulation_with(&cfg, &f0, opts).unwrap();
        let t = cfg.t_max;
        let rho = deposit_density(&out.ensemble, t, &cfg).unwrap();
        let b = DEPOSIT_BANDWIDTH * rho.spacing();
        let s0 = (2.0 * t).cosh();
        let s2 = s0 + b * b;
        // K_b^2 = K_{b/sqrt2} / (4 pi b^2) gives the single-sample second moment.
        let s3 = s0 + b * b / 2.0;
        let gauss = |r2: f64, s: f64| (-r2 / (2.0 * s)).exp() / (2.0 * PI * s);
        // Neighbouring nodes share particles, so test the mean squared z-score over
        // the bulk (where the count per kernel is large) rather than per node.
        let peak = gauss(0.0, s2);
        let mut x = [0.0; 3];
        let (mut sum_z2, mut count, mut worst) = (0.0, 0usize, 0.0f64);
        for node in 0..rho.n_nodes() {
            rho.node_position(node, &mut x);
            let r2 = x[0] * x[0] + x[1] * x[1];
            let want = gauss(r2, s2);
            if want < 1e-2 * peak {
                continue;
            }
            let second = gauss(r2, s3) / (4.0 * PI * b * b);
            let se = ((second - want * want) / cfg.n_particles as f64).sqrt();
            let z = (rho.data[node] - want) / se;
            sum_z2 += z * z;
            count += 1;
            worst = worst.max(z.abs());
        }
        let mean_z2 = sum_z2 / count as f64;
        assert!(mean_z2 < 2.0 && worst < 5.0, "mean z^2 {mean_z2}, worst {worst}");
    }
}
