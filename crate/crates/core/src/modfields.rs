//! First-order modified-field coefficients in two dimensions.
//!
//! For each non-stable base field `Z` and axis `k` the coefficient solves
//! `d/dt c(t, X(t)) = -(mu/2) e^t d_k (Z phi + c_Z phi)(t, X(t))`, `c(0) = 0`,
//! along the characteristics, where `c_Z = -2` for the scaling field and `0`
//! otherwise. Sources are built from the recorded potential snapshots and
//! integrated with the trapezoid rule along re-integrated characteristics.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::domain::{PhasePoint, SimConfig};
use crate::dynamics::{step_schedule, Characteristic, TangentMap};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::history::FieldHistory;
use crate::kinetic::{DiagnosticsReport, ParticleEnsemble};
use crate::vfalgebra::{apply_macroscopic, non_stable_fields, FieldKind, Scope, VectorFieldId};

/// Offset of the gradient bundle members, relative to the grid half-width.
pub const BUNDLE_OFFSET: f64 = 1e-4;

/// Constant added to `Z phi` in the source: `-2` for the scaling field.
pub fn source_shift(z: VectorFieldId) -> f64 {
    if z.kind == FieldKind::Scaling {
        -2.0
    } else {
        0.0
    }
}

/// `-(mu/2) e^t d_k (Z phi + c_Z phi)` on the grid of `phi`.
pub fn modified_source(z: VectorFieldId, phi: &GridField, t: f64, k: usize, mu: f64) -> Result<GridField> {
    if z.kind.is_stable() {
        return Err(Error::InvalidInput(format!("{z} is stable; its coefficients vanish")));
    }
    if k >= phi.dim {
        return Err(Error::InvalidInput(format!("axis {k} out of range")));
    }
    let mut zphi = apply_macroscopic(z.with_scope(Scope::Macroscopic), phi, t)?;
    let c = source_shift(z);
    if c != 0.0 {
        zphi.data.iter_mut().zip(&phi.data).for_each(|(a, p)| *a += c * p);
    }
    Ok(zphi.derivative(k).scaled(-0.5 * mu * t.exp()))
}

/// Coefficient series for a set of tracked particles.
#[derive(Debug, Clone, PartialEq)]
pub struct ModCoefficients {
    pub dim: usize,
    pub fields: Vec<VectorFieldId>,
    pub times: Vec<f64>,
    pub particle_ids: Vec<usize>,
    /// `values[s][p][i * dim + k]`.
    pub values: Vec<Vec<Vec<f64>>>,
    /// Euclidean norm of the phase-space gradient, same layout as `values`.
    pub gradients: Vec<Vec<Vec<f64>>>,
}

impl ModCoefficients {
    fn slots(&self) -> usize {
        self.fields.len() * self.dim
    }

    /// `max_p |c|` at each time over the base fields selected by `keep`.
    pub fn max_abs_series(&self, keep: impl Fn(VectorFieldId) -> bool) -> Vec<f64> {
        let dim = self.dim;
        self.values
            .iter()
            .map(|snap| {
                snap.iter()
                    .flat_map(|row| {
                        row.iter().enumerate().filter(|(c, _)| keep(self.fields[c / dim])).map(|(_, v)| v.abs())
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Coefficients CSV: `t,particle_id,base_field,k,phi_value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,particle_id,base_field,k,phi_value\n");
        for (s, t) in self.times.iter().enumerate() {
            for (p, id) in self.particle_ids.iter().enumerate() {
                for c in 0..self.slots() {
                    let (i, k) = (c / self.dim, c % self.dim);
                    let _ = writeln!(out, "{t:.16e},{id},{},{},{:.16e}", self.fields[i], k + 1, self.values[s][p][c]);
                }
            }
        }
        out
    }
}

/// Source grids of every (field, axis) pair, one vector grid per snapshot.
struct SourceHistory {
    times: Vec<f64>,
    grids: Vec<GridField>,
    slots: usize,
}

impl SourceHistory {
    fn build(h: &FieldHistory, fields: &[VectorFieldId], mu: f64) -> Result<Self> {
        let pots = h.potentials.as_ref().ok_or(Error::MissingPotential)?;
        let n = h.dim;
        let slots = fields.len() * n;
        let grids = h
            .times
            .par_iter()
            .zip(pots.par_iter())
            .map(|(&t, phi)| {
                let mut out = GridField::zeros(n, phi.cells, phi.scale, slots);
                for (i, &z) in fields.iter().enumerate() {
                    for k in 0..n {
                        let s = modified_source(z, phi, t, k, mu)?;
                        for node in 0..s.n_nodes() {
                            out.data[node * slots + i * n + k] = s.data[node];
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { times: h.times.clone(), grids, slots })
    }

    /// Linear in time, multilinear in space, zero outside.
    fn sample(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let n = self.times.len();
        if n == 0 || t > self.times[n - 1] + 1e-12 {
            return;
        }
        if n == 1 || t <= self.times[0] {
            self.grids[0].interpolate(x, out);
            return;
        }
        let k = self.times.partition_point(|&tk| tk <= t).clamp(1, n - 1) - 1;
        let theta = ((t - self.times[k]) / (self.times[k + 1] - self.times[k])).clamp(0.0, 1.0);
        let mut a = vec![0.0; self.slots];
        let mut b = vec![0.0; self.slots];
        self.grids[k].interpolate(x, &mut a);
        self.grids[k + 1].interpolate(x, &mut b);
        for c in 0..self.slots {
            out[c] = (1.0 - theta) * a[c] + theta * b[c];
        }
    }
}

type ParticleSeries = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn transport_one(
    z0: &PhasePoint,
    h: &FieldHistory,
    src: &SourceHistory,
    mu: f64,
    cfg: &SimConfig,
) -> Result<ParticleSeries> {
    let n = z0.dim();
    let m = 2 * n;
    let slots = src.slots;
    let delta = BUNDLE_OFFSET * h.scale_at(0.0);
    let mut members: Vec<Characteristic<'_, FieldHistory>> = Vec::with_capacity(m + 1);
    members.push(Characteristic::new(z0, 0.0, mu, h, Some(TangentMap::identity(n)))?);
    for j in 0..m {
        let mut z = z0.to_vec();
        z[j] += delta;
        members.push(Characteristic::new(&PhasePoint::from_slice(&z), 0.0, mu, h, None)?);
    }
    let mut acc = vec![vec![0.0; slots]; m + 1];
    let mut prev = vec![vec![0.0; slots]; m + 1];
    for (c, p) in members.iter().zip(prev.iter_mut()) {
        src.sample(0.0, &c.x, p);
    }
    let mut cur = vec![0.0; slots];
    let mut values = vec![vec![0.0; slots]];
    let mut gradients = vec![vec![0.0; slots]];
    let schedule = step_schedule(0.0, h.t_end(), cfg.dt);
    let stride = cfg.snapshot_stride.max(1);
    for (step, &(t, dt)) in schedule.iter().enumerate() {
        for (b, c) in members.iter_mut().enumerate() {
            c.t = t;
            c.step(dt)?;
            src.sample(c.t, &c.x, &mut cur);
            for s in 0..slots {
                acc[b][s] += 0.5 * dt * (prev[b][s] + cur[s]);
            }
            prev[b].copy_from_slice(&cur);
        }
        if (step + 1) % stride == 0 || step + 1 == schedule.len() {
            values.push(acc[0].clone());
            let inv = members[0]
                .tangent
                .and_then(|j| j.inverse())
                .ok_or_else(|| Error::Internal("singular tangent map".into()))?;
            let grads = (0..slots)
                .map(|s| {
                    // gradient in initial coordinates, then pulled back through J^-T
                    let g0: Vec<f64> = (1..=m).map(|b| (acc[b][s] - acc[0][s]) / delta).collect();
                    (0..m)
                        .map(|r| (0..m).map(|c| inv[(c, r)] * g0[c]).sum::<f64>().powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            gradients.push(grads);
        }
    }
    Ok((values, gradients))
}

/// Transports the coefficients of the first `count` particles of `e` (from
/// their initial points) through the recorded run.
pub fn transport_coefficients(
    e: &ParticleEnsemble,
    h: &FieldHistory,
    mu: f64,
    cfg: &SimConfig,
    count: usize,
) -> Result<ModCoefficients> {
    if h.dim != 2 || e.dim != 2 {
        return Err(Error::InvalidInput("modified coefficients are two-dimensional only".into()));
    }
    let fields = non_stable_fields(2, Scope::Macroscopic);
    let src = SourceHistory::build(h, &fields, mu)?;
    let ids: Vec<usize> = (0..count.min(e.len())).collect();
    let per: Vec<ParticleSeries> =
        ids.par_iter().map(|&p| transport_one(&e.origin(p), h, &src, mu, cfg)).collect::<Result<_>>()?;
    let snaps = per.first().map_or(1, |s| s.0.len());
    let mut times = vec![0.0];
    let schedule = step_schedule(0.0, h.t_end(), cfg.dt);
    let stride = cfg.snapshot_stride.max(1);
    for (step, &(t, dt)) in schedule.iter().enumerate() {
        if (step + 1) % stride == 0 || step + 1 == schedule.len() {
            times.push(if step + 1 == schedule.len() { h.t_end() } else { t + dt });
        }
    }
    debug_assert_eq!(times.len(), snaps);
    let values = (0..snaps).map(|s| per.iter().map(|p| p.0[s].clone()).collect()).collect();
    let gradients = (0..snaps).map(|s| per.iter().map(|p| p.1[s].clone()).collect()).collect();
    Ok(ModCoefficients { dim: 2, fields, times, particle_ids: ids, values, gradients })
}

/// Bootstrap margins; each passes when below one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapMargins {
    /// `max |c| / (sqrt(eps) (1 + t))`.
    pub coefficients: f64,
    /// `max |grad c| / sqrt(eps)`.
    pub gradients: f64,
    /// `max sup|grad phi| e^t / sqrt(eps)`.
    pub force: f64,
}

impl BootstrapMargins {
    pub fn passed(&self) -> bool {
        self.coefficients < 1.0 && self.gradients < 1.0 && self.force < 1.0
    }
}

pub fn bootstrap_check(coeffs: &ModCoefficients, report: &DiagnosticsReport, eps: f64) -> BootstrapMargins {
    let root = eps.sqrt();
    let mut coefficients = 0.0f64;
    let mut gradients = 0.0f64;
    for (s, &t) in coeffs.times.iter().enumerate() {
        for row in &coeffs.values[s] {
            for v in row {
                coefficients = coefficients.max(v.abs() / (root * (1.0 + t)));
            }
        }
        for row in &coeffs.gradients[s] {
            for g in row {
                gradients = gradients.max(g / root);
            }
        }
    }
    let force = report
        .sup_force
        .times
        .iter()
        .zip(&report.sup_force.values)
        .map(|(t, f)| f * t.exp() / root)
        .fold(0.0, f64::max);
    BootstrapMargins { coefficients, gradients, force }
}

/// Least-squares slope of `max_p |c|` against `t` for the unstable base fields.
pub fn unstable_growth_slope(coeffs: &ModCoefficients) -> f64 {
    let y = coeffs.max_abs_series(|z| matches!(z.kind, FieldKind::Unstable(_)));
    let t = &coeffs.times;
    let m = t.len() as f64;
    let tm = t.iter().sum::<f64>() / m;
    let ym = y.iter().sum::<f64>() / m;
    let sxy: f64 = t.iter().zip(&y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let sxx: f64 = t.iter().map(|a| (a - tm).powi(2)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}
