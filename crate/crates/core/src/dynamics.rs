//! Characteristics of `dX/dt = V`, `dV/dt = X - mu grad phi(t, X)`.
//!
//! Kick-drift-kick splitting with the exact hyperbolic drift, so the step is
//! exact when the force vanishes and all error scales with the force. The
//! tangent map `d(X, V)/d(x, v)` is carried through the same factors.

use crate::domain::{PhasePoint, SimConfig};
use crate::error::{Error, Result};
use crate::linear;
use crate::poisson::{self, SourceSet};

/// Largest step accepted by the integrator.
pub const MAX_STEP: f64 = 0.05;

/// Relative offset (in units of the sampler length scale) for force Jacobians.
pub const JACOBIAN_OFFSET: f64 = 1e-4;

/// Source of `grad phi(t, x)`. Implementations must be safe for concurrent reads.
pub trait ForceSampler: Sync {
    fn dim(&self) -> usize;

    /// Writes `grad phi(t, x)` into `out[..dim]`.
    fn force(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Spatial scale used for finite-difference offsets.
    fn length_scale(&self, _t: f64) -> f64 {
        1.0
    }

    /// Whether `(t, x)` lies where the sampler holds data.
    fn covers(&self, _t: f64, _x: &[f64]) -> bool {
        true
    }
}

/// `grad phi = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl ForceSampler for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn force(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out[..self.dim].iter_mut().for_each(|o| *o = 0.0);
        Ok(())
    }
}

/// Spatially uniform force, constant in time.
#[derive(Debug, Clone)]
pub struct UniformField {
    pub value: Vec<f64>,
}

impl ForceSampler for UniformField {
    fn dim(&self) -> usize {
        self.value.len()
    }
    fn force(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out[..self.value.len()].copy_from_slice(&self.value);
        Ok(())
    }
}

/// Time-independent field of a fixed source set, zero beyond `support`.
#[derive(Debug, Clone)]
pub struct FrozenSources {
    pub sources: SourceSet,
    pub softening: f64,
    pub support: Option<f64>,
}

impl ForceSampler for FrozenSources {
    fn dim(&self) -> usize {
        self.sources.dim
    }
    fn force(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let dim = self.sources.dim;
        if let Some(r) = self.support {
            if x[..dim].iter().map(|a| a * a).sum::<f64>() > r * r {
                out[..dim].iter_mut().for_each(|o| *o = 0.0);
                return Ok(());
            }
        }
        let f = poisson::pairwise_force(&x[..dim], &self.sources, self.softening)?;
        out[..dim].copy_from_slice(&f);
        Ok(())
    }
}

/// `F(t + shift, x)`.
pub struct TimeShifted<'a, S: ForceSampler + ?Sized> {
    pub inner: &'a S,
    pub shift: f64,
}

impl<S: ForceSampler + ?Sized> ForceSampler for TimeShifted<'_, S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn force(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner.force(t + self.shift, x, out)
    }
    fn length_scale(&self, t: f64) -> f64 {
        self.inner.length_scale(t + self.shift)
    }
    fn covers(&self, t: f64, x: &[f64]) -> bool {
        self.inner.covers(t + self.shift, x)
    }
}

fn checked_force(f: &(impl ForceSampler + ?Sized), t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
    f.force(t, x, out)?;
    let n = f.dim();
    if out[..n].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteForce { t, x: x[..n].to_vec() });
    }
    Ok(())
}

/// Row-major `n x n` Jacobian of the force by central differences.
pub fn force_jacobian(f: &(impl ForceSampler + ?Sized), t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
    let n = f.dim();
    let delta = JACOBIAN_OFFSET * f.length_scale(t);
    let mut xp = [0.0; 3];
    let mut fp = [0.0; 3];
    let mut fm = [0.0; 3];
    xp[..n].copy_from_slice(&x[..n]);
    for c in 0..n {
        xp[c] = x[c] + delta;
        checked_force(f, t, &xp, &mut fp)?;
        xp[c] = x[c] - delta;
        checked_force(f, t, &xp, &mut fm)?;
        xp[c] = x[c];
        for r in 0..n {
            out[r * n + c] = (fp[r] - fm[r]) / (2.0 * delta);
        }
    }
    Ok(())
}

/// `d(X, V)/d(x, v)`, row-major `2n x 2n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentMap {
    pub n: usize,
    pub data: [f64; 36],
}

impl TangentMap {
    pub fn identity(n: usize) -> Self {
        let mut data = [0.0; 36];
        for k in 0..2 * n {
            data[k * 2 * n + k] = 1.0;
        }
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        2 * self.n
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.size() + c]
    }

    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        let m = self.size();
        nalgebra::DMatrix::from_row_slice(m, m, &self.data[..m * m])
    }

    pub fn from_matrix(n: usize, m: &nalgebra::DMatrix<f64>) -> Self {
        let mut data = [0.0; 36];
        let size = 2 * n;
        for r in 0..size {
            for c in 0..size {
                data[r * size + c] = m[(r, c)];
            }
        }
        Self { n, data }
    }

    pub fn determinant(&self) -> f64 {
        self.to_matrix().determinant()
    }

    pub fn inverse(&self) -> Option<nalgebra::DMatrix<f64>> {
        self.to_matrix().try_inverse()
    }

    pub fn max_abs_entry(&self) -> f64 {
        let m = self.size();
        self.data[..m * m].iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    /// Max entry of the position rows `dX/d(x, v)`.
    pub fn max_position_entry(&self) -> f64 {
        let m = self.size();
        self.data[..self.n * m].iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    /// Left-multiplies by the kick `[[I, 0], [A, I]]`, `A` row-major `n x n`.
    pub fn kick(&mut self, a: &[f64]) {
        let (n, m) = (self.n, self.size());
        for r in 0..n {
            for c in 0..m {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += a[r * n + k] * self.data[k * m + c];
                }
                self.data[(n + r) * m + c] += acc;
            }
        }
    }

    /// Left-multiplies by the hyperbolic drift over time `h`.
    pub fn drift(&mut self, h: f64) {
        let (n, m) = (self.n, self.size());
        let (s, ch) = (h.sinh(), h.cosh());
        for r in 0..n {
            for c in 0..m {
                let x = self.data[r * m + c];
                let v = self.data[(n + r) * m + c];
                self.data[r * m + c] = ch * x + s * v;
                self.data[(n + r) * m + c] = s * x + ch * v;
            }
        }
    }
}

fn drift_in_place(x: &mut [f64], v: &mut [f64], h: f64) {
    let (s, c) = (h.sinh(), h.cosh());
    for (xa, va) in x.iter_mut().zip(v.iter_mut()) {
        let (x0, v0) = (*xa, *va);
        *xa = x0 * c + v0 * s;
        *va = x0 * s + v0 * c;
    }
}

/// One kick-drift-kick step from `t` to `t + h`.
pub fn strang_step(
    p: &PhasePoint,
    tangent: Option<&TangentMap>,
    t: f64,
    h: f64,
    mu: f64,
    f: &(impl ForceSampler + ?Sized),
) -> Result<(PhasePoint, Option<TangentMap>)> {
    let mut state = Characteristic::new(p, t, mu, f, tangent.copied())?;
    state.step(h)?;
    Ok((state.point(), state.tangent))
}

/// A characteristic being advanced, caching the force at its current point so
/// consecutive half-kicks share one evaluation.
pub struct Characteristic<'a, S: ForceSampler + ?Sized> {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub tangent: Option<TangentMap>,
    pub mu: f64,
    force: Vec<f64>,
    jacobian: Vec<f64>,
    sampler: &'a S,
}

impl<'a, S: ForceSampler + ?Sized> Characteristic<'a, S> {
    pub fn new(p: &PhasePoint, t: f64, mu: f64, sampler: &'a S, tangent: Option<TangentMap>) -> Result<Self> {
        let n = p.dim();
        if sampler.dim() != n {
            return Err(Error::InvalidInput("sampler and point dimensions differ".into()));
        }
        let mut c = Self {
            t,
            x: p.x.clone(),
            v: p.v.clone(),
            tangent,
            mu,
            force: vec![0.0; n],
            jacobian: vec![0.0; n * n],
            sampler,
        };
        c.evaluate()?;
        Ok(c)
    }

    fn evaluate(&mut self) -> Result<()> {
        checked_force(self.sampler, self.t, &self.x, &mut self.force)?;
        if self.tangent.is_some() {
            force_jacobian(self.sampler, self.t, &self.x, &mut self.jacobian)?;
        }
        Ok(())
    }

    fn half_kick(&mut self, h: f64) {
        let k = 0.5 * h * self.mu;
        for (v, f) in self.v.iter_mut().zip(&self.force) {
            *v -= k * f;
        }
        if let Some(j) = self.tangent.as_mut() {
            let a: Vec<f64> = self.jacobian.iter().map(|d| -k * d).collect();
            j.kick(&a);
        }
    }

    pub fn step(&mut self, h: f64) -> Result<()> {
        if !(h > 0.0 && h <= MAX_STEP * (1.0 + 1e-12)) {
            return Err(Error::InvalidInput(format!("step {h} outside (0, {MAX_STEP}]")));
        }
        self.half_kick(h);
        drift_in_place(&mut self.x, &mut self.v, h);
        if let Some(j) = self.tangent.as_mut() {
            j.drift(h);
        }
        self.t += h;
        self.evaluate()?;
        self.half_kick(h);
        Ok(())
    }

    /// `grad phi(t, X(t))` at the current point.
    pub fn force(&self) -> &[f64] {
        &self.force
    }

    pub fn point(&self) -> PhasePoint {
        PhasePoint { x: self.x.clone(), v: self.v.clone() }
    }

    pub fn norm(&self) -> f64 {
        self.x.iter().chain(&self.v).map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Step sizes covering `[t0, t1]` with nominal step `dt`, the last shortened.
pub fn step_schedule(t0: f64, t1: f64, dt: f64) -> Vec<(f64, f64)> {
    let span = t1 - t0;
    if span <= 0.0 {
        return Vec::new();
    }
    let full = (span / dt * (1.0 + 1e-12)).floor() as usize;
    let mut out: Vec<(f64, f64)> = (0..full).map(|k| (t0 + k as f64 * dt, dt)).collect();
    let covered = full as f64 * dt;
    if span - covered > 1e-9 * dt {
        out.push((t0 + covered, span - covered));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<PhasePoint>,
    pub tangents: Option<Vec<TangentMap>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn last(&self) -> &PhasePoint {
        self.points.last().expect("trajectory has a starting point")
    }
}

/// Integrates from `t0` to `t1` with step `cfg.dt`, sampling every
/// `cfg.snapshot_stride` steps and at the end point.
pub fn integrate_characteristic(
    p0: &PhasePoint,
    t0: f64,
    t1: f64,
    cfg: &SimConfig,
    f: &(impl ForceSampler + ?Sized),
    with_tangent: bool,
) -> Result<Trajectory> {
    if t1 < t0 {
        return Err(Error::InvalidInput("t1 must not precede t0".into()));
    }
    let tangent = with_tangent.then(|| TangentMap::identity(p0.dim()));
    let mut c = Characteristic::new(p0, t0, cfg.mu, f, tangent)?;
    let mut traj = Trajectory {
        times: vec![t0],
        points: vec![p0.clone()],
        tangents: tangent.map(|j| vec![j]),
    };
    let schedule = step_schedule(t0, t1, cfg.dt);
    let stride = cfg.snapshot_stride.max(1);
    for (k, &(ts, h)) in schedule.iter().enumerate() {
        c.t = ts;
        c.step(h)?;
        if (k + 1) % stride == 0 || k + 1 == schedule.len() {
            traj.times.push(c.t);
            traj.points.push(c.point());
            if let (Some(ts), Some(j)) = (traj.tangents.as_mut(), c.tangent) {
                ts.push(j);
            }
        }
    }
    Ok(traj)
}

/// Max normalized residuals of the two variation-of-constants identities
/// `e^-t (X+V) + int_0^t e^-s mu F ds = x + v` and
/// `e^t (X-V) - int_0^t e^s mu F ds = x - v`, per axis, with trapezoid
/// quadrature over the trajectory samples.
pub fn duhamel_residual(
    traj: &Trajectory,
    p0: &PhasePoint,
    mu: f64,
    f: &(impl ForceSampler + ?Sized),
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = p0.dim();
    let mut unstable_int = vec![0.0; n];
    let mut stable_int = vec![0.0; n];
    let mut res_u = vec![0.0f64; n];
    let mut res_s = vec![0.0f64; n];
    let mut prev_force = vec![0.0; n];
    let mut force = vec![0.0; n];
    for (k, (&t, p)) in traj.times.iter().zip(&traj.points).enumerate() {
        checked_force(f, t, &p.x, &mut force)?;
        if k > 0 {
            let t0 = traj.times[k - 1];
            let dt = t - t0;
            for a in 0..n {
                unstable_int[a] += 0.5 * dt * mu * ((-t0).exp() * prev_force[a] + (-t).exp() * force[a]);
                stable_int[a] += 0.5 * dt * mu * (t0.exp() * prev_force[a] + t.exp() * force[a]);
            }
        }
        for a in 0..n {
            let u = (-t).exp() * (p.x[a] + p.v[a]) + unstable_int[a] - (p0.x[a] + p0.v[a]);
            let s = t.exp() * (p.x[a] - p.v[a]) - stable_int[a] - (p0.x[a] - p0.v[a]);
            res_u[a] = res_u[a].max(u.abs());
            res_s[a] = res_s[a].max(s.abs());
        }
        prev_force.copy_from_slice(&force);
    }
    Ok((res_u, res_s))
}

/// Reversibility check at zero field: integrate, then apply the backward flow.
pub fn linear_round_trip(p0: &PhasePoint, t: f64, dt: f64) -> Result<PhasePoint> {
    let cfg = SimConfig { dt, snapshot_stride: 1_000_000, dim: p0.dim(), ..Default::default() };
    let traj = integrate_characteristic(p0, 0.0, t, &cfg, &ZeroField { dim: p0.dim() }, false)?;
    linear::linear_flow(-t, traj.last())
}
