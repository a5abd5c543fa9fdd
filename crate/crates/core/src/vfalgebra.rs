//! Commuting vector fields of the linearized transport operator.
//!
//! Microscopic fields act on `(x, v)`:
//! `U_i = e^t (d_xi + d_vi)`, `S_i = e^-t (d_xi - d_vi)`, `L = x.d_x + v.d_v`,
//! `R_ij = x_i d_xj - x_j d_xi + v_i d_vj - v_j d_vi`.
//! Macroscopic fields are their `x`-only counterparts and act on grids.
//! Axis indices are zero-based; names print one-based (`U1`, `R12`).

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use crate::domain::{grid_scale, SimConfig};
use crate::error::{Error, Result};
use crate::grid::{GridField, BOUNDARY_BAND};
use crate::linear::{self, Factor, InitialData, SeparableTerm, DEFAULT_VELOCITY_NODES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FieldKind {
    Unstable(usize),
    Stable(usize),
    Scaling,
    /// Always stored with `i < j`.
    Rotation(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Microscopic,
    Macroscopic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VectorFieldId {
    pub kind: FieldKind,
    pub scope: Scope,
}

impl FieldKind {
    /// `R_ij` normalized to `i < j`, with the sign picked up by the swap.
    pub fn rotation(i: usize, j: usize) -> Result<(FieldKind, i64)> {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => Ok((FieldKind::Rotation(i, j), 1)),
            std::cmp::Ordering::Greater => Ok((FieldKind::Rotation(j, i), -1)),
            std::cmp::Ordering::Equal => {
                Err(Error::InvalidInput("rotation field needs distinct axes".into()))
            }
        }
    }

    pub fn is_stable(&self) -> bool {
        matches!(self, FieldKind::Stable(_))
    }

    fn max_axis(&self) -> Option<usize> {
        match *self {
            FieldKind::Unstable(i) | FieldKind::Stable(i) => Some(i),
            FieldKind::Scaling => None,
            FieldKind::Rotation(_, j) => Some(j),
        }
    }
}

impl VectorFieldId {
    pub fn micro(kind: FieldKind) -> Self {
        Self { kind, scope: Scope::Microscopic }
    }

    pub fn macro_(kind: FieldKind) -> Self {
        Self { kind, scope: Scope::Macroscopic }
    }

    pub fn with_scope(self, scope: Scope) -> Self {
        Self { scope, ..self }
    }

    pub fn fits_dim(&self, n: usize) -> bool {
        self.kind.max_axis().is_none_or(|a| a < n)
    }
}

impl fmt::Display for VectorFieldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FieldKind::Unstable(i) => write!(f, "U{}", i + 1),
            FieldKind::Stable(i) => write!(f, "S{}", i + 1),
            FieldKind::Scaling => write!(f, "L"),
            FieldKind::Rotation(i, j) => write!(f, "R{}{}", i + 1, j + 1),
        }
    }
}

/// All fields of the given scope in dimension `n`: `U_i, S_i, L, R_ij`.
pub fn all_fields(n: usize, scope: Scope) -> Vec<VectorFieldId> {
    let mut out: Vec<_> = (0..n).map(FieldKind::Unstable).collect();
    out.extend((0..n).map(FieldKind::Stable));
    out.push(FieldKind::Scaling);
    for i in 0..n {
        for j in i + 1..n {
            out.push(FieldKind::Rotation(i, j));
        }
    }
    out.into_iter().map(|kind| VectorFieldId { kind, scope }).collect()
}

/// The fields without stable members.
pub fn non_stable_fields(n: usize, scope: Scope) -> Vec<VectorFieldId> {
    all_fields(n, scope).into_iter().filter(|z| !z.kind.is_stable()).collect()
}

/// Integer linear combination of fields; zero coefficients are never stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FieldCombination {
    pub terms: BTreeMap<VectorFieldId, i64>,
}

impl FieldCombination {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn single(z: VectorFieldId, coeff: i64) -> Self {
        let mut c = Self::zero();
        c.add_term(z, coeff);
        c
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add_term(&mut self, z: VectorFieldId, coeff: i64) {
        let entry = self.terms.entry(z).or_insert(0);
        *entry += coeff;
        if *entry == 0 {
            self.terms.remove(&z);
        }
    }

    pub fn add(&mut self, other: &FieldCombination, factor: i64) {
        for (&z, &c) in &other.terms {
            self.add_term(z, c * factor);
        }
    }

    pub fn negated(&self) -> FieldCombination {
        let mut out = Self::zero();
        out.add(self, -1);
        out
    }
}

impl fmt::Display for FieldCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self.terms.iter().map(|(z, c)| format!("{c:+}{z}")).collect();
        write!(f, "{}", parts.join(" "))
    }
}

fn delta(a: usize, b: usize) -> i64 {
    i64::from(a == b)
}

/// `R_ab` with arbitrary order of the axes, zero when `a == b`.
fn rotation_term(out: &mut FieldCombination, scope: Scope, a: usize, b: usize, coeff: i64) {
    if coeff == 0 || a == b {
        return;
    }
    let (kind, sign) = FieldKind::rotation(a, b).expect("distinct axes");
    out.add_term(VectorFieldId { kind, scope }, sign * coeff);
}

/// Lie bracket `[a, b] = ab - ba` from the commutator table.
pub fn commute(a: VectorFieldId, b: VectorFieldId) -> Result<FieldCombination> {
    if a.scope != b.scope {
        return Err(Error::InvalidInput("cannot commute fields of different scopes".into()));
    }
    let scope = a.scope;
    let id = |kind| VectorFieldId { kind, scope };
    let mut out = FieldCombination::zero();
    use FieldKind::*;
    match (a.kind, b.kind) {
        (Unstable(_), Scaling) | (Stable(_), Scaling) => out.add_term(a, 1),
        (Scaling, Unstable(_)) | (Scaling, Stable(_)) => out.add_term(b, -1),
        (Unstable(k), Rotation(i, j)) => {
            out.add_term(id(Unstable(j)), delta(k, i));
            out.add_term(id(Unstable(i)), -delta(k, j));
        }
        (Stable(k), Rotation(i, j)) => {
            out.add_term(id(Stable(j)), delta(k, i));
            out.add_term(id(Stable(i)), -delta(k, j));
        }
        (Rotation(..), Unstable(_)) | (Rotation(..), Stable(_)) => {
            return commute(b, a).map(|c| c.negated());
        }
        (Rotation(p, q), Rotation(r, s)) => {
            rotation_term(&mut out, scope, p, s, delta(q, r));
            rotation_term(&mut out, scope, q, s, -delta(p, r));
            rotation_term(&mut out, scope, p, r, -delta(q, s));
            rotation_term(&mut out, scope, q, r, delta(p, s));
        }
        (Scaling, Rotation(..)) | (Rotation(..), Scaling) | (Scaling, Scaling) => {}
        (Unstable(_) | Stable(_), Unstable(_) | Stable(_)) => {}
    }
    Ok(out)
}

/// Bilinear extension of [`commute`].
pub fn commute_combinations(a: &FieldCombination, b: &FieldCombination) -> Result<FieldCombination> {
    let mut out = FieldCombination::zero();
    for (&za, &ca) in &a.terms {
        for (&zb, &cb) in &b.terms {
            out.add(&commute(za, zb)?, ca * cb);
        }
    }
    Ok(out)
}

/// `[a,[b,c]] + [b,[c,a]] + [c,[a,b]]`.
pub fn jacobi_sum(a: VectorFieldId, b: VectorFieldId, c: VectorFieldId) -> Result<FieldCombination> {
    let mut out = FieldCombination::zero();
    for (p, q, r) in [(a, b, c), (b, c, a), (c, a, b)] {
        let inner = commute(q, r)?;
        out.add(&commute_combinations(&FieldCombination::single(p, 1), &inner)?, 1);
    }
    Ok(out)
}

/// Applies a macroscopic field to a scalar grid at time `t`, using
/// fourth-order finite differences.
pub fn apply_macroscopic(z: VectorFieldId, g: &GridField, t: f64) -> Result<GridField> {
    if z.scope != Scope::Macroscopic {
        return Err(Error::InvalidInput(format!("{z} is not a macroscopic field")));
    }
    if g.components != 1 {
        return Err(Error::InvalidInput("macroscopic fields act on scalar grids".into()));
    }
    if g.cells < 32 {
        return Err(Error::InvalidInput("grid resolution below 32 cells per axis".into()));
    }
    if !z.fits_dim(g.dim) {
        return Err(Error::InvalidInput(format!("{z} does not exist in dimension {}", g.dim)));
    }
    Ok(match z.kind {
        FieldKind::Unstable(i) => g.derivative(i).scaled(t.exp()),
        FieldKind::Stable(i) => g.derivative(i).scaled((-t).exp()),
        FieldKind::Scaling => {
            let derivs: Vec<GridField> = (0..g.dim).map(|a| g.derivative(a)).collect();
            euler_operator(g, &derivs)
        }
        FieldKind::Rotation(i, j) => rotation_on_grid(g, &g.derivative(i), &g.derivative(j), i, j),
    })
}

fn euler_operator(g: &GridField, derivs: &[GridField]) -> GridField {
    let mut out = GridField::zeros(g.dim, g.cells, g.scale, 1);
    let mut x = [0.0; 3];
    for node in 0..g.n_nodes() {
        g.node_position(node, &mut x);
        out.data[node] = (0..g.dim).map(|a| x[a] * derivs[a].data[node]).sum();
    }
    out
}

/// `x_i d_j g - x_j d_i g` from precomputed derivatives.
fn rotation_on_grid(g: &GridField, di: &GridField, dj: &GridField, i: usize, j: usize) -> GridField {
    let mut out = GridField::zeros(g.dim, g.cells, g.scale, 1);
    let mut x = [0.0; 3];
    for node in 0..g.n_nodes() {
        g.node_position(node, &mut x);
        out.data[node] = x[i] * dj.data[node] - x[j] * di.data[node];
    }
    out
}

/// Interior sup of `| |x|^2 d_j g - sum_i x_i R_ij g - x_j L g |`, with the
/// same difference operators on both sides.
pub fn weight_decomposition_check(j: usize, g: &GridField) -> Result<f64> {
    if j >= g.dim || g.components != 1 {
        return Err(Error::InvalidInput("axis out of range or vector grid".into()));
    }
    let derivs: Vec<GridField> = (0..g.dim).map(|a| g.derivative(a)).collect();
    let scaling = euler_operator(g, &derivs);
    let mut x = [0.0; 3];
    let mut worst: f64 = 0.0;
    for node in 0..g.n_nodes() {
        if !g.is_interior(node, BOUNDARY_BAND) {
            continue;
        }
        g.node_position(node, &mut x);
        let r2: f64 = x[..g.dim].iter().map(|a| a * a).sum();
        let lhs = r2 * derivs[j].data[node];
        let mut rhs = x[j] * scaling.data[node];
        for i in 0..g.dim {
            let rot = x[i] * derivs[j].data[node] - x[j] * derivs[i].data[node];
            rhs += x[i] * rot;
        }
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Separable velocity-integrand terms of `Z f` for the linear solution with
/// product initial data.
pub fn microscopic_terms(z: VectorFieldId, n: usize, amplitude: f64, t: f64) -> Vec<SeparableTerm> {
    let base = |coeff: f64, edits: &[(usize, Factor)]| {
        let mut factors = vec![Factor::Q; n];
        for &(a, f) in edits {
            factors[a] = f;
        }
        SeparableTerm { coeff: amplitude * coeff, factors }
    };
    match z.kind {
        FieldKind::Unstable(i) => vec![base(t.exp(), &[(i, Factor::Unstable)])],
        FieldKind::Stable(i) => vec![base((-t).exp(), &[(i, Factor::Stable)])],
        FieldKind::Scaling => (0..n).map(|a| base(1.0, &[(a, Factor::Scaling)])).collect(),
        FieldKind::Rotation(i, j) => vec![
            base(1.0, &[(i, Factor::XQ), (j, Factor::Dx)]),
            base(-1.0, &[(i, Factor::Dx), (j, Factor::XQ)]),
            base(1.0, &[(i, Factor::VQ), (j, Factor::Dv)]),
            base(-1.0, &[(i, Factor::Dv), (j, Factor::VQ)]),
        ],
    }
}

/// Which form of the density identity to test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityIdentity {
    /// `L^x rho(f) = rho(L f) + n rho(f)`, the others commute directly.
    Correct,
    /// Drops the `n rho(f)` correction for the scaling field.
    OmitScalingCorrection,
}

/// Interior sup of `|Z^x rho(f) - rho(Z f) - c rho(f)|` for the linear
/// solution at time `t` on the grid of `cfg`.
pub fn density_commutation_check(
    f0: &InitialData,
    z: VectorFieldId,
    t: f64,
    cfg: &SimConfig,
) -> Result<f64> {
    density_commutation_check_with(f0, z, t, cfg, DensityIdentity::Correct)
}

pub fn density_commutation_check_with(
    f0: &InitialData,
    z: VectorFieldId,
    t: f64,
    cfg: &SimConfig,
    identity: DensityIdentity,
) -> Result<f64> {
    let n = f0.dim();
    let micro = z.with_scope(Scope::Microscopic);
    if !z.fits_dim(n) {
        return Err(Error::InvalidInput(format!("{z} does not exist in dimension {n}")));
    }
    if f0.amplitude == 0.0 {
        return Ok(0.0);
    }
    let scale = grid_scale(t, cfg);
    let nodes = DEFAULT_VELOCITY_NODES;
    let rho = linear::linear_density_on_grid_with(f0, t, cfg.grid_cells, scale, nodes)?;
    let lhs = apply_macroscopic(z.with_scope(Scope::Macroscopic), &rho, t)?;
    let terms = microscopic_terms(micro, n, f0.amplitude, t);
    let rho_zf = linear::velocity_integral_on_grid(f0, t, cfg.grid_cells, scale, nodes, &terms)?;
    let correction = match (z.kind, identity) {
        (FieldKind::Scaling, DensityIdentity::Correct) => n as f64,
        _ => 0.0,
    };
    Ok((0..rho.n_nodes())
        .filter(|&node| rho.is_interior(node, BOUNDARY_BAND))
        .map(|node| (lhs.data[node] - rho_zf.data[node] - correction * rho.data[node]).abs())
        .fold(0.0, f64::max))
}

/// Affine coefficient field `A z + c` of a microscopic field at time 0.
fn affine_at_zero(z: FieldKind, n: usize) -> (Vec<f64>, Vec<f64>) {
    let m = 2 * n;
    let mut a = vec![0.0; m * m];
    let mut c = vec![0.0; m];
    match z {
        FieldKind::Unstable(i) => {
            c[i] = 1.0;
            c[n + i] = 1.0;
        }
        FieldKind::Stable(i) => {
            c[i] = 1.0;
            c[n + i] = -1.0;
        }
        FieldKind::Scaling => (0..m).for_each(|k| a[k * m + k] = 1.0),
        FieldKind::Rotation(i, j) => {
            for off in [0, n] {
                a[(off + j) * m + off + i] = 1.0;
                a[(off + i) * m + off + j] = -1.0;
            }
        }
    }
    (a, c)
}

/// `[X, Y]` for affine fields `X = A z + a`, `Y = B z + b` is `(BA - AB) z + (B a - A b)`.
fn affine_bracket(x: &(Vec<f64>, Vec<f64>), y: &(Vec<f64>, Vec<f64>), m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mat = vec![0.0; m * m];
    let mut vec_ = vec![0.0; m];
    for r in 0..m {
        for c in 0..m {
            for k in 0..m {
                mat[r * m + c] += y.0[r * m + k] * x.0[k * m + c] - x.0[r * m + k] * y.0[k * m + c];
            }
        }
        for k in 0..m {
            vec_[r] += y.0[r * m + k] * x.1[k] - x.0[r * m + k] * y.1[k];
        }
    }
    (mat, vec_)
}

fn affine_of(c: &FieldCombination, n: usize) -> (Vec<f64>, Vec<f64>) {
    let m = 2 * n;
    let mut out = (vec![0.0; m * m], vec![0.0; m]);
    for (z, &k) in &c.terms {
        let (a, b) = affine_at_zero(z.kind, n);
        out.0.iter_mut().zip(&a).for_each(|(o, v)| *o += k as f64 * v);
        out.1.iter_mut().zip(&b).for_each(|(o, v)| *o += k as f64 * v);
    }
    out
}

/// Pairs of microscopic fields in dimension `n` whose table bracket differs
/// from the bracket computed directly from their affine coefficients.
pub fn table_mismatches(n: usize) -> Vec<(VectorFieldId, VectorFieldId)> {
    let m = 2 * n;
    let fields = all_fields(n, Scope::Microscopic);
    let mut out = Vec::new();
    for &a in &fields {
        for &b in &fields {
            let direct = affine_bracket(&affine_at_zero(a.kind, n), &affine_at_zero(b.kind, n), m);
            match commute(a, b) {
                Ok(table) if affine_of(&table, n) == direct => {}
                _ => out.push((a, b)),
            }
        }
    }
    out
}

/// Triples of microscopic fields in dimension `n` violating the Jacobi
/// identity or antisymmetry.
pub fn jacobi_failures(n: usize) -> Vec<(VectorFieldId, VectorFieldId, VectorFieldId)> {
    let fields = all_fields(n, Scope::Microscopic);
    let mut out = Vec::new();
    for &a in &fields {
        for &b in &fields {
            let antisym = matches!((commute(a, b), commute(b, a)), (Ok(x), Ok(y)) if x == y.negated());
            for &c in &fields {
                if !antisym || !jacobi_sum(a, b, c).is_ok_and(|j| j.is_zero()) {
                    out.push((a, b, c));
                }
            }
        }
    }
    out
}

/// `sum_{|alpha| <= 2} ||Z^alpha f0||_{L^1}` over sequences of non-stable
/// fields at `t = 0`, by tensor midpoint quadrature over the support box.
pub fn second_order_l1_norms(f0: &InitialData, nodes: usize) -> Result<f64> {
    let n = f0.dim();
    if n != 2 {
        return Err(Error::InvalidInput("second-order norms are implemented for n = 2".into()));
    }
    let m = 2 * n;
    let fields: Vec<(Vec<f64>, Vec<f64>)> = non_stable_fields(n, Scope::Microscopic)
        .iter()
        .map(|z| affine_at_zero(z.kind, n))
        .collect();
    let boxes = f0.support_box();
    let steps: Vec<f64> = boxes.iter().map(|(a, b)| (b - a) / nodes as f64).collect();
    let vol: f64 = steps.iter().product();
    let total: f64 = (0..nodes)
        .into_par_iter()
        .map(|i0| {
            let mut z = [0.0; 4];
            let mut grad = [0.0; 4];
            let mut hess = [0.0; 16];
            let mut vz = vec![[0.0; 4]; fields.len()];
            let mut acc = 0.0;
            z[0] = boxes[0].0 + (i0 as f64 + 0.5) * steps[0];
            for i1 in 0..nodes {
                z[1] = boxes[1].0 + (i1 as f64 + 0.5) * steps[1];
                for i2 in 0..nodes {
                    z[2] = boxes[2].0 + (i2 as f64 + 0.5) * steps[2];
                    for i3 in 0..nodes {
                        z[3] = boxes[3].0 + (i3 as f64 + 0.5) * steps[3];
                        let f = f0.derivatives(&z, &mut grad, &mut hess);
                        acc += f.abs();
                        for (k, (a, c)) in fields.iter().enumerate() {
                            for r in 0..m {
                                vz[k][r] = c[r] + (0..m).map(|s| a[r * m + s] * z[s]).sum::<f64>();
                            }
                            acc += dot(&vz[k], &grad).abs();
                        }
                        for (ka, _) in fields.iter().enumerate() {
                            for (kb, (ab, _)) in fields.iter().enumerate() {
                                // Z_a Z_b f = (A_b V_a) . grad f + V_a^T H V_b
                                let mut val = 0.0;
                                for r in 0..m {
                                    let avr: f64 = (0..m).map(|s| ab[r * m + s] * vz[ka][s]).sum();
                                    val += avr * grad[r];
                                    let hv: f64 = (0..m).map(|s| hess[r * m + s] * vz[kb][s]).sum();
                                    val += vz[ka][r] * hv;
                                }
                                acc += val.abs();
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total * vol)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Midpoint nodes per phase-space axis for the norm quadrature.
pub const SOBOLEV_NODES: usize = 40;

/// `sup_x (e^t + |x|)^n rho(t, x)` over `sum ||Z^alpha f0||_{L^1}` (`|alpha| <= 2`,
/// non-stable fields); the denominator is conserved by the linear flow and
/// evaluated at `t = 0`. Two-dimensional data only.
pub fn sobolev_ratio(f0: &InitialData, t: f64, cfg: &SimConfig) -> Result<f64> {
    if f0.amplitude == 0.0 {
        return Ok(0.0);
    }
    let rho = linear::linear_density_on_grid(f0, t, cfg)?;
    let numerator = weighted_sup(&rho, t, f0.dim() as i32);
    let denominator = second_order_l1_norms(f0, SOBOLEV_NODES)?;
    if denominator <= 0.0 {
        return Err(Error::Internal("zero Sobolev denominator with nonzero data".into()));
    }
    Ok(numerator / denominator)
}

/// `max_x (e^t + |x|)^p |g(x)|`.
pub fn weighted_sup(g: &GridField, t: f64, p: i32) -> f64 {
    let et = t.exp();
    let mut x = [0.0; 3];
    (0..g.n_nodes())
        .map(|node| {
            g.node_position(node, &mut x);
            let r = x[..g.dim].iter().map(|a| a * a).sum::<f64>().sqrt();
            (et + r).powi(p) * g.data[node].abs()
        })
        .fold(0.0, f64::max)
}

/// `max_x (e^t + |x|)^{n+1} |d_x1 rho|` over interior nodes for the linear solution.
pub fn improved_derivative_decay(f0: &InitialData, t: f64, cfg: &SimConfig) -> Result<f64> {
    let rho = linear::linear_density_on_grid(f0, t, cfg)?;
    let d = rho.derivative(0);
    let et = t.exp();
    let p = f0.dim() as i32 + 1;
    let mut x = [0.0; 3];
    Ok((0..d.n_nodes())
        .filter(|&node| d.is_interior(node, BOUNDARY_BAND))
        .map(|node| {
            d.node_position(node, &mut x);
            let r = x[..d.dim].iter().map(|a| a * a).sum::<f64>().sqrt();
            (et + r).powi(p) * d.data[node].abs()
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PhasePoint;
    use crate::linear::InitialKind;

    fn u(i: usize) -> VectorFieldId {
        VectorFieldId::micro(FieldKind::Unstable(i))
    }
    fn s(i: usize) -> VectorFieldId {
        VectorFieldId::micro(FieldKind::Stable(i))
    }
    fn l() -> VectorFieldId {
        VectorFieldId::micro(FieldKind::Scaling)
    }
    fn r(i: usize, j: usize) -> VectorFieldId {
        VectorFieldId::micro(FieldKind::Rotation(i, j))
    }

    #[test]
    fn table_examples() {
        assert_eq!(commute(u(0), l()).unwrap(), FieldCombination::single(u(0), 1));
        assert!(commute(u(0), s(1)).unwrap().is_zero());
        assert!(commute(l(), l()).unwrap().is_zero());
        assert_eq!(commute(u(0), r(0, 1)).unwrap(), FieldCombination::single(u(1), 1));
        assert_eq!(commute(s(0), r(0, 1)).unwrap(), FieldCombination::single(s(1), 1));
        assert_eq!(commute(r(0, 1), r(1, 2)).unwrap(), FieldCombination::single(r(0, 2), 1));
        assert!(commute(l(), r(0, 2)).unwrap().is_zero());
        let mixed = commute(u(0), VectorFieldId::macro_(FieldKind::Scaling));
        assert!(matches!(mixed, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn table_matches_direct_bracket_of_coefficients() {
        // U and S carry e^{+-t}; brackets among them vanish and brackets with
        // L or R preserve the weight, so checking at t = 0 covers all t.
        for n in [2, 3] {
            assert!(table_mismatches(n).is_empty(), "{:?}", table_mismatches(n));
            assert!(jacobi_failures(n).is_empty());
        }
    }

    #[test]
    fn scopes_share_the_table() {
        for &a in &all_fields(3, Scope::Microscopic) {
            for &b in &all_fields(3, Scope::Microscopic) {
                let micro = commute(a, b).unwrap();
                let mac = commute(a.with_scope(Scope::Macroscopic), b.with_scope(Scope::Macroscopic)).unwrap();
                let mapped: BTreeMap<_, _> =
                    micro.terms.iter().map(|(z, c)| (z.with_scope(Scope::Macroscopic), *c)).collect();
                assert_eq!(mac.terms, mapped);
            }
        }
    }

    fn interior_max_error(g: &GridField, f: impl Fn(&[f64]) -> f64) -> f64 {
        let mut x = [0.0; 3];
        (0..g.n_nodes())
            .filter(|&n| g.is_interior(n, BOUNDARY_BAND))
            .map(|n| {
                g.node_position(n, &mut x);
                (g.data[n] - f(&x[..g.dim])).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn macroscopic_examples() {
        let t = 0.7;
        let g = GridField::from_fn(2, 32, 3.0, |x| x[0]);
        let m = |k| VectorFieldId::macro_(k);
        let ug = apply_macroscopic(m(FieldKind::Unstable(0)), &g, t).unwrap();
        assert!(interior_max_error(&ug, |_| t.exp()) < 1e-12);
        let rg = apply_macroscopic(m(FieldKind::Rotation(0, 1)), &g, t).unwrap();
        assert!(interior_max_error(&rg, |x| -x[1]) < 1e-12);
        let q = GridField::from_fn(2, 32, 3.0, |x| x[0] * x[0] + x[1] * x[1]);
        let lq = apply_macroscopic(m(FieldKind::Scaling), &q, t).unwrap();
        assert!(interior_max_error(&lq, |x| 2.0 * (x[0] * x[0] + x[1] * x[1])) < 1e-11);
        assert!(apply_macroscopic(l(), &q, t).is_err());
        let coarse = GridField::from_fn(2, 16, 3.0, |x| x[0]);
        assert!(apply_macroscopic(m(FieldKind::Scaling), &coarse, t).is_err());
    }

    #[test]
    fn macroscopic_is_linear_and_exact_on_cubics() {
        let t = 0.3;
        let a = GridField::from_fn(3, 32, 2.0, |x| x[0].powi(3) - x[1] * x[2]);
        let b = GridField::from_fn(3, 32, 2.0, |x| x[1] * x[1] * x[0]);
        let mut sum = a.clone();
        sum.data.iter_mut().zip(&b.data).for_each(|(p, q)| *p = 2.0 * *p + q);
        for z in all_fields(3, Scope::Macroscopic) {
            let za = apply_macroscopic(z, &a, t).unwrap();
            let zb = apply_macroscopic(z, &b, t).unwrap();
            let zs = apply_macroscopic(z, &sum, t).unwrap();
            for k in 0..zs.data.len() {
                assert!((zs.data[k] - 2.0 * za.data[k] - zb.data[k]).abs() < 1e-10);
            }
        }
        let s1 = apply_macroscopic(VectorFieldId::macro_(FieldKind::Stable(0)), &a, t).unwrap();
        assert!(s1.data.iter().enumerate().all(|(k, v)| {
            let mut x = [0.0; 3];
            a.node_position(k, &mut x);
            (v - (-t).exp() * 3.0 * x[0] * x[0]).abs() < 1e-11
        }));
    }

    #[test]
    fn weight_identity_examples() {
        let g = GridField::from_fn(2, 64, 3.0, |x| x[0]);
        assert!(weight_decomposition_check(0, &g).unwrap() < 1e-12);
        let c = GridField::from_fn(2, 64, 3.0, |_| 4.0);
        assert_eq!(weight_decomposition_check(1, &c).unwrap(), 0.0);
        let gauss = GridField::from_fn(2, 128, 6.0, |x| (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp());
        for j in 0..2 {
            assert!(weight_decomposition_check(j, &gauss).unwrap() <= 1e-6);
        }
    }

    fn check_cfg() -> SimConfig {
        SimConfig { grid_radius0: 4.0, grid_cells: 128, ..Default::default() }
    }

    #[test]
    fn density_commutes_with_all_fields() {
        let f0 = InitialData::standard_gaussian(2, 1.0);
        for z in all_fields(2, Scope::Macroscopic) {
            let res = density_commutation_check(&f0, z, 1.0, &check_cfg()).unwrap();
            assert!(res <= 1e-5, "{z}: {res}");
        }
        let zero = f0.with_amplitude(0.0);
        let z = VectorFieldId::macro_(FieldKind::Unstable(0));
        assert_eq!(density_commutation_check(&zero, z, 1.0, &check_cfg()).unwrap(), 0.0);
    }

    #[test]
    fn omitting_the_scaling_correction_is_detected() {
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let cfg = check_cfg();
        let z = VectorFieldId::macro_(FieldKind::Scaling);
        let wrong =
            density_commutation_check_with(&f0, z, 1.0, &cfg, DensityIdentity::OmitScalingCorrection)
                .unwrap();
        let sup_rho = 1.0 / (2.0 * std::f64::consts::PI * 2f64.cosh());
        assert!((wrong - 2.0 * sup_rho).abs() < 1e-4 * sup_rho, "{wrong}");
    }

    #[test]
    fn sobolev_ratio_is_uniform_in_time() {
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let cfg = SimConfig::default();
        let r: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&t| sobolev_ratio(&f0, t, &cfg).unwrap()).collect();
        let (lo, hi) = r.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo <= 1.2, "{r:?}");
        assert_eq!(sobolev_ratio(&f0.with_amplitude(0.0), 1.0, &cfg).unwrap(), 0.0);

        let bump = InitialData::new(
            InitialKind::Bump,
            1.0,
            PhasePoint::new(vec![2.0, 0.0], vec![0.0, 0.0]).unwrap(),
            1.0,
            1.0,
        )
        .unwrap();
        let rb = sobolev_ratio(&bump, 1.0, &cfg).unwrap();
        assert!(rb.is_finite() && rb > 0.0 && rb <= 10.0 * hi, "{rb}");
    }

    #[test]
    fn first_order_norm_of_gaussian_matches_closed_form() {
        // ||f0||_1 = 1, ||U_i f0||_1 = E|x_i + v_i| = 2/sqrt(pi) for unit gaussians.
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let g = InitialData::new(InitialKind::Gaussian, 1.0, PhasePoint::origin(2), 1.0, 1.0).unwrap();
        assert_eq!(f0, g);
        let total = second_order_l1_norms(&f0, 40).unwrap();
        assert!(total.is_finite() && total > 1.0 + 4.0 / std::f64::consts::PI.sqrt());
    }

    #[test]
    fn derivative_decay_is_bounded() {
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let cfg = SimConfig::default();
        let v: Vec<f64> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&t| improved_derivative_decay(&f0, t, &cfg).unwrap())
            .collect();
        let hi = v.iter().cloned().fold(0.0, f64::max);
        let lo = v.iter().cloned().fold(f64::MAX, f64::min);
        assert!(hi / lo < 2.0, "{v:?}");
    }
}
