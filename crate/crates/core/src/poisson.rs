//! Free-space force fields for `Delta phi = rho`.
//!
//! Direct particle summation with Plummer softening, grid convolution
//! against the same softened kernel (evaluated with zero-padded FFTs, which
//! give the identical discrete sum), and the polar quadratures for the
//! kernel bound `int dy / (|y|^{n-1} (1 + |x + y|)^n)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::quadrature;

/// Weighted point sources, positions stored flat (`dim` per source).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub dim: usize,
    pub positions: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SourceSet {
    pub fn new(dim: usize, positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::InvalidInput("dimension must be 2 or 3".into()));
        }
        if positions.len() != dim * weights.len() {
            return Err(Error::InvalidInput("positions and weights are not congruent".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        Ok(Self { dim, positions, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Gradient of the softened Green function at offset `d`, added into `out`.
#[inline]
fn add_kernel(dim: usize, d: &[f64], w: f64, soft2: f64, out: &mut [f64]) {
    let r2: f64 = d[..dim].iter().map(|a| a * a).sum::<f64>() + soft2;
    let factor = if dim == 2 {
        w / (2.0 * PI * r2)
    } else {
        w / (4.0 * PI * r2 * r2.sqrt())
    };
    for a in 0..dim {
        out[a] += factor * d[a];
    }
}

const TARGET_BLOCK: usize = 64;

/// `grad phi` at each target (flat, `dim` per target). Each target sums over
/// sources in a fixed order, so results do not depend on the thread count.
pub fn pairwise_force(targets: &[f64], sources: &SourceSet, softening: f64) -> Result<Vec<f64>> {
    let dim = sources.dim;
    if targets.len() % dim != 0 {
        return Err(Error::InvalidInput("target array length not a multiple of dim".into()));
    }
    let soft2 = softening * softening;
    let mut out = vec![0.0; targets.len()];
    let singular = std::sync::atomic::AtomicBool::new(false);
    out.par_chunks_mut(TARGET_BLOCK * dim)
        .zip(targets.par_chunks(TARGET_BLOCK * dim))
        .for_each(|(fo, tb)| {
            let mut d = [0.0; 3];
            for (f, x) in fo.chunks_exact_mut(dim).zip(tb.chunks_exact(dim)) {
                for (p, &w) in sources.positions.chunks_exact(dim).zip(&sources.weights) {
                    for a in 0..dim {
                        d[a] = x[a] - p[a];
                    }
                    if soft2 == 0.0 && d[..dim].iter().all(|&c| c == 0.0) {
                        if w != 0.0 {
                            singular.store(true, std::sync::atomic::Ordering::Relaxed);
                        }
                        continue;
                    }
                    add_kernel(dim, &d, w, soft2, f);
                }
            }
        });
    if singular.into_inner() {
        return Err(Error::SingularEvaluation);
    }
    Ok(out)
}

/// Softened potential `phi` at each target: `(1/4 pi) log(|d|^2 + soft^2)` per
/// unit weight in 2D, `-1 / (4 pi sqrt(|d|^2 + soft^2))` in 3D.
pub fn pairwise_potential(targets: &[f64], sources: &SourceSet, softening: f64) -> Result<Vec<f64>> {
    let dim = sources.dim;
    let soft2 = softening * softening;
    targets
        .par_chunks(dim)
        .map(|x| {
            let mut acc = 0.0;
            for (p, &w) in sources.positions.chunks_exact(dim).zip(&sources.weights) {
                let r2: f64 = (0..dim).map(|a| (x[a] - p[a]).powi(2)).sum::<f64>() + soft2;
                if r2 == 0.0 {
                    return Err(Error::SingularEvaluation);
                }
                acc += w * potential_kernel(dim, r2);
            }
            Ok(acc)
        })
        .collect()
}

#[inline]
fn potential_kernel(dim: usize, r2: f64) -> f64 {
    if dim == 2 {
        r2.ln() / (4.0 * PI)
    } else {
        -1.0 / (4.0 * PI * r2.sqrt())
    }
}

/// Smallest 2,3,5-smooth integer not below `n`.
fn smooth_size(n: usize) -> usize {
    let mut k = n.max(1);
    loop {
        let mut r = k;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return k;
        }
        k += 1;
    }
}

/// Kernel spectra for the free-space convolution on a `(cells+1)^dim` node
/// grid, in units where the cell width is one.
struct ConvolutionPlan {
    dim: usize,
    padded: usize,
    /// `dim` force components, then the potential.
    spectra: Vec<Vec<Complex64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

type PlanKey = (usize, usize, u64);

fn plan_cache() -> &'static Mutex<HashMap<PlanKey, Arc<ConvolutionPlan>>> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Arc<ConvolutionPlan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn get_plan(dim: usize, cells: usize, soft_cells: f64) -> Arc<ConvolutionPlan> {
    let key = (dim, cells, soft_cells.to_bits());
    let mut cache = plan_cache().lock().expect("plan cache poisoned");
    if cache.len() > 64 {
        cache.clear();
    }
    cache
        .entry(key)
        .or_insert_with(|| Arc::new(ConvolutionPlan::new(dim, cells, soft_cells)))
        .clone()
}

impl ConvolutionPlan {
    fn new(dim: usize, cells: usize, soft_cells: f64) -> Self {
        let nodes = cells + 1;
        let padded = smooth_size(2 * nodes - 1);
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(padded);
        let inverse = planner.plan_fft_inverse(padded);
        let total = padded.pow(dim as u32);
        let soft2 = soft_cells * soft_cells;
        let mut spectra = vec![vec![Complex64::new(0.0, 0.0); total]; dim + 1];
        let mut idx = [0usize; 3];
        let mut d = [0.0; 3];
        for k in 0..total {
            let mut rem = k;
            for a in (0..dim).rev() {
                idx[a] = rem % padded;
                rem /= padded;
            }
            let mut in_range = true;
            for a in 0..dim {
                let off = if idx[a] < nodes {
                    idx[a] as isize
                } else {
                    idx[a] as isize - padded as isize
                };
                if off.unsigned_abs() >= nodes {
                    in_range = false;
                }
                d[a] = off as f64;
            }
            if !in_range {
                continue;
            }
            let r2: f64 = d[..dim].iter().map(|a| a * a).sum::<f64>() + soft2;
            if r2 > 0.0 {
                let mut f = [0.0; 3];
                add_kernel(dim, &d, 1.0, soft2, &mut f);
                for a in 0..dim {
                    spectra[a][k].re = f[a];
                }
                spectra[dim][k].re = potential_kernel(dim, r2);
            }
        }
        let mut plan = Self { dim, padded, spectra: Vec::new(), forward, inverse };
        for s in spectra.iter_mut() {
            plan.transform(s, false);
        }
        plan.spectra = spectra;
        plan
    }

    /// In-place multidimensional FFT along every axis.
    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let fft = if inverse { &self.inverse } else { &self.forward };
        let p = self.padded;
        let mut line = vec![Complex64::new(0.0, 0.0); p];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        let total = data.len();
        for axis in 0..self.dim {
            let stride = p.pow((self.dim - 1 - axis) as u32);
            let block = stride * p;
            for start in (0..total).step_by(block) {
                for off in 0..stride {
                    let base = start + off;
                    if stride == 1 {
                        fft.process_with_scratch(&mut data[base..base + p], &mut scratch);
                        continue;
                    }
                    for (k, l) in line.iter_mut().enumerate() {
                        *l = data[base + k * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (k, l) in line.iter().enumerate() {
                        data[base + k * stride] = *l;
                    }
                }
            }
        }
    }

    fn pad(&self, g: &GridField) -> Vec<Complex64> {
        let p = self.padded;
        let mut out = vec![Complex64::new(0.0, 0.0); p.pow(self.dim as u32)];
        let mut idx = [0usize; 3];
        for node in 0..g.n_nodes() {
            g.multi_index(node, &mut idx);
            let k = idx[..self.dim].iter().fold(0, |acc, &i| acc * p + i);
            out[k].re = g.data[node];
        }
        out
    }

    /// `sum_j rho_j kernel_c(i - j)` for the requested spectra.
    fn convolve(&self, rho: &GridField, comps: &[usize]) -> Vec<Vec<f64>> {
        let mut rho_hat = self.pad(rho);
        self.transform(&mut rho_hat, false);
        let p = self.padded;
        let norm = 1.0 / (p.pow(self.dim as u32) as f64);
        let mut idx = [0usize; 3];
        comps
            .iter()
            .map(|&c| {
                let mut prod: Vec<Complex64> =
                    rho_hat.iter().zip(&self.spectra[c]).map(|(a, b)| a * b).collect();
                self.transform(&mut prod, true);
                (0..rho.n_nodes())
                    .map(|node| {
                        rho.multi_index(node, &mut idx);
                        let k = idx[..self.dim].iter().fold(0, |acc, &i| acc * p + i);
                        prod[k].re * norm
                    })
                    .collect()
            })
            .collect()
    }
}

/// Softening used by the grid solver when none is configured: one cell width.
pub fn default_softening(rho: &GridField) -> f64 {
    rho.spacing()
}

/// Midpoint convolution of `rho` against the softened force kernel at every
/// node, softening one cell width.
pub fn grid_force_from_density(rho: &GridField) -> Result<GridField> {
    grid_force_with_softening(rho, default_softening(rho))
}

pub fn grid_force_with_softening(rho: &GridField, softening: f64) -> Result<GridField> {
    check_density(rho)?;
    let h = rho.spacing();
    let plan = get_plan(rho.dim, rho.cells, softening / h);
    let comps: Vec<usize> = (0..rho.dim).collect();
    let conv = plan.convolve(rho, &comps);
    // offsets scale by h: kernel(h d, h s) = h^{1-n} kernel(d, s); times the cell volume h^n
    let mut out = GridField::zeros(rho.dim, rho.cells, rho.scale, rho.dim);
    for node in 0..rho.n_nodes() {
        for a in 0..rho.dim {
            out.data[node * rho.dim + a] = h * conv[a][node];
        }
    }
    Ok(out)
}

/// Potential from the same midpoint convolution.
pub fn grid_potential_from_density(rho: &GridField) -> Result<GridField> {
    grid_potential_with_softening(rho, default_softening(rho))
}

pub fn grid_potential_with_softening(rho: &GridField, softening: f64) -> Result<GridField> {
    check_density(rho)?;
    let h = rho.spacing();
    let plan = get_plan(rho.dim, rho.cells, softening / h);
    let conv = plan.convolve(rho, &[rho.dim]).pop().expect("one component");
    let vol = rho.cell_volume();
    let mut out = GridField::zeros(rho.dim, rho.cells, rho.scale, 1);
    if rho.dim == 2 {
        // log(h^2 (|d|^2 + s^2)) = log h^2 + log(|d|^2 + s^2)
        let mass: f64 = rho.data.iter().sum::<f64>() * vol;
        let shift = mass * (h * h).ln() / (4.0 * PI);
        for node in 0..rho.n_nodes() {
            out.data[node] = vol * conv[node] + shift;
        }
    } else {
        for node in 0..rho.n_nodes() {
            out.data[node] = vol / h * conv[node];
        }
    }
    Ok(out)
}

fn check_density(rho: &GridField) -> Result<()> {
    if rho.components != 1 {
        return Err(Error::InvalidInput("density must be a scalar grid".into()));
    }
    if !(rho.dim == 2 || rho.dim == 3) {
        return Err(Error::InvalidInput("dimension must be 2 or 3".into()));
    }
    Ok(())
}

/// Same sum as [`grid_force_with_softening`] evaluated directly, `O(M^2)`.
pub fn grid_force_direct(rho: &GridField, softening: f64) -> Result<GridField> {
    check_density(rho)?;
    let dim = rho.dim;
    let vol = rho.cell_volume();
    let mut positions = Vec::with_capacity(rho.n_nodes() * dim);
    let mut weights = Vec::with_capacity(rho.n_nodes());
    let mut x = [0.0; 3];
    for node in 0..rho.n_nodes() {
        rho.node_position(node, &mut x);
        positions.extend_from_slice(&x[..dim]);
        weights.push(rho.data[node] * vol);
    }
    // signed weights are allowed here, so bypass the constructor check
    let sources = SourceSet { dim, positions: positions.clone(), weights };
    let data = pairwise_force(&positions, &sources, softening)?;
    Ok(GridField { dim, cells: rho.cells, scale: rho.scale, components: dim, data })
}

const RADIAL_REL_TOL: f64 = 1e-10;
const ANGULAR_REL_TOL: f64 = 1e-7;
const PANEL_BUDGET: usize = 4000;

/// `int_0^inf dr / (c + sqrt(a^2 + 2 a r cos + r^2))^n`.
fn radial_integral(n: usize, a: f64, cos: f64, c: f64) -> Result<f64> {
    let integrand = |r: f64| {
        let q = (a * a + 2.0 * a * r * cos + r * r).max(0.0).sqrt();
        (c + q).powi(-(n as i32))
    };
    let split = a.max(c);
    let closest = -a * cos;
    let mut breaks = vec![0.0];
    if closest > 0.0 && closest < split {
        breaks.push(closest);
    }
    breaks.push(split);
    let near = quadrature::integrate_with_breaks(integrand, &breaks, 0.0, RADIAL_REL_TOL, PANEL_BUDGET)?;
    let far =
        quadrature::integrate_to_infinity(integrand, split, 0.0, RADIAL_REL_TOL, PANEL_BUDGET)?;
    Ok(near.value + far.value)
}

/// `int dy / (|y|^{n-1} (c + |x + y|)^n)` with `|x| = a`, by polar
/// coordinates centred at `y = 0` (the `|y|^{n-1}` singularity cancels
/// against the Jacobian).
fn polar_kernel(n: usize, a: f64, c: f64) -> Result<f64> {
    let mut failure = None;
    let mut angular = |theta: f64| match radial_integral(n, a, theta.cos(), c) {
        Ok(v) => {
            if n == 2 {
                v
            } else {
                v * theta.sin()
            }
        }
        Err(e) => {
            failure.get_or_insert(e);
            0.0
        }
    };
    // the integrand is sharpest near theta = pi, where the ray passes through -x
    let breaks = [0.0, 0.5 * PI, 0.9 * PI, PI];
    let res = quadrature::integrate_with_breaks(&mut angular, &breaks, 0.0, ANGULAR_REL_TOL, PANEL_BUDGET)?;
    if let Some(e) = failure {
        return Err(e);
    }
    // 2D: theta over [0, 2 pi] is twice [0, pi]; 3D: axial symmetry gives 2 pi sin
    Ok(if n == 2 { 2.0 * res.value } else { 2.0 * PI * res.value })
}

fn check_kernel_args(n: usize, x: &[f64]) -> Result<f64> {
    if !(n == 2 || n == 3) || x.len() != n {
        return Err(Error::InvalidInput("dimension must be 2 or 3 and match x".into()));
    }
    if x.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("x must be finite".into()));
    }
    Ok(x.iter().map(|c| c * c).sum::<f64>().sqrt())
}

/// `int_{R^n} dy / (|y|^{n-1} (1 + |x + y|)^n)`, relative accuracy well
/// below `1e-4`.
pub fn kernel_bound_quadrature(n: usize, x: &[f64]) -> Result<f64> {
    let a = check_kernel_args(n, x)?;
    polar_kernel(n, a, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledKernel {
    /// `int dy / (|y|^{n-1} (e^t + |x - y|)^n)` by direct quadrature.
    pub direct: f64,
    /// `e^{-(n-1) t} kernel_bound(x / e^t)`.
    pub rescaled: f64,
    pub relative_difference: f64,
}

/// Largest relative gap accepted between the direct and rescaled values.
pub const SCALED_KERNEL_TOL: f64 = 1e-3;

/// The time-weighted kernel integral and its change-of-variables form;
/// errors if the two disagree beyond [`SCALED_KERNEL_TOL`].
pub fn scaled_kernel_decay(n: usize, t: f64, x: &[f64]) -> Result<ScaledKernel> {
    let a = check_kernel_args(n, x)?;
    if t < 0.0 {
        return Err(Error::InvalidInput("t must be non-negative".into()));
    }
    let et = t.exp();
    let direct = polar_kernel(n, a, et)?;
    let rescaled = (-(n as f64 - 1.0) * t).exp() * polar_kernel(n, a / et, 1.0)?;
    let relative_difference = (direct - rescaled).abs() / rescaled.abs();
    if relative_difference > SCALED_KERNEL_TOL {
        return Err(Error::Internal(format!(
            "scaled kernel mismatch: direct {direct}, rescaled {rescaled}"
        )));
    }
    Ok(ScaledKernel { direct, rescaled, relative_difference })
}
