//! Exact linearized dynamics: the hyperbolic flow map, closed-form initial
//! data, the transported solution `f(t, z) = f0(flow(-t, z))` and its
//! velocity moments on grids.
//!
//! The flow acts axis by axis and every supported `f0` is a product of
//! one-dimensional profiles, so velocity integrals of `f` (and of its
//! vector-field derivatives) factor into per-axis 1D quadratures.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::domain::{grid_scale, PhasePoint, SimConfig};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::quadrature;

/// Largest `|t|` accepted by the flow map before `cosh` overflows.
pub const MAX_HORIZON: f64 = 700.0;

/// Default midpoint nodes per velocity axis.
pub const DEFAULT_VELOCITY_NODES: usize = 96;

/// Total per-axis integrand evaluations allowed for one grid evaluation.
pub const QUADRATURE_BUDGET: usize = 500_000_000;

/// Linear flow `(x cosh t + v sinh t, x sinh t + v cosh t)`.
pub fn linear_flow(t: f64, p: &PhasePoint) -> Result<PhasePoint> {
    if t.abs() > MAX_HORIZON {
        return Err(Error::HorizonTooLarge(t));
    }
    let (s, c) = (t.sinh(), t.cosh());
    let x = p.x.iter().zip(&p.v).map(|(x, v)| x * c + v * s).collect();
    let v = p.x.iter().zip(&p.v).map(|(x, v)| x * s + v * c).collect();
    Ok(PhasePoint { x, v })
}

/// Per-axis quantities `H^i = (v^i)^2/2 - (x^i)^2/2`.
pub fn hamiltonian_invariants(p: &PhasePoint) -> Vec<f64> {
    p.x.iter().zip(&p.v).map(|(x, v)| 0.5 * v * v - 0.5 * x * x).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    Gaussian,
    /// `exp(1 - 1/(1 - r^2))` on `|r| < 1`, radius `3 * width`.
    Bump,
}

/// Unit-mass one-dimensional profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub kind: ProfileKind,
    pub center: f64,
    pub width: f64,
}

fn bump_integral() -> f64 {
    static I: OnceLock<f64> = OnceLock::new();
    *I.get_or_init(|| {
        quadrature::integrate(
            |r: f64| {
                if r.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - r * r)).exp()
                }
            },
            -1.0,
            1.0,
            1e-15,
            1e-14,
            2000,
        )
        .map(|q| q.value)
        .expect("bump normalization converges")
    })
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Profile {
    pub fn support_radius(&self) -> f64 {
        match self.kind {
            ProfileKind::Gaussian => 10.0 * self.width,
            ProfileKind::Bump => 3.0 * self.width,
        }
    }

    pub fn support(&self) -> (f64, f64) {
        let r = self.support_radius();
        (self.center - r, self.center + r)
    }

    /// Value, first and second derivative.
    pub fn eval3(&self, z: f64) -> (f64, f64, f64) {
        match self.kind {
            ProfileKind::Gaussian => {
                let w = self.width;
                let u = (z - self.center) / w;
                let p = INV_SQRT_2PI / w * (-0.5 * u * u).exp();
                (p, -u / w * p, (u * u - 1.0) / (w * w) * p)
            }
            ProfileKind::Bump => {
                let big_r = 3.0 * self.width;
                let r = (z - self.center) / big_r;
                if r.abs() >= 1.0 {
                    return (0.0, 0.0, 0.0);
                }
                let q = 1.0 / (1.0 - r * r);
                let p = (1.0 - q).exp() / (big_r * bump_integral());
                let dq = 2.0 * r * q * q / big_r;
                let d2q = (2.0 * q * q + 8.0 * r * r * q * q * q) / (big_r * big_r);
                (p, -p * dq, p * (dq * dq - d2q))
            }
        }
    }

    pub fn value(&self, z: f64) -> f64 {
        match self.kind {
            ProfileKind::Gaussian => {
                let u = (z - self.center) / self.width;
                INV_SQRT_2PI / self.width * (-0.5 * u * u).exp()
            }
            ProfileKind::Bump => self.eval3(z).0,
        }
    }

    /// Draws one sample; returns it with the number of proposals used.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (f64, usize) {
        match self.kind {
            ProfileKind::Gaussian => {
                let u: f64 = rng.sample(StandardNormal);
                (self.center + self.width * u, 1)
            }
            ProfileKind::Bump => {
                let mut tries = 0;
                loop {
                    tries += 1;
                    let r: f64 = rng.random_range(-1.0..1.0);
                    let accept = (1.0 - 1.0 / (1.0 - r * r)).exp();
                    if rng.random::<f64>() < accept {
                        return (self.center + 3.0 * self.width * r, tries);
                    }
                    if tries >= 10_000 {
                        return (self.center, tries);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialKind {
    Gaussian,
    Bump,
    /// Gaussian in position, bump in velocity.
    Product,
}

/// Closed-form initial distribution `amplitude * prod_j p_j(z_j)` with
/// unit-mass profiles, so `mass = amplitude`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub kind: InitialKind,
    pub amplitude: f64,
    pub center: PhasePoint,
    pub width_x: f64,
    pub width_v: f64,
}

impl InitialData {
    pub fn new(
        kind: InitialKind,
        amplitude: f64,
        center: PhasePoint,
        width_x: f64,
        width_v: f64,
    ) -> Result<Self> {
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::InvalidInput("amplitude must be finite and non-negative".into()));
        }
        if !(width_x > 0.0 && width_v > 0.0) {
            return Err(Error::InvalidInput("widths must be positive".into()));
        }
        center.check()?;
        Ok(Self { kind, amplitude, center, width_x, width_v })
    }

    /// Isotropic unit-width gaussian at the origin with the given mass.
    pub fn standard_gaussian(dim: usize, amplitude: f64) -> Self {
        Self {
            kind: InitialKind::Gaussian,
            amplitude,
            center: PhasePoint::origin(dim),
            width_x: 1.0,
            width_v: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    pub fn mass(&self) -> f64 {
        self.amplitude
    }

    pub fn with_amplitude(&self, amplitude: f64) -> Self {
        Self { amplitude, ..self.clone() }
    }

    /// Profile of phase-space coordinate `j` (`j < n` position, else velocity).
    pub fn profile(&self, j: usize) -> Profile {
        let n = self.dim();
        let (kind, center, width) = if j < n {
            let kind = match self.kind {
                InitialKind::Bump => ProfileKind::Bump,
                _ => ProfileKind::Gaussian,
            };
            (kind, self.center.x[j], self.width_x)
        } else {
            let kind = match self.kind {
                InitialKind::Gaussian => ProfileKind::Gaussian,
                _ => ProfileKind::Bump,
            };
            (kind, self.center.v[j - n], self.width_v)
        };
        Profile { kind, center, width }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        (0..2 * self.dim())
            .map(|j| self.profile(j).value(z[j]))
            .product::<f64>()
            * self.amplitude
    }

    /// Value, gradient and Hessian (row-major `2n x 2n`) at `z`.
    pub fn derivatives(&self, z: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let m = 2 * self.dim();
        let mut p = [0.0; 6];
        let mut dp = [0.0; 6];
        let mut d2p = [0.0; 6];
        for j in 0..m {
            let (a, b, c) = self.profile(j).eval3(z[j]);
            p[j] = a;
            dp[j] = b;
            d2p[j] = c;
        }
        let prod_except = |skip: &[usize]| -> f64 {
            (0..m).filter(|j| !skip.contains(j)).map(|j| p[j]).product::<f64>()
        };
        for j in 0..m {
            grad[j] = self.amplitude * dp[j] * prod_except(&[j]);
            for k in 0..m {
                hess[j * m + k] = self.amplitude
                    * if j == k {
                        d2p[j] * prod_except(&[j])
                    } else {
                        dp[j] * dp[k] * prod_except(&[j, k])
                    };
            }
        }
        self.amplitude * p[..m].iter().product::<f64>()
    }

    pub fn gradient(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let m = 2 * self.dim();
        let mut hess = [0.0; 36];
        self.derivatives(z, grad, &mut hess[..m * m])
    }

    /// Axis-aligned box containing the support (gaussians truncated at 10 widths).
    pub fn support_box(&self) -> Vec<(f64, f64)> {
        (0..2 * self.dim()).map(|j| self.profile(j).support()).collect()
    }
}

/// `f(t, z) = f0(flow(-t, z))`.
pub fn eval_linear_solution(f0: &InitialData, t: f64, p: &PhasePoint) -> Result<f64> {
    let back = linear_flow(-t, p)?;
    Ok(f0.eval(&back.to_vec()))
}

/// One velocity quadrature node on a single axis: the backward-mapped point
/// and the profile values needed by the integrand factors.
#[derive(Debug, Clone, Copy)]
pub struct AxisSample {
    pub x: f64,
    pub v: f64,
    pub cosh: f64,
    pub sinh: f64,
    pub px: f64,
    pub dpx: f64,
    pub pv: f64,
    pub dpv: f64,
}

impl AxisSample {
    /// Per-axis factor of `f(t, .)`.
    pub fn q(&self) -> f64 {
        self.px * self.pv
    }
    /// `d/dx` of the per-axis factor through the backward flow.
    pub fn dq_dx(&self) -> f64 {
        self.cosh * self.dpx * self.pv - self.sinh * self.px * self.dpv
    }
    pub fn dq_dv(&self) -> f64 {
        -self.sinh * self.dpx * self.pv + self.cosh * self.px * self.dpv
    }
}

/// Per-axis integrand factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Q,
    Dx,
    Dv,
    /// `x q`
    XQ,
    /// `v q`
    VQ,
    /// `x dq/dx + v dq/dv`
    Scaling,
    /// `dq/dx + dq/dv`
    Unstable,
    /// `dq/dx - dq/dv`
    Stable,
}

impl Factor {
    fn eval(self, s: &AxisSample) -> f64 {
        match self {
            Factor::Q => s.q(),
            Factor::Dx => s.dq_dx(),
            Factor::Dv => s.dq_dv(),
            Factor::XQ => s.x * s.q(),
            Factor::VQ => s.v * s.q(),
            Factor::Scaling => s.x * s.dq_dx() + s.v * s.dq_dv(),
            Factor::Unstable => s.dq_dx() + s.dq_dv(),
            Factor::Stable => s.dq_dx() - s.dq_dv(),
        }
    }
}

/// `coeff * prod_axis factor_axis`, summed over terms to form an integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableTerm {
    pub coeff: f64,
    pub factors: Vec<Factor>,
}

impl SeparableTerm {
    pub fn density(dim: usize, amplitude: f64) -> Self {
        Self { coeff: amplitude, factors: vec![Factor::Q; dim] }
    }
}

/// Velocity interval on one axis mapping into the support of `f0` at time `t`.
fn preimage_interval(
    x: f64,
    t: f64,
    xbox: (f64, f64),
    vbox: (f64, f64),
) -> Option<(f64, f64)> {
    let (s, c) = (t.sinh(), t.cosh());
    // v0 = v c - x s in vbox
    let mut lo = (vbox.0 + x * s) / c;
    let mut hi = (vbox.1 + x * s) / c;
    if s.abs() < 1e-300 {
        if x < xbox.0 || x > xbox.1 {
            return None;
        }
    } else {
        // x0 = x c - v s in xbox
        let a = (x * c - xbox.1) / s;
        let b = (x * c - xbox.0) / s;
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        lo = lo.max(a);
        hi = hi.min(b);
    }
    (hi > lo).then_some((lo, hi))
}

/// `int factor(x, v) dv` on one axis by the midpoint rule over the exact
/// preimage of the support.
fn axis_integral(
    f0: &InitialData,
    axis: usize,
    t: f64,
    x: f64,
    nodes: usize,
    factor: Factor,
) -> f64 {
    let n = f0.dim();
    let px = f0.profile(axis);
    let pv = f0.profile(n + axis);
    let Some((lo, hi)) = preimage_interval(x, t, px.support(), pv.support()) else {
        return 0.0;
    };
    let (s, c) = (t.sinh(), t.cosh());
    let dv = (hi - lo) / nodes as f64;
    let mut acc = 0.0;
    for k in 0..nodes {
        let v = lo + (k as f64 + 0.5) * dv;
        let x0 = x * c - v * s;
        let v0 = v * c - x * s;
        let (a, b, _) = px.eval3(x0);
        let (d, e, _) = pv.eval3(v0);
        let sample = AxisSample { x, v, cosh: c, sinh: s, px: a, dpx: b, pv: d, dpv: e };
        acc += factor.eval(&sample);
    }
    acc * dv
}

/// Velocity integral of a separable integrand at every node of the grid
/// `(dim, cells, scale)`.
pub fn velocity_integral_on_grid(
    f0: &InitialData,
    t: f64,
    cells: usize,
    scale: f64,
    nodes: usize,
    terms: &[SeparableTerm],
) -> Result<GridField> {
    if t.abs() > MAX_HORIZON {
        return Err(Error::HorizonTooLarge(t));
    }
    let dim = f0.dim();
    let m = cells + 1;
    let cost = terms.len() * dim * m * nodes;
    if cost > QUADRATURE_BUDGET {
        return Err(Error::QuadratureBudget(format!(
            "{cost} evaluations exceed the budget of {QUADRATURE_BUDGET}"
        )));
    }
    let mut grid = GridField::zeros(dim, cells, scale, 1);
    if f0.amplitude == 0.0 {
        return Ok(grid);
    }
    let coords: Vec<f64> = (0..m).map(|i| grid.axis_coord(i)).collect();
    let mut idx = [0usize; 3];
    for term in terms {
        let tables: Vec<Vec<f64>> = (0..dim)
            .map(|a| {
                coords
                    .iter()
                    .map(|&x| axis_integral(f0, a, t, x, nodes, term.factors[a]))
                    .collect()
            })
            .collect();
        for node in 0..grid.n_nodes() {
            grid.multi_index(node, &mut idx);
            let prod: f64 = (0..dim).map(|a| tables[a][idx[a]]).product();
            grid.data[node] += term.coeff * prod;
        }
    }
    Ok(grid)
}

/// `rho(f)(t, .)` of the linear solution on the time-`t` grid of `cfg`.
pub fn linear_density_on_grid(f0: &InitialData, t: f64, cfg: &SimConfig) -> Result<GridField> {
    if t < 0.0 {
        return Err(Error::InvalidInput("t must be non-negative".into()));
    }
    linear_density_on_grid_with(f0, t, cfg.grid_cells, grid_scale(t, cfg), DEFAULT_VELOCITY_NODES)
}

pub fn linear_density_on_grid_with(
    f0: &InitialData,
    t: f64,
    cells: usize,
    scale: f64,
    nodes: usize,
) -> Result<GridField> {
    if nodes < 64 {
        return Err(Error::InvalidInput("at least 64 velocity nodes per axis required".into()));
    }
    let term = SeparableTerm::density(f0.dim(), f0.amplitude);
    velocity_integral_on_grid(f0, t, cells, scale, nodes, &[term])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pp(x: &[f64], v: &[f64]) -> PhasePoint {
        PhasePoint::new(x.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn flow_examples() {
        let p = pp(&[0.3, -1.0], &[2.0, 0.5]);
        assert_eq!(linear_flow(0.0, &p).unwrap(), p);
        for t in [0.5, 1.0, 3.0] {
            let q = linear_flow(t, &pp(&[1.0, 0.0], &[-1.0, 0.0])).unwrap();
            assert!((q.x[0] - (-t).exp()).abs() < 1e-14);
            assert!((q.v[0] + (-t).exp()).abs() < 1e-14);
        }
        let q = linear_flow(2f64.ln(), &pp(&[1.0, 0.0], &[0.0, 0.0])).unwrap();
        assert!((q.x[0] - 1.25).abs() < 1e-15 && (q.v[0] - 0.75).abs() < 1e-15);
        assert!(matches!(linear_flow(701.0, &p), Err(Error::HorizonTooLarge(_))));
    }

    #[test]
    fn hamiltonian_examples() {
        assert_eq!(hamiltonian_invariants(&pp(&[1.0, 0.0], &[0.0, 1.0])), vec![-0.5, 0.5]);
        assert_eq!(hamiltonian_invariants(&pp(&[0.7, 0.7], &[0.7, 0.7])), vec![0.0, 0.0]);
        let p = pp(&[0.4, -1.3, 2.0], &[0.1, 0.9, -0.2]);
        let h0 = hamiltonian_invariants(&p);
        for t in [0.5, 1.0, 2.0] {
            let h = hamiltonian_invariants(&linear_flow(t, &p).unwrap());
            for (a, b) in h.iter().zip(&h0) {
                assert!((a - b).abs() < 1e-12 * (1.0 + t.exp().powi(2)));
            }
        }
    }

    #[test]
    fn linear_solution_transports_values() {
        let f0 = InitialData::new(
            InitialKind::Bump,
            1.0,
            pp(&[0.0, 0.0], &[0.0, 0.0]),
            0.5,
            0.5,
        )
        .unwrap();
        let q = pp(&[0.2, -0.3], &[0.1, 0.4]);
        let t = 1.7;
        let p = linear_flow(t, &q).unwrap();
        let a = eval_linear_solution(&f0, t, &p).unwrap();
        assert!((a - f0.eval(&q.to_vec())).abs() < 1e-12 * f0.eval(&q.to_vec()));
        assert_eq!(eval_linear_solution(&f0, 0.0, &q).unwrap(), f0.eval(&q.to_vec()));
    }

    #[test]
    fn gaussian_linear_solution_by_direct_substitution() {
        // f0 standard gaussian at origin, t = 1, p = ((1,0),(1,0)):
        // backward point x0 = cosh 1 - sinh 1 = e^-1, v0 = e^-1 on axis 1.
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let p = pp(&[1.0, 0.0], &[1.0, 0.0]);
        let e1 = (-1f64).exp();
        let expect = (-(e1 * e1)).exp() / (2.0 * std::f64::consts::PI).powi(2);
        assert!((eval_linear_solution(&f0, 1.0, &p).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn profiles_have_unit_mass_and_consistent_derivatives() {
        for kind in [ProfileKind::Gaussian, ProfileKind::Bump] {
            let p = Profile { kind, center: 0.3, width: 0.7 };
            let (a, b) = p.support();
            let m = quadrature::integrate(|z| p.value(z), a, b, 1e-13, 1e-12, 500).unwrap();
            assert!((m.value - 1.0).abs() < 1e-10, "{kind:?} mass {}", m.value);
            let z = 0.9;
            let h = 1e-5;
            let (_, d1, d2) = p.eval3(z);
            let fd1 = (p.value(z + h) - p.value(z - h)) / (2.0 * h);
            let fd2 = (p.eval3(z + h).1 - p.eval3(z - h).1) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-6 * (1.0 + d1.abs()));
            assert!((d2 - fd2).abs() < 1e-5 * (1.0 + d2.abs()));
        }
    }

    #[test]
    fn density_at_time_zero_matches_gaussian() {
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let rho = linear_density_on_grid_with(&f0, 0.0, 32, 5.0, 64).unwrap();
        let mut x = [0.0; 3];
        for n in 0..rho.n_nodes() {
            rho.node_position(n, &mut x);
            let g = (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp() / (2.0 * std::f64::consts::PI);
            assert!((rho.data[n] - g).abs() < 1e-8);
        }
    }

    #[test]
    fn mass_is_conserved() {
        let f0 = InitialData::standard_gaussian(2, 0.5);
        let cfg = SimConfig { grid_radius0: 6.0, grid_cells: 64, ..Default::default() };
        for t in [0.0, 0.7, 2.0, 3.5] {
            let rho = linear_density_on_grid(&f0, t, &cfg).unwrap();
            assert!((rho.integral()[0] - 0.5).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn peak_density_times_exponential_settles() {
        // Closed form: rho(t, 0) = 1 / (2 pi cosh 2t) for the unit gaussian in 2D,
        // so e^{2t} sup rho -> 1/pi.
        let f0 = InitialData::standard_gaussian(2, 1.0);
        let cfg = SimConfig { grid_radius0: 6.0, grid_cells: 64, ..Default::default() };
        let mut prev = 0.0;
        for t in [2.0, 3.0, 4.0] {
            let rho = linear_density_on_grid(&f0, t, &cfg).unwrap();
            let scaled = rho.sup_norm() * (2.0 * t).exp();
            let oracle = (2.0 * t).exp() / (2.0 * std::f64::consts::PI * (2.0 * t).cosh());
            assert!((scaled - oracle).abs() < 1e-8);
            assert!(scaled > prev);
            prev = scaled;
        }
        assert!((prev - 1.0 / std::f64::consts::PI).abs() < 1e-3);
    }

    #[test]
    fn quadrature_budget_is_enforced() {
        let f0 = InitialData::standard_gaussian(3, 1.0);
        let e = linear_density_on_grid_with(&f0, 1.0, 4000, 4.0, 100_000).unwrap_err();
        assert!(matches!(e, Error::QuadratureBudget(_)));
    }

    proptest::proptest! {
        #[test]
        fn group_property(t in -5.0f64..5.0, s in -5.0f64..5.0,
                          x0 in -2.0f64..2.0, x1 in -2.0f64..2.0, v0 in -2.0f64..2.0, v1 in -2.0f64..2.0) {
            let p = pp(&[x0, x1], &[v0, v1]);
            let a = linear_flow(t, &linear_flow(s, &p).unwrap()).unwrap();
            let b = linear_flow(t + s, &p).unwrap();
            let scale = b.norm().max(p.norm() * (t + s).abs().exp()).max(1e-300);
            for (u, w) in a.to_vec().iter().zip(b.to_vec()) {
                proptest::prop_assert!((u - w).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn stable_unstable_splitting(t in -5.0f64..5.0, x0 in -2.0f64..2.0, v0 in -2.0f64..2.0) {
            let p = pp(&[x0, 0.0], &[v0, 0.0]);
            let q = linear_flow(t, &p).unwrap();
            let up = q.x[0] + q.v[0];
            let st = q.x[0] - q.v[0];
            proptest::prop_assert!((up - t.exp() * (x0 + v0)).abs() <= 1e-12 * (1.0 + t.exp()));
            proptest::prop_assert!((st - (-t).exp() * (x0 - v0)).abs() <= 1e-12 * (1.0 + (-t).exp()));
        }
    }
}
