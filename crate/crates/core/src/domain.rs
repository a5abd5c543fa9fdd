//! Shared domain types, configuration parsing/validation and the co-expanding
//! grid convention.
//!
//! Grids at time `t` cover the box `[-s(t), s(t)]^n` with `s(t) = R0 e^t`;
//! rescaled coordinates are `xi = x / s(t)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A position-velocity pair in `R^n x R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let p = Self { x, v };
        p.check()?;
        Ok(p)
    }

    pub fn origin(dim: usize) -> Self {
        Self {
            x: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.x.len() != self.v.len() {
            return Err(Error::InvalidInput(format!(
                "position has length {} but velocity has length {}",
                self.x.len(),
                self.v.len()
            )));
        }
        if !(2..=3).contains(&self.x.len()) {
            return Err(Error::InvalidInput("dimension must be 2 or 3".into()));
        }
        if self.x.iter().chain(&self.v).any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("phase point has non-finite components".into()));
        }
        Ok(())
    }

    /// Euclidean norm on `R^{2n}`.
    pub fn norm(&self) -> f64 {
        self.x.iter().chain(&self.v).map(|c| c * c).sum::<f64>().sqrt()
    }

    /// `x + v`, the unstable coordinate of the linear flow.
    pub fn unstable(&self) -> Vec<f64> {
        self.x.iter().zip(&self.v).map(|(a, b)| a + b).collect()
    }

    /// `x - v`, the stable coordinate of the linear flow.
    pub fn stable(&self) -> Vec<f64> {
        self.x.iter().zip(&self.v).map(|(a, b)| a - b).collect()
    }

    /// Flat `(x, v)` vector of length `2n`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut z = self.x.clone();
        z.extend_from_slice(&self.v);
        z
    }

    pub fn from_slice(z: &[f64]) -> Self {
        let n = z.len() / 2;
        Self {
            x: z[..n].to_vec(),
            v: z[n..].to_vec(),
        }
    }
}

/// Validated simulation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dim: usize,
    /// +1 attractive, -1 repulsive.
    pub mu: f64,
    pub eps: f64,
    pub n_particles: usize,
    pub dt: f64,
    pub t_max: f64,
    /// Force softening; `0` selects one cell width at deposit time.
    pub softening: f64,
    pub grid_radius0: f64,
    pub grid_cells: usize,
    pub seed: u64,
    pub snapshot_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            mu: 1.0,
            eps: 0.01,
            n_particles: 20_000,
            dt: 0.01,
            t_max: 5.0,
            softening: 0.0,
            grid_radius0: 6.0,
            grid_cells: 64,
            seed: 42,
            snapshot_stride: 5,
        }
    }
}

pub const CONFIG_KEYS: [&str; 11] = [
    "dim",
    "mu",
    "eps",
    "n_particles",
    "dt",
    "t_max",
    "softening",
    "grid_radius0",
    "grid_cells",
    "seed",
    "snapshot_stride",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("cannot parse value '{value}' for key '{key}'")))
}

/// Parses the flat `key=value` config format (`#` starts a comment).
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut raw = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
        })?;
        raw.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(raw)
}

/// Applies defaults to `raw`, validates and returns the config.
pub fn validate_config(raw: &BTreeMap<String, String>) -> Result<SimConfig> {
    let mut cfg = SimConfig::default();
    for (key, value) in raw {
        match key.as_str() {
            "dim" => cfg.dim = parse_num(key, value)?,
            "mu" => cfg.mu = parse_num(key, value)?,
            "eps" => cfg.eps = parse_num(key, value)?,
            "n_particles" => cfg.n_particles = parse_num(key, value)?,
            "dt" => cfg.dt = parse_num(key, value)?,
            "t_max" => cfg.t_max = parse_num(key, value)?,
            "softening" => cfg.softening = parse_num(key, value)?,
            "grid_radius0" => cfg.grid_radius0 = parse_num(key, value)?,
            "grid_cells" => cfg.grid_cells = parse_num(key, value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            "snapshot_stride" => cfg.snapshot_stride = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim != 2 && self.dim != 3 {
            return err("dimension must be 2 or 3");
        }
        if self.mu != 1.0 && self.mu != -1.0 {
            return err("mu must be +1 or -1");
        }
        if !(self.eps > 0.0) {
            return err("eps must be positive");
        }
        if self.eps > 0.1 {
            return err("eps outside small-data regime (eps <= 0.1)");
        }
        if self.n_particles == 0 {
            return err("n_particles must be positive");
        }
        if !(self.dt > 0.0) {
            return err("dt must be positive");
        }
        if self.dt > 0.05 {
            return err("dt must be at most 0.05 (integrator step limit)");
        }
        if !(self.t_max > 0.0) {
            return err("t_max must be positive");
        }
        if self.t_max < self.dt {
            return err("t_max must be at least dt");
        }
        if !(self.softening >= 0.0) || !self.softening.is_finite() {
            return err("softening must be finite and non-negative");
        }
        if !(self.grid_radius0 > 0.0) || !self.grid_radius0.is_finite() {
            return err("grid_radius0 must be positive");
        }
        if self.grid_cells < 16 {
            return err("grid_cells must be at least 16");
        }
        if self.snapshot_stride == 0 {
            return err("snapshot_stride must be positive");
        }
        Ok(())
    }

    /// Key-value form accepted by [`validate_config`].
    pub fn to_raw(&self) -> BTreeMap<String, String> {
        let mut raw = BTreeMap::new();
        raw.insert("dim".into(), self.dim.to_string());
        raw.insert("mu".into(), format!("{:?}", self.mu));
        raw.insert("eps".into(), format!("{:?}", self.eps));
        raw.insert("n_particles".into(), self.n_particles.to_string());
        raw.insert("dt".into(), format!("{:?}", self.dt));
        raw.insert("t_max".into(), format!("{:?}", self.t_max));
        raw.insert("softening".into(), format!("{:?}", self.softening));
        raw.insert("grid_radius0".into(), format!("{:?}", self.grid_radius0));
        raw.insert("grid_cells".into(), self.grid_cells.to_string());
        raw.insert("seed".into(), self.seed.to_string());
        raw.insert("snapshot_stride".into(), self.snapshot_stride.to_string());
        raw
    }

    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_raw() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Number of integration steps covering `[0, t_max]` (last step shortened).
    pub fn n_steps(&self) -> usize {
        let n = (self.t_max / self.dt).ceil() as usize;
        if (n as f64 - 1.0) * self.dt >= self.t_max - 1e-12 * self.t_max {
            n.saturating_sub(1).max(1)
        } else {
            n
        }
    }
}

/// Half-width `s(t) = R0 e^t` of the grid box at time `t`.
pub fn grid_scale(t: f64, cfg: &SimConfig) -> f64 {
    cfg.grid_radius0 * t.exp()
}

/// Time-stamped positive diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct DecaySeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl DecaySeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidInput("times and values differ in length".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("times must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("series values must be finite".into()));
        }
        Ok(Self { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, value: f64) {
        self.times.push(t);
        self.values.push(value);
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Samples with `t_a <= t <= t_b`.
    pub fn window(&self, t_a: f64, t_b: f64) -> (Vec<f64>, Vec<f64>) {
        let tol = 1e-9 * (1.0 + t_b.abs());
        self.times
            .iter()
            .zip(&self.values)
            .filter(|(t, _)| **t >= t_a - tol && **t <= t_b + tol)
            .map(|(t, v)| (*t, *v))
            .unzip()
    }
}
