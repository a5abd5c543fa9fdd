//! Uniform node grids on the co-expanding box `[-s, s]^n`.
//!
//! A grid with `cells` cells per axis has `cells + 1` nodes per axis at
//! `x_i = -s + i h`, `h = 2 s / cells`. Nodes are stored with axis 0 slowest;
//! vector fields are node-major, component-minor.

use crate::error::{Error, Result};

/// Width of the boundary band where one-sided stencils are used.
pub const BOUNDARY_BAND: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub dim: usize,
    pub cells: usize,
    pub scale: f64,
    pub components: usize,
    pub data: Vec<f64>,
}

impl GridField {
    pub fn zeros(dim: usize, cells: usize, scale: f64, components: usize) -> Self {
        let m = cells + 1;
        Self {
            dim,
            cells,
            scale,
            components,
            data: vec![0.0; m.pow(dim as u32) * components],
        }
    }

    /// Scalar field sampled from `f` at every node.
    pub fn from_fn(dim: usize, cells: usize, scale: f64, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut g = Self::zeros(dim, cells, scale, 1);
        let mut x = [0.0; 3];
        for node in 0..g.n_nodes() {
            g.node_position(node, &mut x);
            g.data[node] = f(&x[..dim]);
        }
        g
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.cells + 1
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.scale / self.cells as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.scale + i as f64 * self.spacing()
    }

    pub fn multi_index(&self, node: usize, idx: &mut [usize; 3]) {
        let m = self.nodes_per_axis();
        let mut rem = node;
        for a in (0..self.dim).rev() {
            idx[a] = rem % m;
            rem /= m;
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let m = self.nodes_per_axis();
        idx[..self.dim].iter().fold(0, |acc, &i| acc * m + i)
    }

    pub fn node_position(&self, node: usize, x: &mut [f64; 3]) {
        let mut idx = [0usize; 3];
        self.multi_index(node, &mut idx);
        for a in 0..self.dim {
            x[a] = self.axis_coord(idx[a]);
        }
    }

    pub fn is_interior(&self, node: usize, band: usize) -> bool {
        let mut idx = [0usize; 3];
        self.multi_index(node, &mut idx);
        let m = self.nodes_per_axis();
        idx[..self.dim].iter().all(|&i| i >= band && i + band < m)
    }

    pub fn value(&self, node: usize, comp: usize) -> f64 {
        self.data[node * self.components + comp]
    }

    /// `sum(data) * h^n` per component.
    pub fn integral(&self) -> Vec<f64> {
        let vol = self.cell_volume();
        (0..self.components)
            .map(|c| {
                self.data
                    .iter()
                    .skip(c)
                    .step_by(self.components)
                    .sum::<f64>()
                    * vol
            })
            .collect()
    }

    /// Max over nodes of the Euclidean norm of the node vector.
    pub fn sup_norm(&self) -> f64 {
        self.data
            .chunks_exact(self.components)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Sup of `|value|` over nodes at least `band` nodes from the boundary.
    pub fn interior_sup(&self, band: usize) -> f64 {
        (0..self.n_nodes())
            .filter(|&n| self.is_interior(n, band))
            .map(|n| {
                (0..self.components)
                    .map(|c| self.value(n, c).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn same_layout(&self, other: &GridField) -> bool {
        self.dim == other.dim
            && self.cells == other.cells
            && self.components == other.components
            && (self.scale - other.scale).abs() <= 1e-14 * self.scale
    }

    pub fn check_same_layout(&self, other: &GridField) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::InvalidInput("grid layouts differ".into()))
        }
    }

    /// Pointwise `self - other`.
    pub fn sub(&self, other: &GridField) -> Result<GridField> {
        self.check_same_layout(other)?;
        let mut out = self.clone();
        out.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a -= b);
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> GridField {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|a| *a *= factor);
        out
    }

    /// Multiplies each node by `w(x)`.
    pub fn weighted(&self, w: impl Fn(&[f64]) -> f64) -> GridField {
        let mut out = self.clone();
        let mut x = [0.0; 3];
        for node in 0..self.n_nodes() {
            self.node_position(node, &mut x);
            let wx = w(&x[..self.dim]);
            for c in 0..self.components {
                out.data[node * self.components + c] *= wx;
            }
        }
        out
    }

    /// Single component as a scalar field.
    pub fn component(&self, comp: usize) -> GridField {
        GridField {
            dim: self.dim,
            cells: self.cells,
            scale: self.scale,
            components: 1,
            data: self.data.iter().skip(comp).step_by(self.components).copied().collect(),
        }
    }

    /// Fourth-order finite-difference derivative of a scalar field along
    /// `axis`, one-sided inside the boundary band.
    pub fn derivative(&self, axis: usize) -> GridField {
        assert_eq!(self.components, 1, "derivative of a vector grid");
        let m = self.nodes_per_axis();
        let h = self.spacing();
        let stride = m.pow((self.dim - 1 - axis) as u32);
        let mut out = GridField::zeros(self.dim, self.cells, self.scale, 1);
        let mut idx = [0usize; 3];
        let inv = 1.0 / (12.0 * h);
        for node in 0..self.n_nodes() {
            self.multi_index(node, &mut idx);
            let i = idx[axis];
            let f = |k: isize| self.data[(node as isize + k * stride as isize) as usize];
            let d = if i >= 2 && i + 2 < m {
                -f(2) + 8.0 * f(1) - 8.0 * f(-1) + f(-2)
            } else if i == 0 {
                -25.0 * f(0) + 48.0 * f(1) - 36.0 * f(2) + 16.0 * f(3) - 3.0 * f(4)
            } else if i == 1 {
                -3.0 * f(-1) - 10.0 * f(0) + 18.0 * f(1) - 6.0 * f(2) + f(3)
            } else if i + 1 == m {
                25.0 * f(0) - 48.0 * f(-1) + 36.0 * f(-2) - 16.0 * f(-3) + 3.0 * f(-4)
            } else {
                3.0 * f(1) + 10.0 * f(0) - 18.0 * f(-1) + 6.0 * f(-2) - f(-3)
            };
            out.data[node] = d * inv;
        }
        out
    }

    /// Multilinear interpolation at physical position `x`; zero outside the box.
    pub fn interpolate(&self, x: &[f64], out: &mut [f64]) {
        let comps = self.components;
        out[..comps].iter_mut().for_each(|o| *o = 0.0);
        let h = self.spacing();
        let m = self.nodes_per_axis();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..self.dim {
            let u = (x[a] + self.scale) / h;
            if !(u >= 0.0 && u <= self.cells as f64) {
                return;
            }
            let i = (u.floor() as usize).min(self.cells - 1);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut node = 0usize;
            for a in 0..self.dim {
                let bit = (corner >> (self.dim - 1 - a)) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                node = node * m + base[a] + bit;
            }
            if w == 0.0 {
                continue;
            }
            let src = &self.data[node * comps..node * comps + comps];
            for c in 0..comps {
                out[c] += w * src[c];
            }
        }
    }
}
