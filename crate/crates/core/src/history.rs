//! Recorded force fields of a run and their space-time interpolation.
//!
//! File layout (little-endian): magic `VPTRAP01`, `u32` dim, `u32` grid
//! cells, `u64` snapshot count, then per snapshot `f64` time, `f64` scale and
//! the force grid (`dim` components per node, node-major).

use std::io::{Read, Write};
use std::path::Path;

use crate::dynamics::ForceSampler;
use crate::error::{Error, Result};
use crate::grid::GridField;

pub const MAGIC: &[u8; 8] = b"VPTRAP01";

#[derive(Debug, Clone, PartialEq)]
pub struct FieldHistory {
    pub dim: usize,
    pub cells: usize,
    pub times: Vec<f64>,
    pub scales: Vec<f64>,
    pub forces: Vec<GridField>,
    /// Potential grids at the same times, when recorded.
    pub potentials: Option<Vec<GridField>>,
}

impl FieldHistory {
    pub fn new(dim: usize, cells: usize) -> Self {
        Self { dim, cells, times: Vec::new(), scales: Vec::new(), forces: Vec::new(), potentials: None }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, force: GridField, potential: Option<GridField>) -> Result<()> {
        if force.dim != self.dim || force.cells != self.cells || force.components != self.dim {
            return Err(Error::InvalidInput("snapshot layout does not match the history".into()));
        }
        if self.times.last().is_some_and(|&last| t <= last) {
            return Err(Error::InvalidInput("snapshot times must increase".into()));
        }
        if force.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDiagnostic(t));
        }
        self.times.push(t);
        self.scales.push(force.scale);
        self.forces.push(force);
        match (potential, self.potentials.as_mut()) {
            (Some(p), Some(list)) => list.push(p),
            (Some(p), None) if self.times.len() == 1 => self.potentials = Some(vec![p]),
            (None, None) => {}
            _ => return Err(Error::InvalidInput("potential snapshots must be all or none".into())),
        }
        Ok(())
    }

    pub fn t_end(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// Grid half-width at time `t`, growing like `e^t` from the first snapshot.
    pub fn scale_at(&self, t: f64) -> f64 {
        match (self.times.first(), self.scales.first()) {
            (Some(&t0), Some(&s0)) => s0 * (t - t0).exp(),
            _ => 1.0,
        }
    }

    /// Whether `x` lies in the grid box at time `t`.
    pub fn contains(&self, t: f64, x: &[f64]) -> bool {
        let s = self.scale_at(t);
        x[..self.dim].iter().all(|a| a.abs() <= s)
    }

    /// Bracketing snapshot index `k` and weight `theta` with
    /// `t = (1 - theta) t_k + theta t_{k+1}`; `None` beyond the last snapshot.
    fn bracket(&self, t: f64) -> Option<(usize, f64)> {
        let n = self.times.len();
        if n == 0 || t > self.t_end() + 1e-12 {
            return None;
        }
        if n == 1 || t <= self.times[0] {
            return Some((0, 0.0));
        }
        let k = self.times.partition_point(|&tk| tk <= t).clamp(1, n - 1) - 1;
        let theta = ((t - self.times[k]) / (self.times[k + 1] - self.times[k])).clamp(0.0, 1.0);
        Some((k, theta))
    }

    /// Series of `sup_x |grad phi|` over the snapshots.
    pub fn sup_force(&self) -> Vec<f64> {
        self.forces.iter().map(|g| g.sup_norm()).collect()
    }

    /// History whose every snapshot is scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> FieldHistory {
        FieldHistory {
            forces: self.forces.iter().map(|g| g.scaled(factor)).collect(),
            potentials: self.potentials.as_ref().map(|p| p.iter().map(|g| g.scaled(factor)).collect()),
            ..self.clone()
        }
    }

    /// Interpolated scalar potential at `(t, x)`; requires recorded potentials.
    pub fn potential(&self, t: f64, x: &[f64]) -> Result<f64> {
        let pots = self.potentials.as_ref().ok_or(Error::MissingPotential)?;
        let Some((k, theta)) = self.bracket(t) else {
            return Ok(0.0);
        };
        let mut a = [0.0];
        let mut b = [0.0];
        pots[k].interpolate(x, &mut a);
        if theta > 0.0 {
            pots[k + 1].interpolate(x, &mut b);
        }
        Ok((1.0 - theta) * a[0] + theta * b[0])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.cells as u32).to_le_bytes())?;
        w.write_all(&(self.times.len() as u64).to_le_bytes())?;
        for ((t, s), g) in self.times.iter().zip(&self.scales).zip(&self.forces) {
            w.write_all(&t.to_le_bytes())?;
            w.write_all(&s.to_le_bytes())?;
            let mut buf = Vec::with_capacity(g.data.len() * 8);
            for v in &g.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let dim = read_u32(r)? as usize;
        let cells = read_u32(r)? as usize;
        let count = read_u64(r)?;
        if !(dim == 2 || dim == 3) || cells < 1 || cells > 4096 {
            return Err(Error::Format(format!("implausible header dim={dim} cells={cells}")));
        }
        let per = (cells + 1).pow(dim as u32) * dim;
        let mut h = FieldHistory::new(dim, cells);
        let mut buf = vec![0u8; per * 8];
        for _ in 0..count {
            let t = read_f64(r)?;
            let scale = read_f64(r)?;
            read_exact(r, &mut buf)?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let g = GridField { dim, cells, scale, components: dim, data };
            h.push(t, g, None).map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format(format!("truncated file: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Linear in time between snapshots, multilinear in space, zero outside each
/// snapshot's box and after the last snapshot.
impl ForceSampler for FieldHistory {
    fn dim(&self) -> usize {
        self.dim
    }

    fn force(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim;
        out[..n].iter_mut().for_each(|o| *o = 0.0);
        let Some((k, theta)) = self.bracket(t) else {
            return Ok(());
        };
        let mut a = [0.0; 3];
        self.forces[k].interpolate(x, &mut a);
        if theta > 0.0 {
            let mut b = [0.0; 3];
            self.forces[k + 1].interpolate(x, &mut b);
            for c in 0..n {
                out[c] = (1.0 - theta) * a[c] + theta * b[c];
            }
        } else {
            out[..n].copy_from_slice(&a[..n]);
        }
        Ok(())
    }

    fn length_scale(&self, t: f64) -> f64 {
        self.scale_at(t)
    }

    /// After the last snapshot the field is zero everywhere, so nothing is left to exit.
    fn covers(&self, t: f64, x: &[f64]) -> bool {
        t > self.t_end() || self.contains(t, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot(t: f64, amp: f64) -> GridField {
        let s = 2.0 * t.exp();
        let mut g = GridField::zeros(2, 16, s, 2);
        let mut x = [0.0; 3];
        for n in 0..g.n_nodes() {
            g.node_position(n, &mut x);
            g.data[2 * n] = amp * (1.0 + x[0]);
            g.data[2 * n + 1] = amp * x[1];
        }
        g
    }

    fn history() -> FieldHistory {
        let mut h = FieldHistory::new(2, 16);
        for (k, t) in [0.0, 0.5, 1.0].iter().enumerate() {
            h.push(*t, snapshot(*t, k as f64 + 1.0), None).unwrap();
        }
        h
    }

    #[test]
    fn sampler_interpolates_in_time_and_vanishes_outside() {
        let h = history();
        let mut f = [0.0; 2];
        h.force(0.25, &[0.5, 0.25], &mut f).unwrap();
        assert!((f[0] - 1.5 * 1.5).abs() < 1e-12 && (f[1] - 1.5 * 0.25).abs() < 1e-12);
        h.force(1.5, &[0.5, 0.25], &mut f).unwrap();
        assert_eq!(f, [0.0, 0.0]);
        h.force(0.0, &[2.5, 0.0], &mut f).unwrap();
        assert_eq!(f, [0.0, 0.0]);
        assert!((h.scale_at(1.0) - 2.0 * 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn binary_round_trip() {
        let h = history();
        let mut buf = Vec::new();
        h.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(buf.len(), 8 + 4 + 4 + 8 + 3 * (16 + 17 * 17 * 2 * 8));
        let back = FieldHistory::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, h);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(FieldHistory::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(FieldHistory::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn rejects_non_increasing_times() {
        let mut h = history();
        assert!(h.push(1.0, snapshot(1.0, 1.0), None).is_err());
    }
}
