//! Lattice representation of the regularizing function `u` and its interpolation.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Largest supported number of lattice modes.
pub const MAX_LATTICE_MODES: usize = 4;

/// Uniform lattice on the box `[-L, L]^modes` in the leading modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub modes: usize,
    pub half_width: f64,
    pub points: usize,
}

impl LatticeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.modes > MAX_LATTICE_MODES {
            return Err(LabError::Config(format!("lattice modes must be in 1..={MAX_LATTICE_MODES}")));
        }
        if self.points < 3 {
            return Err(LabError::Config("lattice needs at least 3 points per axis".into()));
        }
        if !(self.half_width > 0.0) {
            return Err(LabError::Config("lattice half-width must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.modes as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points - 1) as f64
    }

    pub fn axis_value(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    /// Per-axis indices of a flat point index; axis 0 varies fastest.
    pub fn multi_index(&self, mut p: usize) -> [usize; MAX_LATTICE_MODES] {
        let mut out = [0; MAX_LATTICE_MODES];
        for o in out.iter_mut().take(self.modes) {
            *o = p % self.points;
            p /= self.points;
        }
        out
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().take(self.modes).rev().fold(0, |acc, i| acc * self.points + i)
    }

    pub fn coordinates(&self, p: usize) -> Vec<f64> {
        let idx = self.multi_index(p);
        (0..self.modes).map(|k| self.axis_value(idx[k])).collect()
    }
}

/// Values of `u` at uniform time nodes on `[0, T]` and lattice points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UGrid {
    pub horizon: f64,
    pub lambda: f64,
    pub time_nodes: usize,
    pub lattice: LatticeSpec,
    /// Dimension of the full mode space.
    pub dim: usize,
    /// Number of leading modes in which `u` takes values.
    pub value_modes: usize,
    #[serde(skip)]
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    horizon: f64,
    lambda: f64,
    time_nodes: usize,
    lattice: LatticeSpec,
    dim: usize,
    value_modes: usize,
    values_file: String,
}

impl UGrid {
    pub fn zeros(horizon: f64, lambda: f64, time_nodes: usize, lattice: LatticeSpec, dim: usize, value_modes: usize) -> Result<Self> {
        lattice.validate()?;
        if time_nodes < 2 {
            return Err(LabError::Config("u grid needs at least two time nodes".into()));
        }
        if value_modes == 0 || value_modes > dim || lattice.modes > dim {
            return Err(LabError::Config("u grid modes exceed the state dimension".into()));
        }
        if !(horizon > 0.0) {
            return Err(LabError::Domain("u grid horizon must be positive".into()));
        }
        let n = time_nodes * lattice.len() * value_modes;
        Ok(Self { horizon, lambda, time_nodes, lattice, dim, value_modes, values: vec![0.0; n] })
    }

    /// Grid sampled from `f(t, lattice coordinates)`; the terminal node is forced to zero.
    pub fn from_fn<F: Fn(f64, &[f64]) -> Vec<f64>>(mut self, f: F) -> Self {
        let r = self.value_modes;
        for i in 0..self.time_nodes - 1 {
            let t = self.node_time(i);
            for p in 0..self.lattice.len() {
                let v = f(t, &self.lattice.coordinates(p));
                let off = self.offset(i, p);
                self.values[off..off + r].copy_from_slice(&v[..r]);
            }
        }
        self
    }

    pub fn node_time(&self, i: usize) -> f64 {
        self.horizon * i as f64 / (self.time_nodes - 1) as f64
    }

    fn offset(&self, i: usize, p: usize) -> usize {
        (i * self.lattice.len() + p) * self.value_modes
    }

    pub fn node_value(&self, i: usize, p: usize) -> &[f64] {
        let o = self.offset(i, p);
        &self.values[o..o + self.value_modes]
    }

    pub(crate) fn node_value_mut(&mut self, i: usize, p: usize) -> &mut [f64] {
        let o = self.offset(i, p);
        let r = self.value_modes;
        &mut self.values[o..o + r]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `max |u - v|` over all nodes.
    pub fn sup_distance(&self, other: &UGrid) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Finite-difference Jacobian `∂_k u_n` at a node, row-major `[n][k]`.
    pub fn fd_jacobian(&self, i: usize, p: usize) -> Vec<f64> {
        let (r, m) = (self.value_modes, self.lattice.modes);
        let h = self.lattice.spacing();
        let idx = self.lattice.multi_index(p);
        let mut jac = vec![0.0; r * m];
        for k in 0..m {
            let (lo, hi) = (idx[k].saturating_sub(1), (idx[k] + 1).min(self.lattice.points - 1));
            let mut a = idx;
            a[k] = lo;
            let mut b = idx;
            b[k] = hi;
            let (va, vb) = (self.node_value(i, self.lattice.flat_index(&a)), self.node_value(i, self.lattice.flat_index(&b)));
            let width = (hi - lo) as f64 * h;
            for n in 0..r {
                jac[n * m + k] = (vb[n] - va[n]) / width;
            }
        }
        jac
    }

    /// `sup ‖∇u‖` (operator norm of the finite-difference Jacobian) over all nodes.
    pub fn gradient_bound(&self) -> f64 {
        let (r, m) = (self.value_modes, self.lattice.modes);
        let mut best = 0.0f64;
        for i in 0..self.time_nodes {
            for p in 0..self.lattice.len() {
                let j = nalgebra::DMatrix::from_row_slice(r, m, &self.fd_jacobian(i, p));
                best = best.max(j.singular_values().max());
            }
        }
        best
    }

    /// `(sup ‖∇θ‖, sup ‖∇θ^{-1}‖)` from the finite-difference Jacobian of `θ = id + u`.
    pub fn theta_derivative_bounds(&self) -> (f64, f64) {
        let (r, m) = (self.value_modes, self.lattice.modes);
        let size = r.max(m);
        let (mut top, mut inv) = (0.0f64, 0.0f64);
        for i in 0..self.time_nodes {
            for p in 0..self.lattice.len() {
                let jac = self.fd_jacobian(i, p);
                let mut full = nalgebra::DMatrix::<f64>::identity(size, size);
                for n in 0..r {
                    for k in 0..m {
                        full[(n, k)] += jac[n * m + k];
                    }
                }
                let sv = full.singular_values();
                top = top.max(sv.max());
                inv = inv.max(1.0 / sv.min());
            }
        }
        (top, inv)
    }

    /// Largest lattice second difference of `u` (pure and mixed).
    pub fn second_difference_bound(&self) -> f64 {
        let (r, m, pts) = (self.value_modes, self.lattice.modes, self.lattice.points);
        let h = self.lattice.spacing();
        let mut best = 0.0f64;
        for i in 0..self.time_nodes {
            for p in 0..self.lattice.len() {
                let idx = self.lattice.multi_index(p);
                if (0..m).any(|k| idx[k] == 0 || idx[k] == pts - 1) {
                    continue;
                }
                let at = |shift: &[(usize, i64)]| {
                    let mut j = idx;
                    for &(k, s) in shift {
                        j[k] = (j[k] as i64 + s) as usize;
                    }
                    self.node_value(i, self.lattice.flat_index(&j))
                };
                for k in 0..m {
                    for l in k..m {
                        for n in 0..r {
                            let v = if k == l {
                                (at(&[(k, 1)])[n] - 2.0 * at(&[])[n] + at(&[(k, -1)])[n]) / (h * h)
                            } else {
                                (at(&[(k, 1), (l, 1)])[n] - at(&[(k, 1), (l, -1)])[n] - at(&[(k, -1), (l, 1)])[n]
                                    + at(&[(k, -1), (l, -1)])[n])
                                    / (4.0 * h * h)
                            };
                            best = best.max(v.abs());
                        }
                    }
                }
            }
        }
        best
    }

    /// Writes `<stem>.json` (header) and `<stem>.csv` (values).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv_name = format!("{stem}.csv");
        let header = GridHeader {
            horizon: self.horizon,
            lambda: self.lambda,
            time_nodes: self.time_nodes,
            lattice: self.lattice,
            dim: self.dim,
            value_modes: self.value_modes,
            values_file: csv_name.clone(),
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&header)? + "\n")?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(csv_name))?);
        let mut head = vec!["time_node".to_string(), "point".to_string()];
        head.extend((0..self.lattice.modes).map(|k| format!("x{k}")));
        head.extend((0..self.value_modes).map(|n| format!("u{n}")));
        writeln!(out, "{}", head.join(","))?;
        for i in 0..self.time_nodes {
            for p in 0..self.lattice.len() {
                let mut row = vec![i.to_string(), p.to_string()];
                row.extend(self.lattice.coordinates(p).iter().map(|v| format!("{v:e}")));
                row.extend(self.node_value(i, p).iter().map(|v| format!("{v:e}")));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let header: GridHeader = serde_json::from_str(&std::fs::read_to_string(header_path)?)?;
        let dir = header_path.parent().unwrap_or(Path::new("."));
        let mut grid =
            Self::zeros(header.horizon, header.lambda, header.time_nodes, header.lattice, header.dim, header.value_modes)?;
        let file = BufReader::new(std::fs::File::open(dir.join(&header.values_file))?);
        let skip = 2 + header.lattice.modes;
        for (line_no, line) in file.lines().enumerate().skip(1) {
            let line = line?;
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| LabError::Config(format!("u grid line {}: {e}", line_no + 1)))
            };
            let (i, p) = (parse(cols[0])? as usize, parse(cols[1])? as usize);
            if i >= grid.time_nodes || p >= grid.lattice.len() || cols.len() != skip + grid.value_modes {
                return Err(LabError::Config(format!("u grid line {} out of range", line_no + 1)));
            }
            for n in 0..grid.value_modes {
                grid.node_value_mut(i, p)[n] = parse(cols[skip + n])?;
            }
        }
        Ok(grid)
    }
}

/// Interpolation-ready form of a [`UGrid`]: nodal values and finite-difference gradients,
/// multilinear in space (clamped to the box) and linear in time.
#[derive(Debug, Clone)]
pub struct UField {
    pub horizon: f64,
    pub time_nodes: usize,
    pub lattice: LatticeSpec,
    pub dim: usize,
    pub value_modes: usize,
    stride: usize,
    data: Vec<f64>,
}

/// Value and Jacobian of `u` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct UValue {
    /// `u_n`, `n < value_modes`.
    pub value: Vec<f64>,
    /// `∂_k u_n`, row-major `[n][k]` with `k < lattice modes`.
    pub jacobian: Vec<f64>,
}

impl UField {
    pub fn new(grid: &UGrid) -> Self {
        let (r, m) = (grid.value_modes, grid.lattice.modes);
        let stride = r + r * m;
        let mut data = Vec::with_capacity(grid.time_nodes * grid.lattice.len() * stride);
        for i in 0..grid.time_nodes {
            for p in 0..grid.lattice.len() {
                data.extend_from_slice(grid.node_value(i, p));
                data.extend(grid.fd_jacobian(i, p));
            }
        }
        Self {
            horizon: grid.horizon,
            time_nodes: grid.time_nodes,
            lattice: grid.lattice,
            dim: grid.dim,
            value_modes: r,
            stride,
            data,
        }
    }

    /// Number of floats written by [`Self::eval_into`].
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Writes `[u_0..u_{r-1}, ∂_0 u_0, .., ∂_{m-1} u_{r-1}]` at `(t, x)` into `out`.
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let out = &mut out[..self.stride];
        out.iter_mut().for_each(|o| *o = 0.0);
        let ht = self.horizon / (self.time_nodes - 1) as f64;
        let tpos = (t / ht).clamp(0.0, (self.time_nodes - 1) as f64);
        let it = (tpos.floor() as usize).min(self.time_nodes - 2);
        let wt = tpos - it as f64;
        let lat = &self.lattice;
        let h = lat.spacing();
        let mut base = [0usize; MAX_LATTICE_MODES];
        let mut frac = [0.0f64; MAX_LATTICE_MODES];
        for k in 0..lat.modes {
            let c = x[k].clamp(-lat.half_width, lat.half_width);
            let pos = (c + lat.half_width) / h;
            let j = (pos.floor() as usize).min(lat.points - 2);
            base[k] = j;
            frac[k] = pos - j as f64;
        }
        let npts = lat.len();
        for corner in 0..(1usize << lat.modes) {
            let mut w = 1.0;
            let mut idx = [0usize; MAX_LATTICE_MODES];
            for k in 0..lat.modes {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    idx[k] = base[k] + 1;
                } else {
                    w *= 1.0 - frac[k];
                    idx[k] = base[k];
                }
            }
            if w == 0.0 {
                continue;
            }
            let p = lat.flat_index(&idx);
            for (ti, tw) in [(it, 1.0 - wt), (it + 1, wt)] {
                let ww = w * tw;
                if ww == 0.0 {
                    continue;
                }
                let off = (ti * npts + p) * self.stride;
                for (o, v) in out.iter_mut().zip(&self.data[off..off + self.stride]) {
                    *o += ww * v;
                }
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> UValue {
        let mut buf = vec![0.0; self.stride];
        self.eval_into(t, x, &mut buf);
        let r = self.value_modes;
        UValue { value: buf[..r].to_vec(), jacobian: buf[r..].to_vec() }
    }
}
