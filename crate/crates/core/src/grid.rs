//! Half-square grid on `[0, 1] x [-1, 1]` with the Neumann face at `x1 = 0`,
//! node-valued fields, and the discrete operators shared by all solvers.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid needs at least 3 nodes per direction, got {nx} x {ny}")]
    TooSmall { nx: usize, ny: usize },
    #[error("field has {got} values, grid has {expected} nodes")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("field value at node {node} is not finite")]
    NonFinite { node: usize },
    #[error("io failure on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed field csv: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Interior,
    NeumannFace,
    Dirichlet,
}

/// Node `(i, j)` sits at `x1 = i hx`, `x2 = -1 + j hy` and has flat index
/// `j * nx + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfGrid {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    kinds: Vec<NodeKind>,
    /// `[i = 0, i = 1, i = 2]` flat indices for face row `j`, for `j` in `1..ny-1`.
    face_stencils: Vec<[usize; 3]>,
}

impl HalfGrid {
    pub fn new(nx: usize, ny: usize) -> Result<Self, GridError> {
        if nx < 3 || ny < 3 {
            return Err(GridError::TooSmall { nx, ny });
        }
        let mut kinds = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let kind = if j == 0 || j == ny - 1 || i == nx - 1 {
                    NodeKind::Dirichlet
                } else if i == 0 {
                    NodeKind::NeumannFace
                } else {
                    NodeKind::Interior
                };
                kinds.push(kind);
            }
        }
        let face_stencils = (1..ny - 1)
            .map(|j| [j * nx, j * nx + 1, j * nx + 2])
            .collect();
        Ok(Self {
            nx,
            ny,
            hx: 1.0 / (nx - 1) as f64,
            hy: 2.0 / (ny - 1) as f64,
            kinds,
            face_stencils,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn hx(&self) -> f64 {
        self.hx
    }

    pub fn hy(&self) -> f64 {
        self.hy
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, node: usize) -> (usize, usize) {
        (node % self.nx, node / self.nx)
    }

    pub fn x1(&self, i: usize) -> f64 {
        i as f64 * self.hx
    }

    pub fn x2(&self, j: usize) -> f64 {
        -1.0 + j as f64 * self.hy
    }

    pub fn coords(&self, node: usize) -> (f64, f64) {
        let (i, j) = self.ij(node);
        (self.x1(i), self.x2(j))
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        self.kinds[node]
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.kinds.iter().filter(|k| **k == kind).count()
    }

    /// Number of Neumann-face nodes, indexed `0..face_len()` for `j = 1..ny-1`.
    pub fn face_len(&self) -> usize {
        self.ny - 2
    }

    /// Flat indices of the face node in face row `k` and its two inward
    /// neighbours.
    pub fn face_stencil(&self, k: usize) -> [usize; 3] {
        self.face_stencils[k]
    }

    /// `x2` coordinate of face row `k`.
    pub fn face_x2(&self, k: usize) -> f64 {
        self.x2(k + 1)
    }

    pub fn dirichlet_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&n| self.kinds[n] == NodeKind::Dirichlet)
    }

    /// Largest stable explicit heat step, with margin: `0.25 min(hx, hy)^2`.
    pub fn cfl_limit(&self) -> f64 {
        0.25 * self.hx.min(self.hy).powi(2)
    }

    /// Diagonal weight `1/hx + hx/hy^2` of the half-cell face relation.
    pub fn face_diagonal(&self) -> f64 {
        1.0 / self.hx + self.hx / (self.hy * self.hy)
    }

    /// Weight `hx / (2 hy^2)` of each tangential face neighbour.
    pub fn face_tangential_weight(&self) -> f64 {
        self.hx / (2.0 * self.hy * self.hy)
    }
}

pub fn build_half_grid(nx: usize, ny: usize) -> Result<HalfGrid, GridError> {
    HalfGrid::new(nx, ny)
}

/// Node values on a [`HalfGrid`], with an optional time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Arc<HalfGrid>,
    values: Vec<f64>,
    pub time: Option<f64>,
}

impl Field {
    pub fn new(grid: Arc<HalfGrid>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::ShapeMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { node });
        }
        Ok(Self {
            grid,
            values,
            time: None,
        })
    }

    pub fn constant(grid: Arc<HalfGrid>, c: f64) -> Self {
        let values = vec![c; grid.len()];
        Self {
            grid,
            values,
            time: None,
        }
    }

    pub fn from_fn(grid: Arc<HalfGrid>, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|n| {
                let (x1, x2) = grid.coords(n);
                f(x1, x2)
            })
            .collect();
        Self {
            grid,
            values,
            time: None,
        }
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.time = Some(t);
        self
    }

    pub fn grid(&self) -> &Arc<HalfGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Face trace `u(0, x2)` for face rows `0..face_len()`.
    pub fn face_trace(&self) -> Vec<f64> {
        (0..self.grid.face_len())
            .map(|k| self.values[self.grid.face_stencil(k)[0]])
            .collect()
    }

    /// `x1,x2,value` rows, `j` major.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "x1,x2,value")?;
        for (n, v) in self.values.iter().enumerate() {
            let (x1, x2) = self.grid.coords(n);
            writeln!(out, "{x1},{x2},{v}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), GridError> {
        std::fs::write(path, self.to_csv_string()).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Rebuilds a field from `x1,x2,value` rows on a uniform half grid.
    pub fn from_csv_str(text: &str) -> Result<Self, GridError> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| GridError::Parse(format!("`{line}`: {e}")))?;
            if cols.len() != 3 {
                return Err(GridError::Parse(format!("expected 3 columns in `{line}`")));
            }
            rows.push((cols[0], cols[1], cols[2]));
        }
        let count_distinct = |sel: fn(&(f64, f64, f64)) -> f64| {
            let mut xs: Vec<f64> = rows.iter().map(sel).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
            xs.len()
        };
        let nx = count_distinct(|r| r.0);
        let ny = count_distinct(|r| r.1);
        let grid = Arc::new(HalfGrid::new(nx, ny)?);
        if rows.len() != grid.len() {
            return Err(GridError::ShapeMismatch {
                expected: grid.len(),
                got: rows.len(),
            });
        }
        let mut values = vec![f64::NAN; grid.len()];
        for (x1, x2, v) in rows {
            let i = (x1 / grid.hx()).round() as usize;
            let j = ((x2 + 1.0) / grid.hy()).round() as usize;
            if i >= nx || j >= ny {
                return Err(GridError::Parse(format!("node ({x1}, {x2}) off grid")));
            }
            values[grid.idx(i, j)] = v;
        }
        Field::new(grid, values)
    }
}

/// Tangential derivative on face row `k`: centred, or one-sided first order
/// at the two rows next to the corners.
pub fn tangential_gradient(field: &Field, k: usize) -> f64 {
    tangential_gradient_raw(field.grid(), &field.values, k)
}

pub(crate) fn tangential_gradient_raw(g: &HalfGrid, v: &[f64], k: usize) -> f64 {
    let j = k + 1;
    let u = |j: usize| v[g.idx(0, j)];
    let ny = g.ny();
    if ny == 3 {
        (u(2) - u(0)) / (2.0 * g.hy())
    } else if j == 1 {
        (u(2) - u(1)) / g.hy()
    } else if j == ny - 2 {
        (u(j) - u(j - 1)) / g.hy()
    } else {
        (u(j + 1) - u(j - 1)) / (2.0 * g.hy())
    }
}

/// `min(|u(j+1) - u(j)|, |u(j) - u(j-1)|) / hy` on face row `k`, corners
/// included as neighbours: the smaller one-sided tangential slope. Small
/// when the row ends a flat edge on either side; large at isolated kinks
/// where the centred difference can vanish.
pub fn tangential_flatness(field: &Field, k: usize) -> f64 {
    tangential_flatness_raw(field.grid(), &field.values, k)
}

pub(crate) fn tangential_flatness_raw(g: &HalfGrid, v: &[f64], k: usize) -> f64 {
    let n0 = g.face_stencil(k)[0];
    let nx = g.nx();
    ((v[n0 + nx] - v[n0]).abs()).min((v[n0] - v[n0 - nx]).abs()) / g.hy()
}

/// Second-order one-sided inner normal derivative on face row `k`.
pub fn normal_derivative(field: &Field, k: usize) -> f64 {
    let [n0, n1, n2] = field.grid().face_stencil(k);
    let v = &field.values;
    (-3.0 * v[n0] + 4.0 * v[n1] - v[n2]) / (2.0 * field.grid().hx())
}

/// Half-cell normal flux `(u1 - u0)/hx + (hx/2) d22 u0` on face row `k`.
///
/// This is the normal slope every solver balances against the boundary law;
/// it is exactly the face-node gradient of the discrete Dirichlet energy
/// divided by `-hy`, and it is monotone in all neighbours.
pub fn face_flux(field: &Field, k: usize) -> f64 {
    face_flux_raw(field.grid(), &field.values, k)
}

pub(crate) fn face_flux_raw(g: &HalfGrid, v: &[f64], k: usize) -> f64 {
    face_rhs(g, v, k) - g.face_diagonal() * v[g.face_stencil(k)[0]]
}

/// `u1/hx + hx/(2hy^2) (u_up + u_down)`: the neighbour part of the face flux.
#[inline]
pub(crate) fn face_rhs(g: &HalfGrid, v: &[f64], k: usize) -> f64 {
    let [n0, n1, _] = g.face_stencil(k);
    v[n1] / g.hx() + g.face_tangential_weight() * (v[n0 + g.nx()] + v[n0 - g.nx()])
}

/// Five-point Laplacian at an interior node.
pub fn laplacian(field: &Field, i: usize, j: usize) -> f64 {
    let g = field.grid();
    let v = &field.values;
    let c = v[g.idx(i, j)];
    (v[g.idx(i + 1, j)] - 2.0 * c + v[g.idx(i - 1, j)]) / (g.hx() * g.hx())
        + (v[g.idx(i, j + 1)] - 2.0 * c + v[g.idx(i, j - 1)]) / (g.hy() * g.hy())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, ny: usize) -> Arc<HalfGrid> {
        Arc::new(HalfGrid::new(nx, ny).unwrap())
    }

    #[test]
    fn smallest_grid_classification() {
        let g = HalfGrid::new(3, 3).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.count(NodeKind::Interior), 1);
        assert_eq!(g.count(NodeKind::NeumannFace), 1);
        assert_eq!(g.count(NodeKind::Dirichlet), 7);
        // corners of the face are Dirichlet
        assert_eq!(g.kind(g.idx(0, 0)), NodeKind::Dirichlet);
        assert_eq!(g.kind(g.idx(0, 2)), NodeKind::Dirichlet);
    }

    #[test]
    fn spacings() {
        let g = HalfGrid::new(65, 129).unwrap();
        assert_eq!(g.hx(), 1.0 / 64.0);
        assert_eq!(g.hy(), 1.0 / 64.0);
    }

    #[test]
    fn face_count_by_enumeration() {
        let g = HalfGrid::new(4, 3).unwrap();
        let by_hand = (0..g.len())
            .filter(|&n| {
                let (x1, x2) = g.coords(n);
                x1 == 0.0 && x2.abs() < 1.0 - 1e-12
            })
            .count();
        assert_eq!(by_hand, 1);
        assert_eq!(g.count(NodeKind::NeumannFace), 1);
        assert_eq!(g.face_len(), 1);
    }

    #[test]
    fn rejects_tiny_grids() {
        assert!(matches!(HalfGrid::new(2, 5), Err(GridError::TooSmall { .. })));
        assert!(HalfGrid::new(5, 2).is_err());
    }

    #[test]
    fn tangential_gradient_examples() {
        let g = grid(9, 17);
        let lin = Field::from_fn(g.clone(), |_, x2| x2);
        for k in 0..g.face_len() {
            assert!((tangential_gradient(&lin, k) - 1.0).abs() < 1e-12);
        }
        let c = Field::constant(g.clone(), 3.0);
        assert_eq!(tangential_gradient(&c, 4), 0.0);
        let q = Field::from_fn(g.clone(), |_, x2| x2 * x2);
        // x2 = 0.25 is row j = 10 -> face row 9
        assert!((g.face_x2(9) - 0.25).abs() < 1e-15);
        assert!((tangential_gradient(&q, 9) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn normal_derivative_examples() {
        let g = grid(65, 33);
        let lin = Field::from_fn(g.clone(), |x1, _| x1);
        let quad = Field::from_fn(g.clone(), |x1, _| x1 * x1);
        for k in 0..g.face_len() {
            assert!((normal_derivative(&lin, k) - 1.0).abs() < 1e-12);
            assert!(normal_derivative(&quad, k).abs() < 1e-12);
        }
        // Richardson oracle: the stencil error is c h^2; extrapolating two
        // spacings recovers the exact slope 1, and the h = 1/64 value sits
        // within 5e-4 of it.
        let d = |n: usize| {
            let g = grid(n, 5);
            normal_derivative(&Field::from_fn(g, |x1, _| x1.sin()), 1)
        };
        let coarse = d(33);
        let fine = d(65);
        let extrapolated = (4.0 * fine - coarse) / 3.0;
        assert!((extrapolated - 1.0).abs() < 1e-6);
        assert!((fine - extrapolated).abs() < 5e-4);
    }

    #[test]
    fn face_flux_is_second_order_for_harmonic_fields() {
        // u = x1^2 - x2^2 is harmonic with zero normal slope on the face
        let err = |n: usize| {
            let g = grid(n, 2 * n - 1);
            let f = Field::from_fn(g.clone(), |x1, x2| x1 * x1 - x2 * x2 + 0.3 * x1);
            (0..g.face_len())
                .map(|k| (face_flux(&f, k) - 0.3).abs())
                .fold(0.0, f64::max)
        };
        assert!(err(17) < 1e-12);
        // e^{x1} cos(x2): normal slope cos(x2)
        let err = |n: usize| {
            let g = grid(n, 2 * n - 1);
            let f = Field::from_fn(g.clone(), |x1, x2| x1.exp() * x2.cos());
            (0..g.face_len())
                .map(|k| (face_flux(&f, k) - g.face_x2(k).cos()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(17) / err(33);
        assert!(ratio > 3.5, "ratio {ratio}");
    }

    #[test]
    fn laplacian_annihilates_affine() {
        let g = grid(7, 9);
        let f = Field::from_fn(g.clone(), |x1, x2| 2.0 - 3.0 * x1 + 0.7 * x2);
        for j in 1..g.ny() - 1 {
            for i in 1..g.nx() - 1 {
                assert!(laplacian(&f, i, j).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn csv_roundtrip() {
        let g = grid(5, 7);
        let f = Field::from_fn(g, |x1, x2| x1 * 0.3 - x2 * x2);
        let back = Field::from_csv_str(&f.to_csv_string()).unwrap();
        assert_eq!(back.values(), f.values());
    }
}
