//! Building blocks shared by the epsilon-scale and homogenized solvers:
//! the explicit interior heat step, successive over-relaxation with a
//! pluggable face update, and the directional scalar root used for the
//! nonlinear face law.

use std::sync::Arc;

use crate::boundary::DirichletData;
use crate::grid::{face_rhs, Field, HalfGrid};

/// Forward-Euler heat update of every interior node from `prev` into `next`.
/// Face and Dirichlet entries of `next` are left untouched.
pub(crate) fn heat_step_interior(g: &HalfGrid, prev: &[f64], next: &mut [f64], dt: f64) {
    let nx = g.nx();
    let cx = dt / (g.hx() * g.hx());
    let cy = dt / (g.hy() * g.hy());
    for j in 1..g.ny() - 1 {
        let row = j * nx;
        for i in 1..nx - 1 {
            let n = row + i;
            let c = prev[n];
            next[n] = c + cx * (prev[n + 1] - 2.0 * c + prev[n - 1])
                + cy * (prev[n + nx] - 2.0 * c + prev[n - nx]);
        }
    }
}

/// Optimal-ish over-relaxation factor for the five-point Laplacian on `g`.
pub(crate) fn sor_omega(nx: usize, ny: usize) -> f64 {
    let n = nx.max(ny) as f64;
    2.0 / (1.0 + (std::f64::consts::PI / n).sin())
}

pub(crate) struct SweepOutcome {
    pub sweeps: usize,
    pub last_update: f64,
    pub converged: bool,
}

/// Lexicographic SOR on the interior with the face rows updated by
/// `face_update(k, rhs, current)`, which returns the new face value given
/// the neighbour part of the face flux. Stops once a full sweep moves no node
/// by more than `tol`.
pub(crate) fn sor_relax(
    g: &HalfGrid,
    values: &mut [f64],
    omega: f64,
    tol: f64,
    max_sweeps: usize,
    mut face_update: impl FnMut(usize, f64, f64) -> f64,
    mut after_sweep: impl FnMut(&[f64]),
) -> SweepOutcome {
    let nx = g.nx();
    let wx = 1.0 / (g.hx() * g.hx());
    let wy = 1.0 / (g.hy() * g.hy());
    let diag = 2.0 * (wx + wy);
    let mut last_update = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        let mut max_update = 0.0f64;
        for j in 1..g.ny() - 1 {
            let k = j - 1;
            let n0 = j * nx;
            let rhs = face_rhs(g, values, k);
            let new = face_update(k, rhs, values[n0]);
            max_update = max_update.max((new - values[n0]).abs());
            values[n0] = new;
            for i in 1..nx - 1 {
                let n = n0 + i;
                let avg = (wx * (values[n + 1] + values[n - 1])
                    + wy * (values[n + nx] + values[n - nx]))
                    / diag;
                let delta = omega * (avg - values[n]);
                max_update = max_update.max(delta.abs());
                values[n] += delta;
            }
        }
        after_sweep(values);
        last_update = max_update;
        if max_update <= tol {
            return SweepOutcome {
                sweeps: sweep,
                last_update,
                converged: true,
            };
        }
    }
    SweepOutcome {
        sweeps: max_sweeps,
        last_update,
        converged: false,
    }
}

/// Root of `phi` reached by walking from `start` in the direction of
/// `sign(phi(start))`, i.e. the equilibrium the scalar flow
/// `du/ds = phi(u)` settles on. `phi` must be eventually negative above and
/// positive below. The result is monotone in `start` and in upward shifts of
/// `phi`.
pub(crate) fn directional_root(phi: impl Fn(f64) -> f64, start: f64, step: f64) -> Option<f64> {
    let p0 = phi(start);
    if p0 == 0.0 {
        return Some(start);
    }
    if !p0.is_finite() || !(step > 0.0) {
        return None;
    }
    let dir = p0.signum();
    let mut a = start;
    let mut pa = p0;
    // Bounded walk: callers guarantee a sign change within the bracket
    // implied by the bounds of the nonlinearity.
    for _ in 0..50_000_000u64 {
        let b = a + dir * step;
        let pb = phi(b);
        if pb == 0.0 {
            return Some(b);
        }
        if !pb.is_finite() {
            return None;
        }
        if pb.signum() != pa.signum() {
            return Some(bisect(&phi, a, pa, b));
        }
        a = b;
        pa = pb;
    }
    None
}

fn bisect(phi: &impl Fn(f64) -> f64, mut a: f64, pa: f64, mut b: f64) -> f64 {
    let sa = pa.signum();
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m == a || m == b {
            break;
        }
        let pm = phi(m);
        if pm == 0.0 {
            return m;
        }
        if pm.signum() == sa {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Harmonic field with `u = g` on the Dirichlet nodes and constant half-cell
/// normal flux `flux` on the face. With `flux = <f>` this is the limit of the
/// global energy minimizers; with `flux = 0` the zero-Neumann solution.
pub fn solve_neumann_laplace(
    grid: &Arc<HalfGrid>,
    data: &DirichletData,
    flux: f64,
    tol: f64,
    max_sweeps: usize,
) -> Option<Field> {
    let mut values = data.field(grid, 0.0).into_values();
    let a = grid.face_diagonal();
    let omega = sor_omega(grid.nx(), grid.ny());
    let out = sor_relax(
        grid,
        &mut values,
        omega,
        tol,
        max_sweeps,
        |_, rhs, _| (rhs - flux) / a,
        |_| {},
    );
    if !out.converged {
        return None;
    }
    Field::new(grid.clone(), values).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directional_root_follows_the_flow() {
        // phi(u) = 1 - u + 0.9 sin(8u): several roots; walk picks the one
        // downstream from the start.
        let phi = |u: f64| 1.0 - u + 0.9 * (8.0 * u).sin();
        let up = directional_root(phi, -3.0, 1e-3).unwrap();
        let down = directional_root(phi, 4.0, 1e-3).unwrap();
        assert!(phi(up).abs() < 1e-12 && phi(down).abs() < 1e-12);
        assert!(up <= down);
        // every root below `up` is absent: phi > 0 on [-3, up)
        let mut u = -3.0;
        while u < up - 1e-3 {
            assert!(phi(u) > 0.0);
            u += 1e-4;
        }
    }

    #[test]
    fn neumann_laplace_reproduces_affine_data() {
        let g = Arc::new(HalfGrid::new(17, 33).unwrap());
        let data = DirichletData::steady("affine", |x1, x2| 0.5 * x1 + 0.2 * x2);
        let u = solve_neumann_laplace(&g, &data, 0.5, 1e-13, 100_000).unwrap();
        let exact = data.field(&g, 0.0);
        assert!(u.sup_distance(&exact) < 1e-10);
    }
}
