//! Truncated cell problems for the laminar medium: pinning intervals from
//! the scalar horizontal reduction, the two-variable strip problem
//! `Delta eta = 0`, `d1 eta = f(eta + |p| x2)`, its averaged flux, and the
//! Birkhoff lattice-order residual.

use serde::Serialize;
use thiserror::Error;

use crate::media::PeriodicProfile;
use crate::scheme::directional_root;

/// Truncation used for reported `T -> infinity` values.
pub const LIMIT_T: f64 = 200.0;

/// Scan resolution of the horizontal root search.
const ROOT_SCAN_STEP: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum CorrectorError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no root of w/T + f(w) found in [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64 },
    #[error("cell solve did not converge in {sweeps} sweeps (last update {last_update:e})")]
    NonConverged { sweeps: usize, last_update: f64 },
    #[error("strip of width {width} is too narrow for a unit tangential shift")]
    DomainTooNarrow { width: f64 },
    #[error("tangential spacing {hy} does not divide the unit shift")]
    Misaligned { hy: f64 },
}

fn check_t(t: f64) -> Result<(), CorrectorError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(CorrectorError::InvalidParameter(format!("T must be positive, got {t}")));
    }
    Ok(())
}

/// Largest and smallest roots of `w / T + f(w)`, the boundary values of the
/// two extremal tangentially invariant truncated solutions `w (1 - x1 / T)`.
pub fn horizontal_pinning_roots(profile: &PeriodicProfile, t: f64) -> Result<(f64, f64), CorrectorError> {
    check_t(t)?;
    let phi = |w: f64| w / t + profile.eval(w);
    let lo = -profile.max_f() * t - 4.0;
    let hi = -profile.min_f() * t + 4.0;
    let w_plus = scan_for_root(&phi, hi, lo, -ROOT_SCAN_STEP).ok_or(CorrectorError::NoRoot { lo, hi })?;
    let w_minus = scan_for_root(&phi, lo, hi, ROOT_SCAN_STEP).ok_or(CorrectorError::NoRoot { lo, hi })?;
    Ok((w_plus, w_minus))
}

/// First sign change of `phi` met walking from `from` towards `to`, refined
/// by bisection to full precision.
fn scan_for_root(phi: &impl Fn(f64) -> f64, from: f64, to: f64, step: f64) -> Option<f64> {
    let n = ((to - from) / step).ceil() as usize;
    let mut a = from;
    let mut pa = phi(a);
    for s in 1..=n {
        if pa == 0.0 {
            return Some(a);
        }
        let b = if s == n { to } else { from + s as f64 * step };
        let pb = phi(b);
        if pb == 0.0 || pb.signum() != pa.signum() {
            let (mut x, mut y, sx) = (a, b, pa.signum());
            if pb == 0.0 {
                return Some(b);
            }
            loop {
                let m = 0.5 * (x + y);
                if m == x || m == y {
                    return Some(m);
                }
                let pm = phi(m);
                if pm == 0.0 {
                    return Some(m);
                }
                if pm.signum() == sx {
                    x = m;
                } else {
                    y = m;
                }
            }
        }
        a = b;
        pa = pb;
    }
    None
}

/// `[Q_lower(p), Q_upper(p)]` at truncation `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PinningInterval {
    pub q_lower: f64,
    pub q_upper: f64,
    pub p: f64,
    pub t_used: f64,
    /// Set when the values stand for `T -> infinity`.
    pub extrapolated: bool,
    /// Distance bound to the `T -> infinity` endpoints.
    pub error_bar: f64,
}

impl PinningInterval {
    pub fn width(&self) -> f64 {
        self.q_upper - self.q_lower
    }
}

/// At `p = 0` the endpoints are `-w_+/T` and `-w_-/T`; otherwise both equal
/// `<f>` at every `T`.
pub fn pinning_interval(profile: &PeriodicProfile, p: f64, t: f64) -> Result<PinningInterval, CorrectorError> {
    check_t(t)?;
    if p == 0.0 {
        let (w_plus, w_minus) = horizontal_pinning_roots(profile, t)?;
        Ok(PinningInterval {
            q_lower: -w_plus / t,
            q_upper: -w_minus / t,
            p,
            t_used: t,
            extrapolated: false,
            error_bar: 3.0 / t,
        })
    } else {
        let mean = profile.mean_f();
        Ok(PinningInterval {
            q_lower: mean,
            q_upper: mean,
            p,
            t_used: t,
            extrapolated: false,
            error_bar: 0.0,
        })
    }
}

/// The interval at [`LIMIT_T`], flagged as standing for `T -> infinity`.
pub fn pinning_interval_limit(profile: &PeriodicProfile, p: f64) -> Result<PinningInterval, CorrectorError> {
    let mut iv = pinning_interval(profile, p, LIMIT_T)?;
    iv.extrapolated = true;
    Ok(iv)
}

/// Strip `[0, T] x [0, L)` periodic in `x2` with period `L = 1/|p|`
/// (`L = 1` when `p = 0`); `nx2` counts nodes over one closed period, so
/// `nx2 - 1` of them are distinct.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StripGrid {
    pub t: f64,
    pub period_len: f64,
    pub nx1: usize,
    pub nx2: usize,
    pub hx: f64,
    pub hy: f64,
}

impl StripGrid {
    pub fn new(t: f64, p_mag: f64, nx1: usize, nx2: usize) -> Result<Self, CorrectorError> {
        check_t(t)?;
        if !(p_mag >= 0.0) || !p_mag.is_finite() {
            return Err(CorrectorError::InvalidParameter(format!("|p| must be finite and >= 0, got {p_mag}")));
        }
        if nx1 < 3 || nx2 < 4 {
            return Err(CorrectorError::InvalidParameter(format!("strip grid {nx1}x{nx2} too small")));
        }
        let period_len = if p_mag == 0.0 { 1.0 } else { 1.0 / p_mag };
        Ok(Self {
            t,
            period_len,
            nx1,
            nx2,
            hx: t / (nx1 - 1) as f64,
            hy: period_len / (nx2 - 1) as f64,
        })
    }

    /// Distinct tangential nodes.
    pub fn rows(&self) -> usize {
        self.nx2 - 1
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx1 + i
    }

    pub fn len(&self) -> usize {
        self.nx1 * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x1(&self, i: usize) -> f64 {
        i as f64 * self.hx
    }

    pub fn x2(&self, j: usize) -> f64 {
        j as f64 * self.hy
    }
}

/// Converged two-variable cell solution.
#[derive(Debug, Clone)]
pub struct CellSolution {
    pub grid: StripGrid,
    pub p_mag: f64,
    /// `eta` at node `grid.idx(i, j)`.
    pub eta: Vec<f64>,
    pub sweeps: usize,
}

impl CellSolution {
    /// `eta(0, x2)` over the distinct tangential nodes.
    pub fn boundary_trace(&self) -> Vec<f64> {
        (0..self.grid.rows()).map(|j| self.eta[self.grid.idx(0, j)]).collect()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.eta[self.grid.idx(i, j % self.grid.rows())]
    }

    /// `v = eta + |p| x2` laid out over `periods` consecutive periods.
    pub fn unfold(&self, periods: usize) -> StripField {
        let rows = self.grid.rows() * periods + 1;
        let mut values = Vec::with_capacity(rows * self.grid.nx1);
        for j in 0..rows {
            let x2 = j as f64 * self.grid.hy;
            for i in 0..self.grid.nx1 {
                values.push(self.at(i, j) + self.p_mag * x2);
            }
        }
        StripField {
            nx1: self.grid.nx1,
            nx2: rows,
            hx: self.grid.hx,
            hy: self.grid.hy,
            x2_start: 0.0,
            values,
        }
    }
}

/// Gauss-Seidel with over-relaxation on the periodic strip. Face nodes solve
/// the half-cell relation
/// `(eta1 - eta0)/hx + hx/(2 hy^2) (eta+ - 2 eta0 + eta-) = f(eta0 + |p| x2)`
/// by a directional root from the current value.
pub fn solve_cell(
    profile: &PeriodicProfile,
    p_mag: f64,
    t: f64,
    nx1: usize,
    nx2: usize,
    init: Option<&CellSolution>,
) -> Result<CellSolution, CorrectorError> {
    solve_cell_with(profile, p_mag, t, nx1, nx2, init, 1e-9, 2_000_000)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_cell_with(
    profile: &PeriodicProfile,
    p_mag: f64,
    t: f64,
    nx1: usize,
    nx2: usize,
    init: Option<&CellSolution>,
    tol: f64,
    max_sweeps: usize,
) -> Result<CellSolution, CorrectorError> {
    let g = StripGrid::new(t, p_mag, nx1, nx2)?;
    let rows = g.rows();
    let mut eta = match init {
        Some(c) if c.grid == g => c.eta.clone(),
        Some(_) => {
            return Err(CorrectorError::InvalidParameter(
                "initial cell solution lives on a different strip".into(),
            ))
        }
        None => vec![0.0; g.len()],
    };
    for j in 0..rows {
        eta[g.idx(nx1 - 1, j)] = 0.0;
    }
    let wx = 1.0 / (g.hx * g.hx);
    let wy = 1.0 / (g.hy * g.hy);
    let diag = 2.0 * (wx + wy);
    let a = 1.0 / g.hx + g.hx * wy;
    let wt = 0.5 * g.hx * wy;
    // Neumann face at x1 = 0: the slowest mode sees twice the strip height.
    let n = (2 * nx1).max(nx2) as f64;
    let omega = 2.0 / (1.0 + (std::f64::consts::PI / n).sin());
    for sweep in 1..=max_sweeps {
        let mut max_update = 0.0f64;
        for j in 0..rows {
            let up = (j + 1) % rows;
            let down = (j + rows - 1) % rows;
            let shift = p_mag * g.x2(j);
            let n0 = g.idx(0, j);
            let rhs = eta[n0 + 1] / g.hx + wt * (eta[g.idx(0, up)] + eta[g.idx(0, down)]);
            let cur = eta[n0];
            let new = directional_root(|u| rhs - a * u - profile.eval(u + shift), cur, 1.0 / 32.0)
                .ok_or_else(|| CorrectorError::InvalidParameter("face law root lost".into()))?;
            max_update = max_update.max((new - cur).abs());
            eta[n0] = new;
            for i in 1..nx1 - 1 {
                let c = g.idx(i, j);
                let avg = (wx * (eta[c + 1] + eta[c - 1]) + wy * (eta[g.idx(i, up)] + eta[g.idx(i, down)])) / diag;
                let delta = omega * (avg - eta[c]);
                max_update = max_update.max(delta.abs());
                eta[c] += delta;
            }
        }
        if max_update <= tol {
            return Ok(CellSolution {
                grid: g,
                p_mag,
                eta,
                sweeps: sweep,
            });
        }
    }
    Err(CorrectorError::NonConverged {
        sweeps: max_sweeps,
        last_update: f64::NAN,
    })
}

/// `|p| int_0^{1/|p|} f(eta(0, x2) + |p| x2) dx2`, trapezoid over one period.
pub fn cell_average_flux(cell: &CellSolution, profile: &PeriodicProfile) -> f64 {
    let g = &cell.grid;
    let scale = if cell.p_mag == 0.0 { 1.0 } else { cell.p_mag };
    let sum: f64 = (0..g.rows())
        .map(|j| profile.eval(cell.eta[g.idx(0, j)] + cell.p_mag * g.x2(j)))
        .sum();
    scale * g.hy * sum
}

/// Nonperiodic field on `[0, (nx1-1) hx] x [x2_start, x2_start + (nx2-1) hy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StripField {
    pub nx1: usize,
    pub nx2: usize,
    pub hx: f64,
    pub hy: f64,
    pub x2_start: f64,
    /// `j * nx1 + i` layout.
    pub values: Vec<f64>,
}

impl StripField {
    pub fn from_fn(nx1: usize, nx2: usize, hx: f64, hy: f64, x2_start: f64, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(nx1 * nx2);
        for j in 0..nx2 {
            for i in 0..nx1 {
                values.push(f(i as f64 * hx, x2_start + j as f64 * hy));
            }
        }
        Self {
            nx1,
            nx2,
            hx,
            hy,
            x2_start,
            values,
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx1 + i]
    }

    pub fn width(&self) -> f64 {
        (self.nx2 - 1) as f64 * self.hy
    }
}

/// Largest violation of `v(x + k) - ceil(k p) <= v(x) <= v(x + k) - floor(k p)`
/// over tangential shifts `k in {-2, -1, 1, 2}` that fit in the strip.
pub fn birkhoff_residual(field: &StripField, p: f64) -> Result<f64, CorrectorError> {
    let steps = 1.0 / field.hy;
    let per_unit = steps.round();
    if (steps - per_unit).abs() > 1e-9 * steps || per_unit < 1.0 {
        return Err(CorrectorError::Misaligned { hy: field.hy });
    }
    let per_unit = per_unit as usize;
    if per_unit >= field.nx2 {
        return Err(CorrectorError::DomainTooNarrow { width: field.width() });
    }
    let mut worst = 0.0f64;
    for k in [-2i32, -1, 1, 2] {
        let shift = k.unsigned_abs() as usize * per_unit;
        if shift >= field.nx2 {
            continue;
        }
        let kp = k as f64 * p;
        let (ceil, floor) = (kp.ceil(), kp.floor());
        for j in 0..field.nx2 {
            let jk = if k > 0 {
                j + shift
            } else if j >= shift {
                j - shift
            } else {
                continue;
            };
            if jk >= field.nx2 {
                continue;
            }
            for i in 0..field.nx1 {
                let v = field.at(i, j);
                let vk = field.at(i, jk);
                worst = worst.max(vk - ceil - v).max(v - vk + floor);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_without_heterogeneity_are_zero() {
        for t in [1.0, 10.0, 50.0] {
            let (wp, wm) = horizontal_pinning_roots(&PeriodicProfile::zero(), t).unwrap();
            assert!(wp.abs() < 1e-12 && wm.abs() < 1e-12);
        }
    }

    #[test]
    fn roots_satisfy_the_lemma_envelope() {
        let f = PeriodicProfile::unit_sine();
        let (wp, wm) = horizontal_pinning_roots(&f, 100.0).unwrap();
        let q = -wp / 100.0;
        assert!((-1.0..=-1.0 + 0.03).contains(&q), "{q}");
        assert!(((1.0 - 0.03)..=1.0).contains(&(-wm / 100.0)));
    }

    #[test]
    fn largest_root_matches_dense_scan() {
        let f = PeriodicProfile::unit_sine();
        let t = 10.0;
        let (wp, wm) = horizontal_pinning_roots(&f, t).unwrap();
        let phi = |w: f64| w / t + f.eval(w);
        // dense scan from the top at step 1e-6
        let mut w = 14.0;
        let mut prev = phi(w);
        let mut brute = f64::NAN;
        while w > -14.0 {
            let next = w - 1e-6;
            let pn = phi(next);
            if pn.signum() != prev.signum() {
                brute = 0.5 * (w + next);
                break;
            }
            w = next;
            prev = pn;
        }
        assert!((wp - brute).abs() < 1e-6, "{wp} vs {brute}");
        assert!(phi(wp).abs() < 1e-12 && phi(wm).abs() < 1e-12);
        assert!(wm < wp);
    }

    #[test]
    fn pinning_interval_examples() {
        let f = PeriodicProfile::unit_sine();
        let iv = pinning_interval(&f, 0.0, 200.0).unwrap();
        assert!((iv.q_lower + 1.0).abs() <= 3.0 / 200.0);
        assert!((iv.q_upper - 1.0).abs() <= 3.0 / 200.0);
        assert_eq!(iv.error_bar, 3.0 / 200.0);
        let iv = pinning_interval(&f, 0.7, 5.0).unwrap();
        assert_eq!((iv.q_lower, iv.q_upper), (0.0, 0.0));
        let iv = pinning_interval(&PeriodicProfile::zero(), 0.0, 50.0).unwrap();
        assert!(iv.q_lower.abs() < 1e-12 && iv.q_upper.abs() < 1e-12);
        let lim = pinning_interval_limit(&f, 0.0).unwrap();
        assert!(lim.extrapolated && lim.t_used == LIMIT_T);
        assert!(pinning_interval(&f, 0.0, 0.0).is_err());
    }

    #[test]
    fn cell_trivial_solutions() {
        let z = solve_cell(&PeriodicProfile::zero(), 0.5, 2.0, 17, 9, None).unwrap();
        assert!(z.eta.iter().all(|v| v.abs() < 1e-9));
        assert_eq!(cell_average_flux(&z, &PeriodicProfile::zero()), 0.0);

        let c = 0.4;
        let cell = solve_cell(&PeriodicProfile::constant(c), 1.0, 1.0, 17, 9, None).unwrap();
        for j in 0..cell.grid.rows() {
            for i in 0..cell.grid.nx1 {
                let exact = c * (cell.grid.x1(i) - 1.0);
                assert!((cell.at(i, j) - exact).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn cell_flux_matches_mean() {
        let f = PeriodicProfile::unit_sine();
        let cell = solve_cell(&f, 0.5, 4.0, 129, 65, None).unwrap();
        assert!(cell_average_flux(&cell, &f).abs() <= 5e-3);
        let f = PeriodicProfile::sine(1.0, 0.3, 0.0);
        let cell = solve_cell(&f, 1.0, 2.0, 129, 65, None).unwrap();
        assert!((cell_average_flux(&cell, &f) - 0.3).abs() <= 5e-3);
    }

    #[test]
    fn birkhoff_affine_is_exact() {
        for p in [0.0, 0.5, 0.3] {
            let field = StripField::from_fn(5, 129, 0.25, 1.0 / 32.0, -1.0, |x1, x2| 0.7 * x1 + p * x2);
            assert!(birkhoff_residual(&field, p).unwrap() < 1e-12);
        }
    }

    #[test]
    fn birkhoff_detects_nonperiodic_oscillation() {
        // Integer shifts leave sin(2 pi x2) unchanged; sin(pi x2) flips sign
        // under a unit shift, so the violation is 2 * 0.1 * max |sin|.
        let hy = 1.0 / 64.0;
        let periodic = StripField::from_fn(3, 257, 0.5, hy, 0.0, |x1, x2| x1 + 0.1 * (2.0 * std::f64::consts::PI * x2).sin());
        assert!(birkhoff_residual(&periodic, 0.0).unwrap() < 1e-12);
        let flipped = StripField::from_fn(3, 257, 0.5, hy, 0.0, |x1, x2| x1 + 0.1 * (std::f64::consts::PI * x2).sin());
        let mut oracle = 0.0f64;
        for j in 0..257 {
            let x2 = j as f64 * hy;
            if x2 + 1.0 <= 4.0 + 1e-12 {
                let d = 0.1 * ((std::f64::consts::PI * (x2 + 1.0)).sin() - (std::f64::consts::PI * x2).sin());
                oracle = oracle.max(d.abs());
            }
        }
        let r = birkhoff_residual(&flipped, 0.0).unwrap();
        assert!((r - oracle).abs() < 1e-8, "{r} vs {oracle}");
    }

    #[test]
    fn birkhoff_errors() {
        let narrow = StripField::from_fn(3, 17, 0.5, 1.0 / 32.0, 0.0, |_, _| 0.0);
        assert!(matches!(birkhoff_residual(&narrow, 0.0), Err(CorrectorError::DomainTooNarrow { .. })));
        let odd = StripField::from_fn(3, 100, 0.5, 0.03, 0.0, |_, _| 0.0);
        assert!(matches!(birkhoff_residual(&odd, 0.0), Err(CorrectorError::Misaligned { .. })));
    }

    #[test]
    fn horizontal_strip_solution_has_birkhoff_property() {
        let f = PeriodicProfile::unit_sine();
        let cell = solve_cell(&f, 0.0, 4.0, 33, 33, None).unwrap();
        let v = cell.unfold(3);
        assert!(birkhoff_residual(&v, 0.0).unwrap() <= 1e-6);
    }

    #[test]
    fn sloped_cell_solution_has_birkhoff_property() {
        let f = PeriodicProfile::unit_sine();
        let cell = solve_cell(&f, 0.5, 2.0, 33, 33, None).unwrap();
        let v = cell.unfold(3);
        assert!(birkhoff_residual(&v, 0.5).unwrap() <= 1e-6);
    }
}
