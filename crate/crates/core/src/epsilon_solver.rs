//! Epsilon-scale problems with the oscillating face law `d1 u = f(u / eps)`:
//! steady states by nonlinear SOR, the explicit heat flow, the energy
//! `E_eps` with its minimizers, and extremal steady states by monotone
//! relaxation.
//!
//! Every solver balances the half-cell face flux of [`crate::grid::face_flux`]
//! against the boundary law. That flux is the face-node gradient of the
//! discrete energy, so critical points of [`energy_eps`] are exactly the
//! discrete steady states, and it has non-negative neighbour weights, so the
//! explicit flow is order preserving under the CFL bound.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::boundary::DirichletData;
use crate::grid::{face_rhs, Field, HalfGrid, NodeKind};
use crate::media::PeriodicProfile;
use crate::scheme::{directional_root, heat_step_interior, sor_omega, sor_relax, solve_neumann_laplace};

/// Slack allowed when asserting monotone relaxation.
pub const MONOTONICITY_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EpsError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("no convergence after {sweeps} sweeps/steps, last residual {residual:e}")]
    NonConverged {
        sweeps: usize,
        residual: f64,
        last: Box<Field>,
    },
    #[error("time step {dt:e} exceeds the explicit limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("solution left the barrier at t = {t}: |u| = {observed} > 1.1 * {bound}")]
    NonFinite { t: f64, bound: f64, observed: f64 },
    #[error("monotone relaxation broke at step {step}, node {node}, by {amount:e}")]
    MonotonicityViolation { step: usize, node: usize, amount: f64 },
    #[error("face law has no root near u = {start} (rhs {rhs})")]
    RootFailure { start: f64, rhs: f64 },
    #[error("energy increased by {increase:e} in sweep {sweep}")]
    EnergyIncrease { sweep: usize, increase: f64 },
}

/// `Delta u = 0` (or the heat equation) in the half square, `d1 u = f(u/eps)`
/// on the face, `u = g` on the outer boundary.
#[derive(Debug, Clone)]
pub struct EpsProblem {
    pub profile: Arc<PeriodicProfile>,
    pub epsilon: f64,
    pub dirichlet: DirichletData,
    pub grid: Arc<HalfGrid>,
}

impl EpsProblem {
    pub fn new(
        profile: Arc<PeriodicProfile>,
        epsilon: f64,
        dirichlet: DirichletData,
        grid: Arc<HalfGrid>,
    ) -> Result<Self, EpsError> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(EpsError::InvalidProblem(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self {
            profile,
            epsilon,
            dirichlet,
            grid,
        })
    }

    /// Same data at another scale.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, EpsError> {
        Self::new(
            self.profile.clone(),
            epsilon,
            self.dirichlet.clone(),
            self.grid.clone(),
        )
    }

    #[inline]
    fn law(&self, u: f64) -> f64 {
        self.profile.eval(u / self.epsilon)
    }

    /// Face value balancing `rhs - A u = f(u/eps)`, reached from `current`
    /// along the scalar flow so that the update is order preserving.
    fn face_solve(&self, rhs: f64, current: f64) -> Result<f64, EpsError> {
        let a = self.grid.face_diagonal();
        directional_root(|u| rhs - a * u - self.law(u), current, self.epsilon / 32.0)
            .ok_or(EpsError::RootFailure {
                start: current,
                rhs,
            })
    }

    /// `sup |g|` over the Dirichlet nodes at `t`.
    fn data_sup(&self, t: f64) -> f64 {
        self.dirichlet.sup_on_boundary(&self.grid, t)
    }
}

/// Largest residuals of a candidate steady state, both in units of `u`
/// (the correction a Gauss-Seidel update would apply).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EllipticResidual {
    pub interior: f64,
    pub face: f64,
}

impl EllipticResidual {
    pub fn max(&self) -> f64 {
        self.interior.max(self.face)
    }
}

pub fn elliptic_residual_eps(field: &Field, problem: &EpsProblem) -> EllipticResidual {
    let g = field.grid();
    let v = field.values();
    let nx = g.nx();
    let wx = 1.0 / (g.hx() * g.hx());
    let wy = 1.0 / (g.hy() * g.hy());
    let diag = 2.0 * (wx + wy);
    let mut interior = 0.0f64;
    for j in 1..g.ny() - 1 {
        for i in 1..nx - 1 {
            let n = j * nx + i;
            let avg = (wx * (v[n + 1] + v[n - 1]) + wy * (v[n + nx] + v[n - nx])) / diag;
            interior = interior.max((avg - v[n]).abs());
        }
    }
    let a = g.face_diagonal();
    let mut face = 0.0f64;
    for k in 0..g.face_len() {
        let n0 = g.face_stencil(k)[0];
        let r = face_rhs(g, v, k) - a * v[n0] - problem.law(v[n0]);
        face = face.max(r.abs() / a);
    }
    EllipticResidual { interior, face }
}

/// Nonlinear SOR for the steady problem, starting from `init`.
///
/// The discrete problem is generally not uniquely solvable; which solution is
/// reached depends on `init`.
pub fn solve_elliptic_eps(
    problem: &EpsProblem,
    init: &Field,
    tol: f64,
    max_sweeps: usize,
) -> Result<Field, EpsError> {
    if !(tol > 0.0) {
        return Err(EpsError::InvalidProblem("tol must be positive".into()));
    }
    let g = &problem.grid;
    let mut values = init.values().to_vec();
    problem.dirichlet.apply(g, &mut values, 0.0);
    let omega = sor_omega(g.nx(), g.ny());
    let mut failure = None;
    let outcome = sor_relax(
        g,
        &mut values,
        omega,
        tol,
        max_sweeps,
        |_, rhs, cur| match problem.face_solve(rhs, cur) {
            Ok(u) => u,
            Err(e) => {
                failure.get_or_insert(e);
                cur
            }
        },
        |_| {},
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let field = Field::new(g.clone(), values).map_err(|e| EpsError::InvalidProblem(e.to_string()))?;
    if !outcome.converged {
        return Err(EpsError::NonConverged {
            sweeps: outcome.sweeps,
            residual: outcome.last_update,
            last: Box::new(field),
        });
    }
    Ok(field)
}

/// Snapshot times and fields of an explicit run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<Field>,
    /// `max |u^{n+1} - u^n|` for every step.
    pub max_updates: Vec<f64>,
    pub dt: f64,
    pub snapshot_stride: usize,
}

impl Trajectory {
    pub fn last(&self) -> &Field {
        self.fields.last().expect("trajectories hold the initial field")
    }

    /// Sup over shared snapshots of the nodewise distance.
    pub fn sup_distance(&self, other: &Trajectory) -> f64 {
        self.fields
            .iter()
            .zip(&other.fields)
            .map(|(a, b)| a.sup_distance(b))
            .fold(0.0, f64::max)
    }
}

/// Step size, horizon and snapshot spacing of an explicit run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeStepping {
    pub dt: f64,
    pub t_end: f64,
    pub snapshot_stride: usize,
}

impl TimeStepping {
    /// About 64 snapshots over the run.
    pub fn new(dt: f64, t_end: f64) -> Self {
        let steps = (t_end / dt).ceil().max(1.0) as usize;
        Self {
            dt,
            t_end,
            snapshot_stride: (steps / 64).max(1),
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.snapshot_stride = stride.max(1);
        self
    }

    /// Step count and the length of the final (possibly shortened) step.
    pub(crate) fn schedule(&self) -> (usize, f64) {
        let full = (self.t_end / self.dt).floor() as usize;
        let rem = self.t_end - full as f64 * self.dt;
        if rem > 1e-12 * self.dt.max(self.t_end) {
            (full + 1, rem)
        } else {
            (full, self.dt)
        }
    }
}

pub(crate) fn check_cfl(grid: &HalfGrid, dt: f64) -> Result<(), EpsError> {
    let limit = grid.cfl_limit();
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(EpsError::CflViolation { dt, limit });
    }
    Ok(())
}

/// One explicit step of the epsilon flow.
pub(crate) fn eps_step(
    problem: &EpsProblem,
    prev: &[f64],
    next: &mut [f64],
    dt: f64,
    t_next: f64,
) -> Result<(), EpsError> {
    let g = &problem.grid;
    problem.dirichlet.apply(g, next, t_next);
    heat_step_interior(g, prev, next, dt);
    let w = g.face_tangential_weight();
    let nx = g.nx();
    for k in 0..g.face_len() {
        let [n0, n1, _] = g.face_stencil(k);
        let rhs = next[n1] / g.hx() + w * (prev[n0 + nx] + prev[n0 - nx]);
        next[n0] = problem.face_solve(rhs, prev[n0])?;
    }
    Ok(())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Explicit heat flow with the oscillating face law.
pub fn solve_parabolic_eps(
    problem: &EpsProblem,
    u0: &Field,
    dt: f64,
    t_end: f64,
) -> Result<Trajectory, EpsError> {
    solve_parabolic_eps_with(problem, u0, &TimeStepping::new(dt, t_end))
}

pub fn solve_parabolic_eps_with(
    problem: &EpsProblem,
    u0: &Field,
    stepping: &TimeStepping,
) -> Result<Trajectory, EpsError> {
    let g = &problem.grid;
    check_cfl(g, stepping.dt)?;
    let (steps, last_dt) = stepping.schedule();
    let mut prev = u0.values().to_vec();
    problem.dirichlet.apply(g, &mut prev, 0.0);
    let mut next = prev.clone();
    let f_sup = problem.profile.sup_norm();
    let mut data_sup = max_abs(&prev).max(problem.data_sup(0.0));

    let snapshot = |vals: &[f64], t: f64| {
        Field::new(g.clone(), vals.to_vec())
            .expect("values checked finite")
            .with_time(t)
    };
    let mut traj = Trajectory {
        times: vec![0.0],
        fields: vec![snapshot(&prev, 0.0)],
        max_updates: Vec::with_capacity(steps),
        dt: stepping.dt,
        snapshot_stride: stepping.snapshot_stride,
    };
    let mut t = 0.0;
    for step in 1..=steps {
        let h = if step == steps { last_dt } else { stepping.dt };
        let t_next = if step == steps { stepping.t_end } else { t + h };
        eps_step(problem, &prev, &mut next, h, t_next)?;
        data_sup = data_sup.max(problem.data_sup(t_next));
        let bound = data_sup + f_sup;
        let observed = max_abs(&next);
        if !observed.is_finite() || observed > 1.1 * bound + 1e-12 {
            return Err(EpsError::NonFinite {
                t: t_next,
                bound,
                observed,
            });
        }
        let upd = prev
            .iter()
            .zip(&next)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        traj.max_updates.push(upd);
        std::mem::swap(&mut prev, &mut next);
        t = t_next;
        if step % stepping.snapshot_stride == 0 || step == steps {
            traj.times.push(t);
            traj.fields.push(snapshot(&prev, t));
        }
    }
    Ok(traj)
}

/// Neumaier-compensated accumulator.
#[derive(Default)]
pub(crate) struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Discrete Dirichlet energy `1/2 |grad u|^2` with the cell-averaged
/// edge-difference rule.
pub fn dirichlet_energy(field: &Field) -> f64 {
    let g = field.grid();
    let v = field.values();
    let (hx, hy) = (g.hx(), g.hy());
    let mut acc = KahanSum::default();
    for j in 0..g.ny() - 1 {
        for i in 0..g.nx() - 1 {
            let a = v[g.idx(i, j)];
            let b = v[g.idx(i + 1, j)];
            let c = v[g.idx(i, j + 1)];
            let d = v[g.idx(i + 1, j + 1)];
            let gx = ((b - a).powi(2) + (d - c).powi(2)) / (2.0 * hx * hx);
            let gy = ((c - a).powi(2) + (d - b).powi(2)) / (2.0 * hy * hy);
            acc.add(0.5 * hx * hy * (gx + gy));
        }
    }
    acc.value()
}

/// `E_eps(u) = 1/2 \int |grad u|^2 + \int_face eps F(u / eps)`, trapezoid in
/// `x2` along the face.
pub fn energy_eps(field: &Field, problem: &EpsProblem) -> f64 {
    let g = field.grid();
    let eps = problem.epsilon;
    let mut acc = KahanSum::default();
    acc.add(dirichlet_energy(field));
    for j in 0..g.ny() {
        let w = if j == 0 || j == g.ny() - 1 { 0.5 } else { 1.0 };
        let u = field.values()[g.idx(0, j)];
        acc.add(w * g.hy() * eps * problem.profile.antiderivative(u / eps));
    }
    acc.value()
}

/// Exact nodal partial derivatives of [`energy_eps`], all nodes included.
pub fn energy_gradient_eps(field: &Field, problem: &EpsProblem) -> Vec<f64> {
    let g = field.grid();
    let v = field.values();
    let (hx, hy) = (g.hx(), g.hy());
    let mut grad = vec![0.0; g.len()];
    let cx = 0.5 * hy / hx;
    let cy = 0.5 * hx / hy;
    for j in 0..g.ny() - 1 {
        for i in 0..g.nx() - 1 {
            let ia = g.idx(i, j);
            let ib = g.idx(i + 1, j);
            let ic = g.idx(i, j + 1);
            let id = g.idx(i + 1, j + 1);
            for (p, q, c) in [(ia, ib, cx), (ic, id, cx), (ia, ic, cy), (ib, id, cy)] {
                let d = c * (v[q] - v[p]);
                grad[q] += d;
                grad[p] -= d;
            }
        }
    }
    for j in 0..g.ny() {
        let w = if j == 0 || j == g.ny() - 1 { 0.5 } else { 1.0 };
        let n = g.idx(0, j);
        grad[n] += w * hy * problem.law(v[n]);
    }
    grad
}

/// Output of [`minimize_energy_eps`].
#[derive(Debug, Clone)]
pub struct EnergyMinimum {
    pub field: Field,
    /// Energy after every sweep, concatenated over the continuation ladder.
    /// Nonincreasing within each rung.
    pub energy_history: Vec<f64>,
    pub sweeps: usize,
    /// Scales visited, coarsest first; the last one is the problem's.
    pub ladder: Vec<f64>,
}

/// Continuation starts at or above this scale.
pub const CONTINUATION_START: f64 = 0.2;

/// Coordinate descent on `E_eps` aimed at the global minimizer.
///
/// Interior nodes take over-relaxed Laplace averages (each such move lowers
/// the quadratic energy). Face nodes minimize their one-dimensional slice,
/// quadratic plus `eps F(u/eps)`, by sampling a window that must contain its
/// global minimizer and refining by golden section; the move is accepted only
/// if it lowers the slice. The run starts from the `<f>`-Neumann solution at
/// the coarsest scale of a halving ladder ending at `problem.epsilon`; on
/// every later rung both the previous minimizer and the Neumann solution are
/// descended and the lower energy wins.
///
/// `energy_history` holds the sweeps of the winning descent on each rung.
pub fn minimize_energy_eps(problem: &EpsProblem, tol: f64) -> Result<EnergyMinimum, EpsError> {
    if !problem.dirichlet.is_time_independent() {
        return Err(EpsError::InvalidProblem(
            "energy minimization needs time-independent data".into(),
        ));
    }
    let g = &problem.grid;
    let start = solve_neumann_laplace(g, &problem.dirichlet, problem.profile.mean_f(), tol.min(1e-10), 1_000_000)
        .ok_or_else(|| EpsError::InvalidProblem("mean-flux Neumann solve failed".into()))?;
    let mut ladder = vec![problem.epsilon];
    while *ladder.last().unwrap() < CONTINUATION_START {
        let next = ladder.last().unwrap() * 2.0;
        ladder.push(next);
    }
    ladder.reverse();

    let mut field = start.clone();
    let mut history = Vec::new();
    let mut sweeps = 0;
    for (rung, &eps) in ladder.iter().enumerate() {
        let stage = problem.with_epsilon(eps)?;
        let mut step = descend_energy_eps(&stage, &field, tol)?;
        sweeps += step.sweeps;
        if rung > 0 {
            // the previous rung's minimizer can sit on a coarser staircase
            let fresh = descend_energy_eps(&stage, &start, tol)?;
            sweeps += fresh.sweeps;
            if energy_eps(&fresh.field, &stage) < energy_eps(&step.field, &stage) {
                step = fresh;
            }
        }
        history.extend(step.energy_history);
        field = step.field;
        log::debug!(
            "energy minimization eps={eps}: {} sweeps, E={:.12}",
            step.sweeps,
            history.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(EnergyMinimum {
        field,
        energy_history: history,
        sweeps,
        ladder,
    })
}

/// Coordinate descent on `E_eps` from `init` at the problem's own scale.
pub fn descend_energy_eps(problem: &EpsProblem, init: &Field, tol: f64) -> Result<EnergyMinimum, EpsError> {
    let g = &problem.grid;
    let mut values = init.values().to_vec();
    problem.dirichlet.apply(g, &mut values, 0.0);
    let mut history = Vec::new();
    let omega = sor_omega(g.nx(), g.ny());
    let max_sweeps = 200_000;
    let mut prev_energy = energy_eps(&Field::new(g.clone(), values.clone()).unwrap(), problem);
    let mut increase = None;
    let mut sweep_no = 0;
    let outcome = sor_relax(
        g,
        &mut values,
        omega,
        tol,
        max_sweeps,
        |_, rhs, cur| face_slice_minimizer(problem, rhs, cur),
        |vals| {
            sweep_no += 1;
            let e = energy_eps(&Field::new(g.clone(), vals.to_vec()).unwrap(), problem);
            if e - prev_energy > 1e-12 && increase.is_none() {
                increase = Some((sweep_no, e - prev_energy));
            }
            prev_energy = e;
            history.push(e);
        },
    );
    if let Some((sweep, inc)) = increase {
        return Err(EpsError::EnergyIncrease {
            sweep,
            increase: inc,
        });
    }
    let field = Field::new(g.clone(), values).unwrap();
    if !outcome.converged {
        return Err(EpsError::NonConverged {
            sweeps: outcome.sweeps,
            residual: outcome.last_update,
            last: Box::new(field),
        });
    }
    Ok(EnergyMinimum {
        field,
        energy_history: history,
        sweeps: outcome.sweeps,
        ladder: vec![problem.epsilon],
    })
}

/// Minimizer of `A/2 u^2 - rhs u + eps F(u/eps)`, never worse than `current`.
fn face_slice_minimizer(problem: &EpsProblem, rhs: f64, current: f64) -> f64 {
    let a = problem.grid.face_diagonal();
    let eps = problem.epsilon;
    let prof = &problem.profile;
    let slice = |u: f64| 0.5 * a * u * u - rhs * u + eps * prof.antiderivative(u / eps);
    // eps F(u/eps) = <f> u + eps P(u/eps) with P periodic of oscillation at
    // most (max f - min f); the global minimizer lies within
    // sqrt(2 eps osc / A) of the minimizer of the averaged slice.
    let center = (rhs - prof.mean_f()) / a;
    let osc = prof.max_f() - prof.min_f();
    let half = (0.5 * eps).max((2.0 * eps * osc / a).sqrt());
    let periods = (2.0 * half / eps).ceil().max(1.0);
    let samples = 64 * periods as usize;
    let spacing = 2.0 * half / samples as f64;
    let mut best_u = current;
    let mut best = slice(current);
    for s in 0..=samples {
        let u = center - half + s as f64 * spacing;
        let v = slice(u);
        if v < best {
            best = v;
            best_u = u;
        }
    }
    if best_u == current {
        return current;
    }
    let (u, v) = golden_section(&slice, best_u - spacing, best_u + spacing);
    let cur_val = slice(current);
    if v < best && v < cur_val {
        u
    } else if best < cur_val {
        best_u
    } else {
        current
    }
}

fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..80 {
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Which extremal steady state to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Extremal {
    /// Smallest solution: reached by increasing relaxation from a subsolution.
    MinSuper,
    /// Largest solution: reached by decreasing relaxation from a supersolution.
    MaxSub,
}

/// Limit of a monotone relaxation run.
#[derive(Debug, Clone)]
pub struct RelaxedState {
    pub field: Field,
    pub steps: usize,
    pub time: f64,
    /// Largest step-to-step move against the expected direction.
    pub worst_monotonicity: f64,
}

pub(crate) struct RelaxationPlan {
    pub init: Vec<f64>,
    pub upward: bool,
}

/// Affine one-sided initial state: `-K + max f x1` lies below every solution
/// and is a subsolution; `K + min f x1` is a supersolution above every
/// solution. `K = ||g|| + ||f|| + 1`.
pub(crate) fn relaxation_plan(
    grid: &Arc<HalfGrid>,
    data: &DirichletData,
    profile: &PeriodicProfile,
    which: Extremal,
) -> RelaxationPlan {
    let k = data.sup_on_boundary(grid, 0.0) + profile.sup_norm() + 1.0;
    let (m, big_m) = (profile.min_f(), profile.max_f());
    let init = match which {
        Extremal::MinSuper => Field::from_fn(grid.clone(), |x1, _| -k + big_m * x1),
        Extremal::MaxSub => Field::from_fn(grid.clone(), |x1, _| k + m * x1),
    };
    RelaxationPlan {
        init: init.into_values(),
        upward: which == Extremal::MinSuper,
    }
}

/// Scans a step for moves against the relaxation direction. Returns the worst
/// offending node and amount.
pub(crate) fn monotonicity_defect(prev: &[f64], next: &[f64], upward: bool) -> (usize, f64) {
    let mut worst = (0, 0.0f64);
    for (n, (a, b)) in prev.iter().zip(next).enumerate() {
        let back = if upward { a - b } else { b - a };
        if back > worst.1 {
            worst = (n, back);
        }
    }
    worst
}

/// Extremal steady state by monotone explicit relaxation until the largest
/// rate `max |u^{n+1} - u^n| / dt` drops to `tol`.
pub fn extremal_steady_eps(
    problem: &EpsProblem,
    which: Extremal,
    tol: f64,
) -> Result<RelaxedState, EpsError> {
    if !problem.dirichlet.is_time_independent() {
        return Err(EpsError::InvalidProblem(
            "extremal states need time-independent data".into(),
        ));
    }
    let g = &problem.grid;
    let dt = 0.5 * g.cfl_limit();
    let plan = relaxation_plan(g, &problem.dirichlet, &problem.profile, which);
    let mut prev = plan.init;
    problem.dirichlet.apply(g, &mut prev, 0.0);
    let mut next = prev.clone();
    let max_steps = (400.0 / dt) as usize;
    let mut worst_mono = 0.0f64;
    for step in 1..=max_steps {
        eps_step(problem, &prev, &mut next, dt, 0.0)?;
        let (node, back) = monotonicity_defect(&prev, &next, plan.upward);
        if back > MONOTONICITY_SLACK {
            return Err(EpsError::MonotonicityViolation {
                step,
                node,
                amount: back,
            });
        }
        worst_mono = worst_mono.max(back);
        let upd = prev
            .iter()
            .zip(&next)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut prev, &mut next);
        if upd <= tol * dt {
            return Ok(RelaxedState {
                field: Field::new(g.clone(), prev).unwrap().with_time(step as f64 * dt),
                steps: step,
                time: step as f64 * dt,
                worst_monotonicity: worst_mono,
            });
        }
    }
    Err(EpsError::NonConverged {
        sweeps: max_steps,
        residual: f64::NAN,
        last: Box::new(Field::new(g.clone(), prev).unwrap()),
    })
}

/// `true` when `node` is a Dirichlet node of `grid`.
pub fn is_dirichlet(grid: &HalfGrid, node: usize) -> bool {
    grid.kind(node) == NodeKind::Dirichlet
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(profile: PeriodicProfile, eps: f64, data: DirichletData, nx: usize, ny: usize) -> EpsProblem {
        let grid = Arc::new(HalfGrid::new(nx, ny).unwrap());
        EpsProblem::new(Arc::new(profile), eps, data, grid).unwrap()
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let grid = Arc::new(HalfGrid::new(5, 5).unwrap());
        let r = EpsProblem::new(Arc::new(PeriodicProfile::zero()), 0.0, DirichletData::constant(0.0), grid);
        assert!(matches!(r, Err(EpsError::InvalidProblem(_))));
    }

    #[test]
    fn elliptic_affine_solutions() {
        let p = problem(PeriodicProfile::zero(), 0.1, DirichletData::steady("x1", |x1, _| x1), 17, 17);
        let init = Field::constant(p.grid.clone(), 0.0);
        let u = solve_elliptic_eps(&p, &init, 1e-12, 100_000).unwrap();
        // zero flux on the face: the zero-Neumann harmonic field, not x1
        let neumann = solve_neumann_laplace(&p.grid, &p.dirichlet, 0.0, 1e-13, 100_000).unwrap();
        assert!(u.sup_distance(&neumann) < 1e-8);

        let c = 0.35;
        let p = problem(PeriodicProfile::constant(c), 0.1, DirichletData::steady("cx1", move |x1, _| c * x1), 17, 17);
        let u = solve_elliptic_eps(&p, &init, 1e-12, 100_000).unwrap();
        assert!(u.sup_distance(&p.dirichlet.field(&p.grid, 0.0)) < 1e-8);
    }

    #[test]
    fn elliptic_residual_within_tolerance() {
        let p = problem(PeriodicProfile::unit_sine(), 0.1, DirichletData::steady("0.3x1", |x1, _| 0.3 * x1), 33, 33);
        let init = Field::constant(p.grid.clone(), 0.0);
        let tol = 1e-10;
        let u = solve_elliptic_eps(&p, &init, tol, 100_000).unwrap();
        assert!(elliptic_residual_eps(&u, &p).max() <= 10.0 * tol);
    }

    #[test]
    fn non_convergence_reports_last_iterate() {
        let p = problem(PeriodicProfile::unit_sine(), 0.1, DirichletData::steady("x2", |_, x2| x2), 33, 33);
        let init = Field::constant(p.grid.clone(), 0.0);
        match solve_elliptic_eps(&p, &init, 1e-14, 3) {
            Err(EpsError::NonConverged { sweeps, residual, last }) => {
                assert_eq!(sweeps, 3);
                assert!(residual > 0.0);
                assert_eq!(last.values().len(), p.grid.len());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parabolic_trivial_cases() {
        let p = problem(PeriodicProfile::zero(), 0.1, DirichletData::constant(0.0), 17, 17);
        let dt = 0.5 * p.grid.cfl_limit();
        let zero = Field::constant(p.grid.clone(), 0.0);
        let tr = solve_parabolic_eps(&p, &zero, dt, 0.05).unwrap();
        assert!(tr.fields.iter().all(|f| f.sup_norm() == 0.0));
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        assert!((tr.times.last().unwrap() - 0.05).abs() < 1e-15);

        let p = problem(PeriodicProfile::constant(1.0), 0.1, DirichletData::steady("x1", |x1, _| x1), 17, 17);
        let u0 = p.dirichlet.field(&p.grid, 0.0);
        let tr = solve_parabolic_eps(&p, &u0, dt, 0.05).unwrap();
        assert!(tr.last().sup_distance(&u0) < 1e-12);

        let p = problem(PeriodicProfile::zero(), 0.1, DirichletData::steady("x1", |x1, _| x1), 17, 17);
        let u0 = solve_neumann_laplace(&p.grid, &p.dirichlet, 0.0, 1e-14, 100_000).unwrap();
        let tr = solve_parabolic_eps(&p, &u0, dt, 0.05).unwrap();
        assert!(tr.last().sup_distance(&u0) < 1e-10);
    }

    #[test]
    fn parabolic_rejects_large_steps() {
        let p = problem(PeriodicProfile::zero(), 0.1, DirichletData::constant(0.0), 17, 17);
        let u0 = Field::constant(p.grid.clone(), 0.0);
        let dt = 1.01 * p.grid.cfl_limit();
        assert!(matches!(
            solve_parabolic_eps(&p, &u0, dt, 0.01),
            Err(EpsError::CflViolation { .. })
        ));
    }

    #[test]
    fn energy_examples() {
        let p = problem(PeriodicProfile::unit_sine(), 0.25, DirichletData::constant(0.0), 33, 65);
        let zero = Field::constant(p.grid.clone(), 0.0);
        assert_eq!(energy_eps(&zero, &p), 0.0);
        let x1 = Field::from_fn(p.grid.clone(), |x1, _| x1);
        assert!((energy_eps(&x1, &p) - 1.0).abs() < 1e-12);
        let pz = problem(PeriodicProfile::zero(), 0.25, DirichletData::constant(0.0), 33, 65);
        assert!((energy_eps(&x1, &pz) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let p = problem(PeriodicProfile::sine(1.0, 0.2, 0.1), 0.1, DirichletData::constant(0.0), 9, 11);
        let u = Field::from_fn(p.grid.clone(), |x1, x2| (3.0 * x1).sin() + 0.4 * x2 * x2 - 0.2 * x1 * x2);
        let grad = energy_gradient_eps(&u, &p);
        let h = 1e-6;
        for n in 0..p.grid.len() {
            let mut plus = u.clone();
            plus.values_mut()[n] += h;
            let mut minus = u.clone();
            minus.values_mut()[n] -= h;
            let fd = (energy_eps(&plus, &p) - energy_eps(&minus, &p)) / (2.0 * h);
            assert!((fd - grad[n]).abs() <= 1e-5 * grad[n].abs().max(1e-3), "node {n}: {fd} vs {}", grad[n]);
        }
    }

    #[test]
    fn energy_gradient_vanishes_at_steady_states() {
        let p = problem(PeriodicProfile::unit_sine(), 0.1, DirichletData::steady("x2", |_, x2| 0.5 * x2), 17, 17);
        let init = Field::constant(p.grid.clone(), 0.0);
        let u = solve_elliptic_eps(&p, &init, 1e-13, 100_000).unwrap();
        let grad = energy_gradient_eps(&u, &p);
        for n in 0..p.grid.len() {
            if p.grid.kind(n) != NodeKind::Dirichlet {
                assert!(grad[n].abs() < 1e-9, "node {n}: {}", grad[n]);
            }
        }
    }

    #[test]
    fn minimizer_of_quadratic_energy_is_neumann_solution() {
        let q = 0.4;
        let p = problem(PeriodicProfile::zero(), 0.1, DirichletData::steady("qx2", move |_, x2| q * x2), 17, 17);
        let m = minimize_energy_eps(&p, 1e-11).unwrap();
        assert!(m.field.sup_distance(&p.dirichlet.field(&p.grid, 0.0)) < 1e-6);
        assert!(m.energy_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));

        let c = -0.3;
        let p = problem(PeriodicProfile::constant(c), 0.1, DirichletData::steady("cx1", move |x1, _| c * x1), 17, 17);
        let m = minimize_energy_eps(&p, 1e-11).unwrap();
        assert!(m.field.sup_distance(&p.dirichlet.field(&p.grid, 0.0)) < 1e-6);
    }

    #[test]
    fn extremals_coincide_without_heterogeneity() {
        let p = problem(PeriodicProfile::zero(), 0.1, DirichletData::steady("x2", |_, x2| x2), 17, 17);
        let lo = extremal_steady_eps(&p, Extremal::MinSuper, 1e-9).unwrap();
        let hi = extremal_steady_eps(&p, Extremal::MaxSub, 1e-9).unwrap();
        let exact = p.dirichlet.field(&p.grid, 0.0);
        assert!(lo.field.sup_distance(&exact) < 1e-7);
        assert!(hi.field.sup_distance(&exact) < 1e-7);
        assert!(lo.worst_monotonicity <= MONOTONICITY_SLACK);
    }

    #[test]
    fn extremals_are_ordered_and_distinct() {
        let p = problem(PeriodicProfile::unit_sine(), 0.1, DirichletData::constant(0.3), 17, 17);
        let tol = 1e-8;
        let lo = extremal_steady_eps(&p, Extremal::MinSuper, tol).unwrap();
        let hi = extremal_steady_eps(&p, Extremal::MaxSub, tol).unwrap();
        let mut gap = 0.0f64;
        for (a, b) in lo.field.values().iter().zip(hi.field.values()) {
            assert!(a <= &(b + 1e-9));
            gap = gap.max(b - a);
        }
        assert!(gap > 10.0 * tol);
    }

    #[test]
    fn steep_minimal_extremal_is_a_discrete_solution() {
        let p = problem(PeriodicProfile::unit_sine(), 0.1, DirichletData::steady("2x1", |x1, _| 2.0 * x1), 17, 17);
        let tol = 1e-9;
        let lo = extremal_steady_eps(&p, Extremal::MinSuper, tol).unwrap();
        // A rate below tol translates into a residual of order tol / lambda_1.
        assert!(elliptic_residual_eps(&lo.field, &p).max() <= 10.0 * tol);
    }
}
