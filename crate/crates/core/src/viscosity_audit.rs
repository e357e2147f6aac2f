//! Regularization tools and cross-solution audits on computed trajectories:
//! tangential sup/inf-convolutions, caloric lifts, comparison gaps and the
//! dynamic slope laws of the pinned face.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::epsilon_solver::Trajectory;
use crate::grid::{Field, HalfGrid, NodeKind};
use crate::homogenized_solver::{FluxStep, HomProblem};
use crate::scheme::heat_step_interior;

/// Slack on the boundary ordering checked by [`comparison_gap`].
pub const BOUNDARY_SLACK: f64 = 1e-12;
/// Slack on the slope laws checked by [`dynamic_slope_audit`].
pub const SLOPE_LAW_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("fields live on different grids or times")]
    ShapeMismatch,
    #[error("sub exceeds super by {amount:e} on the parabolic boundary (snapshot {snapshot}, node {node})")]
    BoundaryOrderViolation { snapshot: usize, node: usize, amount: f64 },
    #[error("lift step {dt:e} exceeds the explicit limit {limit:e}")]
    CflViolation { dt: f64, limit: f64 },
}

/// Node values on a common grid at increasing times.
#[derive(Debug, Clone)]
pub struct SpaceTimeField {
    grid: Arc<HalfGrid>,
    times: Vec<f64>,
    slices: Vec<Vec<f64>>,
}

impl SpaceTimeField {
    pub fn new(grid: Arc<HalfGrid>, times: Vec<f64>, slices: Vec<Vec<f64>>) -> Result<Self, AuditError> {
        if times.is_empty() || times.len() != slices.len() {
            return Err(AuditError::Invalid("need one slice per time, at least one".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(AuditError::Invalid("times must increase strictly".into()));
        }
        if slices.iter().any(|s| s.len() != grid.len()) {
            return Err(AuditError::ShapeMismatch);
        }
        if slices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AuditError::Invalid("non-finite value".into()));
        }
        Ok(Self { grid, times, slices })
    }

    pub fn from_trajectory(traj: &Trajectory) -> Result<Self, AuditError> {
        let grid = traj.last().grid().clone();
        let slices = traj.fields.iter().map(|f| f.values().to_vec()).collect();
        Self::new(grid, traj.times.clone(), slices)
    }

    /// `u(x, t)` sampled from a closure at the given times.
    pub fn from_fn(grid: Arc<HalfGrid>, times: Vec<f64>, u: impl Fn(f64, f64, f64) -> f64) -> Result<Self, AuditError> {
        let slices = times
            .iter()
            .map(|&t| (0..grid.len()).map(|n| {
                let (x1, x2) = grid.coords(n);
                u(x1, x2, t)
            }).collect())
            .collect();
        Self::new(grid, times, slices)
    }

    pub fn grid(&self) -> &Arc<HalfGrid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        &self.slices[n]
    }

    pub fn at(&self, n: usize, node: usize) -> f64 {
        self.slices[n][node]
    }

    /// Common spacing of the snapshot times, if they are uniform.
    pub fn dt(&self) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let dt = self.times[1] - self.times[0];
        let uniform = self.times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt);
        uniform.then_some(dt)
    }

    /// Face trace at snapshot `n`, ordered by face row.
    pub fn face_view(&self, n: usize) -> Vec<f64> {
        (0..self.grid.face_len()).map(|k| self.slices[n][self.grid.face_stencil(k)[0]]).collect()
    }

    pub fn field(&self, n: usize) -> Field {
        Field::new(self.grid.clone(), self.slices[n].clone())
            .expect("slices are finite")
            .with_time(self.times[n])
    }

    pub fn sup_norm(&self) -> f64 {
        self.slices.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &SpaceTimeField) -> Result<f64, AuditError> {
        self.check_shape(other)?;
        Ok(self
            .slices
            .iter()
            .zip(&other.slices)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    fn check_shape(&self, other: &SpaceTimeField) -> Result<(), AuditError> {
        let same_grid = self.grid.nx() == other.grid.nx() && self.grid.ny() == other.grid.ny();
        let same_times = self.times.len() == other.times.len()
            && self.times.iter().zip(&other.times).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0));
        if same_grid && same_times {
            Ok(())
        } else {
            Err(AuditError::ShapeMismatch)
        }
    }
}

/// `sup { u(x1, y, s) - |x2 - y|^2 / (2 delta) - (t - s)^2 / (2 delta) }` over
/// all nodes `(x1, y)` of the same `x1` column and all snapshot times `s`.
/// Exact over the discrete set; the penalty is separable, so the sup is
/// taken in `x2` first and then in `t`.
pub fn tangential_sup_convolution(u: &SpaceTimeField, delta: f64) -> Result<SpaceTimeField, AuditError> {
    convolve(u, delta, 1.0)
}

/// The inf-convolution `-(sup-convolution of -u)`.
pub fn tangential_inf_convolution(u: &SpaceTimeField, delta: f64) -> Result<SpaceTimeField, AuditError> {
    convolve(u, delta, -1.0)
}

fn convolve(u: &SpaceTimeField, delta: f64, sign: f64) -> Result<SpaceTimeField, AuditError> {
    if !(delta > 0.0) {
        return Err(AuditError::Invalid(format!("delta must be positive, got {delta}")));
    }
    let g = &u.grid;
    let (nx, ny, nt) = (g.nx(), g.ny(), u.len());
    let hy = g.hy();
    let pen = |d: f64| d * d / (2.0 * delta);
    // x2 pass: per snapshot and column
    let mut stage = vec![vec![0.0; g.len()]; nt];
    for (n, out) in stage.iter_mut().enumerate() {
        let src = &u.slices[n];
        for i in 0..nx {
            for j in 0..ny {
                let mut best = f64::NEG_INFINITY;
                for jj in 0..ny {
                    let d = (j as f64 - jj as f64) * hy;
                    best = best.max(sign * src[jj * nx + i] - pen(d));
                }
                out[j * nx + i] = best;
            }
        }
    }
    // t pass: per node
    let mut slices = vec![vec![0.0; g.len()]; nt];
    for node in 0..g.len() {
        for n in 0..nt {
            let mut best = f64::NEG_INFINITY;
            for (s, st) in stage.iter().enumerate() {
                best = best.max(st[node] - pen(u.times[n] - u.times[s]));
            }
            slices[n][node] = sign * best;
        }
    }
    SpaceTimeField::new(g.clone(), u.times.clone(), slices)
}

/// Caloric lift of the parabolic-boundary data of `trace`: explicit heat flow
/// with `trace` imposed on every grid boundary node (the face included) and
/// as initial state; boundary data are linear in time between snapshots and
/// each snapshot interval is split into `substeps` steps.
pub fn caloric_lift(trace: &SpaceTimeField, substeps: usize) -> Result<SpaceTimeField, AuditError> {
    if substeps == 0 {
        return Err(AuditError::Invalid("substeps must be positive".into()));
    }
    let g = &trace.grid;
    let limit = g.cfl_limit();
    for w in trace.times.windows(2) {
        let dt = (w[1] - w[0]) / substeps as f64;
        if dt > limit * (1.0 + 1e-12) {
            return Err(AuditError::CflViolation { dt, limit });
        }
    }
    let boundary: Vec<usize> = (0..g.len()).filter(|&n| g.kind(n) != NodeKind::Interior).collect();
    let mut prev = trace.slices[0].clone();
    let mut next = prev.clone();
    let mut slices = vec![prev.clone()];
    for n in 1..trace.len() {
        let (t0, t1) = (trace.times[n - 1], trace.times[n]);
        let dt = (t1 - t0) / substeps as f64;
        for s in 1..=substeps {
            let theta = s as f64 / substeps as f64;
            for &b in &boundary {
                next[b] = (1.0 - theta) * trace.slices[n - 1][b] + theta * trace.slices[n][b];
            }
            heat_step_interior(g, &prev, &mut next, dt);
            std::mem::swap(&mut prev, &mut next);
        }
        slices.push(prev.clone());
    }
    SpaceTimeField::new(g.clone(), trace.times.clone(), slices)
}

/// Parabolic boundary of the pinned problem: the initial snapshot and the
/// Dirichlet nodes at all times. The face is not part of it.
fn on_parabolic_boundary(g: &HalfGrid, n: usize, node: usize) -> bool {
    n == 0 || g.kind(node) == NodeKind::Dirichlet
}

/// `max (sub - super)` over the space-time nodes off the parabolic boundary,
/// after checking `sub <= super + BOUNDARY_SLACK` on it.
pub fn comparison_gap(sub: &SpaceTimeField, sup: &SpaceTimeField) -> Result<f64, AuditError> {
    sub.check_shape(sup)?;
    let g = &sub.grid;
    let mut gap = f64::NEG_INFINITY;
    for n in 0..sub.len() {
        for node in 0..g.len() {
            let d = sub.slices[n][node] - sup.slices[n][node];
            if on_parabolic_boundary(g, n, node) {
                if d > BOUNDARY_SLACK {
                    return Err(AuditError::BoundaryOrderViolation {
                        snapshot: n,
                        node,
                        amount: d,
                    });
                }
            } else {
                gap = gap.max(d);
            }
        }
    }
    if gap == f64::NEG_INFINITY {
        return Err(AuditError::Invalid("no space-time nodes off the parabolic boundary".into()));
    }
    Ok(gap)
}

/// Tally of one slope law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeCondition {
    pub condition: String,
    /// Node-steps (transversal) or component-steps (laminar) that moved
    /// faster than `tol_rate`.
    pub events: usize,
    pub violations: usize,
    /// Largest excess over the law among the events, 0 when none exceeds it.
    pub worst: f64,
}

impl SlopeCondition {
    fn new(name: &str) -> Self {
        Self {
            condition: name.to_string(),
            events: 0,
            violations: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, excess: f64) {
        self.events += 1;
        self.worst = self.worst.max(excess);
        if excess > SLOPE_LAW_SLACK {
            self.violations += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeAuditReport {
    pub tol_rate: f64,
    pub steps: usize,
    pub transversal: SlopeCondition,
    pub laminar: SlopeCondition,
}

impl SlopeAuditReport {
    pub fn violations(&self) -> usize {
        self.transversal.violations + self.laminar.violations
    }

    pub fn worst(&self) -> f64 {
        self.transversal.worst.max(self.laminar.worst)
    }
}

/// `10 (max(hx, hy) + dt)`.
pub fn default_tol_rate(problem: &HomProblem) -> f64 {
    10.0 * (problem.grid.hx().max(problem.grid.hy()) + problem.dt)
}

/// Streaming form of [`dynamic_slope_audit`], usable as a run observer.
#[derive(Debug, Clone)]
pub struct SlopeAuditor {
    m: f64,
    big_m: f64,
    mean: f64,
    report: SlopeAuditReport,
}

impl SlopeAuditor {
    pub fn new(problem: &HomProblem, tol_rate: f64) -> Self {
        Self {
            m: problem.profile.min_f(),
            big_m: problem.profile.max_f(),
            mean: problem.profile.mean_f(),
            report: SlopeAuditReport {
                tol_rate,
                steps: 0,
                transversal: SlopeCondition::new("transversal"),
                laminar: SlopeCondition::new("laminar"),
            },
        }
    }

    pub fn observe(&mut self, step: &FluxStep) {
        let tol = self.report.tol_rate;
        let len = step.lambda.len();
        let rate: Vec<f64> = (0..len).map(|k| (step.after[k] - step.before[k]) / step.dt).collect();
        self.report.steps += 1;
        // Moving nodes select a flux on the side of the motion.
        for k in 0..len {
            if rate[k] > tol {
                self.report.transversal.record(self.mean - step.lambda[k]);
            } else if rate[k] < -tol {
                self.report.transversal.record(step.lambda[k] - self.mean);
            }
        }
        // Moving facets saturate the pinning range.
        let mut k = 0;
        while k < len {
            if !step.facet[k] {
                k += 1;
                continue;
            }
            let a = k;
            while k < len && step.facet[k] {
                k += 1;
            }
            let b = k - 1;
            if a == 0 || b + 1 == len {
                continue;
            }
            let mean_rate = rate[a..=b].iter().sum::<f64>() / (b - a + 1) as f64;
            let lam = &step.lambda[a..=b];
            if mean_rate > tol {
                let top = lam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                self.report.laminar.record(self.big_m - top);
            } else if mean_rate < -tol {
                let bottom = lam.iter().copied().fold(f64::INFINITY, f64::min);
                self.report.laminar.record(bottom - self.m);
            }
        }
    }

    pub fn finish(self) -> SlopeAuditReport {
        self.report
    }
}

/// Checks the transversal and laminar slope laws on every recorded step.
pub fn dynamic_slope_audit(records: &[FluxStep], problem: &HomProblem, tol_rate: f64) -> SlopeAuditReport {
    let mut auditor = SlopeAuditor::new(problem, tol_rate);
    for r in records {
        auditor.observe(r);
    }
    auditor.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::DirichletData;
    use crate::homogenized_solver::solve_homogenized_parabolic_with;
    use crate::epsilon_solver::TimeStepping;
    use crate::media::PeriodicProfile;

    fn grid(n: usize) -> Arc<HalfGrid> {
        Arc::new(HalfGrid::new(n, n).unwrap())
    }

    fn times(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn convolutions_fix_constants() {
        let u = SpaceTimeField::from_fn(grid(9), times(5, 0.1), |_, _, _| 0.7).unwrap();
        for d in [0.01, 1.0] {
            assert!(tangential_sup_convolution(&u, d).unwrap().sup_distance(&u).unwrap() < 1e-15);
            assert!(tangential_inf_convolution(&u, d).unwrap().sup_distance(&u).unwrap() < 1e-15);
        }
        assert!(tangential_sup_convolution(&u, 0.0).is_err());
    }

    #[test]
    fn large_delta_gives_the_slab_max() {
        let g = grid(9);
        let u = SpaceTimeField::from_fn(g.clone(), times(6, 0.1), |x1, x2, t| (x1 + x2 * t).sin()).unwrap();
        let c = tangential_sup_convolution(&u, 1e3 * u.sup_norm().max(1.0) * 10.0).unwrap();
        for i in 0..g.nx() {
            let mut top = f64::NEG_INFINITY;
            for n in 0..u.len() {
                for j in 0..g.ny() {
                    top = top.max(u.at(n, g.idx(i, j)));
                }
            }
            for n in 0..u.len() {
                for j in 0..g.ny() {
                    assert!((c.at(n, g.idx(i, j)) - top).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn spike_closed_form() {
        let g = grid(17);
        let (delta, height) = (0.05, 1.0);
        let t = times(9, 0.05);
        let (i0, j0, n0) = (3, 8, 4);
        let mut u = SpaceTimeField::from_fn(g.clone(), t.clone(), |_, _, _| 0.0).unwrap();
        u.slices[n0][g.idx(i0, j0)] = height;
        let c = tangential_sup_convolution(&u, delta).unwrap();
        for n in 0..t.len() {
            for j in 0..g.ny() {
                let r2 = ((j as f64 - j0 as f64) * g.hy()).powi(2) + (t[n] - t[n0]).powi(2);
                let expect = (height - r2 / (2.0 * delta)).max(0.0);
                assert!((c.at(n, g.idx(i0, j)) - expect).abs() < 1e-14);
            }
        }
        // other columns never see the spike
        assert!(c.slice(n0).iter().enumerate().all(|(node, &v)| g.ij(node).0 == i0 || v == 0.0));
    }

    #[test]
    fn lift_reproduces_caloric_fields_and_zero() {
        let g = grid(17);
        let dt = g.cfl_limit() * 0.5;
        let t = times(41, 4.0 * dt);
        let exact = SpaceTimeField::from_fn(g.clone(), t.clone(), |x1, x2, t| x1 * x1 + 2.0 * t + 0.3 * x2).unwrap();
        let lift = caloric_lift(&exact, 4).unwrap();
        assert!(lift.sup_distance(&exact).unwrap() < 1e-12);

        let zero = SpaceTimeField::from_fn(g.clone(), t.clone(), |_, _, _| 0.0).unwrap();
        assert_eq!(caloric_lift(&zero, 4).unwrap().sup_norm(), 0.0);
        assert!(matches!(caloric_lift(&exact, 1), Err(AuditError::CflViolation { .. })));
    }

    #[test]
    fn lift_dominates_a_strict_subsolution() {
        // d_t u - Delta u = -1 - 4 < 0
        let g = grid(17);
        let dt = g.cfl_limit() * 0.5;
        let t = times(30, 2.0 * dt);
        let sub = SpaceTimeField::from_fn(g.clone(), t, |x1, x2, t| x1 * x1 + x2 * x2 - t).unwrap();
        let lift = caloric_lift(&sub, 2).unwrap();
        let gap = comparison_gap(&sub, &lift).unwrap();
        assert!(gap <= 1e-12, "{gap}");
        let n = lift.len() - 1;
        let centre = g.idx(g.nx() / 2, g.ny() / 2);
        assert!(lift.at(n, centre) - sub.at(n, centre) > 1e-2);
    }

    #[test]
    fn comparison_gap_basics() {
        let g = grid(9);
        let u = SpaceTimeField::from_fn(g.clone(), times(4, 0.1), |x1, x2, t| x1 * x2 + t).unwrap();
        assert_eq!(comparison_gap(&u, &u).unwrap(), 0.0);
        let lower = SpaceTimeField::from_fn(g.clone(), times(4, 0.1), |x1, x2, t| x1 * x2 + t - 0.1).unwrap();
        assert!((comparison_gap(&lower, &u).unwrap() + 0.1).abs() < 1e-12);
        assert!(matches!(comparison_gap(&u, &lower), Err(AuditError::BoundaryOrderViolation { .. })));
        let other = SpaceTimeField::from_fn(g, times(3, 0.1), |_, _, _| 0.0).unwrap();
        assert!(matches!(comparison_gap(&u, &other), Err(AuditError::ShapeMismatch)));
    }

    fn audited_run(profile: PeriodicProfile, data: DirichletData, u0: impl Fn(f64, f64) -> f64, t_end: f64) -> SlopeAuditReport {
        let g = grid(17);
        let p = HomProblem::new(Arc::new(profile), g.clone(), data);
        let u0 = Field::from_fn(g, u0);
        let mut auditor = SlopeAuditor::new(&p, default_tol_rate(&p));
        solve_homogenized_parabolic_with(&p, &u0, &TimeStepping::new(p.dt, t_end), 0, |s| auditor.observe(s)).unwrap();
        auditor.finish()
    }

    #[test]
    fn slope_audit_examples() {
        let r = audited_run(PeriodicProfile::zero(), DirichletData::steady("x1x2", |x1, x2| x1 * x2), |x1, x2| (4.0 * x1 * x2).cos(), 0.3);
        assert_eq!(r.violations(), 0);

        let slab = DirichletData::steady("slab", |x1, _| 0.2 + 0.5 * x1);
        let r = audited_run(PeriodicProfile::sine(1.0, 0.0, 0.0), slab, |x1, _| 0.2 + 0.5 * x1, 0.3);
        assert_eq!((r.transversal.events, r.laminar.events, r.violations()), (0, 0, 0));

        let up = DirichletData::unsteady("up", |x1, x2, t| 0.3 * x2 * x2 + 0.5 * x1 + 2.0 * t);
        let r = audited_run(PeriodicProfile::sine(1.0, 0.0, 0.0), up, |x1, x2| 0.3 * x2 * x2 + 0.5 * x1, 0.3);
        assert!(r.transversal.events > 0);
        assert_eq!(r.violations(), 0);
        assert!(r.worst() <= 1e-9);
    }

    #[test]
    fn auditor_flags_a_bad_record() {
        let g = grid(9);
        let p = HomProblem::new(Arc::new(PeriodicProfile::sine(1.0, 0.0, 0.0)), g.clone(), DirichletData::constant(0.0));
        let len = g.face_len();
        let step = FluxStep {
            t: 0.01,
            dt: 0.01,
            before: vec![0.0; len],
            after: vec![1.0; len],
            lambda: vec![-0.5; len],
            facet: vec![true; len],
        };
        let r = dynamic_slope_audit(&[step], &p, 1.0);
        assert_eq!(r.transversal.violations, len);
        // the only facet run touches the corner rows
        assert_eq!(r.laminar.events, 0);
        assert!((r.transversal.worst - 0.5).abs() < 1e-15);
    }
}
