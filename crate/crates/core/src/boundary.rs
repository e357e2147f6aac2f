//! Dirichlet data `g(x1, x2, t)` on the outer boundary.

use std::fmt;
use std::sync::Arc;

use crate::grid::{Field, HalfGrid, NodeKind};

type DataFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;

/// Boundary data, evaluated at node coordinates. Also used to build initial
/// fields, so the function is expected to be defined on the whole domain.
#[derive(Clone)]
pub struct DirichletData {
    g: Arc<DataFn>,
    time_independent: bool,
    label: String,
}

impl fmt::Debug for DirichletData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DirichletData")
            .field("label", &self.label)
            .field("time_independent", &self.time_independent)
            .finish()
    }
}

impl DirichletData {
    pub fn steady(label: impl Into<String>, g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            g: Arc::new(move |x1, x2, _| g(x1, x2)),
            time_independent: true,
            label: label.into(),
        }
    }

    pub fn unsteady(
        label: impl Into<String>,
        g: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            g: Arc::new(g),
            time_independent: false,
            label: label.into(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::steady(format!("const {c}"), move |_, _| c)
    }

    /// Linear-in-time blend from `from` to `to` over `[0, t_ramp]`, then `to`.
    pub fn ramp(from: DirichletData, to: DirichletData, t_ramp: f64) -> Self {
        let label = format!("ramp({} -> {}, {t_ramp})", from.label, to.label);
        Self::unsteady(label, move |x1, x2, t| {
            let s = if t_ramp > 0.0 { (t / t_ramp).clamp(0.0, 1.0) } else { 1.0 };
            let a = from.eval(x1, x2, t);
            a + s * (to.eval(x1, x2, t) - a)
        })
    }

    pub fn eval(&self, x1: f64, x2: f64, t: f64) -> f64 {
        (self.g)(x1, x2, t)
    }

    pub fn is_time_independent(&self) -> bool {
        self.time_independent
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// The data evaluated everywhere on the grid at time `t`.
    pub fn field(&self, grid: &Arc<HalfGrid>, t: f64) -> Field {
        Field::from_fn(grid.clone(), |x1, x2| self.eval(x1, x2, t)).with_time(t)
    }

    /// `max |g(., t)|` over the Dirichlet nodes.
    pub fn sup_on_boundary(&self, grid: &HalfGrid, t: f64) -> f64 {
        grid.dirichlet_nodes()
            .map(|n| {
                let (x1, x2) = grid.coords(n);
                self.eval(x1, x2, t).abs()
            })
            .fold(0.0, f64::max)
    }

    pub(crate) fn apply(&self, grid: &HalfGrid, values: &mut [f64], t: f64) {
        for n in 0..grid.len() {
            if grid.kind(n) == NodeKind::Dirichlet {
                let (x1, x2) = grid.coords(n);
                values[n] = self.eval(x1, x2, t);
            }
        }
    }
}
