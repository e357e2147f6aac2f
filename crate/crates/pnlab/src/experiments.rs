use std::fmt::Write as _;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use pnlab_core::corrector::{cell_average_flux, pinning_interval, solve_cell};
use pnlab_core::epsilon_solver::{minimize_energy_eps, solve_parabolic_eps, EpsProblem, Extremal, TimeStepping};
use pnlab_core::homogenized_solver::{
    audit_extremal_conditions, contact_set, extremal_homogenized, solve_homogenized_parabolic,
    solve_homogenized_parabolic_with, HomProblem,
};
use pnlab_core::viscosity_audit::{comparison_gap, default_tol_rate, SlopeAuditReport, SlopeAuditor, SpaceTimeField};
use pnlab_core::{solve_neumann_laplace, DirichletData, Field, HalfGrid, PeriodicProfile};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::render::heatmap_svg;

/// One asserted acceptance quantity.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Check {
    pub criterion: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    /// File name and CSV body.
    pub tables: Vec<(String, String)>,
    pub summary: serde_json::Value,
    /// File name and SVG body.
    pub svgs: Vec<(String, String)>,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            tables: Vec::new(),
            summary: json!({}),
            svgs: Vec::new(),
            checks: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn check(&mut self, criterion: u32, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            criterion,
            name: name.into(),
            passed,
            detail,
        });
    }

    fn table(&mut self, name: impl Into<String>, header: &str, rows: impl IntoIterator<Item = String>) {
        let mut csv = String::from(header);
        csv.push('\n');
        for r in rows {
            csv.push_str(&r);
            csv.push('\n');
        }
        self.tables.push((name.into(), csv));
    }

    fn summary_json(&self, cfg: &ExperimentConfig, extra: serde_json::Value) -> serde_json::Value {
        json!({
            "experiment": self.experiment.name(),
            "seed": cfg.seed,
            "passed": self.passed(),
            "checks": self.checks,
            "results": extra,
        })
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let run = || match cfg.experiment {
        ExperimentKind::EpsSweep => eps_sweep(cfg),
        ExperimentKind::PinningTable => pinning_table(cfg),
        ExperimentKind::CellIdentity => cell_identity(cfg),
        ExperimentKind::GammaDemo => gamma_demo(cfg),
        ExperimentKind::FacetDemo => facet_demo(cfg),
        ExperimentKind::MonotoneShift => monotone_shift(cfg),
        ExperimentKind::ComparisonBatch => comparison_batch(cfg),
    };
    let out = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(run),
        None => run(),
    };
    out.with_context(|| format!("experiment {}", cfg.experiment.name()))
}

fn square(n: usize) -> Result<Arc<HalfGrid>> {
    Ok(Arc::new(HalfGrid::new(n, n)?))
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn first_grid(cfg: &ExperimentConfig) -> Result<Arc<HalfGrid>> {
    square(*cfg.grid_sizes.first().ok_or_else(|| anyhow!("grid_sizes is empty"))?)
}

fn eps_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(cfg.experiment);
    let f = Arc::new(cfg.profile.build(&cfg.base_dir)?);
    let g = first_grid(cfg)?;
    // Slab rising at speed 2 whose face slope is max f: it slips at the top
    // of the pinning interval in the limit, and is plain heat flow when f = 0.
    let top = f.max_f();
    let data = DirichletData::unsteady("rising slab", move |x1, _, t| 2.0 * t + top * x1 + x1 * x1);
    let hom = HomProblem::new(f.clone(), g.clone(), data.clone()).with_tol_facet(cfg.tolerances.facet_hy * g.hy());
    let t_end = cfg.t_end.unwrap_or(0.5);
    let u0 = data.field(&g, 0.0);
    let limit = solve_homogenized_parabolic(&hom, &u0, t_end)?.trajectory;
    let dists: Vec<f64> = cfg
        .eps
        .par_iter()
        .map(|&eps| -> Result<f64> {
            let e = EpsProblem::new(f.clone(), eps, data.clone(), g.clone())?;
            Ok(solve_parabolic_eps(&e, &u0, hom.dt, t_end)
                .with_context(|| format!("eps = {eps}"))?
                .sup_distance(&limit))
        })
        .collect::<Result<_>>()?;
    rep.table("eps_sweep.csv", "eps,sup_distance", cfg.eps.iter().zip(&dists).map(|(e, d)| format!("{e},{d}")));
    if f.sup_norm() == 0.0 {
        let worst = dists.iter().copied().fold(0.0, f64::max);
        rep.check(10, "zero profile reduces to heat flow", worst <= 1e-8, format!("worst distance {worst:.3e}"));
    } else {
        rep.check(5, "distance decreases along the eps ladder", strictly_decreasing(&dists), format!("{dists:?}"));
    }
    rep.summary = rep.summary_json(cfg, json!({ "eps": cfg.eps, "sup_distance": dists, "t_end": t_end }));
    Ok(rep)
}

fn pinning_table(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(cfg.experiment);
    let mut rows = Vec::new();
    let (mut sandwich_bad, mut endpoint_bad, mut count) = (Vec::new(), Vec::new(), 0);
    for (pi, spec) in cfg.profile_list().iter().enumerate() {
        let f = spec.build(&cfg.base_dir)?;
        for &p in &cfg.p {
            for &t in &cfg.t {
                let iv = pinning_interval(&f, p, t).with_context(|| format!("profile {pi}, p = {p}, T = {t}"))?;
                let sandwich = f.min_f() - 1e-6 <= iv.q_lower
                    && iv.q_lower <= f.mean_f() + 1e-6
                    && f.mean_f() <= iv.q_upper + 2e-6
                    && iv.q_upper <= f.max_f() + 1e-6;
                let endpoint = p != 0.0
                    || ((iv.q_lower - f.min_f()).abs() <= 3.0 / t + 1e-6
                        && (iv.q_upper - f.max_f()).abs() <= 3.0 / t + 1e-6);
                count += 1;
                if !sandwich {
                    sandwich_bad.push((pi, p, t));
                }
                if !endpoint {
                    endpoint_bad.push((pi, p, t));
                }
                rows.push(format!(
                    "{pi},{},{p},{t},{},{},{},{sandwich},{endpoint}",
                    spec.kind, iv.q_lower, iv.q_upper, iv.error_bar
                ));
            }
        }
    }
    rep.table("pinning_table.csv", "profile,kind,p,T,q_lower,q_upper,error_bar,sandwich,endpoint", rows);
    rep.check(
        1,
        "endpoints within 3/T at p = 0",
        endpoint_bad.is_empty(),
        format!("{} failures (profile, p, T): {endpoint_bad:?}", endpoint_bad.len()),
    );
    rep.check(
        2,
        "min f <= q_lower <= <f> <= q_upper <= max f",
        sandwich_bad.is_empty(),
        format!("{count} rows, failures {sandwich_bad:?}"),
    );
    rep.summary = rep.summary_json(cfg, json!({ "rows": count }));
    Ok(rep)
}

fn cell_identity(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(cfg.experiment);
    let mut cases = Vec::new();
    for spec in cfg.profile_list() {
        let f = spec.build(&cfg.base_dir)?;
        for &p in cfg.p.iter().filter(|&&p| p != 0.0) {
            for &t in &cfg.t {
                cases.push((spec.kind.clone(), f.clone(), p.abs(), t));
            }
        }
    }
    let sizes = &cfg.grid_sizes;
    let results: Vec<Vec<f64>> = cases
        .par_iter()
        .map(|(_, f, p, t)| {
            sizes
                .iter()
                .map(|&n| -> Result<f64> {
                    let cell = solve_cell(f, *p, *t, 2 * n - 1, n, None)
                        .with_context(|| format!("cell |p| = {p}, T = {t}, {}x{n}", 2 * n - 1))?;
                    Ok((cell_average_flux(&cell, f) - f.mean_f()).abs())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for ((kind, _, p, t), res) in cases.iter().zip(&results) {
        for (k, (&n, &r)) in sizes.iter().zip(res).enumerate() {
            let ratio = if k == 0 { f64::NAN } else { res[k - 1] / r };
            if r > 5e-3 || (k > 0 && !(1.4..=2.6).contains(&ratio)) {
                bad.push(format!("{kind} |p|={p} T={t} {}x{n}", 2 * n - 1));
            }
            rows.push(format!("{kind},{p},{t},{},{n},{r},{ratio}", 2 * n - 1));
        }
    }
    rep.table("cell_identity.csv", "kind,p,T,nx1,nx2,residual,ratio", rows);
    rep.check(
        3,
        "residual <= 5e-3 and shrinks by 1.4-2.6 per doubling",
        bad.is_empty(),
        format!("{} cases, failures {bad:?}", cases.len()),
    );
    rep.summary = rep.summary_json(cfg, json!({ "residuals": results }));
    Ok(rep)
}

fn gamma_demo(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(cfg.experiment);
    let f = Arc::new(cfg.profile.build(&cfg.base_dir)?);
    let g = first_grid(cfg)?;
    let slope = cfg.p.first().copied().unwrap_or(0.4);
    let data = DirichletData::steady("tilt", move |_, x2| slope * x2);
    let target = Field::from_fn(g.clone(), |_, x2| slope * x2);
    let base = EpsProblem::new(f, cfg.eps[0], data, g)?;
    let mins: Vec<_> = cfg
        .eps
        .par_iter()
        .map(|&eps| minimize_energy_eps(&base.with_epsilon(eps)?, 1e-9).with_context(|| format!("eps = {eps}")))
        .collect::<Result<_>>()?;
    let dists: Vec<f64> = mins.iter().map(|m| m.field.sup_distance(&target)).collect();
    rep.table(
        "gamma_demo.csv",
        "eps,sup_distance,energy,sweeps",
        cfg.eps.iter().zip(&mins).zip(&dists).map(|((e, m), d)| {
            format!("{e},{d},{},{}", m.energy_history.last().copied().unwrap_or(f64::NAN), m.sweeps)
        }),
    );
    let last = mins.last().expect("eps list is non-empty");
    rep.tables.push(("minimizer.csv".into(), last.field.to_csv_string()));
    rep.svgs.push(("minimizer.svg".into(), heatmap_svg(&last.field, &[])));
    let end = *dists.last().unwrap();
    rep.check(
        4,
        "minimizers approach the affine limit",
        strictly_decreasing(&dists) && end <= 0.05,
        format!("{dists:?}"),
    );
    rep.summary = rep.summary_json(cfg, json!({ "eps": cfg.eps, "sup_distance": dists, "slope": slope }));
    Ok(rep)
}

/// Facet data: `g = x1`, oscillation 1, amplitude `a` applied to the profile.
fn facet_problem(cfg: &ExperimentConfig, g: &Arc<HalfGrid>, a: f64) -> Result<HomProblem> {
    let f = cfg.profile.build_with_amplitude(a, &cfg.base_dir)?;
    Ok(HomProblem::new(Arc::new(f), g.clone(), DirichletData::steady("x1", |x1, _| x1))
        .with_tol_facet(cfg.tolerances.facet_hy * g.hy()))
}

struct FacetRow {
    amplitude: f64,
    interior: f64,
    measure: f64,
    intervals: Vec<(f64, f64)>,
    components: Vec<(usize, usize)>,
    d: [f64; 3],
    min_audit: bool,
    glb_condition3: bool,
    min_super: Field,
}

fn facet_demo(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(cfg.experiment);
    let g = first_grid(cfg)?;
    let tol = cfg.tolerances.steady;
    let rows: Vec<FacetRow> = cfg
        .amplitudes
        .par_iter()
        .map(|&a| -> Result<FacetRow> {
            let p = facet_problem(cfg, &g, a)?;
            let ctx = || format!("amplitude {a}");
            let lo = extremal_homogenized(&p, Extremal::MinSuper, tol).with_context(ctx)?;
            let hi = extremal_homogenized(&p, Extremal::MaxSub, tol).with_context(ctx)?;
            let glb = solve_neumann_laplace(&g, &p.dirichlet, p.profile.mean_f(), 1e-12, 1_000_000)
                .ok_or_else(|| anyhow!("mean-flux Neumann solve did not converge"))?;
            let contact = contact_set(&lo.field, &lo.state, &p).with_context(ctx)?;
            Ok(FacetRow {
                amplitude: a,
                interior: contact.largest_interior_measure(g.hy()),
                measure: contact.measure,
                intervals: contact.intervals.clone(),
                components: contact.components.clone(),
                d: [lo.field.sup_distance(&glb), lo.field.sup_distance(&hi.field), hi.field.sup_distance(&glb)],
                min_audit: audit_extremal_conditions(&lo.field, &p, cfg.tolerances.audit).passed(),
                glb_condition3: audit_extremal_conditions(&glb, &p, cfg.tolerances.audit).condition3.passed,
                min_super: lo.field,
            })
        })
        .collect::<Result<_>>()?;
    rep.table(
        "facet_demo.csv",
        "amplitude,contact_measure,interior_measure,d_min_glb,d_min_max,d_max_glb,min_super_audit,glb_condition3",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.amplitude, r.measure, r.interior, r.d[0], r.d[1], r.d[2], r.min_audit, r.glb_condition3
            )
        }),
    );
    let mut contact_csv = Vec::new();
    for r in &rows {
        for (&(a, b), &(x0, x1)) in r.components.iter().zip(&r.intervals) {
            contact_csv.push(format!("{},{a},{b},{x0},{x1}", r.amplitude));
        }
        rep.tables.push((format!("min_super_A{}.csv", r.amplitude), r.min_super.to_csv_string()));
        rep.svgs.push((format!("min_super_A{}.svg", r.amplitude), heatmap_svg(&r.min_super, &r.intervals)));
    }
    rep.table("contact_sets.csv", "amplitude,first_row,last_row,x2_start,x2_end", contact_csv);
    let top = rows
        .iter()
        .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))
        .ok_or_else(|| anyhow!("amplitudes is empty"))?;
    let hy = g.hy();
    rep.check(
        8,
        "interior contact set and distinct extremals at the largest amplitude",
        top.interior >= 3.0 * hy - 1e-12 && top.d.iter().all(|&d| d > 1e-3),
        format!(
            "A = {}: interior contact {:.4} (3hy = {:.4}), distances {:?}",
            top.amplitude,
            top.interior,
            3.0 * hy,
            top.d
        ),
    );
    rep.summary = rep.summary_json(
        cfg,
        json!({
            "amplitudes": cfg.amplitudes,
            "interior_measure": rows.iter().map(|r| r.interior).collect::<Vec<_>>(),
            "tol_facet": cfg.tolerances.facet_hy * hy,
        }),
    );
    Ok(rep)
}

fn audited_run(p: &HomProblem, u0: &Field, t_end: f64, tol_rate: f64) -> Result<(SlopeAuditReport, pnlab_core::homogenized_solver::HomRun)> {
    let mut auditor = SlopeAuditor::new(p, tol_rate);
    let stepping = TimeStepping::new(p.dt, t_end);
    let steps = (t_end / p.dt).ceil() as usize;
    let run = solve_homogenized_parabolic_with(p, u0, &stepping, (steps / 512).max(1), |s| auditor.observe(s))?;
    Ok((auditor.finish(), run))
}

fn monotone_shift(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(cfg.experiment);
    let g = first_grid(cfg)?;
    let a = cfg.amplitudes[0];
    let p = facet_problem(cfg, &g, a)?;
    let lo = extremal_homogenized(&p, Extremal::MinSuper, cfg.tolerances.steady)?;
    let shift = p
        .clone()
        .with_dirichlet(DirichletData::unsteady("shift to x1", |x1, _, t| -1.0 + (x1 + 1.0) * t.min(1.0)));
    let tol_rate = cfg.tolerances.rate.unwrap_or_else(|| default_tol_rate(&p));
    let u0 = Field::constant(g.clone(), -1.0);
    let relax0 = Field::from_fn(g.clone(), |x1, x2| x1 - 1.0 + x2 * x2);

    let t_start = cfg.t_end.unwrap_or(8.0);
    let (shift_out, relax_out) = rayon::join(
        || -> Result<_> {
            let mut t_end = t_start;
            loop {
                let (audit, run) = audited_run(&shift, &u0, t_end, tol_rate)?;
                let traj = &run.trajectory;
                let k = traj.times.iter().position(|&t| t >= 0.9 * t_end).unwrap_or(0);
                let update = traj.last().sup_distance(&traj.fields[k]);
                if update <= 1e-5 || t_end >= 8.0 * t_start {
                    return Ok((audit, run, t_end, update));
                }
                t_end *= 2.0;
            }
        },
        || audited_run(&p, &relax0, t_start.min(4.0), tol_rate),
    );
    let (shift_audit, run, t_end, update) = shift_out?;
    let (relax_audit, _) = relax_out?;
    let last = run.trajectory.last();
    let dist = last.sup_distance(&lo.field);

    rep.table(
        "monotone_shift.csv",
        "amplitude,t_end,last_decade_update,distance_to_min_super",
        [format!("{a},{t_end},{update},{dist}")],
    );
    let mut audit_rows = Vec::new();
    for (name, r) in [("monotone-shift", &shift_audit), ("facet-demo", &relax_audit)] {
        for c in [&r.transversal, &r.laminar] {
            audit_rows.push(format!("{name},{},{},{},{}", c.condition, c.events, c.violations, c.worst));
        }
    }
    rep.table("slope_audit.csv", "run,condition,events,violations,worst", audit_rows);
    let mut trace = String::from("t,x2,lambda,facet\n");
    for r in &run.flux_trace {
        for k in 0..r.lambda.len() {
            let _ = writeln!(trace, "{},{},{},{}", r.t, g.face_x2(k), r.lambda[k], r.facet[k] as u8);
        }
    }
    rep.tables.push(("flux_trace.csv".into(), trace));
    rep.tables.push(("final_state.csv".into(), last.to_csv_string()));
    rep.svgs.push(("final_state.svg".into(), heatmap_svg(last, &[])));

    let violations = shift_audit.violations() + relax_audit.violations();
    rep.check(
        7,
        "dynamic slope laws hold on the shift and facet runs",
        violations == 0,
        format!("{violations} violations, worst {:.3e}", shift_audit.worst().max(relax_audit.worst())),
    );
    rep.check(
        9,
        "long-time limit equals the minimal supersolution",
        dist <= 1e-3 && update <= 1e-5,
        format!("t_end {t_end}, last-decade update {update:.3e}, distance {dist:.3e}"),
    );
    rep.summary = rep.summary_json(
        cfg,
        json!({
            "shift_audit": shift_audit,
            "facet_audit": relax_audit,
            "distance_to_min_super": dist,
        }),
    );
    Ok(rep)
}

/// Pair `i` of the batch: both runs are shifted affine data with the upper
/// one raised by a gap and a growing bump; the upper initial state adds a
/// nonnegative interior bump.
fn comparison_pair(g: &Arc<HalfGrid>, seed: u64, t_end: f64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp: f64 = rng.gen_range(0.2..3.0);
    let (a, b, c): (f64, f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0));
    let (gap, bump, speed): (f64, f64, f64) = (rng.gen_range(0.0..0.3), rng.gen_range(0.0..1.0), rng.gen_range(0.0..2.0));
    let lo_data = DirichletData::unsteady("lo", move |x1, x2, t| a * x1 + b * x2 + c * t);
    let hi_data = DirichletData::unsteady("hi", move |x1, x2, t| a * x1 + b * x2 + c * t + gap + bump * t * (1.0 + x2));
    let f = Arc::new(PeriodicProfile::sine(amp, 0.0, 0.0));
    let lo = HomProblem::new(f.clone(), g.clone(), lo_data.clone());
    let hi = HomProblem::new(f, g.clone(), hi_data);
    let u_lo = lo_data.field(g, 0.0);
    let u_hi = Field::from_fn(g.clone(), |x1, x2| a * x1 + b * x2 + gap + speed * x1 * (1.0 - x1) * (1.0 - x2 * x2));
    let sub = solve_homogenized_parabolic(&lo, &u_lo, t_end)?.trajectory;
    let sup = solve_homogenized_parabolic(&hi, &u_hi, t_end)?.trajectory;
    let d = comparison_gap(&SpaceTimeField::from_trajectory(&sub)?, &SpaceTimeField::from_trajectory(&sup)?)?;
    Ok((amp, d))
}

fn comparison_batch(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(cfg.experiment);
    let g = first_grid(cfg)?;
    let pairs = cfg.pairs.unwrap_or(20);
    let t_end = cfg.t_end.unwrap_or(0.1);
    let out: Vec<(f64, f64)> = (0..pairs as u64)
        .into_par_iter()
        .map(|i| comparison_pair(&g, cfg.seed.wrapping_add(i), t_end).with_context(|| format!("pair {i}")))
        .collect::<Result<_>>()?;
    rep.table(
        "comparison_batch.csv",
        "pair,seed,amplitude,gap",
        out.iter()
            .enumerate()
            .map(|(i, (amp, d))| format!("{i},{},{amp},{d}", cfg.seed.wrapping_add(i as u64))),
    );
    let worst = out.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
    let failing = out.iter().filter(|o| o.1 > 1e-6).count();
    rep.check(
        6,
        "ordered data give ordered trajectories",
        worst <= 1e-6,
        format!("{pairs} pairs, {failing} above 1e-6, worst gap {worst:.3e}"),
    );
    rep.summary = rep.summary_json(cfg, json!({ "pairs": pairs, "worst_gap": worst }));
    Ok(rep)
}
