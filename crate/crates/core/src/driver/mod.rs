//! Batch runs: analysis, optimization, gradient checks and parameter sweeps.

pub mod config;
pub mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::criteria::{Composer, Composition, Criterion, CriterionSpec, Measure, Snapshot, INTERFACE};
use crate::design_field::LevelSetMap;
use crate::error::{Error, Result};
use crate::flow::FIELDS;
use crate::gcmma::{Derivatives, Gcmma, Problem, Values};
use crate::model::{ForwardState, Physics, WarmStart};
use crate::sensitivities::{design_gradients, evaluate_criteria, total_derivative, write_gradient_check_csv, GradientCheck};

pub use config::{RunConfig, SweepParameter};
use output::{ensure_dir, vtk_fields, write_text, Checkpoint, History, Summary};

/// Settings that come from the command line rather than the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub output: Option<PathBuf>,
    pub restart: Option<PathBuf>,
}

impl RunOptions {
    fn directory(&self, config: &RunConfig) -> PathBuf {
        self.output.clone().unwrap_or_else(|| config.output.directory.clone())
    }
}

/// Solved fields and criteria of a fixed geometry.
pub struct Analysis {
    pub physics: Physics,
    pub criteria: Vec<Criterion>,
    pub fwd: ForwardState,
    pub values: Vec<f64>,
    pub interface_mass_flow: f64,
}

impl Analysis {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.criteria.iter().position(|c| c.spec.name == name).map(|k| self.values[k])
    }
}

/// Net mass flux through the immersed interface (zero without interface).
pub fn interface_mass_flow(physics: &Physics, fwd: &ForwardState) -> Result<f64> {
    if fwd.disc.interface_length() == 0.0 {
        return Ok(0.0);
    }
    let c = Criterion::new(CriterionSpec::new("interface_mass_flow", Measure::MassFlow { surface: INTERFACE.into() }), physics)?;
    let snap = Snapshot { physics, cut: Some(&fwd.cut), disc: &fwd.disc, u: fwd.final_flow(), c: fwd.species.as_deref() };
    Ok(c.evaluate(&snap)?.value)
}

pub fn analyze(config: &RunConfig) -> Result<Analysis> {
    let physics = config.physics()?;
    let criteria = config.criteria(&physics)?;
    let shift = crate::design_field::PERTURBATION * physics.mesh.element_size();
    let phi = config.geometry_level_set(&physics).into_iter().map(|v| crate::design_field::perturb(v, shift)).collect();
    let fwd = physics.forward(phi, None)?;
    let values = evaluate_criteria(&physics, &criteria, &fwd)?;
    let interface_mass_flow = interface_mass_flow(&physics, &fwd)?;
    Ok(Analysis { physics, criteria, fwd, values, interface_mass_flow })
}

fn summary_of(mode: &str, physics: &Physics, criteria: &[Criterion], values: &[f64], fwd: &ForwardState) -> Result<Summary> {
    let mut linear = fwd.flow.reports.iter().map(|r| r.linear_solves).sum::<usize>();
    linear += fwd.species_report.as_ref().map_or(0, |r| r.linear_solves);
    let mut residuals: Vec<Vec<f64>> = fwd.flow.reports.iter().map(|r| r.residuals.clone()).collect();
    residuals.extend(fwd.species_report.iter().map(|r| r.residuals.clone()));
    Ok(Summary {
        mode: mode.into(),
        criteria: criteria.iter().map(|c| c.spec.name.clone()).zip(values.iter().copied()).collect(),
        interface_mass_flow: interface_mass_flow(physics, fwd)?,
        fluid_volume: fwd.disc.fluid_volume(),
        num_dofs: FIELDS * fwd.disc.num_blocks,
        newton_iterations: fwd.newton_iterations(),
        newton_residuals: residuals,
        linear_solves: linear,
        ..Default::default()
    })
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    exit_code: i32,
    residual_history: &'a [f64],
}

/// Writes `diagnostic.json` for solver failures and passes the error on.
fn diagnose<T>(dir: &Path, r: Result<T>) -> Result<T> {
    if let Err(e) = &r {
        let trace = match e {
            Error::Nonconvergence { trace, .. } => trace.as_slice(),
            Error::TimeStep { source, .. } => match source.as_ref() {
                Error::Nonconvergence { trace, .. } => trace.as_slice(),
                _ => &[],
            },
            _ => &[],
        };
        if e.exit_code() == 3 && ensure_dir(dir).is_ok() {
            let d = Diagnostic { error: e.to_string(), exit_code: 3, residual_history: trace };
            if let Ok(text) = serde_json::to_string_pretty(&d) {
                let _ = write_text(&dir.join("diagnostic.json"), &text);
            }
        }
    }
    r
}

/// Single analysis: one field file, `summary.json` and a one-row `summary.csv`.
pub fn run_analysis(config: &RunConfig, opts: &RunOptions) -> Result<Summary> {
    let dir = opts.directory(config);
    let a = diagnose(&dir, analyze(config))?;
    ensure_dir(&dir)?;
    let summary = summary_of("analyze", &a.physics, &a.criteria, &a.values, &a.fwd)?;
    write_text(&dir.join("fields.vtk"), &vtk_fields(&a.physics, &a.fwd))?;
    summary.write(&dir.join("summary.json"))?;
    let mut csv: String = a.criteria.iter().map(|c| c.spec.name.clone() + ",").collect();
    csv.push_str("interface_mass_flow,newton_iterations\n");
    for v in a.values.iter().chain([&a.interface_mass_flow]) {
        let _ = write!(csv, "{v:.17e},");
    }
    let _ = writeln!(csv, "{}", summary.newton_iterations);
    write_text(&dir.join("summary.csv"), &csv)?;
    Ok(summary)
}

/// One evaluated design.
pub struct Evaluation {
    pub x: Vec<f64>,
    /// Initial guess the fields were solved from.
    pub warm: Option<WarmStart>,
    pub fwd: ForwardState,
    pub criteria: Vec<f64>,
    pub composition: Composition,
}

/// Design optimization problem with the last forward solution cached.
pub struct DesignProblem<'a> {
    pub physics: &'a Physics,
    pub map: &'a LevelSetMap,
    pub criteria: &'a [Criterion],
    pub composer: &'a Composer,
    pub norms: Vec<f64>,
    pub iteration: usize,
    pub last: Option<Evaluation>,
    pub evaluations: usize,
}

impl<'a> DesignProblem<'a> {
    pub fn new(physics: &'a Physics, map: &'a LevelSetMap, criteria: &'a [Criterion], composer: &'a Composer) -> Self {
        Self { physics, map, criteria, composer, norms: Vec::new(), iteration: 0, last: None, evaluations: 0 }
    }

    pub fn evaluate_from(&mut self, x: &[f64], warm: Option<WarmStart>) -> Result<&Evaluation> {
        let phi = self.map.assemble_level_set(x)?.phi;
        let fwd = self.physics.forward(phi, warm.as_ref())?;
        let criteria = evaluate_criteria(self.physics, self.criteria, &fwd)?;
        if self.norms.is_empty() {
            self.norms = self.composer.normalization(&criteria)?;
        }
        let composition = self.composer.compose(&criteria, &self.norms, self.iteration);
        self.evaluations += 1;
        Ok(self.last.insert(Evaluation { x: x.to_vec(), warm, fwd, criteria, composition }))
    }

    /// Recomputes objective and constraints for the current iteration index
    /// (constraint windows may contract between iterations).
    pub fn recompose(&mut self) {
        if let Some(e) = &mut self.last {
            e.composition = self.composer.compose(&e.criteria, &self.norms, self.iteration);
        }
    }

    pub fn current(&self) -> Result<&Evaluation> {
        self.last.as_ref().ok_or_else(|| Error::Internal("no design has been evaluated".into()))
    }

    pub fn current_values(&self) -> Result<Values> {
        let c = &self.current()?.composition;
        Ok(Values { objective: c.objective, constraints: c.constraints.clone() })
    }

    /// Level-set gradients of arbitrary criterion combinations at the current design.
    pub fn design_derivatives(&self, weights: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let e = self.current()?;
        let g = design_gradients(self.physics, self.criteria, &e.fwd, weights)?;
        if !g.flagged.is_empty() {
            log::warn!("{} geometric partials fell back to one-sided differences", g.flagged.len());
        }
        let jac = self.map.level_set_jacobian(&e.x)?;
        Ok(g.phi.iter().map(|d| total_derivative(&jac, d)).collect())
    }
}

impl Problem for DesignProblem<'_> {
    fn values(&mut self, x: &[f64]) -> Result<Values> {
        let warm = self.last.as_ref().map(|e| e.fwd.warm_start());
        self.evaluate_from(x, warm)?;
        self.current_values()
    }

    fn gradients(&mut self) -> Result<Derivatives> {
        let c = &self.current()?.composition;
        let mut weights = vec![c.d_objective.clone()];
        weights.extend(c.d_constraints.iter().cloned());
        let mut rows = self.design_derivatives(&weights)?.into_iter();
        let objective = rows.next().unwrap();
        Ok(Derivatives { objective, constraints: rows.collect() })
    }
}

/// Result of an optimization run.
#[derive(Clone, Debug)]
pub struct OptimizationReport {
    pub summary: Summary,
    pub design: Vec<f64>,
    pub values: Values,
    pub iterations: usize,
    pub converged: bool,
    pub feasible: bool,
    /// Objective of the first feasible iterate.
    pub first_feasible: Option<f64>,
}

/// GCMMA loop writing `history.csv`, `checkpoint.json`, field files and
/// `summary.json` to the output directory.
pub fn run_optimization(config: &RunConfig, opts: &RunOptions) -> Result<OptimizationReport> {
    let dir = opts.directory(config);
    ensure_dir(&dir)?;
    let r = optimize(config, opts, &dir);
    diagnose(&dir, r)
}

fn optimize(config: &RunConfig, opts: &RunOptions, dir: &Path) -> Result<OptimizationReport> {
    let physics = config.physics()?;
    let criteria = config.criteria(&physics)?;
    let composer = config.composer()?;
    let gc = config.optimization.as_ref().unwrap().gcmma.clone();
    let (map, s0, lower, upper) = config.design(&physics)?;
    let names: Vec<String> = criteria.iter().map(|c| c.spec.name.clone()).collect();
    let history_path = dir.join("history.csv");
    let checkpoint_path = dir.join("checkpoint.json");
    let m = composer.num_constraints();
    let mut problem = DesignProblem::new(&physics, &map, &criteria, &composer);

    let (mut opt, history, mut first_feasible) = match &opts.restart {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.design.len() != map.layout.len || ck.normalization.len() != composer.spec.terms.len() {
                return Err(Error::Config("checkpoint does not match the configured design".into()));
            }
            problem.norms = ck.normalization;
            problem.iteration = ck.optimizer.iteration;
            problem.evaluate_from(&ck.design, ck.warm)?;
            let opt = Gcmma::resume(gc, lower, upper, ck.optimizer)?;
            let history = History::open(history_path, m, &names, true)?;
            history.truncate_after(opt.state.iteration)?;
            (opt, history, ck.first_feasible)
        }
        None => {
            let opt = Gcmma::new(gc, lower, upper, s0)?;
            problem.evaluate_from(&opt.state.x.clone(), None)?;
            let history = History::open(history_path, m, &names, false)?;
            let e = problem.current()?;
            let v = problem.current_values()?;
            history.append(&History::format_row(0, v.objective, &v.constraints, &e.criteria, e.fwd.newton_iterations()))?;
            (opt, history, None)
        }
    };
    let checkpoint = |opt: &Gcmma, problem: &DesignProblem, first: Option<f64>| -> Result<()> {
        let e = problem.current()?;
        Checkpoint {
            design: opt.state.x.clone(),
            normalization: problem.norms.clone(),
            optimizer: opt.state.clone(),
            first_feasible: first,
            warm: e.warm.clone(),
        }
        .write(&checkpoint_path)
    };
    let mut values = problem.current_values()?;
    if first_feasible.is_none() && opt.is_feasible(&values) {
        first_feasible = Some(values.objective);
    }
    if opts.restart.is_none() {
        checkpoint(&opt, &problem, first_feasible)?;
    }
    let mut converged = false;
    while opt.state.iteration < opt.config.max_outer {
        problem.iteration = opt.state.iteration;
        problem.recompose();
        values = problem.current_values()?;
        let grads = problem.gradients()?;
        let report = opt.step(&mut problem, &values, &grads)?;
        if report.inner_capped {
            log::warn!("iteration {}: inner loop cap reached, best trial accepted", opt.state.iteration);
        }
        if problem.current()?.x != opt.state.x {
            return Err(Error::Internal("optimizer state and cached fields disagree".into()));
        }
        let previous = std::mem::replace(&mut values, report.values);
        let k = opt.state.iteration;
        let e = problem.current()?;
        history.append(&History::format_row(k, values.objective, &values.constraints, &e.criteria, e.fwd.newton_iterations()))?;
        log::info!("iteration {k}: Z = {:.6e}, max g = {:.3e}", values.objective, values.constraints.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        if first_feasible.is_none() && opt.is_feasible(&values) {
            first_feasible = Some(values.objective);
        }
        if config.output.checkpoint_every > 0 && k % config.output.checkpoint_every == 0 {
            checkpoint(&opt, &problem, first_feasible)?;
        }
        if config.output.field_every > 0 && k % config.output.field_every == 0 {
            write_text(&dir.join(format!("fields_{k:04}.vtk")), &vtk_fields(&physics, &e.fwd))?;
        }
        if opt.converged(&previous, &values) {
            converged = true;
            break;
        }
    }
    checkpoint(&opt, &problem, first_feasible)?;
    let e = problem.current()?;
    write_text(&dir.join("fields_final.vtk"), &vtk_fields(&physics, &e.fwd))?;
    let feasible = opt.is_feasible(&values);
    let mut summary = summary_of("optimize", &physics, &criteria, &e.criteria, &e.fwd)?;
    summary.objective = Some(values.objective);
    summary.constraints = values.constraints.clone();
    summary.iterations = Some(opt.state.iteration);
    summary.converged = Some(converged);
    summary.feasible = Some(feasible);
    summary.write(&dir.join("summary.json"))?;
    Ok(OptimizationReport {
        summary,
        design: opt.state.x.clone(),
        values,
        iterations: opt.state.iteration,
        converged,
        feasible,
        first_feasible,
    })
}

/// Adjoint design gradients against central differences of randomly drawn
/// design variables; writes `gradcheck.csv`.
pub fn run_gradcheck(config: &RunConfig, opts: &RunOptions) -> Result<Vec<GradientCheck>> {
    let dir = opts.directory(config);
    let rows = diagnose(&dir, gradcheck(config))?;
    ensure_dir(&dir)?;
    let path = dir.join("gradcheck.csv");
    let mut buf = Vec::new();
    write_gradient_check_csv(&rows, &mut buf).map_err(|e| Error::io(&path, e))?;
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn gradcheck(config: &RunConfig) -> Result<Vec<GradientCheck>> {
    let mut cfg = config.clone();
    // finite differences need fields far below the optimization tolerance
    cfg.solve.newton_rel_tol = cfg.solve.newton_rel_tol.min(1e-13);
    cfg.solve.newton_abs_tol = cfg.solve.newton_abs_tol.min(1e-14);
    cfg.solve.max_newton = cfg.solve.max_newton.max(40);
    let physics = cfg.physics()?;
    let criteria = cfg.criteria(&physics)?;
    let composer = match &cfg.optimization {
        Some(_) => Some(cfg.composer()?),
        None => None,
    };
    let (map, s0, lower, upper) = cfg.design(&physics)?;
    let fallback;
    let comp_ref = match &composer {
        Some(c) => c,
        None => {
            fallback = Composer::new(
                crate::criteria::ObjectiveSpec {
                    terms: vec![crate::criteria::ObjectiveTerm {
                        weight: 1.0,
                        combination: [(criteria[0].spec.name.clone(), 1.0)].into_iter().collect(),
                        normalize: false,
                    }],
                    constraints: Vec::new(),
                },
                &cfg.criteria,
            )?;
            &fallback
        }
    };
    if criteria.is_empty() {
        return Err(Error::Config("gradient checks need at least one criterion".into()));
    }
    let mut problem = DesignProblem::new(&physics, &map, &criteria, comp_ref);
    problem.evaluate_from(&s0, None)?;
    let nc = criteria.len();
    let mut names: Vec<String> = criteria.iter().map(|c| c.spec.name.clone()).collect();
    let mut weights: Vec<Vec<f64>> = (0..nc).map(|k| (0..nc).map(|j| (j == k) as u8 as f64).collect()).collect();
    if composer.is_some() {
        let c = &problem.current()?.composition;
        names.push("Z".into());
        weights.push(c.d_objective.clone());
        for (i, d) in c.d_constraints.iter().enumerate() {
            names.push(format!("g{}", i + 1));
            weights.push(d.clone());
        }
    }
    let analytic = problem.design_derivatives(&weights)?;
    let functions = |e: &Evaluation| -> Vec<f64> {
        let mut f = e.criteria.clone();
        if composer.is_some() {
            f.push(e.composition.objective);
            f.extend(e.composition.constraints.iter().copied());
        }
        f
    };
    // variables that move the interface
    let scale = analytic.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let candidates: Vec<usize> =
        (0..map.layout.len).filter(|&j| analytic.iter().any(|row| row[j].abs() > 1e-6 * scale)).collect();
    if candidates.is_empty() {
        return Err(Error::Config("no design variable influences the criteria".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.gradcheck.seed);
    let count = cfg.gradcheck.variables.min(candidates.len());
    let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), count).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();
    let base_warm = problem.current()?.fwd.warm_start();
    let mut rows = Vec::new();
    for j in picked {
        let delta = cfg.gradcheck.step * (upper[j] - lower[j]);
        let mut f = Vec::new();
        for sign in [1.0, -1.0] {
            let mut x = s0.clone();
            x[j] += sign * delta;
            f.push(functions(problem.evaluate_from(&x, Some(base_warm.clone()))?));
        }
        for (k, name) in names.iter().enumerate() {
            rows.push(GradientCheck {
                function: name.clone(),
                variable: j,
                analytic: analytic[k][j],
                finite_difference: (f[0][k] - f[1][k]) / (2.0 * delta),
            });
        }
    }
    Ok(rows)
}

/// One analysis per parameter value; writes `sweep.csv`.
pub fn run_sweep(config: &RunConfig, opts: &RunOptions) -> Result<Vec<(f64, Analysis)>> {
    let dir = opts.directory(config);
    let sweep = config.sweep.clone().ok_or_else(|| Error::Config("the configuration has no [sweep] block".into()))?;
    if sweep.values.is_empty() {
        return Err(Error::Config("the sweep has no values".into()));
    }
    let mut out = Vec::new();
    for &v in &sweep.values {
        let mut cfg = config.clone();
        match sweep.parameter {
            SweepParameter::PressurePenalty => cfg.flow.pressure_penalty = v,
            SweepParameter::NitschePenalty => cfg.flow.nitsche_penalty = v,
        }
        out.push((v, diagnose(&dir, analyze(&cfg))?));
    }
    ensure_dir(&dir)?;
    let name = match sweep.parameter {
        SweepParameter::PressurePenalty => "pressure_penalty",
        SweepParameter::NitschePenalty => "nitsche_penalty",
    };
    let mut csv = format!("{name},");
    for c in &config.criteria {
        csv.push_str(&c.name);
        csv.push(',');
    }
    csv.push_str("interface_mass_flow,newton_iterations\n");
    for (v, a) in &out {
        let _ = write!(csv, "{v:e},");
        for x in a.values.iter().chain([&a.interface_mass_flow]) {
            let _ = write!(csv, "{x:.17e},");
        }
        let _ = writeln!(csv, "{}", a.fwd.newton_iterations());
    }
    write_text(&dir.join("sweep.csv"), &csv)?;
    Ok(out)
}
