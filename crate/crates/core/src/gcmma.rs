//! Globally convergent method of moving asymptotes.
//!
//! Each outer iteration builds separable convex approximations of the
//! objective and constraints around the current iterate and solves the
//! resulting subproblem through its concave dual in the constraint
//! multipliers. Inner iterations raise the per-function conservatism until
//! every approximation bounds its true function at the trial point.
//! Constraints are elastic: `f_i(x) − y_i ≤ 0` with `c_i y_i + ½ d_i y_i²`
//! added to the objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcmmaConfig {
    /// Move limit as a fraction of each variable's range.
    pub move_limit: f64,
    pub asymptote_init: f64,
    pub asymptote_decrease: f64,
    pub asymptote_increase: f64,
    /// Linear penalty `c_i` on constraint violations.
    pub penalty: f64,
    /// Quadratic penalty `d_i` on constraint violations.
    pub quadratic_penalty: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Relative objective change below which a feasible iterate is converged.
    pub tolerance: f64,
    pub feasibility_tolerance: f64,
}

impl Default for GcmmaConfig {
    fn default() -> Self {
        Self {
            move_limit: 0.04,
            asymptote_init: 0.7,
            asymptote_decrease: 0.5,
            asymptote_increase: 1.43,
            penalty: 100.0,
            quadratic_penalty: 1.0,
            max_outer: 200,
            max_inner: 15,
            tolerance: 1e-6,
            feasibility_tolerance: 1e-6,
        }
    }
}

impl GcmmaConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if !(c.asymptote_decrease > 0.0 && c.asymptote_decrease <= c.asymptote_init && c.asymptote_decrease < 1.0) {
            return Err(Error::Config("need 0 < asymptote_decrease <= asymptote_init, asymptote_decrease < 1".into()));
        }
        if !(c.asymptote_increase > 1.0 && c.asymptote_init < 1.0) {
            return Err(Error::Config("need asymptote_init < 1 < asymptote_increase".into()));
        }
        if !(c.move_limit > 0.0 && c.move_limit <= 1.0) {
            return Err(Error::Config("move_limit must lie in (0, 1]".into()));
        }
        if !(c.penalty > 0.0 && c.quadratic_penalty > 0.0) {
            return Err(Error::Config("constraint penalties must be positive".into()));
        }
        if c.max_inner == 0 || !(c.tolerance >= 0.0) || !(c.feasibility_tolerance >= 0.0) {
            return Err(Error::Config("invalid optimizer limits".into()));
        }
        Ok(())
    }
}

/// Function values at a point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Values {
    pub objective: f64,
    pub constraints: Vec<f64>,
}

/// Gradients at a point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derivatives {
    pub objective: Vec<f64>,
    pub constraints: Vec<Vec<f64>>,
}

pub trait Problem {
    fn values(&mut self, x: &[f64]) -> Result<Values>;
    /// Gradients at the point of the most recent `values` call.
    fn gradients(&mut self) -> Result<Derivatives>;
}

const ALBEFA: f64 = 0.1;
const RAA_MIN: f64 = 1e-6;
const CONSERVATISM_TOL: f64 = 1e-9;

/// Separable approximations `f_i(x) ≈ r_i + Σ_j p_ij/(u_j − x_j) + q_ij/(x_j − l_j)`,
/// row 0 the objective.
#[derive(Clone, Debug)]
pub struct Subproblem {
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Primal-dual solution of a subproblem.
#[derive(Clone, Debug, PartialEq)]
pub struct SubproblemSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Projected-gradient KKT residual of the dual.
    pub kkt: f64,
    pub iterations: usize,
}

impl Subproblem {
    pub fn num_constraints(&self) -> usize {
        self.r.len() - 1
    }

    /// Approximate value of function `i` (0 the objective).
    pub fn approx(&self, i: usize, x: &[f64]) -> f64 {
        let mut s = self.r[i];
        for j in 0..x.len() {
            s += self.p[i][j] / (self.upp[j] - x[j]) + self.q[i][j] / (x[j] - self.low[j]);
        }
        s
    }

    fn primal(&self, lambda: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.low.len();
        let m = self.num_constraints();
        let mut x = Vec::with_capacity(n);
        for j in 0..n {
            let mut pj = self.p[0][j];
            let mut qj = self.q[0][j];
            for i in 0..m {
                pj += lambda[i] * self.p[i + 1][j];
                qj += lambda[i] * self.q[i + 1][j];
            }
            let (sp, sq) = (pj.sqrt(), qj.sqrt());
            let xs = (self.low[j] * sp + self.upp[j] * sq) / (sp + sq);
            x.push(xs.clamp(self.alpha[j], self.beta[j]));
        }
        let y = (0..m).map(|i| ((lambda[i] - self.c[i]) / self.d[i]).max(0.0)).collect();
        (x, y)
    }

    fn dual(&self, lambda: &[f64]) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (x, y) = self.primal(lambda);
        let m = self.num_constraints();
        let mut w = self.approx(0, &x);
        let mut g = Vec::with_capacity(m);
        for i in 0..m {
            let fi = self.approx(i + 1, &x);
            w += lambda[i] * (fi - y[i]) + self.c[i] * y[i] + 0.5 * self.d[i] * y[i] * y[i];
            g.push(fi - y[i]);
        }
        (w, g, x, y)
    }

    fn dual_hessian(&self, lambda: &[f64], x: &[f64]) -> DMatrix<f64> {
        let m = self.num_constraints();
        let mut h = DMatrix::zeros(m, m);
        for j in 0..x.len() {
            if x[j] <= self.alpha[j] || x[j] >= self.beta[j] {
                continue;
            }
            let (ux, xl) = (self.upp[j] - x[j], x[j] - self.low[j]);
            let mut pj = self.p[0][j];
            let mut qj = self.q[0][j];
            for i in 0..m {
                pj += lambda[i] * self.p[i + 1][j];
                qj += lambda[i] * self.q[i + 1][j];
            }
            let curv = 2.0 * pj / ux.powi(3) + 2.0 * qj / xl.powi(3);
            let df: Vec<f64> =
                (0..m).map(|i| self.p[i + 1][j] / (ux * ux) - self.q[i + 1][j] / (xl * xl)).collect();
            for a in 0..m {
                for b in 0..m {
                    h[(a, b)] -= df[a] * df[b] / curv;
                }
            }
        }
        for i in 0..m {
            if lambda[i] > self.c[i] {
                h[(i, i)] -= 1.0 / self.d[i];
            }
        }
        h
    }

    /// Maximizes the concave dual over `λ ≥ 0` by projected Newton steps with
    /// an Armijo line search.
    ///
    /// Near vertex solutions the primal point is extremely sensitive to `λ`,
    /// so the constraint residual cannot always be driven below roundoff of
    /// `λ` times the dual curvature. The reported `kkt` is therefore the
    /// projected Newton step in `λ` (equal to the projected gradient when the
    /// dual is flat), relative to `1 + |λ|`.
    pub fn solve(&self) -> Result<SubproblemSolution> {
        let m = self.num_constraints();
        let mut lambda = vec![0.0; m];
        let (mut w, mut g, mut x, mut y) = self.dual(&lambda);
        let projected = |l: &[f64], d: &[f64]| -> f64 {
            let size = 1.0 + l.iter().map(|v| v.abs()).fold(0.0, f64::max);
            l.iter().zip(d).map(|(l, d)| (l - (l + d).max(0.0)).abs()).fold(0.0, f64::max) / size
        };
        let mut last = f64::INFINITY;
        let (mut best, mut since) = (f64::INFINITY, 0);
        for it in 0..500 {
            let free: Vec<usize> = (0..m).filter(|&i| lambda[i] > 0.0 || g[i] > 0.0).collect();
            let h = self.dual_hessian(&lambda, &x);
            let mut dir = vec![0.0; m];
            let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| -h[(free[a], free[b])]);
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
            let reg = 1e-14 * (1.0 + hf.amax());
            let newton = (hf + DMatrix::identity(free.len(), free.len()) * reg).cholesky().map(|c| c.solve(&gf));
            match newton {
                Some(s) if s.iter().all(|v| v.is_finite()) && s.dot(&gf) > 0.0 => {
                    for (a, &i) in free.iter().enumerate() {
                        dir[i] = s[a];
                    }
                }
                _ => {
                    for &i in &free {
                        dir[i] = g[i];
                    }
                }
            }
            let res = projected(&lambda, &dir).min(projected(&lambda, &g));
            if res < 0.5 * best {
                best = res;
                since = 0;
            } else {
                since += 1;
            }
            last = res;
            if res <= 1e-13 || (res <= 1e-9 && since >= 20) {
                return Ok(SubproblemSolution { x, y, lambda, kkt: res, iterations: it });
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = lambda.iter().zip(&dir).map(|(l, d)| (l + t * d).max(0.0)).collect();
                let (wt, gt, xt, yt) = self.dual(&trial);
                let gain: f64 = trial.iter().zip(&lambda).zip(&g).map(|((a, b), g)| (a - b) * g).sum();
                // concavity: a non-negative slope at the trial point still ascends
                let slope: f64 = trial.iter().zip(&lambda).zip(&gt).map(|((a, b), g)| (a - b) * g).sum();
                if trial != lambda && (wt >= w + 1e-4 * gain || (gain > 0.0 && slope >= 0.0)) {
                    lambda = trial;
                    w = wt;
                    g = gt;
                    x = xt;
                    y = yt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                if res <= 1e-9 {
                    return Ok(SubproblemSolution { x, y, lambda, kkt: res, iterations: it });
                }
                return Err(Error::Subproblem(format!("dual line search stalled at KKT residual {res:e}")));
            }
        }
        if last <= 1e-9 {
            return Ok(SubproblemSolution { x, y, lambda, kkt: last, iterations: 500 });
        }
        Err(Error::Subproblem(format!("dual iteration limit reached at KKT residual {last:e}")))
    }
}

/// Optimizer state carried between outer iterations (checkpointable).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcmmaState {
    pub iteration: usize,
    pub x: Vec<f64>,
    pub xold1: Vec<f64>,
    pub xold2: Vec<f64>,
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub values: Option<Values>,
}

/// Diagnostics of one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub inner_iterations: usize,
    /// The inner cap was reached and the best trial was accepted.
    pub inner_capped: bool,
    pub kkt: f64,
    pub lambda: Vec<f64>,
    pub values: Values,
}

pub struct Gcmma {
    pub config: GcmmaConfig,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub state: GcmmaState,
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::OptimizerInput(format!("{name} contains non-finite entries")))
    }
}

impl Gcmma {
    pub fn new(config: GcmmaConfig, lower: Vec<f64>, upper: Vec<f64>, x0: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if lower.len() != x0.len() || upper.len() != x0.len() {
            return Err(Error::OptimizerInput("bounds and start point differ in length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::OptimizerInput("every lower bound must be below its upper bound".into()));
        }
        let x: Vec<f64> = x0.iter().zip(lower.iter().zip(&upper)).map(|(x, (l, u))| x.clamp(*l, *u)).collect();
        let state = GcmmaState {
            iteration: 0,
            xold1: x.clone(),
            xold2: x.clone(),
            low: vec![0.0; x.len()],
            upp: vec![0.0; x.len()],
            x,
            values: None,
        };
        Ok(Self { config, lower, upper, state })
    }

    pub fn resume(config: GcmmaConfig, lower: Vec<f64>, upper: Vec<f64>, state: GcmmaState) -> Result<Self> {
        let mut g = Self::new(config, lower, upper, state.x.clone())?;
        if state.x != g.state.x {
            return Err(Error::OptimizerInput("checkpointed iterate violates the bounds".into()));
        }
        g.state = state;
        Ok(g)
    }

    fn ranges(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l).max(1e-5)).collect()
    }

    fn update_asymptotes(&mut self) {
        let c = &self.config;
        let s = &mut self.state;
        let range: Vec<f64> = self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l).max(1e-5)).collect();
        for j in 0..s.x.len() {
            let x = s.x[j];
            if s.iteration < 2 {
                s.low[j] = x - c.asymptote_init * range[j];
                s.upp[j] = x + c.asymptote_init * range[j];
            } else {
                let osc = (x - s.xold1[j]) * (s.xold1[j] - s.xold2[j]);
                let factor = if osc < 0.0 {
                    c.asymptote_decrease
                } else if osc > 0.0 {
                    c.asymptote_increase
                } else {
                    1.0
                };
                let low = x - factor * (s.xold1[j] - s.low[j]);
                let upp = x + factor * (s.upp[j] - s.xold1[j]);
                s.low[j] = low.clamp(x - 10.0 * range[j], x - 0.01 * range[j]);
                s.upp[j] = upp.clamp(x + 0.01 * range[j], x + 10.0 * range[j]);
            }
        }
    }

    /// Approximations at the current iterate with conservatism `raa`.
    pub fn build_subproblem(&self, values: &Values, grads: &Derivatives, raa: &[f64]) -> Subproblem {
        let s = &self.state;
        let n = s.x.len();
        let range = self.ranges();
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        for j in 0..n {
            let x = s.x[j];
            let a = (s.low[j] + ALBEFA * (x - s.low[j])).max(x - self.config.move_limit * (self.upper[j] - self.lower[j]));
            let b = (s.upp[j] - ALBEFA * (s.upp[j] - x)).min(x + self.config.move_limit * (self.upper[j] - self.lower[j]));
            alpha.push(a.max(self.lower[j]));
            beta.push(b.min(self.upper[j]));
        }
        let rows: Vec<(&f64, &Vec<f64>)> = std::iter::once((&values.objective, &grads.objective))
            .chain(values.constraints.iter().zip(&grads.constraints))
            .collect();
        let mut p = Vec::with_capacity(rows.len());
        let mut q = Vec::with_capacity(rows.len());
        let mut r = Vec::with_capacity(rows.len());
        for (i, (f, df)) in rows.into_iter().enumerate() {
            let mut pi = vec![0.0; n];
            let mut qi = vec![0.0; n];
            let mut ri = *f;
            for j in 0..n {
                let (ux, xl) = (s.upp[j] - s.x[j], s.x[j] - s.low[j]);
                let pos = df[j].max(0.0);
                let neg = (-df[j]).max(0.0);
                let extra = 0.001 * (pos + neg) + raa[i] / range[j];
                pi[j] = (pos + extra) * ux * ux;
                qi[j] = (neg + extra) * xl * xl;
                ri -= pi[j] / ux + qi[j] / xl;
            }
            p.push(pi);
            q.push(qi);
            r.push(ri);
        }
        let m = values.constraints.len();
        Subproblem {
            low: s.low.clone(),
            upp: s.upp.clone(),
            alpha,
            beta,
            p,
            q,
            r,
            c: vec![self.config.penalty; m],
            d: vec![self.config.quadratic_penalty; m],
        }
    }

    /// Initial conservatism of every function from its gradient, floored
    /// relative to the function's magnitude.
    pub fn initial_conservatism(&self, values: &Values, grads: &Derivatives) -> Vec<f64> {
        let range = self.ranges();
        let n = range.len().max(1) as f64;
        std::iter::once((&values.objective, &grads.objective))
            .chain(values.constraints.iter().zip(&grads.constraints))
            .map(|(f, df)| {
                let s: f64 = df.iter().zip(&range).map(|(d, r)| d.abs() * r).sum();
                (0.1 / n * s).max(RAA_MIN * f.abs().max(RAA_MIN))
            })
            .collect()
    }

    /// One outer iteration starting from the current iterate, whose values
    /// and gradients are given. Moves the iterate to the accepted trial.
    pub fn step<P: Problem + ?Sized>(
        &mut self,
        problem: &mut P,
        values: &Values,
        grads: &Derivatives,
    ) -> Result<StepReport> {
        let n = self.state.x.len();
        if grads.objective.len() != n || grads.constraints.iter().any(|g| g.len() != n) {
            return Err(Error::OptimizerInput("gradient length does not match the design".into()));
        }
        if grads.constraints.len() != values.constraints.len() {
            return Err(Error::OptimizerInput("constraint count mismatch".into()));
        }
        check_finite("objective gradient", &grads.objective)?;
        for g in &grads.constraints {
            check_finite("constraint gradient", g)?;
        }
        check_finite("function values", &values.constraints)?;
        check_finite("function values", &[values.objective])?;
        self.update_asymptotes();
        let range = self.ranges();
        let mut raa = self.initial_conservatism(values, grads);
        let fvals: Vec<f64> = std::iter::once(values.objective).chain(values.constraints.iter().copied()).collect();
        let grad_rows: Vec<&Vec<f64>> = std::iter::once(&grads.objective).chain(&grads.constraints).collect();
        let tol: Vec<f64> = fvals
            .iter()
            .zip(&grad_rows)
            .map(|(f, df)| {
                let s: f64 = df.iter().zip(&range).map(|(d, r)| (d * r).abs()).sum::<f64>() / n.max(1) as f64;
                CONSERVATISM_TOL * (f.abs() + s)
            })
            .collect();
        let mut best: Option<(f64, Vec<f64>, Values, SubproblemSolution)> = None;
        let mut inner = 0;
        loop {
            let sub = self.build_subproblem(values, grads, &raa);
            let sol = sub.solve()?;
            let trial = problem.values(&sol.x)?;
            let last_x = sol.x.clone();
            inner += 1;
            let fnew: Vec<f64> = std::iter::once(trial.objective).chain(trial.constraints.iter().copied()).collect();
            let conservative = (0..fnew.len()).all(|i| sub.approx(i, &sol.x) + tol[i] >= fnew[i]);
            let merit = trial.objective
                + trial.constraints.iter().map(|g| self.config.penalty * g.max(0.0)).sum::<f64>();
            if conservative {
                return Ok(self.accept(sol, trial, inner, false));
            }
            if best.as_ref().is_none_or(|b| merit < b.0) {
                best = Some((merit, sol.x.clone(), trial.clone(), sol.clone()));
            }
            if inner >= self.config.max_inner {
                log::warn!("GCMMA inner loop reached {inner} iterations; accepting the best trial");
                let (_, x, v, sol) = best.unwrap();
                if x != last_x {
                    // gradients are taken at the most recent evaluation
                    problem.values(&x)?;
                }
                return Ok(self.accept(sol, v, inner, true));
            }
            // Raise conservatism where the approximation undershoots.
            let mut coef = 0.0;
            for j in 0..n {
                let (x0, x1) = (self.state.x[j], sol.x[j]);
                let xxux = (x1 - x0) / (self.state.upp[j] - x1);
                let xxxl = (x1 - x0) / (x1 - self.state.low[j]);
                coef += xxux * xxxl * (self.state.upp[j] - self.state.low[j]) / range[j];
            }
            let coef = coef.max(1e-12);
            for i in 0..fnew.len() {
                let app = sub.approx(i, &sol.x);
                if app + tol[i] < fnew[i] {
                    let delta = (fnew[i] - app) / coef;
                    raa[i] = (1.1 * (raa[i] + delta)).min(10.0 * raa[i]);
                }
            }
        }
    }

    fn accept(&mut self, sol: SubproblemSolution, values: Values, inner: usize, capped: bool) -> StepReport {
        let s = &mut self.state;
        s.xold2 = std::mem::replace(&mut s.xold1, s.x.clone());
        s.x = sol.x;
        s.iteration += 1;
        s.values = Some(values.clone());
        StepReport { inner_iterations: inner, inner_capped: capped, kkt: sol.kkt, lambda: sol.lambda, values }
    }

    pub fn is_feasible(&self, v: &Values) -> bool {
        v.constraints.iter().all(|g| *g <= self.config.feasibility_tolerance)
    }

    /// Convergence test: feasible and relative objective change below the tolerance.
    pub fn converged(&self, previous: &Values, current: &Values) -> bool {
        let change = (current.objective - previous.objective).abs() / previous.objective.abs().max(1e-300);
        self.is_feasible(current) && change < self.config.tolerance
    }
}

/// Outcome of [`minimize`].
#[derive(Clone, Debug)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub values: Values,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<Values>,
}

/// Runs GCMMA from `x0` until convergence or `config.max_outer` iterations.
pub fn minimize<P: Problem>(
    problem: &mut P,
    config: GcmmaConfig,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x0: Vec<f64>,
) -> Result<Outcome> {
    let mut opt = Gcmma::new(config, lower, upper, x0)?;
    let mut values = problem.values(&opt.state.x.clone())?;
    let mut history = vec![values.clone()];
    let mut converged = false;
    while opt.state.iteration < opt.config.max_outer {
        let grads = problem.gradients()?;
        let report = opt.step(problem, &values, &grads)?;
        let previous = std::mem::replace(&mut values, report.values);
        history.push(values.clone());
        if opt.converged(&previous, &values) {
            converged = true;
            break;
        }
    }
    Ok(Outcome { x: opt.state.x, values, iterations: opt.state.iteration, converged, history })
}
