//! Newton iteration, BDF2 time marching and the steady driver.
//!
//! Problems are passed as closures `eval(state, time, want_jacobian)` that
//! return the residual and, on request, its Jacobian with respect to the state
//! (already including the `a0` rate coupling of the time level).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TimeLevel;
use crate::linalg::{linear_solve, CsrMatrix, LinearSolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Steady,
    Bdf2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub newton_rel_tol: f64,
    /// Absolute floor on the residual norm (used when the initial residual is
    /// already tiny).
    pub newton_abs_tol: f64,
    pub max_newton: usize,
    /// Backtracking on residual increase.
    pub line_search: bool,
    pub linear: LinearSolverConfig,
    pub scheme: Scheme,
    pub dt: f64,
    pub steps: usize,
    /// Pseudo-transient continuation when the direct steady Newton fails.
    pub pseudo_transient: bool,
    pub pseudo_dt: f64,
    pub pseudo_growth: f64,
    pub max_pseudo_steps: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            newton_rel_tol: 1e-6,
            newton_abs_tol: 1e-14,
            max_newton: 25,
            line_search: true,
            linear: LinearSolverConfig::default(),
            scheme: Scheme::Steady,
            dt: 0.1,
            steps: 40,
            pseudo_transient: true,
            pseudo_dt: 1e-2,
            pseudo_growth: 2.0,
            max_pseudo_steps: 60,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_rel_tol > 0.0 && self.newton_abs_tol > 0.0 && self.linear.rel_tol > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if self.max_newton == 0 {
            return Err(Error::Config("max_newton must be at least 1".into()));
        }
        if self.scheme == Scheme::Bdf2 && !(self.dt > 0.0 && self.steps > 0) {
            return Err(Error::Config("transient runs need dt > 0 and steps > 0".into()));
        }
        if self.pseudo_transient && !(self.pseudo_dt > 0.0 && self.pseudo_growth >= 1.0) {
            return Err(Error::Config("pseudo-transient continuation needs pseudo_dt > 0 and growth >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NewtonReport {
    pub iterations: usize,
    /// Residual 2-norm before each iteration and at the end.
    pub residuals: Vec<f64>,
    /// Residual decreased at every iteration.
    pub monotone: bool,
    pub linear_solves: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Newton's method with relative residual control.
pub fn newton_solve<F>(eval: &mut F, x0: Vec<f64>, config: &SolveConfig) -> Result<(Vec<f64>, NewtonReport)>
where
    F: FnMut(&[f64], bool) -> Result<(Vec<f64>, Option<CsrMatrix>)>,
{
    let mut x = x0;
    let (mut r, _) = eval(&x, false)?;
    let r0 = norm(&r);
    if !r0.is_finite() {
        return Err(Error::Nonconvergence { iterations: 0, trace: vec![r0] });
    }
    // Relative to the cold-start residual so warm starts are not over-solved.
    let scale = if x.iter().any(|v| *v != 0.0) { r0.max(norm(&eval(&vec![0.0; x.len()], false)?.0)) } else { r0 };
    let target = (config.newton_rel_tol * scale).max(config.newton_abs_tol);
    let mut report = NewtonReport { residuals: vec![r0], monotone: true, ..Default::default() };
    let mut rn = r0;
    while rn > target {
        if report.iterations == config.max_newton {
            return Err(Error::Nonconvergence { iterations: report.iterations, trace: report.residuals });
        }
        let (_, j) = eval(&x, true)?;
        let j = j.ok_or_else(|| Error::Internal("assembly returned no Jacobian".into()))?;
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let dx = linear_solve(&j, &rhs, &config.linear)?;
        report.linear_solves += 1;
        let mut step = 1.0;
        let mut trial: Vec<f64>;
        let mut rt: Vec<f64>;
        let mut rtn: f64;
        let mut halvings = 0;
        loop {
            trial = x.iter().zip(&dx).map(|(a, d)| a + step * d).collect();
            rt = eval(&trial, false)?.0;
            rtn = norm(&rt);
            if !config.line_search || (rtn.is_finite() && rtn < rn) || halvings == 6 {
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
        if !rtn.is_finite() {
            report.residuals.push(rtn);
            return Err(Error::Nonconvergence { iterations: report.iterations + 1, trace: report.residuals });
        }
        if rtn >= rn {
            report.monotone = false;
        }
        x = trial;
        r = rt;
        rn = rtn;
        report.iterations += 1;
        report.residuals.push(rn);
    }
    Ok((x, report))
}

/// Coefficients of the rate `a0 * u + history` for step `n` (1-based).
pub fn bdf_coefficients(n: usize, dt: f64, prev: &[f64], prev2: Option<&[f64]>) -> (f64, Vec<f64>) {
    match (n, prev2) {
        (1, _) | (_, None) => (1.0 / dt, prev.iter().map(|v| -v / dt).collect()),
        (_, Some(p2)) => (
            1.5 / dt,
            prev.iter().zip(p2).map(|(a, b)| (-4.0 * a + b) / (2.0 * dt)).collect(),
        ),
    }
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub times: Vec<f64>,
    /// States at `times`, the initial condition first.
    pub states: Vec<Vec<f64>>,
    pub reports: Vec<NewtonReport>,
}

/// BDF2 time integration with a backward-Euler first step.
pub fn march<F>(eval: &mut F, u0: Vec<f64>, config: &SolveConfig) -> Result<History>
where
    F: FnMut(&[f64], &TimeLevel, bool) -> Result<(Vec<f64>, Option<CsrMatrix>)>,
{
    if config.scheme == Scheme::Steady {
        let (u, rep) = steady_solve(eval, u0, config)?;
        return Ok(History { times: vec![0.0], states: vec![u], reports: vec![rep] });
    }
    if !(config.dt > 0.0) {
        return Err(Error::Config("time step must be positive".into()));
    }
    let dt = config.dt;
    let mut hist = History { times: vec![0.0], states: vec![u0], reports: Vec::new() };
    for n in 1..=config.steps {
        let prev = &hist.states[n - 1];
        let prev2 = (n >= 2).then(|| hist.states[n - 2].as_slice());
        let (a0, h) = bdf_coefficients(n, dt, prev, prev2);
        let t = n as f64 * dt;
        let level = TimeLevel { t, dt: Some(dt), a0, history: Some(&h) };
        let mut step = |u: &[f64], jac: bool| eval(u, &level, jac);
        let (u, rep) = newton_solve(&mut step, prev.clone(), config)
            .map_err(|e| Error::TimeStep { step: n, source: Box::new(e) })?;
        hist.times.push(t);
        hist.states.push(u);
        hist.reports.push(rep);
    }
    Ok(hist)
}

/// Steady Newton from a warm start, falling back to pseudo-transient
/// continuation (backward Euler with a growing step) if it fails.
pub fn steady_solve<F>(eval: &mut F, warm: Vec<f64>, config: &SolveConfig) -> Result<(Vec<f64>, NewtonReport)>
where
    F: FnMut(&[f64], &TimeLevel, bool) -> Result<(Vec<f64>, Option<CsrMatrix>)>,
{
    let steady = TimeLevel::steady();
    let direct = {
        let mut s = |u: &[f64], jac: bool| eval(u, &steady, jac);
        newton_solve(&mut s, warm.clone(), config)
    };
    let err = match direct {
        Ok(v) => return Ok(v),
        Err(e @ Error::Nonconvergence { .. }) | Err(e @ Error::LinearSolver(_)) if config.pseudo_transient => e,
        Err(e) => return Err(e),
    };
    log::info!("steady Newton failed ({err}); switching to pseudo-transient continuation");
    let r_start = norm(&eval(&warm, &steady, false)?.0);
    let mut x = warm;
    let mut dt = config.pseudo_dt;
    let mut report = NewtonReport { monotone: true, ..Default::default() };
    for _ in 0..config.max_pseudo_steps {
        let h: Vec<f64> = x.iter().map(|v| -v / dt).collect();
        let level = TimeLevel { t: 0.0, dt: Some(dt), a0: 1.0 / dt, history: Some(&h) };
        let stepped = {
            let mut s = |u: &[f64], jac: bool| eval(u, &level, jac);
            newton_solve(&mut s, x.clone(), config)
        };
        match stepped {
            Ok((u, rep)) => {
                report.iterations += rep.iterations;
                report.linear_solves += rep.linear_solves;
                x = u;
                dt *= config.pseudo_growth;
            }
            Err(Error::Nonconvergence { .. }) => {
                dt *= 0.25;
                continue;
            }
            Err(e) => return Err(e),
        }
        let rs = norm(&eval(&x, &steady, false)?.0);
        if rs < 1e-2 * r_start {
            let mut s = |u: &[f64], jac: bool| eval(u, &steady, jac);
            if let Ok((u, rep)) = newton_solve(&mut s, x.clone(), config) {
                report.iterations += rep.iterations;
                report.linear_solves += rep.linear_solves;
                report.residuals = rep.residuals;
                report.monotone = rep.monotone;
                return Ok((u, report));
            }
        }
    }
    Err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(f: impl Fn(f64) -> (f64, f64)) -> impl FnMut(&[f64], bool) -> Result<(Vec<f64>, Option<CsrMatrix>)> {
        move |x: &[f64], jac: bool| {
            let (r, d) = f(x[0]);
            Ok((vec![r], jac.then(|| CsrMatrix::from_dense(&[vec![d]]))))
        }
    }

    #[test]
    fn newton_on_linear_map_takes_one_iteration() {
        let a = CsrMatrix::from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let b = [1.0, 2.0];
        let mut eval = |x: &[f64], jac: bool| {
            let ax = a.matvec(x);
            Ok((vec![ax[0] - b[0], ax[1] - b[1]], jac.then(|| a.clone())))
        };
        let (x, rep) = newton_solve(&mut eval, vec![0.0, 0.0], &SolveConfig::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-14 && (x[1] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn newton_converges_quadratically_on_square_root() {
        let config = SolveConfig { newton_rel_tol: 1e-12 / 5.0, newton_abs_tol: 1e-12, ..Default::default() };
        let mut eval = scalar(|x| (x * x - 4.0, 2.0 * x));
        let (x, rep) = newton_solve(&mut eval, vec![3.0], &config).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!(rep.iterations <= 5, "{rep:?}");
        assert!(rep.monotone);
        // Error ratios e_{k+1} / e_k^2 stay bounded (= 1/(2 x_k) → 1/4).
        let mut xk = 3.0f64;
        for _ in 0..3 {
            let next = xk - (xk * xk - 4.0) / (2.0 * xk);
            assert!(((next - 2.0) / (xk - 2.0).powi(2) - 1.0 / (2.0 * xk)).abs() < 1e-9);
            xk = next;
        }
    }

    #[test]
    fn newton_reports_nonconvergence_with_trace() {
        let config = SolveConfig { max_newton: 3, line_search: false, ..Default::default() };
        // x^2 + 1 has no real root.
        let mut eval = scalar(|x| (x * x + 1.0, 2.0 * x));
        match newton_solve(&mut eval, vec![0.5], &config) {
            Err(Error::Nonconvergence { iterations, trace }) => {
                assert_eq!(iterations, 3);
                assert_eq!(trace.len(), 4);
            }
            other => panic!("{other:?}"),
        }
    }

    fn decay(u: &[f64], t: &TimeLevel, jac: bool) -> Result<(Vec<f64>, Option<CsrMatrix>)> {
        let rate = t.a0 * u[0] + t.history.map_or(0.0, |h| h[0]);
        Ok((vec![rate + u[0]], jac.then(|| CsrMatrix::from_dense(&[vec![t.a0 + 1.0]]))))
    }

    fn decay_error(dt: f64, steps: usize) -> f64 {
        let config = SolveConfig { scheme: Scheme::Bdf2, dt, steps, ..Default::default() };
        let h = march(&mut decay, vec![1.0], &config).unwrap();
        (h.states[steps][0] - (-(steps as f64) * dt).exp()).abs()
    }

    #[test]
    fn bdf2_is_second_order_on_decay() {
        let e1 = decay_error(0.1, 10);
        let e2 = decay_error(0.05, 20);
        let e3 = decay_error(0.025, 40);
        let o1 = (e1 / e2).log2();
        let o2 = (e2 / e3).log2();
        assert!((1.8..=2.2).contains(&o2), "orders {o1} {o2}");
    }

    #[test]
    fn steady_mode_gives_single_state() {
        let mut eval = |u: &[f64], t: &TimeLevel, jac: bool| {
            let rate = t.a0 * u[0] + t.history.map_or(0.0, |h| h[0]);
            Ok((vec![rate + u[0] - 2.0], jac.then(|| CsrMatrix::from_dense(&[vec![t.a0 + 1.0]]))))
        };
        let h = march(&mut eval, vec![0.0], &SolveConfig::default()).unwrap();
        assert_eq!(h.states.len(), 1);
        assert!((h.states[0][0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn constant_solution_is_reproduced_exactly() {
        let config = SolveConfig { scheme: Scheme::Bdf2, dt: 0.3, steps: 7, ..Default::default() };
        let mut eval = |u: &[f64], t: &TimeLevel, jac: bool| {
            let rate = t.a0 * u[0] + t.history.map_or(0.0, |h| h[0]);
            Ok((vec![rate + u[0] - 5.0], jac.then(|| CsrMatrix::from_dense(&[vec![t.a0 + 1.0]]))))
        };
        let h = march(&mut eval, vec![5.0], &config).unwrap();
        assert!(h.states.iter().all(|s| s[0] == 5.0));
    }

    #[test]
    fn warm_start_at_solution_needs_no_iterations() {
        let mut eval = |u: &[f64], _t: &TimeLevel, jac: bool| {
            Ok((vec![u[0] * u[0] - 4.0], jac.then(|| CsrMatrix::from_dense(&[vec![2.0 * u[0]]]))))
        };
        let (_, rep) = steady_solve(&mut eval, vec![2.0], &SolveConfig::default()).unwrap();
        assert!(rep.iterations <= 1);
    }

    #[test]
    fn pseudo_transient_rescues_hard_steady_problem() {
        // atan(x - 3) = 0 from far away: plain Newton overshoots and diverges.
        let config = SolveConfig { line_search: false, max_newton: 20, ..Default::default() };
        let mut eval = |u: &[f64], t: &TimeLevel, jac: bool| {
            let rate = t.a0 * u[0] + t.history.map_or(0.0, |h| h[0]);
            let d = 1.0 / (1.0 + (u[0] - 3.0).powi(2));
            Ok((vec![rate + (u[0] - 3.0).atan()], jac.then(|| CsrMatrix::from_dense(&[vec![t.a0 + d]]))))
        };
        {
            let steady = TimeLevel::steady();
            let mut s = |u: &[f64], j: bool| eval(u, &steady, j);
            assert!(newton_solve(&mut s, vec![-10.0], &config).is_err());
        }
        let (x, _) = steady_solve(&mut eval, vec![-10.0], &config).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-5);
    }
}
