//! Discrete adjoint sensitivities.
//!
//! For a function `F(u, φ)` of the converged states the total derivative is
//! `dF/dφ = ∂F/∂φ + Σ λᵀ ∂R/∂φ`, with one adjoint `λ` per state block solved
//! in reverse forward order (species, flow, indicator). Geometric partials
//! `∂R/∂φ` and `∂F/∂φ` come from central differences of element
//! contributions: each cut element is re-decomposed with one perturbed corner
//! value and re-integrated with its enrichment frozen.

use rayon::prelude::*;

use crate::criteria::{Criterion, Snapshot, TimeSampling};
use crate::cutter::decompose::{decompose_element, ElementDecomposition};
use crate::cutter::{boundary_sides, element_cells, element_phi};
use crate::discretization::Cell;
use crate::error::{Error, Result};
use crate::flow::{Linearization, Terms, TimeLevel, FIELDS};
use crate::linalg::{CsrMatrix, Factorization, TripletBuilder};
use crate::model::{ForwardState, Physics};
use crate::solve::Scheme;

/// Element-level difference step relative to the element size.
pub const FD_STEP: f64 = 1e-4;
/// Step halvings tried when a perturbation changes the element topology.
pub const MAX_HALVINGS: usize = 4;

/// One element re-cut with a perturbed corner value.
#[derive(Clone, Debug)]
pub struct Recut {
    pub element: usize,
    pub node: usize,
    /// Multiplier of `f(plus) − f(minus)` giving the derivative.
    pub scale: f64,
    pub plus: (ElementDecomposition, Vec<Cell>),
    pub minus: (ElementDecomposition, Vec<Cell>),
}

/// All element re-cuts of one geometry.
#[derive(Clone, Debug, Default)]
pub struct RecutSet {
    pub num_nodes: usize,
    pub recuts: Vec<Recut>,
    /// `(element, node)` pairs whose step could not avoid a topology change;
    /// these use a one-sided difference (or none if both sides change).
    pub flagged: Vec<(usize, usize)>,
}

impl RecutSet {
    pub fn build(physics: &Physics, fwd: &ForwardState) -> Result<Self> {
        let mesh = &physics.mesh;
        let base_step = FD_STEP * mesh.element_size();
        let sides = boundary_sides(mesh);
        let jobs: Vec<(usize, usize)> = (0..mesh.num_elements())
            .flat_map(|e| (0..4).map(move |k| (e, k)))
            .filter(|&(e, k)| {
                let phi = element_phi(mesh, &fwd.phi, e);
                fwd.cut.decompositions[e].is_cut() || phi[k].abs() <= base_step
            })
            .collect();
        let piece_blocks = &fwd.cut.enrichment.piece_blocks;
        let results: Vec<Result<(Option<Recut>, bool)>> = jobs
            .par_iter()
            .map(|&(e, k)| {
                let origin = mesh.element_origin(e);
                let phi = element_phi(mesh, &fwd.phi, e);
                let base = &fwd.cut.decompositions[e];
                let sig = base.signature();
                let cells = |d: &ElementDecomposition| {
                    element_cells(mesh, e, d, &piece_blocks[e], &sides[e], &physics.quadrature)
                };
                let shifted = |delta: f64| {
                    let mut p = phi;
                    p[k] += delta;
                    decompose_element(origin, mesh.h, p)
                };
                let mut step = base_step;
                let mut last = (None, None);
                for _ in 0..=MAX_HALVINGS {
                    let (dp, dm) = (shifted(step), shifted(-step));
                    let (okp, okm) = (dp.signature() == sig, dm.signature() == sig);
                    if okp && okm {
                        if !base.is_cut() && !dp.is_cut() && !dm.is_cut() {
                            return Ok((None, false));
                        }
                        let recut = Recut {
                            element: e,
                            node: mesh.elements[e][k],
                            scale: 0.5 / step,
                            plus: (dp.clone(), cells(&dp)?),
                            minus: (dm.clone(), cells(&dm)?),
                        };
                        return Ok((Some(recut), false));
                    }
                    last = (okp.then_some((dp, step)), okm.then_some((dm, step)));
                    step *= 0.5;
                }
                // One-sided fallback against the unperturbed element.
                let node = mesh.elements[e][k];
                let one_sided = match last {
                    (Some((dp, s)), _) => Some(Recut {
                        element: e,
                        node,
                        scale: 1.0 / s,
                        plus: (dp.clone(), cells(&dp)?),
                        minus: (base.clone(), cells(base)?),
                    }),
                    (None, Some((dm, s))) => Some(Recut {
                        element: e,
                        node,
                        scale: 1.0 / s,
                        plus: (base.clone(), cells(base)?),
                        minus: (dm.clone(), cells(&dm)?),
                    }),
                    (None, None) => None,
                };
                Ok((one_sided, true))
            })
            .collect();
        let mut set = RecutSet { num_nodes: mesh.num_nodes(), ..Default::default() };
        for (&(e, k), r) in jobs.iter().zip(results) {
            let (recut, flagged) = r?;
            if flagged {
                set.flagged.push((e, mesh.elements[e][k]));
            }
            set.recuts.extend(recut);
        }
        if !set.flagged.is_empty() {
            log::warn!("{} element perturbations changed topology at every step size", set.flagged.len());
        }
        Ok(set)
    }

    /// Sparse `∂R/∂φ` of a residual given by its element contributions.
    pub fn residual_jacobian<F>(&self, nrows: usize, eval: F) -> CsrMatrix
    where
        F: Fn(&[Cell]) -> Vec<(usize, f64)> + Sync,
    {
        let parts: Vec<Vec<(usize, usize, f64)>> = self
            .recuts
            .par_iter()
            .map(|r| {
                let mut out: Vec<(usize, usize, f64)> =
                    eval(&r.plus.1).into_iter().map(|(i, v)| (i, r.node, r.scale * v)).collect();
                out.extend(eval(&r.minus.1).into_iter().map(|(i, v)| (i, r.node, -r.scale * v)));
                out
            })
            .collect();
        let mut tb = TripletBuilder::with_capacity(nrows, self.num_nodes, parts.iter().map(Vec::len).sum());
        for (i, j, v) in parts.into_iter().flatten() {
            tb.add(i, j, v);
        }
        tb.build()
    }

    /// Gradient of a sum of element contributions.
    pub fn scalar_gradient<F>(&self, eval: F) -> Vec<f64>
    where
        F: Fn(&ElementDecomposition, &[Cell]) -> f64 + Sync,
    {
        let parts: Vec<(usize, f64)> = self
            .recuts
            .par_iter()
            .map(|r| (r.node, r.scale * (eval(&r.plus.0, &r.plus.1) - eval(&r.minus.0, &r.minus.1))))
            .collect();
        let mut g = vec![0.0; self.num_nodes];
        for (n, v) in parts {
            g[n] += v;
        }
        g
    }
}

/// Stored flow states entering a time-sampled criterion with their weights.
pub fn samples(physics: &Physics, fwd: &ForwardState, sampling: TimeSampling) -> Vec<(usize, f64)> {
    let last = fwd.flow.states.len() - 1;
    if physics.solve.scheme == Scheme::Steady || last == 0 {
        return vec![(last, 1.0)];
    }
    match sampling {
        TimeSampling::Final => vec![(last, 1.0)],
        TimeSampling::Average => (1..=last).map(|n| (n, 1.0 / last as f64)).collect(),
    }
}

fn snapshot<'a>(physics: &'a Physics, fwd: &'a ForwardState, n: usize) -> Snapshot<'a> {
    Snapshot { physics, cut: Some(&fwd.cut), disc: &fwd.disc, u: &fwd.flow.states[n], c: fwd.species.as_deref() }
}

/// Time-sampled criterion values.
pub fn evaluate_criteria(physics: &Physics, criteria: &[Criterion], fwd: &ForwardState) -> Result<Vec<f64>> {
    criteria
        .iter()
        .map(|c| {
            let mut v = 0.0;
            for (n, w) in samples(physics, fwd, c.spec.sampling) {
                v += w * c.evaluate(&snapshot(physics, fwd, n))?.value;
            }
            Ok(v)
        })
        .collect()
}

/// Partial derivatives of one time-sampled criterion.
#[derive(Clone, Debug)]
pub struct CriterionPartials {
    pub value: f64,
    /// `∂C/∂u` for every stored flow state (`None` where not sampled).
    pub flow: Vec<Option<Vec<f64>>>,
    pub species: Option<Vec<f64>>,
    /// Explicit geometric part `∂C/∂φ` at fixed states.
    pub phi: Vec<f64>,
}

pub fn criterion_partials(
    physics: &Physics,
    criterion: &Criterion,
    fwd: &ForwardState,
    recuts: &RecutSet,
) -> Result<CriterionPartials> {
    let mut out = CriterionPartials {
        value: 0.0,
        flow: vec![None; fwd.flow.states.len()],
        species: None,
        phi: vec![0.0; recuts.num_nodes],
    };
    for (n, w) in samples(physics, fwd, criterion.spec.sampling) {
        let snap = snapshot(physics, fwd, n);
        let v = criterion.evaluate(&snap)?;
        out.value += w * v.value;
        if criterion.spec.depends_on_state() {
            let (du, dc) = criterion.state_gradient(&snap, &v);
            out.flow[n] = Some(du.into_iter().map(|x| w * x).collect());
            if criterion.spec.uses_species() {
                let acc = out.species.get_or_insert_with(|| vec![0.0; dc.len()]);
                acc.iter_mut().zip(dc).for_each(|(a, d)| *a += w * d);
            }
        }
        let outer = w * criterion.outer_derivative(&v);
        let g = recuts.scalar_gradient(|d, cells| criterion.element_inner(&snap, d, cells, v.shift));
        out.phi.iter_mut().zip(g).for_each(|(a, d)| *a += outer * d);
    }
    Ok(out)
}

/// Right-hand side data of one adjoint problem: `∂F/∂(state)`.
#[derive(Clone, Debug)]
pub struct StateSource {
    /// Per stored flow state; the initial condition of transient runs is fixed
    /// and its entry is ignored.
    pub flow: Vec<Option<Vec<f64>>>,
    pub species: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct Adjoint {
    /// Flow adjoint per stored flow state (empty vector where unused).
    pub flow: Vec<Vec<f64>>,
    pub species: Option<Vec<f64>>,
    pub indicator: Option<Vec<f64>>,
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|x| *x == 0.0)
}

fn solve_adjoint(f: &mut Factorization, rhs: Vec<f64>) -> Result<Vec<f64>> {
    if is_zero(&rhs) {
        Ok(rhs)
    } else {
        f.solve_transpose(&rhs)
    }
}

fn sub_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x -= y);
}

fn negated(v: Option<&Vec<f64>>, n: usize) -> Vec<f64> {
    v.map_or_else(|| vec![0.0; n], |v| v.iter().map(|x| -x).collect())
}

/// Indicator adjoints from the flow adjoints of every state.
fn indicator_adjoints(
    physics: &Physics,
    fwd: &ForwardState,
    flows: &[&[Vec<f64>]],
) -> Result<Vec<Option<Vec<f64>>>> {
    let Some(psi) = fwd.psi.as_deref() else {
        return Ok(vec![None; flows.len()]);
    };
    let sys = physics.flow_system(&fwd.disc, Some(psi));
    let ind = physics.indicator_system(&fwd.disc);
    let (_, j) = ind.assemble(psi, &TimeLevel::steady())?;
    let mut fact: Option<Factorization> = None;
    let mut rhs = vec![vec![0.0; fwd.disc.num_blocks]; flows.len()];
    for (n, u) in fwd.flow.states.iter().enumerate() {
        if flows.iter().all(|l| l[n].is_empty() || is_zero(&l[n])) {
            continue;
        }
        let jp = sys.indicator_jacobian(u)?;
        for (r, l) in rhs.iter_mut().zip(flows) {
            if !l[n].is_empty() {
                sub_assign(r, &jp.transpose_matvec(&l[n]));
            }
        }
    }
    rhs.into_iter()
        .map(|r| {
            if is_zero(&r) {
                return Ok(Some(r));
            }
            if fact.is_none() {
                fact = Some(Factorization::new(&j, &physics.solve.linear)?);
            }
            Ok(Some(fact.as_mut().unwrap().solve_transpose(&r)?))
        })
        .collect()
}

/// Adjoints of a steady forward solution, one per source.
pub fn adjoint_steady(physics: &Physics, fwd: &ForwardState, sources: &[StateSource]) -> Result<Vec<Adjoint>> {
    let disc = &fwd.disc;
    let u = fwd.final_flow();
    let steady = TimeLevel::steady();
    let last = fwd.flow.states.len() - 1;
    let nu = FIELDS * disc.num_blocks;
    let mut out: Vec<Adjoint> = sources
        .iter()
        .map(|_| Adjoint { flow: vec![Vec::new(); fwd.flow.states.len()], ..Default::default() })
        .collect();
    let mut flow_rhs: Vec<Vec<f64>> = sources.iter().map(|s| negated(s.flow[last].as_ref(), nu)).collect();
    if let (Some(ss), Some(c)) = (physics.species_system(disc, u), fwd.species.as_deref()) {
        let (_, jc) = ss.assemble(c, &steady)?;
        let jcu = ss.velocity_jacobian(c, &steady)?;
        let mut fact = Factorization::new(&jc, &physics.solve.linear)?;
        for ((s, a), r) in sources.iter().zip(&mut out).zip(&mut flow_rhs) {
            let lc = solve_adjoint(&mut fact, negated(s.species.as_ref(), disc.num_blocks))?;
            if !is_zero(&lc) {
                sub_assign(r, &jcu.transpose_matvec(&lc));
            }
            a.species = Some(lc);
        }
    }
    let sys = physics.flow_system(disc, fwd.psi.as_deref());
    if flow_rhs.iter().any(|r| !is_zero(r)) {
        let (_, j) = sys.assemble(u, &steady, Linearization::Exact, Terms::ALL)?;
        let mut fact = Factorization::new(&j, &physics.solve.linear)?;
        for (a, r) in out.iter_mut().zip(flow_rhs) {
            a.flow[last] = solve_adjoint(&mut fact, r)?;
        }
    } else {
        for a in &mut out {
            a.flow[last] = vec![0.0; nu];
        }
    }
    let flows: Vec<&[Vec<f64>]> = out.iter().map(|a| a.flow.as_slice()).collect();
    let ind = indicator_adjoints(physics, fwd, &flows)?;
    for (a, l) in out.iter_mut().zip(ind) {
        a.indicator = l;
    }
    Ok(out)
}

/// Adjoints of a BDF2 history, swept backward in time; the Jacobian of every
/// step is factorized once and shared by all sources.
pub fn adjoint_transient(physics: &Physics, fwd: &ForwardState, sources: &[StateSource]) -> Result<Vec<Adjoint>> {
    let hist = &fwd.flow;
    let steps = hist.states.len().saturating_sub(1);
    if steps == 0 || hist.times.len() != hist.states.len() {
        return Err(Error::Internal("transient adjoint needs the full forward history".into()));
    }
    if sources.iter().any(|s| s.flow.len() != hist.states.len()) {
        return Err(Error::Internal("adjoint source does not match the stored history".into()));
    }
    let dt = physics.solve.dt;
    let nu = FIELDS * fwd.disc.num_blocks;
    let sys = physics.flow_system(&fwd.disc, fwd.psi.as_deref());
    let mut out: Vec<Adjoint> = sources
        .iter()
        .map(|_| Adjoint { flow: vec![Vec::new(); hist.states.len()], ..Default::default() })
        .collect();
    // (Mᵐ)ᵀλᵐ for the two later steps, per source
    let mut later: Vec<[Option<Vec<f64>>; 2]> = vec![[None, None]; sources.len()];
    let mut buf = Vec::new();
    for n in (1..=steps).rev() {
        let level = physics.time_level(hist, n, &mut buf);
        let rhs: Vec<Vec<f64>> = sources
            .iter()
            .zip(&later)
            .map(|(s, l)| {
                let mut r = negated(s.flow[n].as_ref(), nu);
                if let Some(p) = &l[0] {
                    r.iter_mut().zip(p).for_each(|(x, y)| *x += 2.0 / dt * y);
                }
                if let Some(p) = &l[1] {
                    r.iter_mut().zip(p).for_each(|(x, y)| *x -= 0.5 / dt * y);
                }
                r
            })
            .collect();
        let lams: Vec<Vec<f64>> = if rhs.iter().all(|r| is_zero(r)) {
            rhs
        } else {
            let (_, j) = sys.assemble(&hist.states[n], &level, Linearization::Exact, Terms::ALL)?;
            let mut fact = Factorization::new(&j, &physics.solve.linear)
                .map_err(|e| Error::TimeStep { step: n, source: Box::new(e) })?;
            rhs.into_iter().map(|r| solve_adjoint(&mut fact, r)).collect::<Result<_>>()?
        };
        // Step n couples to earlier states through its rate only for n >= 2.
        let m = if n >= 2 && lams.iter().any(|l| !is_zero(l)) {
            Some(sys.rate_jacobian(&hist.states[n], &level)?)
        } else {
            None
        };
        for ((a, l), lam) in out.iter_mut().zip(&mut later).zip(lams) {
            let p = match &m {
                Some(m) if !is_zero(&lam) => Some(m.transpose_matvec(&lam)),
                _ => None,
            };
            l[1] = l[0].take();
            l[0] = p;
            a.flow[n] = lam;
        }
    }
    let flows: Vec<&[Vec<f64>]> = out.iter().map(|a| a.flow.as_slice()).collect();
    let ind = indicator_adjoints(physics, fwd, &flows)?;
    for (a, l) in out.iter_mut().zip(ind) {
        a.indicator = l;
    }
    Ok(out)
}

/// `dF/dφ` of every function from its adjoints and explicit geometric part.
pub fn geometric_gradients(
    physics: &Physics,
    fwd: &ForwardState,
    recuts: &RecutSet,
    adjoints: &[Adjoint],
    explicit: Vec<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    let disc = &fwd.disc;
    let nu = FIELDS * disc.num_blocks;
    let mut grads = explicit;
    let sys = physics.flow_system(disc, fwd.psi.as_deref());
    let mut buf = Vec::new();
    for (n, u) in fwd.flow.states.iter().enumerate() {
        if adjoints.iter().all(|a| a.flow[n].is_empty() || is_zero(&a.flow[n])) {
            continue;
        }
        let level = physics.time_level(&fwd.flow, n, &mut buf);
        let dr = recuts.residual_jacobian(nu, |cells| sys.cells_residual(cells, u, &level));
        for (g, a) in grads.iter_mut().zip(adjoints) {
            if !a.flow[n].is_empty() {
                g.iter_mut().zip(dr.transpose_matvec(&a.flow[n])).for_each(|(x, y)| *x += y);
            }
        }
    }
    if let (Some(ss), Some(c)) = (physics.species_system(disc, fwd.final_flow()), fwd.species.as_deref()) {
        if adjoints.iter().any(|a| a.species.as_ref().is_some_and(|l| !is_zero(l))) {
            let steady = TimeLevel::steady();
            let dr = recuts.residual_jacobian(disc.num_blocks, |cells| ss.cells_residual(cells, c, &steady));
            for (g, a) in grads.iter_mut().zip(adjoints) {
                if let Some(l) = &a.species {
                    g.iter_mut().zip(dr.transpose_matvec(l)).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    if let Some(psi) = fwd.psi.as_deref() {
        if adjoints.iter().any(|a| a.indicator.as_ref().is_some_and(|l| !is_zero(l))) {
            let ind = physics.indicator_system(disc);
            let steady = TimeLevel::steady();
            let dr = recuts.residual_jacobian(disc.num_blocks, |cells| ind.cells_residual(cells, psi, &steady));
            for (g, a) in grads.iter_mut().zip(adjoints) {
                if let Some(l) = &a.indicator {
                    g.iter_mut().zip(dr.transpose_matvec(l)).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    Ok(grads)
}

/// Values and level-set gradients of criteria and of weighted combinations
/// of them.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub values: Vec<f64>,
    /// `dF/dφ` for each weight row.
    pub phi: Vec<Vec<f64>>,
    pub flagged: Vec<(usize, usize)>,
}

/// Gradients of the functions `F_f = Σ_k weights[f][k] C_k` with respect to
/// the nodal level set.
pub fn design_gradients(
    physics: &Physics,
    criteria: &[Criterion],
    fwd: &ForwardState,
    weights: &[Vec<f64>],
) -> Result<Gradients> {
    if weights.iter().any(|w| w.len() != criteria.len()) {
        return Err(Error::Argument("one weight per criterion is required".into()));
    }
    let recuts = RecutSet::build(physics, fwd)?;
    let partials: Vec<CriterionPartials> =
        criteria.iter().map(|c| criterion_partials(physics, c, fwd, &recuts)).collect::<Result<_>>()?;
    let nstates = fwd.flow.states.len();
    let nu = FIELDS * fwd.disc.num_blocks;
    let mut sources = Vec::with_capacity(weights.len());
    let mut explicit = Vec::with_capacity(weights.len());
    for w in weights {
        let mut flow: Vec<Option<Vec<f64>>> = vec![None; nstates];
        let mut species: Option<Vec<f64>> = None;
        let mut phi = vec![0.0; recuts.num_nodes];
        for (p, &wk) in partials.iter().zip(w) {
            if wk == 0.0 {
                continue;
            }
            for (acc, d) in flow.iter_mut().zip(&p.flow) {
                if let Some(d) = d {
                    let a = acc.get_or_insert_with(|| vec![0.0; nu]);
                    a.iter_mut().zip(d).for_each(|(x, y)| *x += wk * y);
                }
            }
            if let Some(d) = &p.species {
                let a = species.get_or_insert_with(|| vec![0.0; d.len()]);
                a.iter_mut().zip(d).for_each(|(x, y)| *x += wk * y);
            }
            phi.iter_mut().zip(&p.phi).for_each(|(x, y)| *x += wk * y);
        }
        sources.push(StateSource { flow, species });
        explicit.push(phi);
    }
    let adjoints = match physics.solve.scheme {
        Scheme::Steady => adjoint_steady(physics, fwd, &sources)?,
        Scheme::Bdf2 => adjoint_transient(physics, fwd, &sources)?,
    };
    let phi = geometric_gradients(physics, fwd, &recuts, &adjoints, explicit)?;
    Ok(Gradients { values: partials.iter().map(|p| p.value).collect(), phi, flagged: recuts.flagged })
}

/// `dF/ds = (∂φ/∂s)ᵀ dF/dφ`.
pub fn total_derivative(level_set_jacobian: &CsrMatrix, dphi: &[f64]) -> Vec<f64> {
    level_set_jacobian.transpose_matvec(dphi)
}

/// One line of a gradient-check report.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub function: String,
    pub variable: usize,
    pub analytic: f64,
    pub finite_difference: f64,
}

impl GradientCheck {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.finite_difference.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.finite_difference).abs() / scale
        }
    }
}

pub fn write_gradient_check_csv<W: std::io::Write>(rows: &[GradientCheck], mut w: W) -> std::io::Result<()> {
    writeln!(w, "function,variable,analytic,finite_difference,relative_error")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.17e},{:.17e},{:.6e}",
            r.function,
            r.variable,
            r.analytic,
            r.finite_difference,
            r.relative_error()
        )?;
    }
    Ok(())
}
