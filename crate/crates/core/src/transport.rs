//! Scalar fields on the fluid domain: species advection-diffusion and the
//! auxiliary indicator field that flags isolated fluid regions.
//!
//! Both share one kernel (diffusion, optional advection with SUPG, optional
//! reaction, Nitsche Dirichlet, Neumann flux, ghost penalty). Dof layout: one
//! value per enrichment block.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{BoundarySpec, ScalarCondition};
use crate::discretization::{Cell, Discretization, GhostPair};
use crate::error::{Error, Result};
use crate::flow::{TimeLevel, FIELDS};
use crate::linalg::{linear_solve, CsrMatrix, LinearSolverConfig, TripletBuilder};
use crate::real::{Dual, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportParams {
    pub diffusivity: f64,
    pub nitsche_penalty: f64,
    pub ghost_penalty: f64,
    pub source: f64,
    /// Prescribed flux on the fluid-solid interface (zero: adiabatic).
    pub interface_flux: f64,
    pub stabilization: bool,
}

impl Default for TransportParams {
    fn default() -> Self {
        Self {
            diffusivity: 0.001,
            nitsche_penalty: 1.0,
            ghost_penalty: 0.05,
            source: 0.0,
            interface_flux: 0.0,
            stabilization: true,
        }
    }
}

impl TransportParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.diffusivity > 0.0) {
            return Err(Error::Config("diffusivity must be positive".into()));
        }
        if !(self.nitsche_penalty >= 0.0 && self.ghost_penalty >= 0.0) {
            return Err(Error::Config("transport penalty constants must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Smooth-Heaviside projection of the indicator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub sharpness: f64,
    pub threshold: f64,
    pub reference: f64,
}

impl Projection {
    pub fn project(&self, psi: f64) -> f64 {
        0.5 + 0.5 * (self.sharpness * (psi - self.threshold * self.reference)).tanh()
    }

    pub fn derivative(&self, psi: f64) -> f64 {
        let t = (self.sharpness * (psi - self.threshold * self.reference)).tanh();
        0.5 * self.sharpness * (1.0 - t * t)
    }
}

pub fn project_indicator(psi: &[f64], projection: &Projection) -> Vec<f64> {
    psi.iter().map(|&v| projection.project(v)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorParams {
    /// Reaction coefficient `h_ψ`.
    pub reaction: f64,
    /// Reference value `ψ_∞`.
    pub reference: f64,
    pub nitsche_penalty: f64,
    pub ghost_penalty: f64,
    /// Projection sharpness `k_w`.
    pub sharpness: f64,
    /// Projection threshold factor `k_t`.
    pub threshold: f64,
}

impl Default for IndicatorParams {
    fn default() -> Self {
        Self {
            reaction: 0.01,
            reference: 1.0,
            nitsche_penalty: 1.0,
            ghost_penalty: 0.05,
            sharpness: 1000.0,
            threshold: 0.99,
        }
    }
}

impl IndicatorParams {
    pub fn projection(&self) -> Projection {
        Projection { sharpness: self.sharpness, threshold: self.threshold, reference: self.reference }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reaction > 0.0 && self.sharpness > 0.0 && self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(
                "indicator needs reaction > 0, sharpness > 0 and 0 < threshold < 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarKind {
    Species,
    Indicator,
}

/// Assembled scalar transport problem.
#[derive(Clone)]
pub struct ScalarSystem<'a> {
    pub disc: &'a Discretization,
    pub bcs: &'a BoundarySpec,
    pub kind: ScalarKind,
    pub diffusivity: f64,
    /// `(coefficient, reference)` of a reaction term `coefficient · (c − reference)`.
    pub reaction: Option<(f64, f64)>,
    pub source: f64,
    pub interface_flux: f64,
    pub nitsche_penalty: f64,
    pub ghost_penalty: f64,
    pub stabilization: bool,
    /// Advecting flow state (flow dof layout).
    pub velocity: Option<&'a [f64]>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Seed {
    State,
    Velocity,
    Rate,
}

struct Local<const N: usize> {
    dofs: [usize; N],
    res: [f64; N],
    jac: Option<Box<[[f64; N]; N]>>,
}

impl<'a> ScalarSystem<'a> {
    pub fn species(
        disc: &'a Discretization,
        bcs: &'a BoundarySpec,
        params: &TransportParams,
        velocity: Option<&'a [f64]>,
    ) -> Self {
        Self {
            disc,
            bcs,
            kind: ScalarKind::Species,
            diffusivity: params.diffusivity,
            reaction: None,
            source: params.source,
            interface_flux: params.interface_flux,
            nitsche_penalty: params.nitsche_penalty,
            ghost_penalty: params.ghost_penalty,
            stabilization: params.stabilization,
            velocity,
        }
    }

    pub fn indicator(disc: &'a Discretization, bcs: &'a BoundarySpec, params: &IndicatorParams) -> Self {
        Self {
            disc,
            bcs,
            kind: ScalarKind::Indicator,
            diffusivity: 1.0,
            reaction: Some((params.reaction, params.reference)),
            source: 0.0,
            interface_flux: 0.0,
            nitsche_penalty: params.nitsche_penalty,
            ghost_penalty: params.ghost_penalty,
            stabilization: false,
            velocity: None,
        }
    }

    pub fn num_dofs(&self) -> usize {
        self.disc.num_blocks
    }

    fn condition(&self, side: crate::grid::Side, x: crate::grid::Point) -> Option<ScalarCondition> {
        match self.kind {
            ScalarKind::Species => self.bcs.species_bc(side, x),
            ScalarKind::Indicator => {
                self.bcs.is_port(side, x).then_some(ScalarCondition::Concentration { value: 0.0 })
            }
        }
    }

    /// Residual and Jacobian with respect to the scalar (including the `a0`
    /// rate coupling).
    pub fn assemble(&self, c: &[f64], time: &TimeLevel) -> Result<(Vec<f64>, CsrMatrix)> {
        let (r, j) = self.assemble_impl(c, time, Some(Seed::State))?;
        Ok((r, j.expect("jacobian requested")))
    }

    pub fn residual(&self, c: &[f64], time: &TimeLevel) -> Result<Vec<f64>> {
        Ok(self.assemble_impl(c, time, None)?.0)
    }

    /// `∂R/∂u` with columns in the flow dof layout.
    pub fn velocity_jacobian(&self, c: &[f64], time: &TimeLevel) -> Result<CsrMatrix> {
        let (_, j) = self.assemble_impl(c, time, Some(Seed::Velocity))?;
        Ok(j.expect("jacobian requested"))
    }

    pub fn rate_jacobian(&self, c: &[f64], time: &TimeLevel) -> Result<CsrMatrix> {
        let (_, j) = self.assemble_impl(c, time, Some(Seed::Rate))?;
        Ok(j.expect("jacobian requested"))
    }

    fn assemble_impl(&self, c: &[f64], time: &TimeLevel, seed: Option<Seed>) -> Result<(Vec<f64>, Option<CsrMatrix>)> {
        let n = self.num_dofs();
        if c.len() != n {
            return Err(Error::Argument(format!("scalar state has {} entries, expected {n}", c.len())));
        }
        if let Some(v) = self.velocity {
            if v.len() != FIELDS * n {
                return Err(Error::Argument("velocity state does not match the discretization".into()));
            }
        }
        let cells: Vec<Local<12>> = self.disc.cells.par_iter().map(|cell| self.cell_local(cell, c, time, seed)).collect();
        let ghosts: Vec<Local<8>> = if matches!(seed, None | Some(Seed::State)) && self.ghost_penalty > 0.0 {
            self.disc.ghosts.par_iter().map(|g| self.ghost_local(g, c, seed.is_some())).collect()
        } else {
            Vec::new()
        };
        let ncols = if seed == Some(Seed::Velocity) { FIELDS * n } else { n };
        let mut r = vec![0.0; n];
        let mut tb = seed.map(|_| TripletBuilder::with_capacity(n, ncols, cells.len() * 48 + ghosts.len() * 64));
        for l in &cells {
            for k in 0..4 {
                r[l.dofs[k]] += l.res[k];
            }
            if let (Some(tb), Some(j)) = (tb.as_mut(), &l.jac) {
                for k in 0..4 {
                    for m in 0..12 {
                        if j[k][m] != 0.0 {
                            tb.add(l.dofs[k], l.dofs[m], j[k][m]);
                        }
                    }
                }
            }
        }
        for l in &ghosts {
            for k in 0..8 {
                r[l.dofs[k]] += l.res[k];
            }
            if let (Some(tb), Some(j)) = (tb.as_mut(), &l.jac) {
                for k in 0..8 {
                    for m in 0..8 {
                        if j[k][m] != 0.0 {
                            tb.add(l.dofs[k], l.dofs[m], j[k][m]);
                        }
                    }
                }
            }
        }
        Ok((r, tb.map(|t| t.build())))
    }

    fn cell_local(&self, cell: &Cell, c: &[f64], time: &TimeLevel, seed: Option<Seed>) -> Local<12> {
        let b = cell.blocks;
        let cv: [f64; 4] = std::array::from_fn(|a| c[b[a]]);
        let ct: [f64; 4] = std::array::from_fn(|a| time.a0 * c[b[a]] + time.history.map_or(0.0, |h| h[b[a]]));
        let vel: [[f64; 2]; 4] =
            std::array::from_fn(|a| std::array::from_fn(|i| self.velocity.map_or(0.0, |u| u[FIELDS * b[a] + i])));
        // Columns: scalar dofs for state/rate seeds, flow dofs (first 4 unused) for velocity.
        let mut dofs = [0usize; 12];
        for a in 0..4 {
            dofs[a] = b[a];
            dofs[4 + 2 * a] = FIELDS * b[a];
            dofs[5 + 2 * a] = FIELDS * b[a] + 1;
        }
        match seed {
            None => {
                let out = self.cell_kernel(cell, &cv, &ct, &vel, time);
                let mut res = [0.0; 12];
                res[..4].copy_from_slice(&out);
                Local { dofs, res, jac: None }
            }
            Some(s) => {
                let cd: [Dual<12>; 4] = std::array::from_fn(|a| match s {
                    Seed::State => Dual::var(cv[a], a),
                    _ => Dual::constant(cv[a]),
                });
                let ctd: [Dual<12>; 4] = std::array::from_fn(|a| match s {
                    Seed::State => {
                        let mut d = Dual::var(ct[a], a);
                        d.d[a] = time.a0;
                        d
                    }
                    Seed::Rate => Dual::var(ct[a], a),
                    Seed::Velocity => Dual::constant(ct[a]),
                });
                let vd: [[Dual<12>; 2]; 4] = std::array::from_fn(|a| {
                    std::array::from_fn(|i| match s {
                        Seed::Velocity => Dual::var(vel[a][i], 4 + 2 * a + i),
                        _ => Dual::constant(vel[a][i]),
                    })
                });
                let out = self.cell_kernel(cell, &cd, &ctd, &vd, time);
                let mut res = [0.0; 12];
                let mut jac = Box::new([[0.0; 12]; 12]);
                for k in 0..4 {
                    res[k] = out[k].v;
                    jac[k] = out[k].d;
                }
                if s != Seed::Velocity {
                    // Scalar columns only.
                    for row in jac.iter_mut() {
                        for v in row[4..].iter_mut() {
                            *v = 0.0;
                        }
                    }
                } else {
                    for row in jac.iter_mut() {
                        for v in row[..4].iter_mut() {
                            *v = 0.0;
                        }
                    }
                }
                Local { dofs, res, jac: Some(jac) }
            }
        }
    }

    /// Contributions of a set of cells as `(global dof, value)` pairs.
    pub fn cells_residual(&self, cells: &[Cell], c: &[f64], time: &TimeLevel) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(4 * cells.len());
        for cell in cells {
            let l = self.cell_local(cell, c, time, None);
            out.extend(l.dofs[..4].iter().copied().zip(l.res[..4].iter().copied()));
        }
        out
    }

    fn cell_kernel<T: Real>(
        &self,
        cell: &Cell,
        c: &[T; 4],
        ct: &[T; 4],
        vel: &[[T; 2]; 4],
        time: &TimeLevel,
    ) -> [T; 4] {
        let k = self.diffusivity;
        let h = cell.h;
        let mut r = [T::zero(); 4];
        let ux: [T; 4] = std::array::from_fn(|a| vel[a][0]);
        let uy: [T; 4] = std::array::from_fn(|a| vel[a][1]);
        let advect = self.velocity.is_some();
        let inv_dt2 = time.dt.map_or(0.0, |dt| (2.0 / dt).powi(2));
        let diff_tau = (4.0 * k / (h * h)).powi(2);
        for q in &cell.volume {
            let w = q.w;
            let cv = q.interp(c);
            let gc = q.grad(c);
            let rate = q.interp(ct);
            let u = [q.interp(&ux), q.interp(&uy)];
            let conv = if advect { u[0] * gc[0] + u[1] * gc[1] } else { T::zero() };
            let mut strong = rate + conv - self.source;
            if let Some((coef, reference)) = self.reaction {
                strong += (cv - reference) * coef;
            }
            for a in 0..4 {
                let dn = q.dn[a];
                r[a] += (strong * q.n[a] + (gc[0] * dn[0] + gc[1] * dn[1]) * k) * w;
            }
            if self.stabilization && advect {
                let tau = ((u[0] * u[0] + u[1] * u[1]) * (4.0 / (h * h)) + inv_dt2 + diff_tau).powf(-0.5);
                for a in 0..4 {
                    let dn = q.dn[a];
                    r[a] += (u[0] * dn[0] + u[1] * dn[1]) * tau * strong * w;
                }
            }
        }
        if self.interface_flux != 0.0 {
            for s in &cell.interface {
                for a in 0..4 {
                    r[a] -= T::cst(s.basis.n[a] * self.interface_flux * s.basis.w);
                }
            }
        }
        for (side, s) in &cell.boundary {
            let bq = &s.basis;
            match self.condition(*side, bq.x) {
                Some(ScalarCondition::Concentration { value }) => {
                    let n = s.normal;
                    let cv = bq.interp(c);
                    let gc = bq.grad(c);
                    let flux = (gc[0] * n[0] + gc[1] * n[1]) * k;
                    let d = cv - value;
                    let pen = self.nitsche_penalty / h;
                    for a in 0..4 {
                        let dnn = bq.dn[a][0] * n[0] + bq.dn[a][1] * n[1];
                        r[a] += (-flux * bq.n[a] + d * (k * dnn) + d * (pen * bq.n[a])) * bq.w;
                    }
                }
                Some(ScalarCondition::Flux { value }) => {
                    for a in 0..4 {
                        r[a] -= T::cst(bq.n[a] * value * bq.w);
                    }
                }
                None => {}
            }
        }
        r
    }

    fn ghost_local(&self, g: &GhostPair, c: &[f64], jac: bool) -> Local<8> {
        let cells = [&self.disc.cells[g.cells[0]], &self.disc.cells[g.cells[1]]];
        let dofs: [usize; 8] = std::array::from_fn(|k| cells[k / 4].blocks[k % 4]);
        if jac {
            let v: [Dual<8>; 8] = std::array::from_fn(|k| Dual::var(c[dofs[k]], k));
            let out = self.ghost_kernel(g, &v);
            Local {
                dofs,
                res: std::array::from_fn(|k| out[k].v),
                jac: Some(Box::new(std::array::from_fn(|k| out[k].d))),
            }
        } else {
            let v: [f64; 8] = std::array::from_fn(|k| c[dofs[k]]);
            Local { dofs, res: self.ghost_kernel(g, &v), jac: None }
        }
    }

    fn ghost_kernel<T: Real>(&self, g: &GhostPair, v: &[T; 8]) -> [T; 8] {
        let gamma = self.ghost_penalty * g.h * self.diffusivity;
        let n = g.normal;
        let mut r = [T::zero(); 8];
        for q in &g.points {
            let dn1: [f64; 4] = std::array::from_fn(|a| q.dn1[a][0] * n[0] + q.dn1[a][1] * n[1]);
            let dn2: [f64; 4] = std::array::from_fn(|a| q.dn2[a][0] * n[0] + q.dn2[a][1] * n[1]);
            let mut jump = T::zero();
            for a in 0..4 {
                jump += v[a] * dn1[a] - v[4 + a] * dn2[a];
            }
            let t = jump * (gamma * q.w);
            for a in 0..4 {
                r[a] += t * dn1[a];
                r[4 + a] -= t * dn2[a];
            }
        }
        r
    }
}

/// Single linear solve for the nodal indicator field.
pub fn solve_indicator(
    disc: &Discretization,
    bcs: &BoundarySpec,
    params: &IndicatorParams,
    linear: &LinearSolverConfig,
) -> Result<Vec<f64>> {
    let sys = ScalarSystem::indicator(disc, bcs, params);
    let n = sys.num_dofs();
    if n == 0 {
        return Ok(Vec::new());
    }
    let zero = vec![0.0; n];
    let (r, j) = sys.assemble(&zero, &TimeLevel::steady())?;
    let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
    linear_solve(&j, &rhs, linear).map_err(|e| Error::Internal(format!("indicator system: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let p = IndicatorParams::default().projection();
        assert!((p.project(1.0) - (0.5 + 0.5 * 10f64.tanh())).abs() < 1e-15);
        assert!(1.0 - p.project(1.0) < 3e-9);
        assert_eq!(p.project(0.0), 0.0);
        assert_eq!(p.project(0.99), 0.5);
        let eps = 1e-7;
        let fd = (p.project(0.991 + eps) - p.project(0.991 - eps)) / (2.0 * eps);
        assert!((fd - p.derivative(0.991)).abs() < 1e-4 * fd.abs());
    }

    use crate::boundary::{BoundaryRegion, FlowCondition, Profile};
    use crate::cutter::CutModel;
    use crate::grid::{build_mesh, Side};
    use crate::quadrature::QuadratureConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc(n: usize, phi: impl Fn([f64; 2]) -> f64) -> Discretization {
        let mesh = build_mesh([0.0, 0.0], [1.0, 1.0], [n, n]).unwrap();
        let phi: Vec<f64> = mesh.nodes.iter().map(|&x| phi(x)).collect();
        CutModel::build(&mesh, &phi).unwrap().discretize(&mesh, &QuadratureConfig::default()).unwrap()
    }

    fn hole(x: [f64; 2]) -> f64 {
        0.23 - ((x[0] - 0.51).powi(2) + (x[1] - 0.47).powi(2)).sqrt()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn ports() -> BoundarySpec {
        let region = |name: &str, side, c| BoundaryRegion {
            name: name.into(),
            side,
            range: None,
            flow: FlowCondition::Velocity { profile: Profile::Zero },
            port: true,
            species: Some(c),
        };
        BoundarySpec {
            regions: vec![
                region("in", Side::Left, ScalarCondition::Concentration { value: 1.0 }),
                region("out", Side::Right, ScalarCondition::Flux { value: 0.2 }),
            ],
        }
    }

    #[test]
    fn species_jacobians_match_finite_differences() {
        let d = disc(5, hole);
        let bcs = ports();
        let params = TransportParams { diffusivity: 0.05, source: 0.3, interface_flux: 0.1, ..Default::default() };
        let u = random(FIELDS * d.num_blocks, 1);
        let c = random(d.num_blocks, 2);
        let hist = random(d.num_blocks, 3);
        let time = TimeLevel { t: 0.0, dt: Some(0.1), a0: 15.0, history: Some(&hist) };
        let sys = ScalarSystem::species(&d, &bcs, &params, Some(&u));
        let (_, j) = sys.assemble(&c, &time).unwrap();
        let j = j.to_dense();
        let jv = sys.velocity_jacobian(&c, &time).unwrap().to_dense();
        let eps = 1e-6;
        for k in 0..c.len() {
            let mut cp = c.clone();
            cp[k] += eps;
            let mut cm = c.clone();
            cm[k] -= eps;
            let rp = sys.residual(&cp, &time).unwrap();
            let rm = sys.residual(&cm, &time).unwrap();
            for i in 0..c.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * eps);
                assert!((fd - j[(i, k)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
        for k in 0..u.len() {
            let mut up = u.clone();
            up[k] += eps;
            let mut um = u.clone();
            um[k] -= eps;
            let rp = ScalarSystem::species(&d, &bcs, &params, Some(&up)).residual(&c, &time).unwrap();
            let rm = ScalarSystem::species(&d, &bcs, &params, Some(&um)).residual(&c, &time).unwrap();
            for i in 0..c.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * eps);
                assert!((fd - jv[(i, k)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn constant_concentration_is_an_equilibrium() {
        let d = disc(8, hole);
        let mut bcs = ports();
        bcs.regions[1].species = None;
        let u = random(FIELDS * d.num_blocks, 4);
        let sys = ScalarSystem::species(&d, &bcs, &TransportParams::default(), Some(&u));
        let r = sys.residual(&vec![1.0; d.num_blocks], &TimeLevel::steady()).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn linear_profile_solves_pure_diffusion() {
        // c = x between c(0) = 0 and c(1) = 1 with insulated top and bottom.
        let d = disc(6, |_| -1.0);
        let mut bcs = ports();
        bcs.regions[0].species = Some(ScalarCondition::Concentration { value: 0.0 });
        bcs.regions[1].species = Some(ScalarCondition::Concentration { value: 1.0 });
        let params = TransportParams { diffusivity: 0.7, ..Default::default() };
        let sys = ScalarSystem::species(&d, &bcs, &params, None);
        let (r, j) = sys.assemble(&vec![0.0; d.num_blocks], &TimeLevel::steady()).unwrap();
        let c = linear_solve(&j, &r.iter().map(|v| -v).collect::<Vec<_>>(), &LinearSolverConfig::default()).unwrap();
        let mesh = build_mesh([0.0, 0.0], [1.0, 1.0], [6, 6]).unwrap();
        for (b, &node) in d.block_node.iter().enumerate() {
            assert!((c[b] - mesh.nodes[node][0]).abs() < 1e-10);
        }
    }

    #[test]
    fn indicator_flags_isolated_puddle() {
        // Open channel along the bottom, closed box in the upper right.
        let n = 20;
        let phi = |x: [f64; 2]| {
            let channel = x[1] - 0.31;
            let puddle = ((x[0] - 0.7).powi(2) + (x[1] - 0.7).powi(2)).sqrt() - 0.12;
            channel.min(puddle)
        };
        let d = disc(n, phi);
        let bcs = ports();
        let params = IndicatorParams::default();
        let psi = solve_indicator(&d, &bcs, &params, &LinearSolverConfig::default()).unwrap();
        let proj = params.projection();
        let mesh = build_mesh([0.0, 0.0], [1.0, 1.0], [n, n]).unwrap();
        for (b, &node) in d.block_node.iter().enumerate() {
            let x = mesh.nodes[node];
            if x[1] > 0.5 {
                assert!((psi[b] - 1.0).abs() < 1e-9, "puddle node {x:?}: {}", psi[b]);
                assert!(proj.project(psi[b]) > 0.999);
            } else {
                assert!(psi[b] < 0.5, "channel node {x:?}: {}", psi[b]);
                assert!(proj.project(psi[b]) < 1e-6);
            }
        }
    }
}
