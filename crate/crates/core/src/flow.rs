//! Stabilized incompressible Navier-Stokes residual and Jacobian on a cut
//! discretization.
//!
//! Every contribution is written once as a kernel generic over [`Real`]; the
//! Jacobian comes from evaluating the same kernel with dual numbers seeded on
//! the local dofs. Dof layout: `3 * block + component`, components
//! `(u_x, u_y, p)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{BoundarySpec, FlowBc, VectorFn};
use crate::discretization::{Basis, Cell, Discretization, GhostPair, SurfacePoint};
use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, TripletBuilder};
use crate::real::{Dual, Real};
use crate::transport::Projection;

pub const FIELDS: usize = 3;

/// Where the average-pressure penalty acts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScope {
    /// Only in isolated fluid regions flagged by the projected indicator.
    Indicator,
    /// Everywhere in the fluid (for comparison studies).
    Domain,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub density: f64,
    pub viscosity: f64,
    pub nitsche_penalty: f64,
    pub ghost_viscous: f64,
    pub ghost_pressure: f64,
    pub ghost_convective: f64,
    pub pressure_penalty: f64,
    pub penalty_scope: PenaltyScope,
    /// SUPG/PSPG terms.
    pub stabilization: bool,
    /// Convective terms; off gives the Stokes equations.
    pub convection: bool,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            density: 1.0,
            viscosity: 1.0,
            nitsche_penalty: 100.0,
            ghost_viscous: 0.05,
            ghost_pressure: 0.005,
            ghost_convective: 0.05,
            pressure_penalty: 1.0,
            penalty_scope: PenaltyScope::Indicator,
            stabilization: true,
            convection: true,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.viscosity > 0.0) {
            return Err(Error::Config("density and viscosity must be positive".into()));
        }
        let consts = [
            self.nitsche_penalty,
            self.ghost_viscous,
            self.ghost_pressure,
            self.ghost_convective,
            self.pressure_penalty,
        ];
        if consts.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Config("flow penalty constants must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Selection of residual contributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub galerkin: bool,
    pub stabilization: bool,
    pub nitsche: bool,
    pub neumann: bool,
    pub pressure_penalty: bool,
    pub ghost: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        galerkin: true,
        stabilization: true,
        nitsche: true,
        neumann: true,
        pressure_penalty: true,
        ghost: true,
    };
    pub const NONE: Terms = Terms {
        galerkin: false,
        stabilization: false,
        nitsche: false,
        neumann: false,
        pressure_penalty: false,
        ghost: false,
    };
}

/// Treatment of the velocity-dependent penalty coefficients in the Jacobian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Linearization {
    /// Coefficients held at their current values (Newton).
    Frozen,
    /// Full derivative (adjoint).
    Exact,
}

/// Time-discretization data for one residual evaluation: the rate is
/// `a0 * u + history`.
#[derive(Clone, Copy, Debug)]
pub struct TimeLevel<'a> {
    pub t: f64,
    pub dt: Option<f64>,
    pub a0: f64,
    pub history: Option<&'a [f64]>,
}

impl TimeLevel<'_> {
    pub fn steady() -> Self {
        TimeLevel { t: 0.0, dt: None, a0: 0.0, history: None }
    }
}

/// Indicator input of the pressure penalty.
#[derive(Clone, Copy, Debug)]
pub struct IndicatorInput<'a> {
    /// Nodal indicator values, one per dof block.
    pub psi: &'a [f64],
    pub projection: Projection,
}

#[derive(Clone)]
pub struct FlowSystem<'a> {
    pub disc: &'a Discretization,
    pub params: FlowParams,
    pub bcs: &'a BoundarySpec,
    pub body_force: Option<VectorFn>,
    pub indicator: Option<IndicatorInput<'a>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Seed {
    State,
    Rate,
}

struct Local<const N: usize> {
    dofs: [usize; N],
    res: [f64; N],
    jac: Option<Box<[[f64; N]; N]>>,
}

/// Local field values of one cell.
struct CellFields<T> {
    u: [[T; 3]; 4],
    ut: [[T; 2]; 4],
}

impl<'a> FlowSystem<'a> {
    pub fn new(disc: &'a Discretization, params: FlowParams, bcs: &'a BoundarySpec) -> Self {
        Self { disc, params, bcs, body_force: None, indicator: None }
    }

    pub fn num_dofs(&self) -> usize {
        FIELDS * self.disc.num_blocks
    }

    pub fn cell_dofs(cell: &Cell) -> [usize; 12] {
        std::array::from_fn(|k| FIELDS * cell.blocks[k / 3] + k % 3)
    }

    /// Projected indicator at the volume points of a cell.
    pub fn penalty_weights(&self, cell: &Cell) -> Vec<f64> {
        let scope = if self.params.pressure_penalty > 0.0 {
            self.params.penalty_scope
        } else {
            PenaltyScope::Off
        };
        match scope {
            PenaltyScope::Off => vec![0.0; cell.volume.len()],
            PenaltyScope::Domain => vec![1.0; cell.volume.len()],
            PenaltyScope::Indicator => match &self.indicator {
                None => vec![0.0; cell.volume.len()],
                Some(ind) => {
                    let vals: [f64; 4] = std::array::from_fn(|a| ind.psi[cell.blocks[a]]);
                    cell.volume.iter().map(|q| ind.projection.project(q.interp(&vals))).collect()
                }
            },
        }
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.num_dofs() {
            return Err(Error::Argument(format!(
                "flow state has {} entries, expected {}",
                u.len(),
                self.num_dofs()
            )));
        }
        Ok(())
    }

    fn cell_values(&self, cell: &Cell, u: &[f64], time: &TimeLevel) -> ([[f64; 3]; 4], [[f64; 2]; 4]) {
        let vals: [[f64; 3]; 4] = std::array::from_fn(|a| std::array::from_fn(|c| u[FIELDS * cell.blocks[a] + c]));
        let rates: [[f64; 2]; 4] = std::array::from_fn(|a| {
            std::array::from_fn(|c| {
                let i = FIELDS * cell.blocks[a] + c;
                time.a0 * u[i] + time.history.map_or(0.0, |h| h[i])
            })
        });
        (vals, rates)
    }

    /// Residual and Jacobian `∂R/∂u` (including the `a0` rate coupling).
    pub fn assemble(
        &self,
        u: &[f64],
        time: &TimeLevel,
        lin: Linearization,
        terms: Terms,
    ) -> Result<(Vec<f64>, CsrMatrix)> {
        let (r, j) = self.assemble_impl(u, time, lin, terms, Some(Seed::State))?;
        Ok((r, j.expect("jacobian requested")))
    }

    pub fn residual(&self, u: &[f64], time: &TimeLevel, terms: Terms) -> Result<Vec<f64>> {
        Ok(self.assemble_impl(u, time, Linearization::Frozen, terms, None)?.0)
    }

    /// Jacobian with respect to the rate `∂u/∂t`.
    pub fn rate_jacobian(&self, u: &[f64], time: &TimeLevel) -> Result<CsrMatrix> {
        let (_, j) = self.assemble_impl(u, time, Linearization::Exact, Terms::ALL, Some(Seed::Rate))?;
        Ok(j.expect("jacobian requested"))
    }

    fn assemble_impl(
        &self,
        u: &[f64],
        time: &TimeLevel,
        lin: Linearization,
        terms: Terms,
        seed: Option<Seed>,
    ) -> Result<(Vec<f64>, Option<CsrMatrix>)> {
        self.check_len(u)?;
        let n = self.num_dofs();
        let cells: Vec<Local<12>> = self
            .disc
            .cells
            .par_iter()
            .map(|cell| self.cell_local(cell, u, time, lin, terms, seed))
            .collect();
        let ghosts: Vec<Local<24>> = if terms.ghost && seed != Some(Seed::Rate) {
            self.disc.ghosts.par_iter().map(|g| self.ghost_local(g, u, lin, seed.is_some())).collect()
        } else {
            Vec::new()
        };
        let mut r = vec![0.0; n];
        let mut tb = seed.map(|_| TripletBuilder::with_capacity(n, n, cells.len() * 144 + ghosts.len() * 576));
        scatter(&cells, &mut r, tb.as_mut());
        scatter(&ghosts, &mut r, tb.as_mut());
        Ok((r, tb.map(|t| t.build())))
    }

    fn cell_local(
        &self,
        cell: &Cell,
        u: &[f64],
        time: &TimeLevel,
        lin: Linearization,
        terms: Terms,
        seed: Option<Seed>,
    ) -> Local<12> {
        let dofs = Self::cell_dofs(cell);
        let psi_bar = self.penalty_weights(cell);
        let (vals, rates) = self.cell_values(cell, u, time);
        match seed {
            None => {
                let f = CellFields { u: vals, ut: rates };
                let res = self.cell_kernel(cell, &f, &psi_bar, time, lin, terms);
                Local { dofs, res, jac: None }
            }
            Some(s) => {
                let f = CellFields::<Dual<12>> {
                    u: std::array::from_fn(|a| {
                        std::array::from_fn(|c| match s {
                            Seed::State => Dual::var(vals[a][c], 3 * a + c),
                            Seed::Rate => Dual::constant(vals[a][c]),
                        })
                    }),
                    ut: std::array::from_fn(|a| {
                        std::array::from_fn(|c| match s {
                            Seed::State => {
                                let mut d = Dual::var(rates[a][c], 3 * a + c);
                                d.d[3 * a + c] = time.a0;
                                d
                            }
                            Seed::Rate => Dual::var(rates[a][c], 3 * a + c),
                        })
                    }),
                };
                let out = self.cell_kernel(cell, &f, &psi_bar, time, lin, terms);
                split(dofs, out)
            }
        }
    }

    /// Contributions of a set of cells (e.g. a locally re-cut element) as
    /// `(global dof, value)` pairs.
    pub fn cells_residual(&self, cells: &[Cell], u: &[f64], time: &TimeLevel) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(12 * cells.len());
        for cell in cells {
            let l = self.cell_local(cell, u, time, Linearization::Frozen, Terms::ALL, None);
            out.extend(l.dofs.iter().copied().zip(l.res));
        }
        out
    }

    fn cell_kernel<T: Real>(
        &self,
        cell: &Cell,
        f: &CellFields<T>,
        psi_bar: &[f64],
        time: &TimeLevel,
        lin: Linearization,
        terms: Terms,
    ) -> [T; 12] {
        let p = &self.params;
        let (rho, mu) = (p.density, p.viscosity);
        let h = cell.h;
        let mut r = [T::zero(); 12];
        let comp = |c: usize| -> [T; 4] { std::array::from_fn(|a| f.u[a][c]) };
        let (ux, uy, pp) = (comp(0), comp(1), comp(2));
        let utx: [T; 4] = std::array::from_fn(|a| f.ut[a][0]);
        let uty: [T; 4] = std::array::from_fn(|a| f.ut[a][1]);
        let inv_dt2 = time.dt.map_or(0.0, |dt| (2.0 / dt).powi(2));
        let visc_tau = (4.0 * mu / rho / (h * h)).powi(2);

        if terms.galerkin || terms.stabilization || terms.pressure_penalty {
            for (qi, q) in cell.volume.iter().enumerate() {
                let w = q.w;
                let vel = [q.interp(&ux), q.interp(&uy)];
                let pr = q.interp(&pp);
                let gu = [q.grad(&ux), q.grad(&uy)];
                let gp = q.grad(&pp);
                let rate = [q.interp(&utx), q.interp(&uty)];
                let conv = if p.convection {
                    [vel[0] * gu[0][0] + vel[1] * gu[0][1], vel[0] * gu[1][0] + vel[1] * gu[1][1]]
                } else {
                    [T::zero(), T::zero()]
                };
                let force = self.body_force.as_ref().map_or([0.0, 0.0], |b| b(q.x, time.t));
                let inertia = [(rate[0] + conv[0]) * rho, (rate[1] + conv[1]) * rho];
                if terms.galerkin {
                    let shear = (gu[0][1] + gu[1][0]) * mu;
                    let sigma = [[gu[0][0] * (2.0 * mu) - pr, shear], [shear, gu[1][1] * (2.0 * mu) - pr]];
                    let div = gu[0][0] + gu[1][1];
                    for a in 0..4 {
                        let (na, dn) = (q.n[a], q.dn[a]);
                        for i in 0..2 {
                            r[3 * a + i] += (inertia[i] * na + sigma[i][0] * dn[0] + sigma[i][1] * dn[1]
                                - force[i] * na)
                                * w;
                        }
                        r[3 * a + 2] += div * (na * w);
                    }
                }
                if terms.pressure_penalty && psi_bar[qi] > 0.0 {
                    let kp = pr * (p.pressure_penalty * psi_bar[qi] * w);
                    for a in 0..4 {
                        r[3 * a + 2] += kp * q.n[a];
                    }
                }
                if terms.stabilization && p.stabilization {
                    let visc = [q.mixed(&uy) * mu, q.mixed(&ux) * mu];
                    let strong = [
                        inertia[0] + gp[0] - visc[0] - force[0],
                        inertia[1] + gp[1] - visc[1] - force[1],
                    ];
                    let speed2 = if p.convection {
                        vel[0] * vel[0] + vel[1] * vel[1]
                    } else {
                        T::zero()
                    };
                    let tau = (speed2 * (4.0 / (h * h)) + inv_dt2 + visc_tau).powf(-0.5);
                    for a in 0..4 {
                        let dn = q.dn[a];
                        if p.convection {
                            let adv = (vel[0] * dn[0] + vel[1] * dn[1]) * tau * w;
                            r[3 * a] += adv * strong[0];
                            r[3 * a + 1] += adv * strong[1];
                        }
                        r[3 * a + 2] += (strong[0] * dn[0] + strong[1] * dn[1]) * tau * (w / rho);
                    }
                }
            }
        }

        if terms.nitsche {
            for q in &cell.interface {
                self.dirichlet_point(&mut r, q, f, [0.0, 0.0], false, h, lin);
            }
        }
        if terms.nitsche || terms.neumann {
            for (side, q) in &cell.boundary {
                match self.bcs.flow_bc(*side, q.basis.x, time.t) {
                    FlowBc::Dirichlet(g) if terms.nitsche => self.dirichlet_point(&mut r, q, f, g, false, h, lin),
                    FlowBc::Symmetry if terms.nitsche => self.dirichlet_point(&mut r, q, f, [0.0, 0.0], true, h, lin),
                    FlowBc::Traction(t) if terms.neumann => {
                        let b = &q.basis;
                        for a in 0..4 {
                            r[3 * a] -= T::cst(b.n[a] * t[0] * b.w);
                            r[3 * a + 1] -= T::cst(b.n[a] * t[1] * b.w);
                        }
                    }
                    _ => {}
                }
            }
        }
        r
    }

    /// Nitsche terms at one surface point with prescribed velocity `g`; with
    /// `symmetry` only the normal component is enforced.
    #[allow(clippy::too_many_arguments)]
    fn dirichlet_point<T: Real>(
        &self,
        r: &mut [T; 12],
        q: &SurfacePoint,
        f: &CellFields<T>,
        g: [f64; 2],
        symmetry: bool,
        h: f64,
        lin: Linearization,
    ) {
        let (rho, mu) = (self.params.density, self.params.viscosity);
        let b: &Basis = &q.basis;
        let n = q.normal;
        let w = b.w;
        let comp = |c: usize| -> [T; 4] { std::array::from_fn(|a| f.u[a][c]) };
        let (ux, uy, pp) = (comp(0), comp(1), comp(2));
        let vel = [b.interp(&ux), b.interp(&uy)];
        let pr = b.interp(&pp);
        let gu = [b.grad(&ux), b.grad(&uy)];
        let mut d = [vel[0] - g[0], vel[1] - g[1]];
        let mut sn = [
            -pr * n[0] + ((gu[0][0] + gu[0][0]) * n[0] + (gu[0][1] + gu[1][0]) * n[1]) * mu,
            -pr * n[1] + ((gu[1][0] + gu[0][1]) * n[0] + (gu[1][1] + gu[1][1]) * n[1]) * mu,
        ];
        if symmetry {
            let dn = d[0] * n[0] + d[1] * n[1];
            d = [dn * n[0], dn * n[1]];
            let snn = sn[0] * n[0] + sn[1] * n[1];
            sn = [snn * n[0], snn * n[1]];
        }
        let umax = vel[0].abs().max(vel[1].abs());
        let umax = match lin {
            Linearization::Frozen => T::cst(umax.value()),
            Linearization::Exact => umax,
        };
        let gamma = (umax * (rho / 6.0) + mu / h) * self.params.nitsche_penalty;
        let dn = d[0] * n[0] + d[1] * n[1];
        for a in 0..4 {
            let na = b.n[a];
            let grad = b.dn[a];
            let dnn = grad[0] * n[0] + grad[1] * n[1];
            let dnd = d[0] * grad[0] + d[1] * grad[1];
            for i in 0..2 {
                r[3 * a + i] += (-sn[i] * na - (d[i] * dnn + dnd * n[i]) * mu + gamma * d[i] * na) * w;
            }
            r[3 * a + 2] -= dn * (na * w);
        }
    }

    fn ghost_local(&self, g: &GhostPair, u: &[f64], lin: Linearization, jac: bool) -> Local<24> {
        let c = [&self.disc.cells[g.cells[0]], &self.disc.cells[g.cells[1]]];
        let dofs: [usize; 24] = std::array::from_fn(|k| {
            let side = k / 12;
            let l = k % 12;
            FIELDS * c[side].blocks[l / 3] + l % 3
        });
        if jac {
            let vals: [Dual<24>; 24] = std::array::from_fn(|k| Dual::var(u[dofs[k]], k));
            split(dofs, self.ghost_kernel(g, &vals, lin))
        } else {
            let vals: [f64; 24] = std::array::from_fn(|k| u[dofs[k]]);
            Local { dofs, res: self.ghost_kernel(g, &vals, lin), jac: None }
        }
    }

    fn ghost_kernel<T: Real>(&self, g: &GhostPair, v: &[T; 24], lin: Linearization) -> [T; 24] {
        let p = &self.params;
        let (rho, mu, h) = (p.density, p.viscosity, g.h);
        let n = g.normal;
        let mut r = [T::zero(); 24];
        for q in &g.points {
            let dn1: [f64; 4] = std::array::from_fn(|a| q.dn1[a][0] * n[0] + q.dn1[a][1] * n[1]);
            let dn2: [f64; 4] = std::array::from_fn(|a| q.dn2[a][0] * n[0] + q.dn2[a][1] * n[1]);
            let mut jump = [T::zero(); 3];
            let mut avg = [T::zero(); 2];
            for a in 0..4 {
                for c in 0..3 {
                    jump[c] += v[3 * a + c] * dn1[a] - v[12 + 3 * a + c] * dn2[a];
                }
                for c in 0..2 {
                    avg[c] += (v[3 * a + c] * q.n1[a] + v[12 + 3 * a + c] * q.n2[a]) * 0.5;
                }
            }
            let un = (avg[0] * n[0] + avg[1] * n[1]).abs();
            let umax = avg[0].abs().max(avg[1].abs());
            let (un, umax) = match lin {
                Linearization::Frozen => (T::cst(un.value()), T::cst(umax.value())),
                Linearization::Exact => (un, umax),
            };
            let gu = un * (p.ghost_convective * rho * h * h) + p.ghost_viscous * mu * h;
            let gp = (umax * (rho / 6.0) + mu / h).powf(-1.0) * (p.ghost_pressure * h * h);
            for a in 0..4 {
                for c in 0..2 {
                    let t = gu * jump[c] * q.w;
                    r[3 * a + c] += t * dn1[a];
                    r[12 + 3 * a + c] -= t * dn2[a];
                }
                let t = gp * jump[2] * q.w;
                r[3 * a + 2] += t * dn1[a];
                r[12 + 3 * a + 2] -= t * dn2[a];
            }
        }
        r
    }

    /// Derivative of the residual with respect to the nodal indicator values.
    pub fn indicator_jacobian(&self, u: &[f64]) -> Result<CsrMatrix> {
        self.check_len(u)?;
        let n = self.num_dofs();
        let mut tb = TripletBuilder::new(n, self.disc.num_blocks);
        let Some(ind) = &self.indicator else {
            return Ok(tb.build());
        };
        if self.params.penalty_scope != PenaltyScope::Indicator || self.params.pressure_penalty == 0.0 {
            return Ok(tb.build());
        }
        for cell in &self.disc.cells {
            let psi: [f64; 4] = std::array::from_fn(|a| ind.psi[cell.blocks[a]]);
            let pr: [f64; 4] = std::array::from_fn(|a| u[FIELDS * cell.blocks[a] + 2]);
            for q in &cell.volume {
                let dpb = ind.projection.derivative(q.interp(&psi));
                if dpb == 0.0 {
                    continue;
                }
                let s = self.params.pressure_penalty * q.interp(&pr) * dpb * q.w;
                for a in 0..4 {
                    for b in 0..4 {
                        tb.add(FIELDS * cell.blocks[a] + 2, cell.blocks[b], s * q.n[a] * q.n[b]);
                    }
                }
            }
        }
        Ok(tb.build())
    }
}

fn split<const N: usize>(dofs: [usize; N], out: [Dual<N>; N]) -> Local<N> {
    let res = std::array::from_fn(|k| out[k].v);
    let jac = Box::new(std::array::from_fn(|k| out[k].d));
    Local { dofs, res, jac: Some(jac) }
}

fn scatter<const N: usize>(locals: &[Local<N>], r: &mut [f64], mut tb: Option<&mut TripletBuilder>) {
    for l in locals {
        for k in 0..N {
            r[l.dofs[k]] += l.res[k];
        }
        if let (Some(tb), Some(j)) = (tb.as_deref_mut(), &l.jac) {
            for k in 0..N {
                for m in 0..N {
                    if j[k][m] != 0.0 {
                        tb.add(l.dofs[k], l.dofs[m], j[k][m]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{BoundaryRegion, FlowCondition, Profile};
    use crate::cutter::CutModel;
    use crate::grid::{build_mesh, Side};
    use crate::quadrature::QuadratureConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc(n: usize, phi: impl Fn([f64; 2]) -> f64) -> Discretization {
        disc_with(n, phi, QuadratureConfig::default())
    }

    fn disc_with(n: usize, phi: impl Fn([f64; 2]) -> f64, quad: QuadratureConfig) -> Discretization {
        let mesh = build_mesh([0.0, 0.0], [1.0, 1.0], [n, n]).unwrap();
        let phi: Vec<f64> = mesh.nodes.iter().map(|&x| phi(x)).collect();
        let cut = CutModel::build(&mesh, &phi).unwrap();
        cut.discretize(&mesh, &quad).unwrap()
    }

    fn hole(x: [f64; 2]) -> f64 {
        0.23 - ((x[0] - 0.51).powi(2) + (x[1] - 0.47).powi(2)).sqrt()
    }

    fn random_state(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn traction_right(t: [f64; 2]) -> BoundarySpec {
        BoundarySpec {
            regions: vec![BoundaryRegion {
                name: "out".into(),
                side: Side::Right,
                range: None,
                flow: FlowCondition::Traction { profile: Profile::Uniform { value: t } },
                port: true,
                species: None,
            }],
        }
    }

    #[test]
    fn zero_state_has_zero_residual() {
        let d = disc(8, hole);
        let bcs = BoundarySpec::default();
        let sys = FlowSystem::new(&d, FlowParams::default(), &bcs);
        let r = sys.residual(&vec![0.0; sys.num_dofs()], &TimeLevel::steady(), Terms::ALL).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    fn fd_check(sys: &FlowSystem, u: &[f64], time: &TimeLevel, terms: Terms) {
        let (_, j) = sys.assemble(u, time, Linearization::Exact, terms).unwrap();
        let jd = j.to_dense();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        let scale = jd.amax();
        for k in 0..u.len() {
            let mut up = u.to_vec();
            up[k] += eps;
            let mut dn = u.to_vec();
            dn[k] -= eps;
            let rp = sys.residual(&up, time, terms).unwrap();
            let rm = sys.residual(&dn, time, terms).unwrap();
            for i in 0..u.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * eps);
                worst = worst.max((fd - jd[(i, k)]).abs());
            }
        }
        assert!(worst < 1e-6 * scale, "jacobian mismatch {worst} (scale {scale})");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let d = disc(5, hole);
        let bcs = traction_right([0.3, -0.1]);
        let mut params = FlowParams::default();
        params.penalty_scope = PenaltyScope::Domain;
        params.density = 2.0;
        params.viscosity = 0.1;
        let mut sys = FlowSystem::new(&d, params, &bcs);
        sys.body_force = Some(std::sync::Arc::new(|x: [f64; 2], _t| [x[1], -x[0]]));
        let u = random_state(sys.num_dofs(), 3);
        let hist = random_state(sys.num_dofs(), 4);
        let time = TimeLevel { t: 0.1, dt: Some(0.05), a0: 30.0, history: Some(&hist) };
        fd_check(&sys, &u, &time, Terms::ALL);
        fd_check(&sys, &u, &TimeLevel::steady(), Terms::ALL);
    }

    #[test]
    fn rate_jacobian_matches_history_derivative() {
        let d = disc(4, hole);
        let bcs = BoundarySpec::default();
        let sys = FlowSystem::new(&d, FlowParams::default(), &bcs);
        let u = random_state(sys.num_dofs(), 5);
        let hist = random_state(sys.num_dofs(), 6);
        let time = TimeLevel { t: 0.0, dt: Some(0.1), a0: 15.0, history: Some(&hist) };
        let jr = sys.rate_jacobian(&u, &time).unwrap().to_dense();
        let eps = 1e-6;
        for k in (0..u.len()).step_by(5) {
            let mut hp = hist.clone();
            hp[k] += eps;
            let mut hm = hist.clone();
            hm[k] -= eps;
            let tp = TimeLevel { history: Some(&hp), ..time };
            let tm = TimeLevel { history: Some(&hm), ..time };
            let rp = sys.residual(&u, &tp, Terms::ALL).unwrap();
            let rm = sys.residual(&u, &tm, Terms::ALL).unwrap();
            for i in 0..u.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * eps);
                assert!((fd - jr[(i, k)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    fn linear_state(d: &Discretization, mesh_n: usize) -> Vec<f64> {
        let mesh = build_mesh([0.0, 0.0], [1.0, 1.0], [mesh_n, mesh_n]).unwrap();
        let mut u = vec![0.0; FIELDS * d.num_blocks];
        for (b, &node) in d.block_node.iter().enumerate() {
            let x = mesh.nodes[node];
            u[3 * b] = 1.0 + 2.0 * x[0] - x[1];
            u[3 * b + 1] = 0.5 - 2.0 * x[1] + 0.3 * x[0];
            u[3 * b + 2] = 3.0 * x[0] + 4.0 * x[1];
        }
        u
    }

    #[test]
    fn ghost_penalty_vanishes_on_linear_fields() {
        let d = disc(10, hole);
        assert!(!d.ghosts.is_empty());
        let bcs = BoundarySpec::default();
        let sys = FlowSystem::new(&d, FlowParams::default(), &bcs);
        let u = linear_state(&d, 10);
        let terms = Terms { ghost: true, ..Terms::NONE };
        let r = sys.residual(&u, &TimeLevel::steady(), terms).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12), "{:?}", r.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        // A kink across a facet is penalized.
        let mut k = u.clone();
        k[3 * d.cells[d.ghosts[0].cells[0]].blocks[0]] += 1.0;
        let r = sys.residual(&k, &TimeLevel::steady(), terms).unwrap();
        assert!(r.iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn continuity_is_exact_for_divergence_free_fields() {
        let d = disc(6, hole);
        let bcs = BoundarySpec::default();
        let sys = FlowSystem::new(&d, FlowParams::default(), &bcs);
        let mesh = build_mesh([0.0, 0.0], [1.0, 1.0], [6, 6]).unwrap();
        let mut u = vec![0.0; sys.num_dofs()];
        for (b, &node) in d.block_node.iter().enumerate() {
            let x = mesh.nodes[node];
            u[3 * b] = x[0];
            u[3 * b + 1] = -x[1];
        }
        let r = sys.residual(&u, &TimeLevel::steady(), Terms { galerkin: true, ..Terms::NONE }).unwrap();
        for b in 0..d.num_blocks {
            assert!(r[3 * b + 2].abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_flow_has_no_interior_momentum_residual() {
        let d = disc(6, |_| -1.0);
        let bcs = BoundarySpec::default();
        let sys = FlowSystem::new(&d, FlowParams::default(), &bcs);
        let mut u = vec![0.0; sys.num_dofs()];
        for b in 0..d.num_blocks {
            u[3 * b] = 1.5;
            u[3 * b + 1] = -0.5;
            u[3 * b + 2] = 2.0;
        }
        let terms = Terms { galerkin: true, stabilization: true, ..Terms::NONE };
        let r = sys.residual(&u, &TimeLevel::steady(), terms).unwrap();
        let mesh = build_mesh([0.0, 0.0], [1.0, 1.0], [6, 6]).unwrap();
        for (b, &node) in d.block_node.iter().enumerate() {
            let (i, j) = mesh.node_ij(node);
            if i > 0 && j > 0 && i < 6 && j < 6 {
                for c in 0..3 {
                    assert!(r[3 * b + c].abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn traction_loads_sum_to_total_force() {
        let d = disc(7, |_| -1.0);
        let t = [2.0, -3.0];
        let bcs = traction_right(t);
        let sys = FlowSystem::new(&d, FlowParams::default(), &bcs);
        let r = sys
            .residual(&vec![0.0; sys.num_dofs()], &TimeLevel::steady(), Terms { neumann: true, ..Terms::NONE })
            .unwrap();
        let fx: f64 = (0..d.num_blocks).map(|b| r[3 * b]).sum();
        let fy: f64 = (0..d.num_blocks).map(|b| r[3 * b + 1]).sum();
        assert!((fx + t[0]).abs() < 1e-13 && (fy + t[1]).abs() < 1e-13);
    }

    #[test]
    fn domain_pressure_penalty_integrates_pressure() {
        let d = disc(8, hole);
        let bcs = BoundarySpec::default();
        let mut params = FlowParams::default();
        params.penalty_scope = PenaltyScope::Domain;
        params.pressure_penalty = 2.5;
        let sys = FlowSystem::new(&d, params, &bcs);
        let mut u = vec![0.0; sys.num_dofs()];
        for b in 0..d.num_blocks {
            u[3 * b + 2] = 1.0;
        }
        let r = sys
            .residual(&u, &TimeLevel::steady(), Terms { pressure_penalty: true, ..Terms::NONE })
            .unwrap();
        let s: f64 = (0..d.num_blocks).map(|b| r[3 * b + 2]).sum();
        assert!((s - 2.5 * d.fluid_volume()).abs() < 1e-12);
        params.penalty_scope = PenaltyScope::Indicator;
        let sys = FlowSystem::new(&d, params, &bcs);
        let r = sys
            .residual(&u, &TimeLevel::steady(), Terms { pressure_penalty: true, ..Terms::NONE })
            .unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn indicator_jacobian_matches_finite_differences() {
        let d = disc(5, hole);
        let bcs = BoundarySpec::default();
        let u = random_state(FIELDS * d.num_blocks, 9);
        let psi: Vec<f64> = random_state(d.num_blocks, 10).iter().map(|v| 0.99 + 0.002 * v).collect();
        let projection = Projection { sharpness: 1000.0, threshold: 0.99, reference: 1.0 };
        let mut sys = FlowSystem::new(&d, FlowParams::default(), &bcs);
        sys.indicator = Some(IndicatorInput { psi: &psi, projection });
        let j = sys.indicator_jacobian(&u).unwrap().to_dense();
        let eps = 1e-8;
        for k in 0..d.num_blocks {
            let mut pp = psi.clone();
            pp[k] += eps;
            let mut pm = psi.clone();
            pm[k] -= eps;
            let mut sp = sys.clone();
            sp.indicator = Some(IndicatorInput { psi: &pp, projection });
            let mut sm = sys.clone();
            sm.indicator = Some(IndicatorInput { psi: &pm, projection });
            let rp = sp.residual(&u, &TimeLevel::steady(), Terms::ALL).unwrap();
            let rm = sm.residual(&u, &TimeLevel::steady(), Terms::ALL).unwrap();
            for i in 0..u.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * eps);
                assert!((fd - j[(i, k)]).abs() < 1e-5 * (1.0 + fd.abs()), "{i} {k}: {fd} vs {}", j[(i, k)]);
            }
        }
    }

    #[test]
    fn mirror_symmetric_geometry_gives_mirrored_residual() {
        // Hole centred on x = 0.5 with a state odd in u_x and even in u_y, p.
        let n = 8;
        // Rules exact for the polynomial Stokes integrands.
        let quad = QuadratureConfig { tensor: 3, triangle: 6, line: 3 };
        let d = disc_with(n, |x| 0.21 - ((x[0] - 0.5).powi(2) + (x[1] - 0.43).powi(2)).sqrt(), quad);
        let mesh = build_mesh([0.0, 0.0], [1.0, 1.0], [n, n]).unwrap();
        let bcs = BoundarySpec::default();
        let sys = FlowSystem::new(&d, FlowParams::default(), &bcs);
        let field =
            |x: [f64; 2]| [(x[0] - 0.5) * x[1], x[1] * (1.0 - x[1]) + (x[0] - 0.5).powi(2), (x[0] - 0.5).powi(2) + x[1]];
        let mut u = vec![0.0; sys.num_dofs()];
        for (b, &node) in d.block_node.iter().enumerate() {
            u[3 * b..3 * b + 3].copy_from_slice(&field(mesh.nodes[node]));
        }
        // Blocks are mirrored through cells: nodes on the axis may carry two.
        let corner = [1, 0, 3, 2];
        let mut mirror = vec![usize::MAX; d.num_blocks];
        for c in &d.cells {
            let (i, j) = mesh.element_ij(c.element);
            let me = mesh.element_id(n - 1 - i, j);
            let m = d.cells.iter().find(|k| k.element == me).unwrap();
            for a in 0..4 {
                mirror[c.blocks[a]] = m.blocks[corner[a]];
            }
        }
        let asymmetry = |r: &[f64]| {
            (0..d.num_blocks)
                .map(|b| {
                    let m = mirror[b];
                    (r[3 * b] + r[3 * m]).abs().max((r[3 * b + 1] - r[3 * m + 1]).abs()).max((r[3 * b + 2] - r[3 * m + 2]).abs())
                })
                .fold(0.0f64, f64::max)
        };
        // Polynomial integrands: exact.
        let mut stokes = FlowParams::default();
        stokes.convection = false;
        let s = FlowSystem::new(&d, stokes, &bcs);
        let terms = Terms { galerkin: true, nitsche: true, ghost: true, ..Terms::NONE };
        assert!(asymmetry(&s.residual(&u, &TimeLevel::steady(), terms).unwrap()) < 1e-12);
        // Subcell triangulations of mirrored cells differ, so nonpolynomial
        // stabilization integrands agree only to quadrature error.
        let r = sys.residual(&u, &TimeLevel::steady(), Terms::ALL).unwrap();
        let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(asymmetry(&r) < 1e-5 * scale, "{} {scale}", asymmetry(&r));
    }
}
