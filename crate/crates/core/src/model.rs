//! Forward pipeline for one level-set field: cut, indicator, flow, species.

use serde::{Deserialize, Serialize};

use crate::boundary::{BoundarySpec, VectorFn};
use crate::cutter::{CutModel, DEFAULT_LEVEL_CAP};
use crate::discretization::Discretization;
use crate::error::{Error, Result};
use crate::flow::{FlowParams, FlowSystem, IndicatorInput, Linearization, PenaltyScope, Terms, TimeLevel, FIELDS};
use crate::grid::BackgroundMesh;
use crate::quadrature::QuadratureConfig;
use crate::solve::{bdf_coefficients, march, newton_solve, History, NewtonReport, Scheme, SolveConfig};
use crate::transport::{solve_indicator, IndicatorParams, ScalarSystem, TransportParams};

/// Everything that stays fixed while the geometry changes.
#[derive(Clone)]
pub struct Physics {
    pub mesh: BackgroundMesh,
    pub bcs: BoundarySpec,
    pub flow: FlowParams,
    pub transport: Option<TransportParams>,
    pub indicator: IndicatorParams,
    pub quadrature: QuadratureConfig,
    pub solve: SolveConfig,
    pub level_cap: usize,
    pub body_force: Option<VectorFn>,
}

impl Physics {
    pub fn new(mesh: BackgroundMesh, bcs: BoundarySpec, flow: FlowParams) -> Self {
        Self {
            mesh,
            bcs,
            flow,
            transport: None,
            indicator: IndicatorParams::default(),
            quadrature: QuadratureConfig::default(),
            solve: SolveConfig::default(),
            level_cap: DEFAULT_LEVEL_CAP,
            body_force: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bcs.validate()?;
        self.flow.validate()?;
        self.indicator.validate()?;
        self.quadrature.validate()?;
        self.solve.validate()?;
        if let Some(t) = &self.transport {
            t.validate()?;
            if self.solve.scheme != Scheme::Steady {
                return Err(Error::Config("species transport is only supported in steady runs".into()));
            }
        }
        Ok(())
    }

    /// The indicator field is only needed when it gates the pressure penalty.
    pub fn uses_indicator(&self) -> bool {
        self.flow.penalty_scope == PenaltyScope::Indicator && self.flow.pressure_penalty > 0.0
    }

    pub fn flow_system<'a>(&'a self, disc: &'a Discretization, psi: Option<&'a [f64]>) -> FlowSystem<'a> {
        let mut sys = FlowSystem::new(disc, self.flow, &self.bcs);
        sys.body_force = self.body_force.clone();
        sys.indicator = psi.map(|psi| IndicatorInput { psi, projection: self.indicator.projection() });
        sys
    }

    pub fn species_system<'a>(&'a self, disc: &'a Discretization, u: &'a [f64]) -> Option<ScalarSystem<'a>> {
        self.transport.as_ref().map(|t| ScalarSystem::species(disc, &self.bcs, t, Some(u)))
    }

    pub fn indicator_system<'a>(&'a self, disc: &'a Discretization) -> ScalarSystem<'a> {
        ScalarSystem::indicator(disc, &self.bcs, &self.indicator)
    }

    /// Time level of step `n` (1-based) of a stored history; steady runs use
    /// the steady level for their single state.
    pub fn time_level<'h>(&self, hist: &History, n: usize, rate_history: &'h mut Vec<f64>) -> TimeLevel<'h> {
        if self.solve.scheme == Scheme::Steady {
            return TimeLevel::steady();
        }
        let prev2 = (n >= 2).then(|| hist.states[n - 2].as_slice());
        let (a0, h) = bdf_coefficients(n, self.solve.dt, &hist.states[n - 1], prev2);
        *rate_history = h;
        TimeLevel { t: hist.times[n], dt: Some(self.solve.dt), a0, history: Some(rate_history) }
    }

    /// Cut, discretize and solve all fields for a level-set field.
    pub fn forward(&self, phi: Vec<f64>, warm: Option<&WarmStart>) -> Result<ForwardState> {
        let cut = CutModel::build_with_cap(&self.mesh, &phi, self.level_cap)?;
        let disc = cut.discretize(&self.mesh, &self.quadrature)?;
        if disc.cells.is_empty() {
            return Err(Error::Config("the fluid domain is empty".into()));
        }
        let psi = if self.uses_indicator() {
            Some(solve_indicator(&disc, &self.bcs, &self.indicator, &self.solve.linear)?)
        } else {
            None
        };
        let n = FIELDS * disc.num_blocks;
        let u0 = match warm {
            Some(w) if self.solve.scheme == Scheme::Steady => transfer(&w.block_node, &w.flow, &disc.block_node, FIELDS),
            _ => vec![0.0; n],
        };
        let sys = self.flow_system(&disc, psi.as_deref());
        let mut eval = |u: &[f64], t: &TimeLevel, jac: bool| {
            if jac {
                let (r, j) = sys.assemble(u, t, Linearization::Frozen, Terms::ALL)?;
                Ok((r, Some(j)))
            } else {
                Ok((sys.residual(u, t, Terms::ALL)?, None))
            }
        };
        let flow = march(&mut eval, u0, &self.solve)?;
        let mut species = None;
        let mut species_report = None;
        if let Some(ss) = self.species_system(&disc, flow.states.last().unwrap()) {
            let c0 = match warm.and_then(|w| w.species.as_ref().map(|c| (w, c))) {
                Some((w, c)) => transfer(&w.block_node, c, &disc.block_node, 1),
                None => vec![0.0; disc.num_blocks],
            };
            let steady = TimeLevel::steady();
            let mut eval = |c: &[f64], jac: bool| {
                if jac {
                    let (r, j) = ss.assemble(c, &steady)?;
                    Ok((r, Some(j)))
                } else {
                    Ok((ss.residual(c, &steady)?, None))
                }
            };
            let (c, rep) = newton_solve(&mut eval, c0, &self.solve)?;
            species = Some(c);
            species_report = Some(rep);
        }
        Ok(ForwardState { phi, cut, disc, psi, flow, species, species_report })
    }
}

/// Converged fields of a previous geometry used as the next initial guess.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub block_node: Vec<usize>,
    pub flow: Vec<f64>,
    pub species: Option<Vec<f64>>,
}

/// Solution of the forward pipeline for one geometry.
#[derive(Clone, Debug)]
pub struct ForwardState {
    pub phi: Vec<f64>,
    pub cut: CutModel,
    pub disc: Discretization,
    pub psi: Option<Vec<f64>>,
    /// Flow states; a single entry for steady runs, the initial condition
    /// followed by every step for transient runs.
    pub flow: History,
    pub species: Option<Vec<f64>>,
    pub species_report: Option<NewtonReport>,
}

impl ForwardState {
    pub fn final_flow(&self) -> &[f64] {
        self.flow.states.last().unwrap()
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart { block_node: self.disc.block_node.clone(), flow: self.final_flow().to_vec(), species: self.species.clone() }
    }

    pub fn newton_iterations(&self) -> usize {
        self.flow.reports.iter().map(|r| r.iterations).sum::<usize>()
            + self.species_report.as_ref().map_or(0, |r| r.iterations)
    }
}

/// Copies block values between discretizations through their nodes; blocks
/// without a counterpart start at zero.
pub fn transfer(old_nodes: &[usize], old: &[f64], new_nodes: &[usize], fields: usize) -> Vec<f64> {
    let mut first = std::collections::HashMap::new();
    for (b, &n) in old_nodes.iter().enumerate() {
        first.entry(n).or_insert(b);
    }
    let mut out = vec![0.0; fields * new_nodes.len()];
    for (b, n) in new_nodes.iter().enumerate() {
        if let Some(&o) = first.get(n) {
            out[fields * b..fields * (b + 1)].copy_from_slice(&old[fields * o..fields * (o + 1)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{BoundaryRegion, FlowCondition, Profile};
    use crate::criteria::{Criterion, CriterionSpec, Measure, Snapshot};
    use crate::grid::{build_mesh, Side};

    fn channel(convection: bool) -> Physics {
        let mesh = build_mesh([0.0, 0.0], [2.0, 1.0], [16, 8]).unwrap();
        let inlet = Profile::Parabolic { center: 0.5, width: 1.0, peak: 1.0, direction: [1.0, 0.0], frequency: None };
        let bcs = BoundarySpec {
            regions: vec![
                BoundaryRegion {
                    name: "inlet".into(),
                    side: Side::Left,
                    range: None,
                    flow: FlowCondition::Velocity { profile: inlet },
                    port: true,
                    species: None,
                },
                BoundaryRegion {
                    name: "outlet".into(),
                    side: Side::Right,
                    range: None,
                    flow: FlowCondition::Traction { profile: Profile::Zero },
                    port: true,
                    species: None,
                },
            ],
        };
        let flow = FlowParams { convection, viscosity: 0.05, ..FlowParams::default() };
        Physics::new(mesh, bcs, flow)
    }

    fn mass_flow(p: &Physics, s: &ForwardState, name: &str) -> f64 {
        let c = Criterion::new(CriterionSpec::new(name, Measure::MassFlow { surface: name.into() }), p).unwrap();
        let snap = Snapshot { physics: p, cut: Some(&s.cut), disc: &s.disc, u: s.final_flow(), c: None };
        c.evaluate(&snap).unwrap().value
    }

    #[test]
    fn channel_with_obstacle_conserves_mass() {
        let p = channel(true);
        let phi: Vec<f64> =
            p.mesh.nodes.iter().map(|x| 0.15 - ((x[0] - 0.7).powi(2) + (x[1] - 0.5).powi(2)).sqrt()).collect();
        let s = p.forward(phi.clone(), None).unwrap();
        assert!(s.psi.is_some());
        let (m_in, m_out) = (mass_flow(&p, &s, "inlet"), mass_flow(&p, &s, "outlet"));
        assert!((m_in + 2.0 / 3.0).abs() < 2e-2, "{m_in}");
        assert!((m_in + m_out).abs() < 2e-2 * m_in.abs(), "{m_in} {m_out}");
        // a warm start from the converged state needs at most one correction
        let again = p.forward(phi, Some(&s.warm_start())).unwrap();
        assert!(again.flow.reports[0].iterations <= 1);
    }

    #[test]
    fn empty_fluid_is_a_config_error() {
        let p = channel(false);
        let phi = vec![1.0; p.mesh.nodes.len()];
        assert!(matches!(p.forward(phi, None), Err(Error::Config(_))));
    }

    #[test]
    fn transient_species_is_rejected() {
        let mut p = channel(false);
        p.transport = Some(TransportParams::default());
        p.solve.scheme = Scheme::Bdf2;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn transfer_copies_through_nodes() {
        let out = transfer(&[4, 7, 9], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[9, 5, 4], 2);
        assert_eq!(out, vec![5.0, 6.0, 0.0, 0.0, 1.0, 2.0]);
    }
}
