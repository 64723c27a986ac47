//! Design criteria and their composition into objective and constraints.
//!
//! Every criterion is `outer(Σ_e I_e)`, a sum of element contributions passed
//! through a scalar outer function (identity except for the KS measure). The
//! element contributions are written once generic over [`Real`], which gives
//! state gradients through dual numbers and geometric partials through
//! element re-cuts in the sensitivity module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cutter::decompose::{ElementDecomposition, Phase};
use crate::cutter::CutModel;
use crate::discretization::{Basis, Cell, Discretization, SurfacePoint};
use crate::error::{Error, Result};
use crate::flow::FIELDS;
use crate::grid::Point;
use crate::model::Physics;
use crate::real::{Dual, Real};

/// Surface name reserved for the immersed fluid-solid interface.
pub const INTERFACE: &str = "interface";

fn default_beta() -> f64 {
    400.0
}

fn default_reference() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Measure {
    /// `-2 e·∫σn dΓ / (ρ u_c² L_c)` with `n` pointing out of the fluid.
    Drag { surface: String, direction: Point, velocity: f64, length: f64 },
    MassFlow { surface: String },
    TotalPressure { surface: String },
    VolumeFluid,
    VolumeSolid,
    SurfaceArea,
    /// `(1/β) ln ∫ exp(β (c − c_ref)²)`, over a surface or, with `volume`, over the fluid.
    KsTarget {
        surface: String,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_reference")]
        reference: f64,
        #[serde(default)]
        volume: bool,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    /// Value at the last time level.
    #[default]
    Final,
    /// Mean over the time steps (initial condition excluded).
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionSpec {
    pub name: String,
    pub measure: Measure,
    #[serde(default)]
    pub sampling: TimeSampling,
}

impl CriterionSpec {
    pub fn new(name: &str, measure: Measure) -> Self {
        Self { name: name.into(), measure, sampling: TimeSampling::Final }
    }

    pub fn validate(&self, physics: &Physics) -> Result<()> {
        match &self.measure {
            Measure::Drag { surface, velocity, length, direction } => {
                if !(*velocity > 0.0 && *length > 0.0) {
                    return Err(Error::Config(format!("criterion '{}': drag needs u_c, L_c > 0", self.name)));
                }
                if (direction[0].hypot(direction[1]) - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("criterion '{}': drag direction must be a unit vector", self.name)));
                }
                resolve_surface(physics, surface).map(|_| ())
            }
            Measure::MassFlow { surface } | Measure::TotalPressure { surface } => {
                resolve_surface(physics, surface).map(|_| ())
            }
            Measure::KsTarget { surface, beta, volume, .. } => {
                if !(*beta > 0.0) {
                    return Err(Error::Config(format!("criterion '{}': beta must be positive", self.name)));
                }
                if physics.transport.is_none() {
                    return Err(Error::Config(format!("criterion '{}' needs species transport", self.name)));
                }
                if *volume {
                    Ok(())
                } else {
                    resolve_surface(physics, surface).map(|_| ())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn depends_on_state(&self) -> bool {
        !matches!(self.measure, Measure::VolumeFluid | Measure::VolumeSolid | Measure::SurfaceArea)
    }

    pub fn uses_species(&self) -> bool {
        matches!(self.measure, Measure::KsTarget { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Selection {
    Interface,
    Region(usize),
    Volume,
}

fn resolve_surface(physics: &Physics, surface: &str) -> Result<Selection> {
    if surface == INTERFACE {
        Ok(Selection::Interface)
    } else {
        physics.bcs.region(surface).map(Selection::Region)
    }
}

/// One geometry with its (single time level) solution fields.
#[derive(Clone, Copy)]
pub struct Snapshot<'a> {
    pub physics: &'a Physics,
    /// Needed by the geometric criteria only.
    pub cut: Option<&'a CutModel>,
    pub disc: &'a Discretization,
    pub u: &'a [f64],
    pub c: Option<&'a [f64]>,
}

/// A criterion bound to a physics setup.
#[derive(Clone, Debug)]
pub struct Criterion {
    pub spec: CriterionSpec,
    selection: Selection,
}

/// Value of a criterion together with the data of its outer function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriterionValue {
    pub value: f64,
    /// Sum of element contributions.
    pub inner: f64,
    /// KS exponent shift (zero for other criteria).
    pub shift: f64,
}

impl Criterion {
    pub fn new(spec: CriterionSpec, physics: &Physics) -> Result<Self> {
        spec.validate(physics)?;
        let selection = match &spec.measure {
            Measure::Drag { surface, .. } | Measure::MassFlow { surface } | Measure::TotalPressure { surface } => {
                resolve_surface(physics, surface)?
            }
            Measure::KsTarget { volume: true, .. } => Selection::Volume,
            Measure::KsTarget { surface, .. } => resolve_surface(physics, surface)?,
            _ => Selection::Volume,
        };
        Ok(Self { spec, selection })
    }

    fn points<'c>(&self, physics: &Physics, cell: &'c Cell) -> Vec<(&'c Basis, Point)> {
        match self.selection {
            Selection::Interface => cell.interface.iter().map(|s: &SurfacePoint| (&s.basis, s.normal)).collect(),
            Selection::Region(r) => cell
                .boundary
                .iter()
                .filter(|(side, s)| physics.bcs.region_at(*side, s.basis.x) == Some(r))
                .map(|(_, s)| (&s.basis, s.normal))
                .collect(),
            Selection::Volume => cell.volume.iter().map(|b| (b, [0.0, 0.0])).collect(),
        }
    }

    fn cell_integral<T: Real>(&self, physics: &Physics, cell: &Cell, u: &[[T; 3]; 4], c: &[T; 4], shift: f64) -> T {
        let (rho, mu) = (physics.flow.density, physics.flow.viscosity);
        let comp = |k: usize| -> [T; 4] { std::array::from_fn(|a| u[a][k]) };
        let (ux, uy, pp) = (comp(0), comp(1), comp(2));
        let mut s = T::zero();
        for (b, n) in self.points(physics, cell) {
            let w = b.w;
            match &self.spec.measure {
                Measure::Drag { direction, velocity, length, .. } => {
                    let gu = [b.grad(&ux), b.grad(&uy)];
                    let p = b.interp(&pp);
                    let shear = (gu[0][1] + gu[1][0]) * mu;
                    let t = [
                        (gu[0][0] * (2.0 * mu) - p) * n[0] + shear * n[1],
                        shear * n[0] + (gu[1][1] * (2.0 * mu) - p) * n[1],
                    ];
                    let scale = -2.0 / (rho * velocity * velocity * length);
                    s += (t[0] * direction[0] + t[1] * direction[1]) * (scale * w);
                }
                Measure::MassFlow { .. } => {
                    s += (b.interp(&ux) * n[0] + b.interp(&uy) * n[1]) * (rho * w);
                }
                Measure::TotalPressure { .. } => {
                    let (vx, vy) = (b.interp(&ux), b.interp(&uy));
                    s += (b.interp(&pp) + (vx * vx + vy * vy) * (0.5 * rho)) * w;
                }
                Measure::KsTarget { beta, reference, .. } => {
                    let d = b.interp(c) - *reference;
                    s += ((d * d - shift) * *beta).exp() * w;
                }
                _ => {}
            }
        }
        s
    }

    fn outer(&self, inner: f64, shift: f64) -> f64 {
        match &self.spec.measure {
            Measure::KsTarget { beta, .. } => shift + inner.ln() / beta,
            _ => inner,
        }
    }

    /// `d value / d inner`.
    pub fn outer_derivative(&self, v: &CriterionValue) -> f64 {
        match &self.spec.measure {
            Measure::KsTarget { beta, .. } => 1.0 / (beta * v.inner),
            _ => 1.0,
        }
    }

    fn local_fields(snap: &Snapshot, cell: &Cell) -> ([[f64; 3]; 4], [f64; 4]) {
        let u = std::array::from_fn(|a| std::array::from_fn(|k| snap.u.get(FIELDS * cell.blocks[a] + k).copied().unwrap_or(0.0)));
        let c = std::array::from_fn(|a| snap.c.map_or(0.0, |c| c[cell.blocks[a]]));
        (u, c)
    }

    /// Geometry-only element contribution.
    fn geometric_inner(&self, d: &ElementDecomposition) -> f64 {
        match self.spec.measure {
            Measure::VolumeFluid => d.area(Phase::Fluid),
            Measure::VolumeSolid => d.area(Phase::Solid),
            Measure::SurfaceArea => d.interface.iter().map(|s| s.length()).sum(),
            _ => 0.0,
        }
    }

    /// Contribution of one element given its decomposition and cells (used
    /// with re-cut elements for geometric derivatives).
    pub fn element_inner(&self, snap: &Snapshot, d: &ElementDecomposition, cells: &[Cell], shift: f64) -> f64 {
        if !self.spec.depends_on_state() {
            return self.geometric_inner(d);
        }
        cells
            .iter()
            .map(|cell| {
                let (u, c) = Self::local_fields(snap, cell);
                self.cell_integral(snap.physics, cell, &u, &c, shift)
            })
            .sum()
    }

    fn ks_shift(&self, snap: &Snapshot) -> f64 {
        let Measure::KsTarget { reference, .. } = self.spec.measure else {
            return 0.0;
        };
        let mut m = f64::NEG_INFINITY;
        for cell in &snap.disc.cells {
            let (_, c) = Self::local_fields(snap, cell);
            for (b, _) in self.points(snap.physics, cell) {
                m = m.max((b.interp(&c) - reference).powi(2));
            }
        }
        m
    }

    fn has_points(&self, snap: &Snapshot) -> bool {
        snap.disc.cells.iter().any(|cell| !self.points(snap.physics, cell).is_empty())
    }

    pub fn evaluate(&self, snap: &Snapshot) -> Result<CriterionValue> {
        if !self.spec.depends_on_state() {
            let cut = snap
                .cut
                .ok_or_else(|| Error::Argument(format!("criterion '{}' needs a cut geometry", self.spec.name)))?;
            let inner = cut.decompositions.iter().map(|d| self.geometric_inner(d)).sum();
            return Ok(CriterionValue { value: inner, inner, shift: 0.0 });
        }
        if !self.has_points(snap) {
            return Err(Error::Argument(format!("criterion '{}' has an empty integration domain", self.spec.name)));
        }
        if self.spec.uses_species() && snap.c.is_none() {
            return Err(Error::Argument(format!("criterion '{}' needs a species field", self.spec.name)));
        }
        let shift = self.ks_shift(snap);
        let inner: f64 = snap
            .disc
            .cells
            .iter()
            .map(|cell| {
                let (u, c) = Self::local_fields(snap, cell);
                self.cell_integral(snap.physics, cell, &u, &c, if shift.is_finite() { shift } else { 0.0 })
            })
            .sum();
        let shift = if shift.is_finite() { shift } else { 0.0 };
        Ok(CriterionValue { value: self.outer(inner, shift), inner, shift })
    }

    /// Gradients of the value with respect to the flow and species states.
    pub fn state_gradient(&self, snap: &Snapshot, v: &CriterionValue) -> (Vec<f64>, Vec<f64>) {
        let mut du = vec![0.0; FIELDS * snap.disc.num_blocks];
        let mut dc = vec![0.0; snap.disc.num_blocks];
        if !self.spec.depends_on_state() {
            return (du, dc);
        }
        let scale = self.outer_derivative(v);
        for cell in &snap.disc.cells {
            if self.points(snap.physics, cell).is_empty() {
                continue;
            }
            let (u, c) = Self::local_fields(snap, cell);
            let ud: [[Dual<16>; 3]; 4] = std::array::from_fn(|a| std::array::from_fn(|k| Dual::var(u[a][k], 3 * a + k)));
            let cd: [Dual<16>; 4] = std::array::from_fn(|a| Dual::var(c[a], 12 + a));
            let s = self.cell_integral(snap.physics, cell, &ud, &cd, v.shift);
            for a in 0..4 {
                for k in 0..3 {
                    du[FIELDS * cell.blocks[a] + k] += scale * s.d[3 * a + k];
                }
                dc[cell.blocks[a]] += scale * s.d[12 + a];
            }
        }
        (du, dc)
    }
}

/// Linear combination of named criteria.
pub type Combination = BTreeMap<String, f64>;

fn default_one() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveTerm {
    #[serde(default = "default_one")]
    pub weight: f64,
    pub combination: Combination,
    /// Divide by the magnitude of the combination at the initial design.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSpec {
    /// `V_f / (fraction (V_f + V_s)) − 1 ≤ 0`.
    VolumeFraction { fluid: String, solid: String, fraction: f64 },
    /// `combination / bound − 1 ≤ 0`.
    Upper { combination: Combination, bound: f64 },
    /// `1 − combination / bound ≤ 0`.
    Lower { combination: Combination, bound: f64 },
    /// Outlet share window `(fraction ∓ tolerance) |Σ ṁ_in|`, two constraints.
    /// With `initial_tolerance` the window contracts linearly to `tolerance`
    /// over `contraction_iterations` optimization iterations.
    MassWindow {
        outlet: String,
        inlets: Vec<String>,
        fraction: f64,
        tolerance: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial_tolerance: Option<f64>,
        #[serde(default)]
        contraction_iterations: usize,
    },
}

impl ConstraintSpec {
    pub fn count(&self) -> usize {
        match self {
            ConstraintSpec::MassWindow { .. } => 2,
            _ => 1,
        }
    }

    fn names(&self) -> Vec<String> {
        let mut refs: Vec<String> = Vec::new();
        match self {
            ConstraintSpec::VolumeFraction { fluid, solid, .. } => refs.extend([fluid.clone(), solid.clone()]),
            ConstraintSpec::Upper { combination, .. } | ConstraintSpec::Lower { combination, .. } => {
                refs.extend(combination.keys().cloned())
            }
            ConstraintSpec::MassWindow { outlet, inlets, .. } => {
                refs.push(outlet.clone());
                refs.extend(inlets.iter().cloned());
            }
        }
        refs
    }

    /// Window half-width at an optimization iteration.
    pub fn tolerance_at(&self, iteration: usize) -> Option<f64> {
        let ConstraintSpec::MassWindow { tolerance, initial_tolerance, contraction_iterations, .. } = self else {
            return None;
        };
        Some(match initial_tolerance {
            Some(t0) if *contraction_iterations > 0 => {
                let r = (1.0 - iteration as f64 / *contraction_iterations as f64).max(0.0);
                tolerance + (t0 - tolerance) * r
            }
            _ => *tolerance,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub terms: Vec<ObjectiveTerm>,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
}

/// Objective and constraint values with derivatives with respect to each
/// criterion value.
#[derive(Clone, Debug, PartialEq)]
pub struct Composition {
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub d_objective: Vec<f64>,
    pub d_constraints: Vec<Vec<f64>>,
}

/// Objective/constraint composer with criterion names resolved to indices.
#[derive(Clone, Debug)]
pub struct Composer {
    pub spec: ObjectiveSpec,
    names: Vec<String>,
}

impl Composer {
    pub fn new(spec: ObjectiveSpec, criteria: &[CriterionSpec]) -> Result<Self> {
        let names: Vec<String> = criteria.iter().map(|c| c.name.clone()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate criterion name '{n}'")));
            }
        }
        if spec.terms.is_empty() {
            return Err(Error::Config("the objective has no terms".into()));
        }
        let check = |n: &String| {
            if names.contains(n) {
                Ok(())
            } else {
                Err(Error::Config(format!("unknown criterion '{n}'")))
            }
        };
        for t in &spec.terms {
            t.combination.keys().try_for_each(check)?;
        }
        for c in &spec.constraints {
            c.names().iter().try_for_each(check)?;
            match c {
                ConstraintSpec::VolumeFraction { fraction, .. } if !(*fraction > 0.0 && *fraction <= 1.0) => {
                    return Err(Error::Config("volume fraction must lie in (0, 1]".into()));
                }
                ConstraintSpec::Upper { bound, .. } | ConstraintSpec::Lower { bound, .. } if *bound == 0.0 => {
                    return Err(Error::Config("constraint bound must be nonzero".into()));
                }
                ConstraintSpec::MassWindow { fraction, tolerance, .. } if !(*tolerance >= 0.0 && fraction - tolerance > 0.0) => {
                    return Err(Error::Config("mass window needs 0 <= tolerance < fraction".into()));
                }
                _ => {}
            }
        }
        Ok(Self { spec, names })
    }

    pub fn num_constraints(&self) -> usize {
        self.spec.constraints.iter().map(|c| c.count()).sum()
    }

    pub fn constraint_labels(&self) -> Vec<String> {
        (1..=self.num_constraints()).map(|i| format!("g{i}")).collect()
    }

    fn index(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).expect("names resolved at construction")
    }

    fn combine(&self, c: &Combination, values: &[f64]) -> f64 {
        c.iter().map(|(n, w)| w * values[self.index(n)]).sum()
    }

    /// Normalization constants of the objective terms from initial-design values.
    pub fn normalization(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.spec
            .terms
            .iter()
            .map(|t| {
                if !t.normalize {
                    return Ok(1.0);
                }
                let v = self.combine(&t.combination, values).abs();
                if v == 0.0 || !v.is_finite() {
                    Err(Error::Config("objective normalization constant is zero".into()))
                } else {
                    Ok(v)
                }
            })
            .collect()
    }

    pub fn compose(&self, values: &[f64], norms: &[f64], iteration: usize) -> Composition {
        let n = self.names.len();
        let mut d_objective = vec![0.0; n];
        let mut objective = 0.0;
        for (t, norm) in self.spec.terms.iter().zip(norms) {
            objective += t.weight * self.combine(&t.combination, values) / norm;
            for (name, w) in &t.combination {
                d_objective[self.index(name)] += t.weight * w / norm;
            }
        }
        let mut constraints = Vec::new();
        let mut d_constraints = Vec::new();
        for c in &self.spec.constraints {
            match c {
                ConstraintSpec::VolumeFraction { fluid, solid, fraction } => {
                    let (i, j) = (self.index(fluid), self.index(solid));
                    let total = values[i] + values[j];
                    constraints.push(values[i] / (fraction * total) - 1.0);
                    let mut d = vec![0.0; n];
                    d[i] += values[j] / (fraction * total * total);
                    d[j] -= values[i] / (fraction * total * total);
                    d_constraints.push(d);
                }
                ConstraintSpec::Upper { combination, bound } | ConstraintSpec::Lower { combination, bound } => {
                    let sign = if matches!(c, ConstraintSpec::Upper { .. }) { 1.0 } else { -1.0 };
                    constraints.push(sign * (self.combine(combination, values) / bound - 1.0));
                    let mut d = vec![0.0; n];
                    for (name, w) in combination {
                        d[self.index(name)] += sign * w / bound;
                    }
                    d_constraints.push(d);
                }
                ConstraintSpec::MassWindow { outlet, inlets, fraction, .. } => {
                    let tol = c.tolerance_at(iteration).unwrap();
                    let o = self.index(outlet);
                    let sum_in: f64 = inlets.iter().map(|n| values[self.index(n)]).sum();
                    let q = sum_in.abs();
                    let sgn = if sum_in < 0.0 { -1.0 } else { 1.0 };
                    for (f, sign) in [(fraction - tol, -1.0), (fraction + tol, 1.0)] {
                        // lower: 1 − ṁ/(f q); upper: ṁ/(f q) − 1
                        let ratio = values[o] / (f * q);
                        constraints.push(sign * (ratio - 1.0));
                        let mut d = vec![0.0; n];
                        d[o] += sign / (f * q);
                        for name in inlets {
                            d[self.index(name)] -= sign * ratio / q * sgn;
                        }
                        d_constraints.push(d);
                    }
                }
            }
        }
        Composition { objective, constraints, d_objective, d_constraints }
    }
}
