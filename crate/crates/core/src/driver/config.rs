//! Run configuration (TOML) and its translation into model objects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boundary::{BoundaryRegion, BoundarySpec};
use crate::criteria::{Composer, Criterion, CriterionSpec, ObjectiveSpec};
use crate::design_field::{build_filter, LevelSetMap, PortPrimitive};
use crate::error::{Error, Result};
use crate::flow::FlowParams;
use crate::gcmma::GcmmaConfig;
use crate::grid::{build_mesh, Point};
use crate::model::Physics;
use crate::quadrature::QuadratureConfig;
use crate::solve::SolveConfig;
use crate::transport::{IndicatorParams, TransportParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub min: Point,
    pub max: Point,
    pub divisions: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Circle { center: Point, radius: f64 },
    Rectangle { min: Point, max: Point },
    /// Circular annulus sector between two angles (radians).
    Arc { center: Point, inner: f64, outer: f64, from: f64, to: f64 },
}

impl Shape {
    /// Signed distance-like function, negative inside.
    pub fn distance(&self, x: Point) -> f64 {
        match *self {
            Shape::Circle { center, radius } => (x[0] - center[0]).hypot(x[1] - center[1]) - radius,
            Shape::Rectangle { min, max } => {
                let c = [0.5 * (min[0] + max[0]), 0.5 * (min[1] + max[1])];
                let half = [0.5 * (max[0] - min[0]), 0.5 * (max[1] - min[1])];
                let d = [(x[0] - c[0]).abs() - half[0], (x[1] - c[1]).abs() - half[1]];
                let outside = d[0].max(0.0).hypot(d[1].max(0.0));
                outside + d[0].max(d[1]).min(0.0)
            }
            Shape::Arc { center, inner, outer, from, to } => {
                let r = (x[0] - center[0]).hypot(x[1] - center[1]);
                let radial = (inner - r).max(r - outer);
                let angle = (x[1] - center[1]).atan2(x[0] - center[0]);
                let mid = 0.5 * (from + to);
                let half = 0.5 * (to - from);
                let mut da = (angle - mid).rem_euclid(std::f64::consts::TAU);
                if da > std::f64::consts::PI {
                    da -= std::f64::consts::TAU;
                }
                let angular = (da.abs() - half) * r;
                radial.max(angular)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fluid,
    Solid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub phase: Phase,
    pub shape: Shape,
}

/// Level set built by painting regions over a background phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    #[serde(default = "fluid")]
    pub background: Phase,
    #[serde(default)]
    pub regions: Vec<Region>,
}

fn fluid() -> Phase {
    Phase::Fluid
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { background: Phase::Fluid, regions: Vec::new() }
    }
}

impl GeometryConfig {
    pub fn level_set(&self, x: Point, far: f64) -> f64 {
        let mut phi = match self.background {
            Phase::Fluid => -far,
            Phase::Solid => far,
        };
        for r in &self.regions {
            let d = r.shape.distance(x);
            phi = match r.phase {
                Phase::Fluid => phi.min(d),
                Phase::Solid => phi.max(-d),
            };
        }
        phi
    }
}

/// Grid of solid circles added to the initial design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeding {
    pub counts: [usize; 2],
    pub radius: f64,
    /// Box the circle centers are spread over; the domain when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub within: Option<[Point; 2]>,
}

fn default_filter() -> f64 {
    2.4
}

fn default_bound() -> f64 {
    3.0
}

fn default_slab() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    /// Filter radius in element sizes.
    #[serde(default = "default_filter")]
    pub filter_radius: f64,
    /// Bounds of the nodal design variables in element sizes.
    #[serde(default = "default_bound")]
    pub bound: f64,
    /// Regions whose level set is fixed to the geometry's value.
    #[serde(default)]
    pub fixed: Vec<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeding: Option<Seeding>,
    /// Element layers next to a port's side that follow the port level set.
    #[serde(default = "default_slab")]
    pub port_slab: usize,
    /// Without nodal variables only port parameters are designed; every
    /// other node must then be fixed.
    #[serde(default = "yes")]
    pub nodal: bool,
}

fn yes() -> bool {
    true
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            filter_radius: default_filter(),
            bound: default_bound(),
            fixed: Vec::new(),
            seeding: None,
            port_slab: default_slab(),
            nodal: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationConfig {
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub gcmma: GcmmaConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    PressurePenalty,
    NitschePenalty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Number of randomly drawn design variables.
    pub variables: usize,
    pub seed: u64,
    /// Central difference step relative to the variable range.
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { variables: 5, seed: 7, step: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Field files every this many optimization iterations (0: final only).
    pub field_every: usize,
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: PathBuf::from("output"), field_every: 0, checkpoint_every: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshConfig,
    #[serde(default)]
    pub flow: FlowParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport: Option<TransportParams>,
    #[serde(default)]
    pub indicator: IndicatorParams,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub solve: SolveConfig,
    #[serde(default)]
    pub boundary: Vec<BoundaryRegion>,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub ports: Vec<PortPrimitive>,
    #[serde(default)]
    pub criteria: Vec<CriterionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimization: Option<OptimizationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn physics(&self) -> Result<Physics> {
        let mesh = build_mesh(self.mesh.min, self.mesh.max, self.mesh.divisions)?;
        let mut p = Physics::new(mesh, BoundarySpec { regions: self.boundary.clone() }, self.flow);
        p.transport = self.transport;
        p.indicator = self.indicator;
        p.quadrature = self.quadrature;
        p.solve = self.solve.clone();
        p.validate()?;
        Ok(p)
    }

    pub fn criteria(&self, physics: &Physics) -> Result<Vec<Criterion>> {
        self.criteria.iter().map(|c| Criterion::new(c.clone(), physics)).collect()
    }

    pub fn composer(&self) -> Result<Composer> {
        let opt = self
            .optimization
            .as_ref()
            .ok_or_else(|| Error::Config("the configuration has no [optimization] block".into()))?;
        opt.gcmma.validate()?;
        Composer::new(opt.objective.clone(), &self.criteria)
    }

    fn far(&self) -> f64 {
        (self.mesh.max[0] - self.mesh.min[0]).hypot(self.mesh.max[1] - self.mesh.min[1])
    }

    /// Level set of the geometry block (analysis runs and initial designs).
    pub fn geometry_level_set(&self, physics: &Physics) -> Vec<f64> {
        let far = self.far();
        physics.mesh.nodes.iter().map(|&x| self.geometry.level_set(x, far)).collect()
    }

    /// Design map, bounds and initial design vector.
    pub fn design(&self, physics: &Physics) -> Result<(LevelSetMap, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mesh = &physics.mesh;
        let h = mesh.element_size();
        let d = &self.design;
        if !(d.bound > 0.0) {
            return Err(Error::Config("design bound must be positive".into()));
        }
        let filter = if d.nodal { Some(build_filter(mesh, d.filter_radius * h)?) } else { None };
        let far = self.far();
        let geometry = &self.geometry;
        let fixed_shapes = &d.fixed;
        let fixed = move |x: Point| -> Option<f64> {
            fixed_shapes.iter().any(|s| s.distance(x) <= 0.0).then(|| geometry.level_set(x, far))
        };
        let map = LevelSetMap::new(mesh, filter, self.ports.clone(), d.port_slab, &fixed)?;
        let bound = d.bound * h;
        let (lower, upper) = map.bounds(-bound, bound);
        let mut s = vec![0.0; map.layout.len];
        if let Some(r) = &map.layout.nodal {
            let seeds = d.seeding.as_ref().map(|sd| seed_circles(sd, self.mesh.min, self.mesh.max)).unwrap_or_default();
            for (k, &x) in r.clone().zip(&mesh.nodes) {
                let mut phi = geometry.level_set(x, far);
                for (c, rad) in &seeds {
                    phi = phi.max(rad - (x[0] - c[0]).hypot(x[1] - c[1]));
                }
                s[k] = phi.clamp(-bound, bound);
            }
        }
        map.write_port_parameters(&mut s);
        for (k, v) in s.iter_mut().enumerate() {
            *v = v.clamp(lower[k], upper[k]);
        }
        Ok((map, s, lower, upper))
    }
}

fn seed_circles(s: &Seeding, min: Point, max: Point) -> Vec<(Point, f64)> {
    let [lo, hi] = s.within.unwrap_or([min, max]);
    let mut out = Vec::new();
    for i in 0..s.counts[0] {
        for j in 0..s.counts[1] {
            let x = lo[0] + (i as f64 + 0.5) / s.counts[0] as f64 * (hi[0] - lo[0]);
            let y = lo[1] + (j as f64 + 0.5) / s.counts[1] as f64 * (hi[1] - lo[1]);
            out.push(([x, y], s.radius));
        }
    }
    out
}
