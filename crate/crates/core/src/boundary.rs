//! Boundary regions on the outer faces of the background domain.
//!
//! Each region is a (possibly partial) side of the rectangle carrying one flow
//! condition and optionally one species condition. Outer faces not covered by
//! any region are no-slip walls and adiabatic for the scalar fields. The
//! fluid-solid interface is always a no-slip Dirichlet surface.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Point, Side};

/// Closure form of a space-time vector field.
pub type VectorFn = Arc<dyn Fn(Point, f64) -> Point + Send + Sync>;

#[derive(Clone)]
pub struct CustomProfile(pub VectorFn);

impl fmt::Debug for CustomProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomProfile(..)")
    }
}

impl PartialEq for CustomProfile {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Prescribed vector data (velocity or traction) along a region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    #[default]
    Zero,
    Uniform { value: Point },
    /// `peak · (1 − 4 (s − center)² / width²) · direction`, clipped to zero
    /// outside the opening, with `s` the coordinate along the side. An
    /// optional angular frequency multiplies the profile by `sin(frequency·t)`.
    Parabolic {
        center: f64,
        width: f64,
        peak: f64,
        direction: Point,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frequency: Option<f64>,
    },
    #[serde(skip)]
    Custom(CustomProfile),
}

impl Profile {
    pub fn custom(f: impl Fn(Point, f64) -> Point + Send + Sync + 'static) -> Self {
        Profile::Custom(CustomProfile(Arc::new(f)))
    }

    pub fn eval(&self, side: Option<Side>, x: Point, t: f64) -> Point {
        match self {
            Profile::Zero => [0.0, 0.0],
            Profile::Uniform { value } => *value,
            Profile::Parabolic { center, width, peak, direction, frequency } => {
                let s = side.map(|s| s.tangential_coordinate(x)).unwrap_or(x[1]);
                let r = (s - center) / width;
                let shape = (1.0 - 4.0 * r * r).max(0.0);
                let time = frequency.map(|w| (w * t).sin()).unwrap_or(1.0);
                [peak * shape * time * direction[0], peak * shape * time * direction[1]]
            }
            Profile::Custom(f) => (f.0)(x, t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowCondition {
    Velocity { profile: Profile },
    Traction { profile: Profile },
    Symmetry,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarCondition {
    Concentration { value: f64 },
    Flux { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryRegion {
    pub name: String,
    pub side: Side,
    /// Interval of the coordinate along the side; whole side when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    pub flow: FlowCondition,
    /// Inlets and outlets; the indicator field is pinned to zero here.
    #[serde(default)]
    pub port: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub species: Option<ScalarCondition>,
}

impl BoundaryRegion {
    pub fn contains(&self, side: Side, x: Point) -> bool {
        if side != self.side {
            return false;
        }
        match self.range {
            None => true,
            Some([a, b]) => {
                let s = side.tangential_coordinate(x);
                let tol = 1e-12 * (1.0 + a.abs().max(b.abs()));
                s >= a - tol && s <= b + tol
            }
        }
    }

    pub fn is_inflow(&self) -> bool {
        matches!(self.flow, FlowCondition::Velocity { .. })
    }
}

/// Resolved condition at a boundary quadrature point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowBc {
    Dirichlet(Point),
    Traction(Point),
    Symmetry,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    #[serde(default)]
    pub regions: Vec<BoundaryRegion>,
}

impl BoundarySpec {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.regions.iter().enumerate() {
            if let Some([a, b]) = r.range {
                if !(a < b) {
                    return Err(Error::Config(format!("boundary region '{}' has an empty range", r.name)));
                }
            }
            for other in &self.regions[..i] {
                if other.name == r.name {
                    return Err(Error::Config(format!("duplicate boundary region name '{}'", r.name)));
                }
                if other.side == r.side {
                    let overlap = match (other.range, r.range) {
                        (Some([a0, b0]), Some([a1, b1])) => a0.max(a1) < b0.min(b1),
                        _ => true,
                    };
                    if overlap {
                        return Err(Error::Config(format!(
                            "boundary regions '{}' and '{}' overlap",
                            other.name, r.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn region_at(&self, side: Side, x: Point) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(side, x))
    }

    pub fn region(&self, name: &str) -> Result<usize> {
        self.regions
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Config(format!("unknown boundary region '{name}'")))
    }

    pub fn flow_bc(&self, side: Side, x: Point, t: f64) -> FlowBc {
        match self.region_at(side, x) {
            None => FlowBc::Dirichlet([0.0, 0.0]),
            Some(r) => match &self.regions[r].flow {
                FlowCondition::Velocity { profile } => FlowBc::Dirichlet(profile.eval(Some(side), x, t)),
                FlowCondition::Traction { profile } => FlowBc::Traction(profile.eval(Some(side), x, t)),
                FlowCondition::Symmetry => FlowBc::Symmetry,
            },
        }
    }

    pub fn species_bc(&self, side: Side, x: Point) -> Option<ScalarCondition> {
        self.region_at(side, x).and_then(|r| self.regions[r].species)
    }

    pub fn is_port(&self, side: Side, x: Point) -> bool {
        self.region_at(side, x).is_some_and(|r| self.regions[r].port)
    }

    pub fn ports(&self) -> impl Iterator<Item = &BoundaryRegion> {
        self.regions.iter().filter(|r| r.port)
    }
}
