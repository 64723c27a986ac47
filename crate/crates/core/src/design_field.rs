//! Optimization variables to nodal level-set values.
//!
//! Convention: `φ > 0` is solid and `φ < 0` is fluid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BackgroundMesh, Point, Side};
use crate::linalg::{CsrMatrix, TripletBuilder};

/// Relative size of the nodal perturbation `φ_c = φ_s = PERTURBATION * h`.
pub const PERTURBATION: f64 = 1e-6;

/// Row-normalized linear (cone) smoothing filter.
#[derive(Clone, Debug)]
pub struct FilterOperator {
    pub radius: f64,
    pub weights: CsrMatrix,
}

pub fn build_filter(mesh: &BackgroundMesh, radius: f64) -> Result<FilterOperator> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Config(format!("filter radius must be positive, got {radius}")));
    }
    let h = mesh.h;
    let [nx, ny] = mesh.divisions;
    let reach = [(radius / h[0]).ceil() as isize, (radius / h[1]).ceil() as isize];
    let mut b = TripletBuilder::new(mesh.num_nodes(), mesh.num_nodes());
    for n in 0..mesh.num_nodes() {
        let (i, j) = mesh.node_ij(n);
        let xi = mesh.nodes[n];
        let mut row = Vec::new();
        let mut sum = 0.0;
        for dj in -reach[1]..=reach[1] {
            let jj = j as isize + dj;
            if jj < 0 || jj > ny as isize {
                continue;
            }
            for di in -reach[0]..=reach[0] {
                let ii = i as isize + di;
                if ii < 0 || ii > nx as isize {
                    continue;
                }
                let m = mesh.node_id(ii as usize, jj as usize);
                let xj = mesh.nodes[m];
                let d = ((xi[0] - xj[0]).powi(2) + (xi[1] - xj[1]).powi(2)).sqrt();
                let w = (radius - d).max(0.0);
                if w > 0.0 {
                    row.push((m, w));
                    sum += w;
                }
            }
        }
        for (m, w) in row {
            b.add(n, m, w / sum);
        }
    }
    Ok(FilterOperator { radius, weights: b.build() })
}

impl FilterOperator {
    pub fn apply(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.weights.ncols {
            return Err(Error::Argument(format!(
                "filter input has length {} but the mesh has {} nodes",
                s.len(),
                self.weights.ncols
            )));
        }
        Ok(self.weights.matvec(s))
    }
}

pub fn apply_filter(f: &FilterOperator, s: &[f64]) -> Result<Vec<f64>> {
    f.apply(s)
}

/// Bounds on a movable port parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub lower: f64,
    pub upper: f64,
}

/// Cylindrical port reduced to 2D: a slab of half-width `radius` around the
/// port axis. The in-plane coordinate is measured across the axis; the axial
/// coordinate is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortPrimitive {
    pub center: Point,
    /// Direction of the port axis, radians from the x axis.
    pub angle: f64,
    pub radius: f64,
    /// Boundary face the port opens onto; its footprint is a slab along it.
    pub side: Side,
    /// Optional optimization bounds for center x, center y and radius.
    #[serde(default)]
    pub center_bounds: [Option<ParamBounds>; 2],
    #[serde(default)]
    pub radius_bounds: Option<ParamBounds>,
}

impl PortPrimitive {
    pub fn fixed(center: Point, angle: f64, radius: f64, side: Side) -> Self {
        Self {
            center,
            angle,
            radius,
            side,
            center_bounds: [None, None],
            radius_bounds: None,
        }
    }

    /// Global-to-local rotation; row 0 is the in-plane axis, row 1 the port axis.
    pub fn rotation(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle.sin_cos();
        [[-s, c], [c, s]]
    }

    pub fn local(&self, x: Point) -> Point {
        let t = self.rotation();
        let d = [x[0] - self.center[0], x[1] - self.center[1]];
        [t[0][0] * d[0] + t[0][1] * d[1], t[1][0] * d[0] + t[1][1] * d[1]]
    }

    /// Number of optimization variables this port contributes.
    pub fn num_variables(&self) -> usize {
        self.center_bounds.iter().filter(|b| b.is_some()).count() + self.radius_bounds.is_some() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("port radius must be positive, got {}", self.radius)));
        }
        Ok(())
    }
}

/// Negated cylinder level set: negative (fluid) inside the port.
pub fn port_lsf(port: &PortPrimitive, x: Point) -> f64 {
    port.local(x)[0].abs() - port.radius
}

/// Gradient of [`port_lsf`] with respect to `(center x, center y, radius)`.
pub fn port_lsf_gradient(port: &PortPrimitive, x: Point) -> [f64; 3] {
    let t = port.rotation();
    let xl = port.local(x)[0];
    let sgn = if xl > 0.0 {
        1.0
    } else if xl < 0.0 {
        -1.0
    } else {
        0.0
    };
    [-sgn * t[0][0], -sgn * t[0][1], -1.0]
}

/// Smooth minimum `−(1/β) ln Σ exp(−β v)` with a shift for stability.
pub fn combine_ports_ks(values: &[f64], beta: f64) -> Result<f64> {
    Ok(ks_min_with_weights(values, beta)?.0)
}

/// Smooth minimum and its partial derivatives with respect to each input.
pub fn ks_min_with_weights(values: &[f64], beta: f64) -> Result<(f64, Vec<f64>)> {
    if values.is_empty() {
        return Err(Error::Argument("KS combination of an empty set".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Argument(format!("KS sharpness must be positive, got {beta}")));
    }
    let m = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = values.iter().map(|v| (-beta * (v - m)).exp()).collect();
    let sum: f64 = e.iter().sum();
    let value = m - sum.ln() / beta;
    Ok((value, e.into_iter().map(|x| x / sum).collect()))
}

/// How the level set at a node is determined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeMode {
    /// Filtered nodal design variables.
    Designable,
    /// KS combination of the listed ports' level sets.
    Port,
    /// Prescribed value (non-design region).
    Fixed(f64),
}

/// Layout of the design vector: nodal block first, then port parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignLayout {
    pub nodal: Option<std::ops::Range<usize>>,
    /// For every port: offsets of (center x, center y, radius) variables.
    pub ports: Vec<[Option<usize>; 3]>,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignVector {
    pub s: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DesignVector {
    pub fn validate(&self) -> Result<()> {
        if self.s.len() != self.lower.len() || self.s.len() != self.upper.len() {
            return Err(Error::Argument("design vector and bounds differ in length".into()));
        }
        for i in 0..self.s.len() {
            if !(self.lower[i] <= self.s[i] && self.s[i] <= self.upper[i]) {
                return Err(Error::Argument(format!(
                    "design variable {i} = {} outside [{}, {}]",
                    self.s[i], self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to map a design vector to nodal level-set values.
#[derive(Clone, Debug)]
pub struct LevelSetMap {
    pub h: f64,
    pub nodes: Vec<Point>,
    pub filter: Option<FilterOperator>,
    pub ports: Vec<PortPrimitive>,
    pub modes: Vec<NodeMode>,
    /// Ports whose footprint contains each port-mode node.
    pub node_ports: Vec<Vec<usize>>,
    pub beta_ks: f64,
    pub layout: DesignLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetField {
    pub phi: Vec<f64>,
    pub shift: f64,
}

impl LevelSetMap {
    /// `fixed` gives prescribed values for non-design nodes; nodes within
    /// `slab_elements` element layers of a port's side follow the ports.
    pub fn new(
        mesh: &BackgroundMesh,
        filter: Option<FilterOperator>,
        ports: Vec<PortPrimitive>,
        slab_elements: usize,
        fixed: &dyn Fn(Point) -> Option<f64>,
    ) -> Result<Self> {
        for p in &ports {
            p.validate()?;
        }
        let h = mesh.element_size();
        let slab = slab_elements as f64 * h * (1.0 + 1e-9);
        let mut modes = Vec::with_capacity(mesh.num_nodes());
        let mut node_ports = Vec::with_capacity(mesh.num_nodes());
        for &x in &mesh.nodes {
            let near: Vec<usize> = ports
                .iter()
                .enumerate()
                .filter(|(_, p)| distance_to_side(mesh, p.side, x) <= slab)
                .map(|(k, _)| k)
                .collect();
            if !near.is_empty() {
                modes.push(NodeMode::Port);
            } else if let Some(v) = fixed(x) {
                modes.push(NodeMode::Fixed(v));
            } else if filter.is_some() {
                modes.push(NodeMode::Designable);
            } else {
                return Err(Error::Config(format!(
                    "node at {x:?} is neither fixed nor covered by a port and no nodal design field is configured"
                )));
            }
            node_ports.push(near);
        }
        let mut len = 0;
        let nodal = filter.as_ref().map(|_| {
            len = mesh.num_nodes();
            0..len
        });
        let mut port_offsets = Vec::with_capacity(ports.len());
        for p in &ports {
            let mut o = [None; 3];
            for k in 0..2 {
                if p.center_bounds[k].is_some() {
                    o[k] = Some(len);
                    len += 1;
                }
            }
            if p.radius_bounds.is_some() {
                o[2] = Some(len);
                len += 1;
            }
            port_offsets.push(o);
        }
        Ok(Self {
            h,
            nodes: mesh.nodes.clone(),
            filter,
            ports,
            modes,
            node_ports,
            beta_ks: 100.0 / h,
            layout: DesignLayout { nodal, ports: port_offsets, len },
        })
    }

    /// Port primitives with their movable parameters taken from `s`.
    pub fn ports_at(&self, s: &[f64]) -> Vec<PortPrimitive> {
        self.ports
            .iter()
            .zip(&self.layout.ports)
            .map(|(p, o)| {
                let mut q = p.clone();
                if let Some(k) = o[0] {
                    q.center[0] = s[k];
                }
                if let Some(k) = o[1] {
                    q.center[1] = s[k];
                }
                if let Some(k) = o[2] {
                    q.radius = s[k];
                }
                q
            })
            .collect()
    }

    /// Level-set values before the perturbation guard.
    pub fn raw_level_set(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.layout.len {
            return Err(Error::Argument(format!(
                "design vector has length {} but the layout expects {}",
                s.len(),
                self.layout.len
            )));
        }
        let filtered = match (&self.filter, &self.layout.nodal) {
            (Some(f), Some(r)) => Some(f.apply(&s[r.clone()])?),
            _ => None,
        };
        let ports = self.ports_at(s);
        let mut phi = Vec::with_capacity(self.nodes.len());
        for (n, &x) in self.nodes.iter().enumerate() {
            phi.push(match self.modes[n] {
                NodeMode::Designable => filtered.as_ref().unwrap()[n],
                NodeMode::Fixed(v) => v,
                NodeMode::Port => {
                    let vals: Vec<f64> = self.node_ports[n].iter().map(|&k| port_lsf(&ports[k], x)).collect();
                    combine_ports_ks(&vals, self.beta_ks)?
                }
            });
        }
        Ok(phi)
    }

    pub fn assemble_level_set(&self, s: &[f64]) -> Result<LevelSetField> {
        let shift = PERTURBATION * self.h;
        let phi = self.raw_level_set(s)?.into_iter().map(|v| perturb(v, shift)).collect();
        Ok(LevelSetField { phi, shift })
    }

    /// Exact `∂φ/∂s`; the perturbation guard counts as identity.
    pub fn level_set_jacobian(&self, s: &[f64]) -> Result<CsrMatrix> {
        if s.len() != self.layout.len {
            return Err(Error::Argument("design vector length does not match the layout".into()));
        }
        let ports = self.ports_at(s);
        let mut b = TripletBuilder::new(self.nodes.len(), self.layout.len);
        let offset = self.layout.nodal.as_ref().map_or(0, |r| r.start);
        for (n, &x) in self.nodes.iter().enumerate() {
            match self.modes[n] {
                NodeMode::Designable => {
                    for (m, w) in self.filter.as_ref().unwrap().weights.row(n) {
                        b.add(n, offset + m, w);
                    }
                }
                NodeMode::Fixed(_) => {}
                NodeMode::Port => {
                    let ids = &self.node_ports[n];
                    let vals: Vec<f64> = ids.iter().map(|&k| port_lsf(&ports[k], x)).collect();
                    let (_, weights) = ks_min_with_weights(&vals, self.beta_ks)?;
                    for (&k, wk) in ids.iter().zip(weights) {
                        let g = port_lsf_gradient(&ports[k], x);
                        for (slot, gi) in self.layout.ports[k].iter().zip(g) {
                            if let Some(col) = slot {
                                b.add(n, *col, wk * gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(b.build())
    }

    /// Default bounds for the nodal block and the configured port bounds.
    pub fn bounds(&self, nodal_lower: f64, nodal_upper: f64) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![0.0; self.layout.len];
        let mut hi = vec![0.0; self.layout.len];
        if let Some(r) = &self.layout.nodal {
            for k in r.clone() {
                lo[k] = nodal_lower;
                hi[k] = nodal_upper;
            }
        }
        for (p, o) in self.ports.iter().zip(&self.layout.ports) {
            let b = [p.center_bounds[0], p.center_bounds[1], p.radius_bounds];
            for (slot, bb) in o.iter().zip(b) {
                if let (Some(k), Some(bb)) = (slot, bb) {
                    lo[*k] = bb.lower;
                    hi[*k] = bb.upper;
                }
            }
        }
        (lo, hi)
    }

    /// Port parameters of the initial design written into a design vector.
    pub fn write_port_parameters(&self, s: &mut [f64]) {
        for (p, o) in self.ports.iter().zip(&self.layout.ports) {
            let v = [p.center[0], p.center[1], p.radius];
            for (slot, vi) in o.iter().zip(v) {
                if let Some(k) = slot {
                    s[*k] = vi;
                }
            }
        }
    }
}

fn distance_to_side(mesh: &BackgroundMesh, side: Side, x: Point) -> f64 {
    match side {
        Side::Left => x[0] - mesh.min[0],
        Side::Right => mesh.max[0] - x[0],
        Side::Bottom => x[1] - mesh.min[1],
        Side::Top => mesh.max[1] - x[1],
    }
}

/// Moves values with `|φ| < shift` to `±shift`; exact zero goes to `+shift`.
pub fn perturb(v: f64, shift: f64) -> f64 {
    if v.abs() < shift {
        if v < 0.0 {
            -shift
        } else {
            shift
        }
    } else {
        v
    }
}
