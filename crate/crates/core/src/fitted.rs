//! Body-fitted reference discretization of a channel with a circular
//! obstacle: an O-grid around the circle inside a square block, followed by a
//! uniform block downstream. Elements are isoparametric bilinear quads; the
//! circle is approximated by the polygon of its ring nodes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::discretization::{Basis, Cell, Discretization, SurfacePoint};
use crate::error::{Error, Result};
use crate::grid::{Point, Side};
use crate::quadrature::{gauss_unit, QuadratureConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedChannel {
    pub min: Point,
    pub max: Point,
    pub center: Point,
    pub radius: f64,
    /// Segments along each side of the square block around the circle.
    pub ring: usize,
    /// Element layers between the circle and the square.
    pub layers: usize,
    /// Ratio of consecutive layer thicknesses (1 gives uniform layers).
    pub grading: f64,
}

pub struct FittedMesh {
    pub nodes: Vec<Point>,
    /// Corner node ids, counterclockwise.
    pub quads: Vec<[usize; 4]>,
    pub disc: Discretization,
}

impl FittedChannel {
    fn side(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.side();
        let c = self.center;
        let gap = [c[0] - self.min[0], self.min[0] + s - c[0], c[1] - self.min[1], self.max[1] - c[1]];
        if !(s > 0.0 && self.max[0] > self.min[0] + s) {
            return Err(Error::Config("the channel must be longer than it is high".into()));
        }
        if !(self.radius > 0.0 && gap.iter().all(|g| *g > self.radius)) {
            return Err(Error::Config("the circle must lie inside the leading square block".into()));
        }
        if self.ring < 1 || self.layers < 1 || !(self.grading > 0.0) {
            return Err(Error::Config("ring, layers and grading must be positive".into()));
        }
        Ok(())
    }

    /// Point `t ∈ [0, 4)` along the square's perimeter, counterclockwise from
    /// the lower left corner.
    fn perimeter(&self, t: f64) -> Point {
        let (x0, y0, s) = (self.min[0], self.min[1], self.side());
        let (k, f) = ((t.floor() as usize).min(3), t - t.floor().min(3.0));
        match k {
            0 => [x0 + f * s, y0],
            1 => [x0 + s, y0 + f * s],
            2 => [x0 + s - f * s, y0 + s],
            _ => [x0, y0 + s - f * s],
        }
    }

    fn layer_fraction(&self, k: usize) -> f64 {
        let n = self.layers as f64;
        if (self.grading - 1.0).abs() < 1e-12 {
            k as f64 / n
        } else {
            (self.grading.powi(k as i32) - 1.0) / (self.grading.powi(self.layers as i32) - 1.0)
        }
    }

    pub fn build(&self, quad: &QuadratureConfig) -> Result<FittedMesh> {
        self.validate()?;
        let m = self.ring;
        let s = self.side();
        let mut polys: Vec<[Point; 4]> = Vec::new();
        let ring: Vec<Vec<Point>> = (0..=self.layers)
            .map(|k| {
                let g = self.layer_fraction(k);
                (0..4 * m)
                    .map(|i| {
                        let p = self.perimeter(i as f64 / m as f64);
                        let d = [p[0] - self.center[0], p[1] - self.center[1]];
                        let len = d[0].hypot(d[1]);
                        let c = [self.center[0] + self.radius * d[0] / len, self.center[1] + self.radius * d[1] / len];
                        [c[0] + g * (p[0] - c[0]), c[1] + g * (p[1] - c[1])]
                    })
                    .collect()
            })
            .collect();
        for k in 0..self.layers {
            for i in 0..4 * m {
                let j = (i + 1) % (4 * m);
                polys.push([ring[k][i], ring[k + 1][i], ring[k + 1][j], ring[k][j]]);
            }
        }
        let x_start = self.min[0] + s;
        let h = s / m as f64;
        let cols = ((self.max[0] - x_start) / h).round().max(1.0) as usize;
        let dx = (self.max[0] - x_start) / cols as f64;
        for i in 0..cols {
            for j in 0..m {
                let (xa, xb) = (x_start + i as f64 * dx, x_start + (i + 1) as f64 * dx);
                let (ya, yb) = (self.min[1] + j as f64 * h, self.min[1] + (j + 1) as f64 * h);
                polys.push([[xa, ya], [xb, ya], [xb, yb], [xa, yb]]);
            }
        }

        let mut ids: HashMap<(i64, i64), usize> = HashMap::new();
        let mut nodes = Vec::new();
        let scale = 1e9 / s;
        let mut quads = Vec::with_capacity(polys.len());
        for mut p in polys {
            if signed_area(&p) < 0.0 {
                p.reverse();
            }
            let q = p.map(|x| {
                let key = ((x[0] * scale).round() as i64, (x[1] * scale).round() as i64);
                *ids.entry(key).or_insert_with(|| {
                    nodes.push(x);
                    nodes.len() - 1
                })
            });
            quads.push(q);
        }

        let tensor = gauss_unit(quad.tensor)?;
        let line = gauss_unit(quad.line)?;
        let tol = 1e-9 * s;
        let side_of = |a: Point, b: Point| -> Option<Side> {
            let on = |v: f64, w: f64| (v - w).abs() < tol;
            if on(a[1], self.min[1]) && on(b[1], self.min[1]) {
                Some(Side::Bottom)
            } else if on(a[1], self.max[1]) && on(b[1], self.max[1]) {
                Some(Side::Top)
            } else if on(a[0], self.min[0]) && on(b[0], self.min[0]) {
                Some(Side::Left)
            } else if on(a[0], self.max[0]) && on(b[0], self.max[0]) {
                Some(Side::Right)
            } else {
                None
            }
        };
        let on_circle = |a: Point| ((a[0] - self.center[0]).hypot(a[1] - self.center[1]) - self.radius).abs() < tol;

        let mut cells = Vec::with_capacity(quads.len());
        for (e, q) in quads.iter().enumerate() {
            let x = q.map(|n| nodes[n]);
            let area = signed_area(&x);
            let longest = (0..4).map(|k| dist(x[k], x[(k + 1) % 4])).fold(0.0, f64::max);
            let volume = tensor
                .iter()
                .flat_map(|&(xi, wx)| tensor.iter().map(move |&(eta, wy)| (xi, eta, wx * wy)))
                .map(|(xi, eta, w)| iso_basis(&x, xi, eta, w, None))
                .collect::<Result<Vec<_>>>()?;
            let mut interface = Vec::new();
            let mut boundary = Vec::new();
            for k in 0..4 {
                let (a, b) = (x[k], x[(k + 1) % 4]);
                let len = dist(a, b);
                let normal = [(b[1] - a[1]) / len, -(b[0] - a[0]) / len];
                let side = side_of(a, b);
                let circle = on_circle(a) && on_circle(b);
                if side.is_none() && !circle {
                    continue;
                }
                for &(t, w) in &line {
                    let (xi, eta) = match k {
                        0 => (t, 0.0),
                        1 => (1.0, t),
                        2 => (1.0 - t, 1.0),
                        _ => (0.0, 1.0 - t),
                    };
                    let sp = SurfacePoint { basis: iso_basis(&x, xi, eta, 1.0, Some(len * w))?, normal };
                    match side {
                        Some(sd) => boundary.push((sd, sp)),
                        None => interface.push(sp),
                    }
                }
            }
            cells.push(Cell { element: e, piece: 0, blocks: *q, h: area / longest, area, volume, interface, boundary });
        }
        let disc = Discretization { cells, ghosts: Vec::new(), num_blocks: nodes.len(), block_node: (0..nodes.len()).collect() };
        Ok(FittedMesh { nodes, quads, disc })
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

fn signed_area(p: &[Point; 4]) -> f64 {
    0.5 * (0..4).map(|k| p[k][0] * p[(k + 1) % 4][1] - p[(k + 1) % 4][0] * p[k][1]).sum::<f64>()
}

/// Basis at reference point `(ξ, η)`; the weight is `w·det J` for volume
/// points or the given surface weight.
fn iso_basis(x: &[Point; 4], xi: f64, eta: f64, w: f64, surface: Option<f64>) -> Result<Basis> {
    let n = [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), xi * eta, (1.0 - xi) * eta];
    let dref = [[-(1.0 - eta), -(1.0 - xi)], [1.0 - eta, -xi], [eta, xi], [-eta, 1.0 - xi]];
    let mut j = [[0.0; 2]; 2];
    let mut pos = [0.0; 2];
    for a in 0..4 {
        for r in 0..2 {
            pos[r] += n[a] * x[a][r];
            for c in 0..2 {
                j[r][c] += x[a][r] * dref[a][c];
            }
        }
    }
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    if !(det > 0.0) {
        return Err(Error::Internal("inverted element in the fitted mesh".into()));
    }
    let dn = dref.map(|d| [(j[1][1] * d[0] - j[1][0] * d[1]) / det, (-j[0][1] * d[0] + j[0][0] * d[1]) / det]);
    // second derivatives of distorted bilinear maps are dropped from the
    // stabilization residual
    Ok(Basis { x: pos, w: surface.unwrap_or(w * det), n, dn, dxy: [0.0; 4] })
}
