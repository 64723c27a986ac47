//! Marching-squares decomposition of one element into single-phase pieces.

use crate::grid::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Fluid,
    Solid,
}

impl Phase {
    pub fn of(phi: f64) -> Phase {
        if phi < 0.0 {
            Phase::Fluid
        } else {
            Phase::Solid
        }
    }
}

/// Straight interface segment; `normal` points from fluid into solid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
    pub normal: Point,
}

impl Segment {
    pub fn length(&self) -> f64 {
        ((self.b[0] - self.a[0]).powi(2) + (self.b[1] - self.a[1]).powi(2)).sqrt()
    }
}

/// Part of an element edge that bounds a piece.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeSegment {
    pub local_edge: usize,
    pub a: Point,
    pub b: Point,
}

/// Connected single-phase region of an element.
#[derive(Clone, Debug, PartialEq)]
pub struct Piece {
    pub phase: Phase,
    /// Counterclockwise boundary polygon.
    pub polygon: Vec<Point>,
    /// Fan triangulation of `polygon`.
    pub triangles: Vec<[Point; 3]>,
    pub area: f64,
    /// Interface segments bounding the piece (normals toward solid).
    pub interface: Vec<Segment>,
    pub edges: Vec<EdgeSegment>,
    /// True for an uncut element (the whole rectangle).
    pub whole: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementDecomposition {
    pub pieces: Vec<Piece>,
    /// All interface segments of the element, normals toward solid.
    pub interface: Vec<Segment>,
}

impl ElementDecomposition {
    pub fn is_cut(&self) -> bool {
        !self.interface.is_empty()
    }

    pub fn area(&self, phase: Phase) -> f64 {
        self.pieces.iter().filter(|p| p.phase == phase).map(|p| p.area).sum()
    }

    /// Phase pattern used to detect topology changes under perturbation.
    pub fn signature(&self) -> Vec<(Phase, usize)> {
        self.pieces.iter().map(|p| (p.phase, p.polygon.len())).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Vertex {
    Corner(usize),
    Crossing(usize),
}

impl Vertex {
    fn on_edge(self, k: usize) -> bool {
        match self {
            Vertex::Corner(c) => c == k || (c + 3) % 4 == k,
            Vertex::Crossing(e) => e == k,
        }
    }
}

pub fn triangle_area(t: &[Point; 3]) -> f64 {
    0.5 * ((t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1]))
}

/// Splits the rectangle `[origin, origin + h]` by the bilinear level set with
/// the given corner values (counterclockwise from the lower-left corner).
///
/// Edge crossings are located by linear interpolation. When the corner signs
/// alternate, the bilinear value at the center decides which diagonal pair
/// of corners is connected.
pub fn decompose_element(origin: Point, h: [f64; 2], phi: [f64; 4]) -> ElementDecomposition {
    let corner = |k: usize| -> Point {
        match k {
            0 => origin,
            1 => [origin[0] + h[0], origin[1]],
            2 => [origin[0] + h[0], origin[1] + h[1]],
            _ => [origin[0], origin[1] + h[1]],
        }
    };
    let phases: [Phase; 4] = std::array::from_fn(|k| Phase::of(phi[k]));

    let mut ring: Vec<(Point, Vertex)> = Vec::with_capacity(8);
    for k in 0..4 {
        ring.push((corner(k), Vertex::Corner(k)));
        let k1 = (k + 1) % 4;
        if phases[k] != phases[k1] {
            let t = phi[k] / (phi[k] - phi[k1]);
            let (p0, p1) = (corner(k), corner(k1));
            ring.push(([p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])], Vertex::Crossing(k)));
        }
    }
    let crossings: Vec<usize> = ring
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| matches!(v, Vertex::Crossing(_)))
        .map(|(i, _)| i)
        .collect();

    let mut polygons: Vec<(Phase, Vec<(Point, Vertex)>)> = Vec::new();
    match crossings.len() {
        0 => polygons.push((phases[0], ring.clone())),
        2 => {
            let (i1, i2) = (crossings[0], crossings[1]);
            let a: Vec<_> = ring[i1..=i2].to_vec();
            let mut b: Vec<_> = ring[i2..].to_vec();
            b.extend_from_slice(&ring[..=i1]);
            for poly in [a, b] {
                let phase = poly
                    .iter()
                    .find_map(|(_, v)| match v {
                        Vertex::Corner(c) => Some(phases[*c]),
                        _ => None,
                    })
                    .expect("every piece contains a corner");
                polygons.push((phase, poly));
            }
        }
        4 => {
            let center = Phase::of(0.25 * (phi[0] + phi[1] + phi[2] + phi[3]));
            let n = ring.len();
            let mut rest = Vec::with_capacity(6);
            let mut corners_cut = Vec::new();
            for (i, &(p, v)) in ring.iter().enumerate() {
                if let Vertex::Corner(c) = v {
                    if phases[c] != center {
                        let prev = ring[(i + n - 1) % n];
                        let next = ring[(i + 1) % n];
                        corners_cut.push((phases[c], vec![prev, (p, v), next]));
                        continue;
                    }
                }
                rest.push((p, v));
            }
            polygons.push((center, rest));
            polygons.extend(corners_cut);
        }
        _ => unreachable!("an element has an even number of edge crossings"),
    }

    let cut = !crossings.is_empty();
    let mut pieces = Vec::with_capacity(polygons.len());
    let mut interface = Vec::new();
    for (phase, poly) in polygons {
        // Fan from the first crossing point.
        let start = poly.iter().position(|(_, v)| matches!(v, Vertex::Crossing(_))).unwrap_or(0);
        let mut verts: Vec<(Point, Vertex)> = poly[start..].to_vec();
        verts.extend_from_slice(&poly[..start]);
        let n = verts.len();
        let mut triangles = Vec::with_capacity(n - 2);
        for i in 1..n - 1 {
            triangles.push([verts[0].0, verts[i].0, verts[i + 1].0]);
        }
        let area: f64 = if cut {
            triangles.iter().map(triangle_area).sum()
        } else {
            h[0] * h[1]
        };
        let mut piece_interface = Vec::new();
        let mut edges = Vec::new();
        for i in 0..n {
            let (p, v) = verts[i];
            let (q, w) = verts[(i + 1) % n];
            if let Some(k) = (0..4).find(|&k| v.on_edge(k) && w.on_edge(k)) {
                edges.push(EdgeSegment { local_edge: k, a: p, b: q });
            } else {
                let d = [q[0] - p[0], q[1] - p[1]];
                let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
                // Outward normal of a counterclockwise polygon.
                let out = [d[1] / len, -d[0] / len];
                let normal = if phase == Phase::Fluid { out } else { [-out[0], -out[1]] };
                let seg = if phase == Phase::Fluid {
                    Segment { a: p, b: q, normal }
                } else {
                    Segment { a: q, b: p, normal }
                };
                piece_interface.push(seg);
                if phase == Phase::Fluid {
                    interface.push(seg);
                }
            }
        }
        pieces.push(Piece {
            phase,
            polygon: verts.iter().map(|(p, _)| *p).collect(),
            triangles,
            area,
            interface: piece_interface,
            edges,
            whole: !cut,
        });
    }
    ElementDecomposition { pieces, interface }
}

/// Gradient of the bilinear interpolant of the corner values at `x`.
pub fn bilinear_gradient(origin: Point, h: [f64; 2], phi: [f64; 4], x: Point) -> Point {
    let xi = (x[0] - origin[0]) / h[0];
    let eta = (x[1] - origin[1]) / h[1];
    let dx = ((phi[1] - phi[0]) * (1.0 - eta) + (phi[2] - phi[3]) * eta) / h[0];
    let dy = ((phi[3] - phi[0]) * (1.0 - xi) + (phi[2] - phi[1]) * xi) / h[1];
    [dx, dy]
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT: [f64; 2] = [1.0, 1.0];

    #[test]
    fn single_solid_corner() {
        let d = decompose_element([0.0, 0.0], UNIT, [-1.0, -1.0, 1.0, -1.0]);
        assert!((d.area(Phase::Solid) - 0.125).abs() < 1e-15);
        assert!((d.area(Phase::Fluid) - 0.875).abs() < 1e-15);
        assert_eq!(d.interface.len(), 1);
        let s = d.interface[0];
        assert!((s.length() - 0.5f64.sqrt()).abs() < 1e-15);
        // Normal toward the solid corner (1, 1).
        assert!(s.normal[0] > 0.0 && s.normal[1] > 0.0);
    }

    #[test]
    fn half_split() {
        let d = decompose_element([0.0, 0.0], UNIT, [-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(d.interface.len(), 1);
        let s = d.interface[0];
        assert!((s.a[1] - 0.5).abs() < 1e-15 && (s.b[1] - 0.5).abs() < 1e-15);
        assert!((d.area(Phase::Fluid) - 0.5).abs() < 1e-15);
        assert_eq!(s.normal, [0.0, 1.0]);
    }

    #[test]
    fn uncut_elements() {
        let d = decompose_element([1.0, 2.0], [0.5, 0.5], [-1.0; 4]);
        assert_eq!(d.pieces.len(), 1);
        assert!(d.pieces[0].whole && d.pieces[0].phase == Phase::Fluid);
        assert_eq!(d.pieces[0].edges.len(), 4);
        assert!((d.area(Phase::Fluid) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn saddle_follows_center_value() {
        // Fluid center: one fluid hexagon and two solid triangles.
        let d = decompose_element([0.0, 0.0], UNIT, [-1.0, 0.5, -1.0, 0.5]);
        let fluid: Vec<_> = d.pieces.iter().filter(|p| p.phase == Phase::Fluid).collect();
        assert_eq!(fluid.len(), 1);
        assert_eq!(fluid[0].polygon.len(), 6);
        assert_eq!(d.interface.len(), 2);
        // Solid center: two fluid triangles.
        let d = decompose_element([0.0, 0.0], UNIT, [-0.5, 1.0, -0.5, 1.0]);
        assert_eq!(d.pieces.iter().filter(|p| p.phase == Phase::Fluid).count(), 2);
        let total = d.area(Phase::Fluid) + d.area(Phase::Solid);
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn normals_point_up_the_gradient() {
        let phi = [-0.3, 0.2, 0.7, -0.1];
        let d = decompose_element([0.0, 0.0], UNIT, phi);
        for s in &d.interface {
            let m = [(s.a[0] + s.b[0]) / 2.0, (s.a[1] + s.b[1]) / 2.0];
            let g = bilinear_gradient([0.0, 0.0], UNIT, phi, m);
            assert!(g[0] * s.normal[0] + g[1] * s.normal[1] > 0.0);
            assert!((s.normal[0].hypot(s.normal[1]) - 1.0).abs() < 1e-12);
        }
    }
}
