//! Fixed structured background mesh of axis-aligned bilinear quadrilaterals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Side of the rectangular background domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

    /// Outward unit normal of the domain on this side.
    pub fn outward_normal(self) -> Point {
        match self {
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
            Side::Bottom => [0.0, -1.0],
            Side::Top => [0.0, 1.0],
        }
    }

    /// Coordinate measured along the side (y for vertical sides, x otherwise).
    pub fn tangential_coordinate(self, x: Point) -> f64 {
        match self {
            Side::Left | Side::Right => x[1],
            Side::Bottom | Side::Top => x[0],
        }
    }
}

/// Interior facet shared by two elements.
#[derive(Clone, Debug, PartialEq)]
pub struct Facet {
    /// Adjacent elements, lower index first.
    pub elements: [usize; 2],
    pub nodes: [usize; 2],
    /// Unit normal pointing from `elements[0]` into `elements[1]`.
    pub normal: Point,
}

/// Element edge lying on the outer boundary of the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryEdge {
    pub element: usize,
    /// Local edge index; edge `k` joins local corners `k` and `(k + 1) % 4`.
    pub local_edge: usize,
    pub side: Side,
}

#[derive(Clone, Debug)]
pub struct BackgroundMesh {
    pub min: Point,
    pub max: Point,
    pub divisions: [usize; 2],
    pub h: [f64; 2],
    pub nodes: Vec<Point>,
    /// Corner node ids, counterclockwise from the lower-left corner.
    pub elements: Vec<[usize; 4]>,
    pub facets: Vec<Facet>,
    pub boundary_edges: Vec<BoundaryEdge>,
}

/// Relative tolerance on `h_x / h_y - 1` for an isotropic mesh.
const ISOTROPY_TOL: f64 = 1e-9;

pub fn build_mesh(min: Point, max: Point, divisions: [usize; 2]) -> Result<BackgroundMesh> {
    let [nx, ny] = divisions;
    if nx == 0 || ny == 0 {
        return Err(Error::Config(format!(
            "mesh divisions must be at least 1 per axis, got {nx}x{ny}"
        )));
    }
    let lx = max[0] - min[0];
    let ly = max[1] - min[1];
    if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
        return Err(Error::Config(format!(
            "degenerate mesh extent {min:?} .. {max:?}"
        )));
    }
    let h = [lx / nx as f64, ly / ny as f64];
    if (h[0] / h[1] - 1.0).abs() > ISOTROPY_TOL {
        return Err(Error::Config(format!(
            "anisotropic elements are not supported (h = {h:?})"
        )));
    }

    let node_id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            // Last row/column snaps to the exact extent.
            let x = if i == nx { max[0] } else { min[0] + i as f64 * h[0] };
            let y = if j == ny { max[1] } else { min[1] + j as f64 * h[1] };
            nodes.push([x, y]);
        }
    }

    let mut elements = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            elements.push([
                node_id(i, j),
                node_id(i + 1, j),
                node_id(i + 1, j + 1),
                node_id(i, j + 1),
            ]);
        }
    }

    let elem_id = |i: usize, j: usize| j * nx + i;
    let mut facets = Vec::with_capacity(nx * (ny - 1) + ny * (nx - 1));
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                facets.push(Facet {
                    elements: [elem_id(i, j), elem_id(i + 1, j)],
                    nodes: [node_id(i + 1, j), node_id(i + 1, j + 1)],
                    normal: [1.0, 0.0],
                });
            }
            if j + 1 < ny {
                facets.push(Facet {
                    elements: [elem_id(i, j), elem_id(i, j + 1)],
                    nodes: [node_id(i, j + 1), node_id(i + 1, j + 1)],
                    normal: [0.0, 1.0],
                });
            }
        }
    }

    let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
    for j in 0..ny {
        for i in 0..nx {
            let e = elem_id(i, j);
            if j == 0 {
                boundary_edges.push(BoundaryEdge { element: e, local_edge: 0, side: Side::Bottom });
            }
            if i + 1 == nx {
                boundary_edges.push(BoundaryEdge { element: e, local_edge: 1, side: Side::Right });
            }
            if j + 1 == ny {
                boundary_edges.push(BoundaryEdge { element: e, local_edge: 2, side: Side::Top });
            }
            if i == 0 {
                boundary_edges.push(BoundaryEdge { element: e, local_edge: 3, side: Side::Left });
            }
        }
    }

    Ok(BackgroundMesh {
        min,
        max,
        divisions,
        h,
        nodes,
        elements,
        facets,
        boundary_edges,
    })
}

impl BackgroundMesh {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    /// Uncut element edge length (the mesh is isotropic).
    pub fn element_size(&self) -> f64 {
        self.h[0]
    }

    pub fn element_area(&self) -> f64 {
        self.h[0] * self.h[1]
    }

    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }

    /// Lower-left corner of an element.
    pub fn element_origin(&self, e: usize) -> Point {
        self.nodes[self.elements[e][0]]
    }

    pub fn element_ij(&self, e: usize) -> (usize, usize) {
        (e % self.divisions[0], e / self.divisions[0])
    }

    pub fn node_ij(&self, n: usize) -> (usize, usize) {
        let stride = self.divisions[0] + 1;
        (n % stride, n / stride)
    }

    pub fn node_id(&self, i: usize, j: usize) -> usize {
        j * (self.divisions[0] + 1) + i
    }

    pub fn element_id(&self, i: usize, j: usize) -> usize {
        j * self.divisions[0] + i
    }

    /// Elements whose connectivity contains `node`.
    pub fn node_support(&self, node: usize) -> Result<Vec<usize>> {
        if node >= self.num_nodes() {
            return Err(Error::Argument(format!(
                "node id {node} out of range (mesh has {} nodes)",
                self.num_nodes()
            )));
        }
        let (i, j) = self.node_ij(node);
        let [nx, ny] = self.divisions;
        let mut out = Vec::with_capacity(4);
        for (di, dj) in [(0usize, 0usize), (1, 0), (0, 1), (1, 1)] {
            if i >= di && j >= dj && i - di < nx && j - dj < ny {
                out.push(self.element_id(i - di, j - dj));
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Interior facets of an element as `(facet id, local edge)`.
    pub fn element_facets(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::with_capacity(4); self.num_elements()];
        for (f, facet) in self.facets.iter().enumerate() {
            let [a, b] = facet.elements;
            if facet.normal[0] > 0.5 {
                out[a].push((f, 1));
                out[b].push((f, 3));
            } else {
                out[a].push((f, 2));
                out[b].push((f, 0));
            }
        }
        out
    }

    /// Corner nodes of the local edge `k` of element `e`.
    pub fn edge_nodes(&self, e: usize, k: usize) -> [usize; 2] {
        let c = self.elements[e];
        [c[k], c[(k + 1) % 4]]
    }
}
