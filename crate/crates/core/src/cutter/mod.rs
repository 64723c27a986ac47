//! Intersection of the level set with the background mesh.
//!
//! The cut model holds the per-element decomposition into single-phase
//! pieces, the Heaviside enrichment table that gives every connected fluid
//! region in a node's support its own dof block, and the ghost facet set.

pub mod decompose;

use serde::{Deserialize, Serialize};

use crate::discretization::{rect_basis, Basis, Cell, Discretization, GhostPair, GhostPoint, SurfacePoint};
use crate::error::{Error, Result};
use crate::grid::{BackgroundMesh, Point, Side};
use crate::quadrature::{gauss_unit, triangle_rule, QuadratureConfig};

pub use decompose::{decompose_element, ElementDecomposition, Phase, Piece, Segment};

/// Maximum number of enrichment levels per node.
pub const DEFAULT_LEVEL_CAP: usize = 8;

/// Pieces smaller than this fraction of `h²` carry no quadrature.
pub const SLIVER_FRACTION: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Fluid,
    Solid,
    Cut,
}

pub fn classify_elements(mesh: &BackgroundMesh, phi: &[f64]) -> Result<Vec<Classification>> {
    if phi.len() != mesh.num_nodes() {
        return Err(Error::Argument(format!(
            "level set has {} values, mesh has {} nodes",
            phi.len(),
            mesh.num_nodes()
        )));
    }
    mesh.elements
        .iter()
        .map(|corners| {
            let mut fluid = 0;
            for &n in corners {
                if phi[n] == 0.0 || !phi[n].is_finite() {
                    return Err(Error::Internal(format!(
                        "level set value {} at node {n} is not perturbed away from zero",
                        phi[n]
                    )));
                }
                if phi[n] < 0.0 {
                    fluid += 1;
                }
            }
            Ok(match fluid {
                4 => Classification::Fluid,
                0 => Classification::Solid,
                _ => Classification::Cut,
            })
        })
        .collect()
}

/// Heaviside enrichment table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Enrichment {
    pub num_blocks: usize,
    /// Node of every block.
    pub block_node: Vec<usize>,
    /// Blocks (enrichment levels) of every node, in level order.
    pub node_blocks: Vec<Vec<usize>>,
    /// Active block of each local corner for every piece of every element;
    /// `None` for solid pieces and for fluid pieces without quadrature.
    pub piece_blocks: Vec<Vec<Option<[usize; 4]>>>,
}

#[derive(Clone, Debug)]
pub struct CutModel {
    pub h: f64,
    pub classification: Vec<Classification>,
    pub decompositions: Vec<ElementDecomposition>,
    pub enrichment: Enrichment,
    /// Ghost facet set: interior facets next to a cut element with active
    /// fluid on both sides.
    pub ghost_facets: Vec<usize>,
}

/// Minimal union-find over a handful of pieces.
struct Components {
    parent: Vec<usize>,
}

impl Components {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Fluid piece of an element owning the fluid part of a local edge.
fn edge_owner(d: &ElementDecomposition, k: usize) -> Option<usize> {
    d.pieces
        .iter()
        .position(|p| p.phase == Phase::Fluid && p.edges.iter().any(|s| s.local_edge == k))
}

pub fn is_sliver(piece: &Piece, h: f64) -> bool {
    piece.area < SLIVER_FRACTION * h * h
}

/// Flood fill over fluid pieces within each node's support.
pub fn build_enrichment(
    mesh: &BackgroundMesh,
    decompositions: &[ElementDecomposition],
    cap: usize,
) -> Result<Enrichment> {
    let h = mesh.element_size();
    let element_facets = mesh.element_facets();
    let mut piece_blocks: Vec<Vec<Option<[usize; 4]>>> =
        decompositions.iter().map(|d| vec![None; d.pieces.len()]).collect();
    let mut partial: Vec<Vec<[Option<usize>; 4]>> =
        decompositions.iter().map(|d| vec![[None; 4]; d.pieces.len()]).collect();
    let mut node_blocks = vec![Vec::new(); mesh.num_nodes()];
    let mut block_node = Vec::new();

    for node in 0..mesh.num_nodes() {
        let support = mesh.node_support(node)?;
        // (element, piece, local corner of node)
        let mut pieces: Vec<(usize, usize, usize)> = Vec::new();
        for &e in &support {
            let corner = mesh.elements[e].iter().position(|&n| n == node).expect("node in support");
            for (p, piece) in decompositions[e].pieces.iter().enumerate() {
                if piece.phase == Phase::Fluid {
                    pieces.push((e, p, corner));
                }
            }
        }
        if pieces.is_empty() {
            continue;
        }
        let mut comps = Components::new(pieces.len());
        for (i, &(e, _, _)) in pieces.iter().enumerate() {
            for &(f, k) in &element_facets[e] {
                let other = mesh.facets[f].elements.iter().copied().find(|&x| x != e).unwrap();
                if other < e || !support.contains(&other) {
                    continue;
                }
                let (Some(pa), Some(pb)) =
                    (edge_owner(&decompositions[e], k), edge_owner(&decompositions[other], (k + 2) % 4))
                else {
                    continue;
                };
                if pieces[i].1 != pa {
                    continue;
                }
                if let Some(j) = pieces.iter().position(|&(x, p, _)| x == other && p == pb) {
                    comps.union(i, j);
                }
            }
        }
        let mut roots: Vec<usize> = Vec::new();
        for i in 0..pieces.len() {
            let r = comps.find(i);
            let (e, p, _) = pieces[i];
            if !is_sliver(&decompositions[e].pieces[p], h) && !roots.contains(&r) {
                roots.push(r);
            }
        }
        roots.sort_unstable();
        if roots.len() > cap {
            return Err(Error::Capacity { node, levels: roots.len(), cap });
        }
        for &r in &roots {
            let block = block_node.len();
            block_node.push(node);
            node_blocks[node].push(block);
            for i in 0..pieces.len() {
                if comps.find(i) == r {
                    let (e, p, c) = pieces[i];
                    partial[e][p][c] = Some(block);
                }
            }
        }
    }

    for (e, d) in decompositions.iter().enumerate() {
        for (p, piece) in d.pieces.iter().enumerate() {
            if piece.phase != Phase::Fluid || is_sliver(piece, h) {
                continue;
            }
            let b = partial[e][p];
            if let [Some(a), Some(b1), Some(c), Some(dd)] = b {
                piece_blocks[e][p] = Some([a, b1, c, dd]);
            } else {
                return Err(Error::Internal(format!("fluid piece {p} of element {e} lacks an enrichment block")));
            }
        }
    }

    Ok(Enrichment { num_blocks: block_node.len(), block_node, node_blocks, piece_blocks })
}

/// Interior facets next to at least one cut element where both elements
/// carry active fluid.
pub fn collect_ghost_facets(
    mesh: &BackgroundMesh,
    classification: &[Classification],
    active: &[bool],
) -> Vec<usize> {
    mesh.facets
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            let [a, b] = f.elements;
            (classification[a] == Classification::Cut || classification[b] == Classification::Cut)
                && active[a]
                && active[b]
        })
        .map(|(i, _)| i)
        .collect()
}

impl CutModel {
    pub fn build(mesh: &BackgroundMesh, phi: &[f64]) -> Result<Self> {
        Self::build_with_cap(mesh, phi, DEFAULT_LEVEL_CAP)
    }

    pub fn build_with_cap(mesh: &BackgroundMesh, phi: &[f64], cap: usize) -> Result<Self> {
        use rayon::prelude::*;
        let classification = classify_elements(mesh, phi)?;
        let decompositions: Vec<ElementDecomposition> = (0..mesh.num_elements())
            .into_par_iter()
            .map(|e| decompose_element(mesh.element_origin(e), mesh.h, element_phi(mesh, phi, e)))
            .collect();
        let enrichment = build_enrichment(mesh, &decompositions, cap)?;
        let active: Vec<bool> =
            enrichment.piece_blocks.iter().map(|p| p.iter().any(|b| b.is_some())).collect();
        let ghost_facets = collect_ghost_facets(mesh, &classification, &active);
        Ok(Self { h: mesh.element_size(), classification, decompositions, enrichment, ghost_facets })
    }

    pub fn fluid_area(&self) -> f64 {
        self.decompositions.iter().map(|d| d.area(Phase::Fluid)).sum()
    }

    pub fn solid_area(&self) -> f64 {
        self.decompositions.iter().map(|d| d.area(Phase::Solid)).sum()
    }

    pub fn interface_length(&self) -> f64 {
        self.decompositions.iter().flat_map(|d| d.interface.iter()).map(|s| s.length()).sum()
    }

    pub fn interface_segments(&self) -> impl Iterator<Item = (usize, &Segment)> {
        self.decompositions
            .iter()
            .enumerate()
            .flat_map(|(e, d)| d.interface.iter().map(move |s| (e, s)))
    }

    /// Quadrature-ready fluid cells and ghost pairs.
    pub fn discretize(&self, mesh: &BackgroundMesh, quad: &QuadratureConfig) -> Result<Discretization> {
        use rayon::prelude::*;
        let boundary = boundary_sides(mesh);
        let per_element: Vec<Vec<Cell>> = (0..mesh.num_elements())
            .into_par_iter()
            .map(|e| {
                element_cells(
                    mesh,
                    e,
                    &self.decompositions[e],
                    &self.enrichment.piece_blocks[e],
                    &boundary[e],
                    quad,
                )
            })
            .collect::<Result<_>>()?;
        let mut cells = Vec::new();
        let mut cell_of: Vec<Vec<usize>> = Vec::with_capacity(per_element.len());
        for list in per_element {
            let mut ids = Vec::with_capacity(list.len());
            for c in list {
                ids.push(cells.len());
                cells.push(c);
            }
            cell_of.push(ids);
        }
        let line = gauss_unit(quad.line)?;
        let mut ghosts = Vec::new();
        for &f in &self.ghost_facets {
            let facet = &mesh.facets[f];
            let [e1, e2] = facet.elements;
            let (a, b) = (mesh.nodes[facet.nodes[0]], mesh.nodes[facet.nodes[1]]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let (o1, o2) = (mesh.element_origin(e1), mesh.element_origin(e2));
            let points: Vec<GhostPoint> = line
                .iter()
                .map(|&(t, w)| {
                    let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                    let b1 = rect_basis(o1, mesh.h, x, w * len);
                    let b2 = rect_basis(o2, mesh.h, x, w * len);
                    GhostPoint { x, w: w * len, n1: b1.n, dn1: b1.dn, n2: b2.n, dn2: b2.dn }
                })
                .collect();
            for &c1 in &cell_of[e1] {
                for &c2 in &cell_of[e2] {
                    let shares = facet.nodes.iter().any(|&n| {
                        let k1 = mesh.elements[e1].iter().position(|&m| m == n).unwrap();
                        let k2 = mesh.elements[e2].iter().position(|&m| m == n).unwrap();
                        cells[c1].blocks[k1] == cells[c2].blocks[k2]
                    });
                    if shares {
                        ghosts.push(GhostPair {
                            facet: f,
                            cells: [c1, c2],
                            normal: facet.normal,
                            h: self.h,
                            points: points.clone(),
                        });
                    }
                }
            }
        }
        Ok(Discretization {
            cells,
            ghosts,
            num_blocks: self.enrichment.num_blocks,
            block_node: self.enrichment.block_node.clone(),
        })
    }
}

pub fn element_phi(mesh: &BackgroundMesh, phi: &[f64], e: usize) -> [f64; 4] {
    let c = mesh.elements[e];
    [phi[c[0]], phi[c[1]], phi[c[2]], phi[c[3]]]
}

/// Outer-boundary sides of each element's local edges.
pub fn boundary_sides(mesh: &BackgroundMesh) -> Vec<[Option<Side>; 4]> {
    let mut out = vec![[None; 4]; mesh.num_elements()];
    for be in &mesh.boundary_edges {
        out[be.element][be.local_edge] = Some(be.side);
    }
    out
}

/// Cells of one element from a decomposition whose pieces are indexed like
/// `piece_blocks`. Used both for the global discretization and for locally
/// re-cut elements when differentiating with respect to nodal level-set values.
pub fn element_cells(
    mesh: &BackgroundMesh,
    e: usize,
    decomposition: &ElementDecomposition,
    piece_blocks: &[Option<[usize; 4]>],
    boundary: &[Option<Side>; 4],
    quad: &QuadratureConfig,
) -> Result<Vec<Cell>> {
    let origin = mesh.element_origin(e);
    let h = mesh.element_size();
    let line = gauss_unit(quad.line)?;
    let mut out = Vec::new();
    for (p, piece) in decomposition.pieces.iter().enumerate() {
        let Some(blocks) = piece_blocks.get(p).copied().flatten() else {
            continue;
        };
        let mut volume = Vec::new();
        if piece.whole {
            let g = gauss_unit(quad.tensor)?;
            for &(ty, wy) in &g {
                for &(tx, wx) in &g {
                    let x = [origin[0] + tx * mesh.h[0], origin[1] + ty * mesh.h[1]];
                    volume.push(rect_basis(origin, mesh.h, x, wx * wy * mesh.h[0] * mesh.h[1]));
                }
            }
        } else {
            let rule = triangle_rule(quad.triangle)?;
            for t in &piece.triangles {
                let area = decompose::triangle_area(t);
                for &(l, w) in &rule {
                    let x = [
                        t[0][0] + l[0] * (t[1][0] - t[0][0]) + l[1] * (t[2][0] - t[0][0]),
                        t[0][1] + l[0] * (t[1][1] - t[0][1]) + l[1] * (t[2][1] - t[0][1]),
                    ];
                    volume.push(rect_basis(origin, mesh.h, x, w * area));
                }
            }
        }
        let segment_points = |a: Point, b: Point| -> Vec<(Basis, f64)> {
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            line.iter()
                .map(|&(t, w)| {
                    let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                    (rect_basis(origin, mesh.h, x, w * len), len)
                })
                .collect()
        };
        let mut interface = Vec::new();
        for s in &piece.interface {
            for (basis, _) in segment_points(s.a, s.b) {
                interface.push(SurfacePoint { basis, normal: s.normal });
            }
        }
        let mut bnd = Vec::new();
        for es in &piece.edges {
            if let Some(side) = boundary[es.local_edge] {
                for (basis, _) in segment_points(es.a, es.b) {
                    bnd.push((side, SurfacePoint { basis, normal: side.outward_normal() }));
                }
            }
        }
        out.push(Cell {
            element: e,
            piece: p,
            blocks,
            h,
            area: piece.area,
            volume,
            interface,
            boundary: bnd,
        });
    }
    Ok(out)
}
