//! Integration-ready view of a fluid domain shared by the physics kernels.
//!
//! A [`Cell`] is one connected fluid piece of one element together with the
//! dof block of each of its four nodal basis functions and all quadrature
//! points (volume, fluid-solid interface, outer boundary). A [`GhostPair`]
//! couples two cells across an element facet for the ghost penalties. Both the
//! cut background mesh and the body-fitted reference mesh produce this type.

use crate::grid::{Point, Side};

/// Bilinear basis data at a quadrature point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Basis {
    pub x: Point,
    /// Weight including the physical measure.
    pub w: f64,
    pub n: [f64; 4],
    pub dn: [[f64; 2]; 4],
    /// Mixed second derivative `∂²N/∂x∂y`.
    pub dxy: [f64; 4],
}

impl Basis {
    #[inline]
    pub fn interp<T>(&self, vals: &[T; 4]) -> T
    where
        T: crate::real::Real,
    {
        vals[0] * self.n[0] + vals[1] * self.n[1] + vals[2] * self.n[2] + vals[3] * self.n[3]
    }

    #[inline]
    pub fn grad<T>(&self, vals: &[T; 4]) -> [T; 2]
    where
        T: crate::real::Real,
    {
        let mut g = [T::zero(), T::zero()];
        for a in 0..4 {
            g[0] += vals[a] * self.dn[a][0];
            g[1] += vals[a] * self.dn[a][1];
        }
        g
    }

    #[inline]
    pub fn mixed<T>(&self, vals: &[T; 4]) -> T
    where
        T: crate::real::Real,
    {
        vals[0] * self.dxy[0] + vals[1] * self.dxy[1] + vals[2] * self.dxy[2] + vals[3] * self.dxy[3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub basis: Basis,
    /// Unit normal pointing out of the fluid.
    pub normal: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub element: usize,
    pub piece: usize,
    pub blocks: [usize; 4],
    /// Element size used in penalty scalings.
    pub h: f64,
    pub area: f64,
    pub volume: Vec<Basis>,
    pub interface: Vec<SurfacePoint>,
    pub boundary: Vec<(Side, SurfacePoint)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GhostPoint {
    pub x: Point,
    pub w: f64,
    pub n1: [f64; 4],
    pub dn1: [[f64; 2]; 4],
    pub n2: [f64; 4],
    pub dn2: [[f64; 2]; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GhostPair {
    pub facet: usize,
    pub cells: [usize; 2],
    /// Facet normal from the first cell's element into the second's.
    pub normal: Point,
    pub h: f64,
    pub points: Vec<GhostPoint>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Discretization {
    pub cells: Vec<Cell>,
    pub ghosts: Vec<GhostPair>,
    pub num_blocks: usize,
    /// Mesh node carrying each dof block.
    pub block_node: Vec<usize>,
}

impl Discretization {
    pub fn fluid_volume(&self) -> f64 {
        self.cells.iter().flat_map(|c| c.volume.iter()).map(|q| q.w).sum()
    }

    pub fn interface_length(&self) -> f64 {
        self.cells.iter().flat_map(|c| c.interface.iter()).map(|q| q.basis.w).sum()
    }

    /// Cells touching each block.
    pub fn block_cells(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_blocks];
        for (c, cell) in self.cells.iter().enumerate() {
            for &b in &cell.blocks {
                if out[b].last() != Some(&c) {
                    out[b].push(c);
                }
            }
        }
        out
    }
}

/// Bilinear basis of the axis-aligned rectangle `[origin, origin + h]`.
pub fn rect_basis(origin: Point, h: [f64; 2], x: Point, w: f64) -> Basis {
    let xi = (x[0] - origin[0]) / h[0];
    let eta = (x[1] - origin[1]) / h[1];
    let n = [(1.0 - xi) * (1.0 - eta), xi * (1.0 - eta), xi * eta, (1.0 - xi) * eta];
    let dn = [
        [-(1.0 - eta) / h[0], -(1.0 - xi) / h[1]],
        [(1.0 - eta) / h[0], -xi / h[1]],
        [eta / h[0], xi / h[1]],
        [-eta / h[0], (1.0 - xi) / h[1]],
    ];
    let m = 1.0 / (h[0] * h[1]);
    Basis { x, w, n, dn, dxy: [m, -m, m, -m] }
}
