//! Field files, history tables, summaries and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cutter::decompose::Phase;
use crate::discretization::rect_basis;
use crate::error::{Error, Result};
use crate::flow::FIELDS;
use crate::gcmma::GcmmaState;
use crate::grid::BackgroundMesh;
use crate::model::{ForwardState, Physics, WarmStart};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Legacy ASCII VTK of the subcell triangulation. Every triangle has its own
/// three points so enriched fields stay discontinuous across the interface.
pub fn vtk_fields(physics: &Physics, fwd: &ForwardState) -> String {
    let mesh: &BackgroundMesh = &physics.mesh;
    let u = fwd.final_flow();
    let projection = physics.indicator.projection();
    let mut points = Vec::new();
    let mut phase = Vec::new();
    // per point: ux, uy, p, c, psi, psi_bar, phi
    let mut data: Vec<[f64; 7]> = Vec::new();
    for (e, d) in fwd.cut.decompositions.iter().enumerate() {
        let origin = mesh.element_origin(e);
        let corners = mesh.elements[e];
        let phi_e = corners.map(|n| fwd.phi[n]);
        for (k, piece) in d.pieces.iter().enumerate() {
            let blocks = fwd.cut.enrichment.piece_blocks[e].get(k).copied().flatten();
            for tri in &piece.triangles {
                phase.push(if piece.phase == Phase::Fluid { 0 } else { 1 });
                for &x in tri {
                    let b = rect_basis(origin, mesh.h, x, 0.0);
                    let mut row = [0.0; 7];
                    row[6] = b.interp(&phi_e);
                    if let Some(bl) = blocks {
                        for k in 0..3 {
                            row[k] = b.interp(&bl.map(|blk| u[FIELDS * blk + k]));
                        }
                        if let Some(c) = &fwd.species {
                            row[3] = b.interp(&bl.map(|blk| c[blk]));
                        }
                        if let Some(psi) = &fwd.psi {
                            row[4] = b.interp(&bl.map(|blk| psi[blk]));
                            row[5] = projection.project(row[4]);
                        }
                    }
                    points.push(x);
                    data.push(row);
                }
            }
        }
    }
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\ncutflow fields\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", points.len());
    for p in &points {
        let _ = writeln!(s, "{:.17e} {:.17e} 0", p[0], p[1]);
    }
    let ntri = phase.len();
    let _ = writeln!(s, "CELLS {} {}", ntri, 4 * ntri);
    for t in 0..ntri {
        let _ = writeln!(s, "3 {} {} {}", 3 * t, 3 * t + 1, 3 * t + 2);
    }
    let _ = writeln!(s, "CELL_TYPES {ntri}");
    for _ in 0..ntri {
        s.push_str("5\n");
    }
    let _ = writeln!(s, "CELL_DATA {ntri}\nSCALARS phase int 1\nLOOKUP_TABLE default");
    for p in &phase {
        let _ = writeln!(s, "{p}");
    }
    let _ = writeln!(s, "POINT_DATA {}\nVECTORS velocity double", points.len());
    for r in &data {
        let _ = writeln!(s, "{:.17e} {:.17e} 0", r[0], r[1]);
    }
    for (name, k) in [("pressure", 2), ("concentration", 3), ("indicator", 4), ("indicator_projected", 5), ("level_set", 6)] {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for r in &data {
            let _ = writeln!(s, "{:.17e}", r[k]);
        }
    }
    s
}

/// Optimization history table.
pub struct History {
    pub path: PathBuf,
    columns: usize,
}

impl History {
    pub fn header(constraints: usize, criteria: &[String]) -> String {
        let mut cols = vec!["iteration".to_string(), "Z".to_string()];
        cols.extend((1..=constraints).map(|i| format!("g{i}")));
        cols.extend(criteria.iter().cloned());
        cols.push("newton_iterations".into());
        cols.join(",")
    }

    /// Creates the file with its header; `append` keeps existing rows (restart).
    pub fn open(path: PathBuf, constraints: usize, criteria: &[String], append: bool) -> Result<Self> {
        let columns = 3 + constraints + criteria.len();
        if !(append && path.exists()) {
            write_text(&path, &(Self::header(constraints, criteria) + "\n"))?;
        }
        Ok(Self { path, columns })
    }

    pub fn format_row(iteration: usize, objective: f64, constraints: &[f64], criteria: &[f64], newton: usize) -> String {
        let mut s = iteration.to_string();
        for v in std::iter::once(&objective).chain(constraints).chain(criteria) {
            let _ = write!(s, ",{v:.17e}");
        }
        let _ = write!(s, ",{newton}");
        s
    }

    pub fn append(&self, row: &str) -> Result<()> {
        debug_assert_eq!(row.split(',').count(), self.columns);
        use std::io::Write;
        let mut f = fs::OpenOptions::new().append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{row}").map_err(|e| Error::io(&self.path, e))
    }

    /// Drops rows after `iteration` (used when resuming from a checkpoint).
    pub fn truncate_after(&self, iteration: usize) -> Result<()> {
        let text = fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut out = String::new();
        for (i, line) in text.lines().enumerate() {
            let keep = i == 0 || line.split(',').next().and_then(|v| v.parse::<usize>().ok()).is_some_and(|k| k <= iteration);
            if keep {
                out.push_str(line);
                out.push('\n');
            }
        }
        write_text(&self.path, &out)
    }
}

/// Per-run summary record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub criteria: Vec<(String, f64)>,
    /// Net mass flux through the immersed interface.
    pub interface_mass_flow: f64,
    pub fluid_volume: f64,
    pub num_dofs: usize,
    pub newton_iterations: usize,
    pub newton_residuals: Vec<Vec<f64>>,
    pub linear_solves: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasible: Option<bool>,
}

impl Summary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        write_text(path, &text)
    }
}

/// Optimizer restart data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub design: Vec<f64>,
    pub normalization: Vec<f64>,
    pub optimizer: GcmmaState,
    /// Objective of the first feasible iterate, if one was reached.
    pub first_feasible: Option<f64>,
    /// Initial guess that produced the fields at `design`.
    pub warm: Option<WarmStart>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Internal(e.to_string()))?;
        write_text(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid checkpoint {path:?}: {e}")))
    }
}
