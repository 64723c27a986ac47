//! CutFEM level-set topology optimization for laminar incompressible flow and
//! species transport on a fixed structured background mesh.

pub mod boundary;
pub mod criteria;
pub mod cutter;
pub mod design_field;
pub mod discretization;
pub mod driver;
pub mod error;
pub mod fitted;
pub mod flow;
pub mod gcmma;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod real;
pub mod sensitivities;
pub mod solve;
pub mod transport;

pub use error::{Error, Result};
