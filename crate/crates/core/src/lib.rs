//! Finite-difference laboratory for semilinear elliptic Dirichlet-to-Neumann
//! maps: forward solves, linearized DtN maps, complex geometric optics
//! solutions, Fourier-probing reconstruction and stability experiments.

pub mod cgo;
pub mod dtn;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod grid;
pub mod linalg;
pub mod nonlinearity;
pub mod reconstruct;

pub use error::{Error, Result};
pub use grid::{BoundaryField, Carrier, Field, Grid};
pub use nonlinearity::{ClassParams, Family, Nonlinearity};
