//! Numerical laboratory for the Hermitian–Einstein heat flow on holomorphic
//! vector bundles over the torus and the sphere.

pub mod bundle;
pub mod checkpoint;
pub mod chern;
pub mod config;
pub mod error;
pub mod field;
pub mod flow;
pub mod functional;
pub mod geometry;
pub mod lab;
pub mod linalg;
pub mod quadrature;
pub mod solvers;
pub mod subobjects;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
