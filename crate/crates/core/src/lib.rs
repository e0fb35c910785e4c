//! Constructive toolkit for C¹ self-homeomorphisms of `R^n` with certified
//! twist bounds, Jacobian determinant budgets and exact one-dimensional
//! piecewise-linear machinery.

pub mod geom_core;
pub mod optim;
pub mod sampling;
pub mod scalar_shapes;
pub mod budget;
pub mod line_exact;
pub mod poset_lab;
pub mod map_algebra;
pub mod constructions;
pub mod ac_ledger;
