//! Numerical p-parabolicity on rotationally symmetric model manifolds:
//! radial model data, discretised p-Laplacians, condenser capacities,
//! Khas'minskii-type witnesses and Evans potentials.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod capacity;
pub mod convexity;
pub mod domain;
pub mod evans;
pub mod khasminskii;
pub mod model;
pub mod quadrature;
pub mod solver;
pub mod sparse;

pub use capacity::{CapacityError, CapacityResult};
pub use domain::{
    BoundaryTag, DiscreteDomain, DomainError, DomainKind, Exhaustion, Grading, NodeSet, OuterRadius, RadialGrid,
    ScalarField,
};
pub use model::{AreaForm, AreaTable, ModelError, ModelManifold, Parabolicity, ParabolicityReport};
pub use solver::{BoundaryValues, SolutionCheck, SolveReport, SolveStatus, SolverError, SolverOptions};
