//! Relational scene model with symbolic energies, compiled derivative plans,
//! block-sparse Hessian assembly and a preconditioned CG solver.

pub mod assembly;
pub mod diff;
pub mod energy;
pub mod error;
pub mod eval;
pub mod expr;
pub mod index;
pub mod kernels;
pub mod scene;
pub mod solver;

pub use diff::{DerivativeBundle, Differentiator, ProjectionMode, ProjectionRequest};
pub use error::{Error, Result};
pub use expr::{ExprGraph, NodeId};
pub use index::{GradientLayout, Param, PlacementIndices, Slot};
pub use scene::{AttrId, ConnId, DomainId, EnergyDecl, HostId, MeshId, Scene, Shape};
