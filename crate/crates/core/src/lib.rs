//! Inverse design of a deformable varifocal mirror: mesh generation, a
//! membrane deformation oracle, reverse-mode autodiff, differentiable ray
//! tracing, a graph-network surrogate and the hybrid search that ties them
//! together.

pub mod autodiff;
pub mod error;
pub mod mesh;
pub mod optics;
pub mod pseudofem;
pub mod raytrace;
pub mod surrogate;
pub mod hybridopt;

pub use error::{Error, Result};
pub use mesh::{AugmentedMesh, EyeShape, Mesh, MeshSpec};
pub use optics::{SphereFit, ZernikeSurface};
pub use pseudofem::{DeformationField, DeformationOracle, DesignVariables, MembraneOracle, OracleParams};
