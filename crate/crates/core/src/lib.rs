//! Curved peeling layers for multi-axis rough machining.
//!
//! The pipeline designs a smooth unit vector field on a tetrahedral
//! machining domain from anchor directions, removes its rotational part,
//! integrates it to a scalar field with a Poisson solve, repairs
//! singularities, and slices the scalar field into iso-surface layers.

pub mod curlfree;
pub mod diffops;
pub mod fieldopt;
pub mod hull;
pub mod layers;
pub mod mesh;
pub mod mesh_io;
pub mod planner;
pub mod scenes;
pub mod singularity;
pub mod sparse;
pub mod trimesh;

pub use diffops::{BoundaryCondition, ScalarField, VectorField};
pub use mesh::{BoundaryFace, BoundaryTag, MeshError, TetMesh, Vec3};
pub use fieldopt::{Anchor, AnchorSet, FieldOptConfig};
pub use layers::{LayerSpec, PeelSide};
pub use mesh_io::{load_mesh, save_mesh, MeshFormat};
pub use planner::{run_plan, PeelingPlan, PlanConfig, PlanStatus};
pub use singularity::ResolutionDirective;
pub use trimesh::TriMesh;
