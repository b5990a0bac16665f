//! Geometric primitives shared by the whole pipeline: rigid transforms,
//! pinhole cameras, meshes, T-SDF voxel grids, labelled point clouds,
//! and 2D masks.
//!
//! All operations are pure functions over immutable inputs.

mod camera;
mod mask;
mod mesh;
mod pointcloud;
mod transform;
mod tsdf;
mod voxelize;

pub use camera::{triangulate, CameraModel, Triangulation};
pub use mask::{convex_hull_mask, mask_iou, BoundingBox2D, Mask};
pub use mesh::Mesh;
pub use pointcloud::{chamfer_distance, PointCloud, Role};
pub use transform::RigidTransform;
pub use tsdf::TsdfGrid;
pub use voxelize::{mesh_to_tsdf, SignMode, Voxelized};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
    #[error("degenerate stereo geometry: {0}")]
    DegenerateGeometry(String),
    #[error("mesh is not watertight")]
    NonWatertight,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("grid resolution {0} below minimum of {1}")]
    ResolutionTooSmall(usize, usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad file format: {0}")]
    Format(String),
}
