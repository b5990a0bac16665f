//! Stereo hand-object shape reconstruction and simulated human-to-robot
//! handover.
//!
//! The crate is organised around the stages of the pipeline:
//!
//! * [`geometry`] — transforms, cameras, meshes, T-SDF grids, point clouds,
//!   masks, and the distance/projection machinery shared by everything else.
//! * [`nn`] — a small dense-tensor reverse-mode autodiff engine with the
//!   layer set needed by the shape codec and view encoder.
//! * [`codec`] — the patch-wise vector-quantized T-SDF autoencoder.
//! * [`encoder`] — the per-view image-to-token classifier.
//! * [`fusion`] — stereo combination of per-view token distributions,
//!   decoding, and projection-based outlier removal.
//! * [`synth`] — synthetic hand-object scene generation, mask rendering,
//!   and the perception oracle.
//! * [`handover`] — grasp sampling/filtering and the kinematic handover
//!   episode simulation.
//! * [`score`] — handover episode scoring and report aggregation.
//! * [`pipeline`] — the end-to-end subcommand implementations used by the
//!   CLI and the acceptance suite.
//!
//! Math modules are generic over [`scalar::Scalar`] (f32 or f64); the
//! aliases below fix the concrete types used by the pipeline.

pub mod codec;
pub mod config;
pub mod encoder;
pub mod fusion;
pub mod geometry;
pub mod handover;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod score;
pub mod synth;
pub mod util;

pub use scalar::Scalar;

/// Scalar used by geometry and the pipeline; training tensors use f32.
pub type Real = f64;

pub type Vec2 = nalgebra::Vector2<Real>;
pub type Vec3 = nalgebra::Vector3<Real>;
pub type Mat3 = nalgebra::Matrix3<Real>;

pub type Pose = geometry::RigidTransform<Real>;
pub type Camera = geometry::CameraModel<Real>;
pub type Cloud = geometry::PointCloud<Real>;
pub type Grid = geometry::TsdfGrid<Real>;
