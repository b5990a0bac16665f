use nalgebra::{Matrix3, Vector3};

use super::GeometryError;
use crate::scalar::Scalar;

/// Proper rigid transform: orthonormal rotation (det +1) plus translation
/// in meters.
///
/// Composition and application follow the usual convention:
/// `a.compose(&b)` applies `b` first, then `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T: Scalar> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

/// Orthonormality tolerance: 1e-9 at f64, loosened to the precision the
/// scalar type can actually represent.
fn ortho_tol<T: Scalar>() -> T {
    let machine = T::default_epsilon() * T::of(100.0);
    T::of(1e-9).max(machine)
}

impl<T: Scalar> RigidTransform<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validated constructor: rejects rotations that are not orthonormal
    /// with determinant +1, and non-finite translations.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self, GeometryError> {
        let tol = ortho_tol::<T>();
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > tol {
            return Err(GeometryError::InvalidTransform(format!(
                "rotation not orthonormal (max deviation {dev})"
            )));
        }
        let det = rotation.determinant();
        if (det - T::one()).abs() > tol {
            return Err(GeometryError::InvalidTransform(format!(
                "rotation determinant {det} != +1"
            )));
        }
        if !translation.iter().all(|v| v.finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Rotation about a unit axis by `angle` radians, with translation.
    pub fn from_axis_angle(axis: Vector3<T>, angle: T, translation: Vector3<T>) -> Self {
        let rotation =
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
                .into_inner();
        Self {
            rotation,
            translation,
        }
    }

    pub fn translation_only(translation: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Transform a point.
    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Rotate a direction (no translation).
    #[inline]
    pub fn apply_dir(&self, d: &Vector3<T>) -> Vector3<T> {
        self.rotation * d
    }

    /// Row-major [r00..r22, tx, ty, tz], the layout used by the binary
    /// grid format and the plain-text camera file.
    pub fn to_row_major(&self) -> [T; 12] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    pub fn from_row_major(v: &[T; 12]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        let translation = Vector3::new(v[9], v[10], v[11]);
        Self::new(rotation, translation)
    }

    /// Angle in radians of the relative rotation between two transforms.
    pub fn rotation_angle_to(&self, other: &Self) -> T {
        let rel = self.rotation.transpose() * other.rotation;
        let cos = (rel.trace() - T::one()) / T::of(2.0);
        cos.clamp(-T::one(), T::one()).acos()
    }
}
