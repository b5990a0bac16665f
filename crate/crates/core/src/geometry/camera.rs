use nalgebra::{Matrix3, Vector2, Vector3};

use super::{GeometryError, PointCloud, RigidTransform};
use crate::scalar::Scalar;

/// Pinhole camera: upper-triangular intrinsics `K` (pixels) and a
/// world-to-camera extrinsic.
#[derive(Clone, Debug)]
pub struct CameraModel<T: Scalar> {
    pub intrinsics: Matrix3<T>,
    pub extrinsic: RigidTransform<T>,
    pub width: usize,
    pub height: usize,
}

/// Depth below this is treated as "behind the camera".
fn depth_eps<T: Scalar>() -> T {
    T::of(1e-9)
}

impl<T: Scalar> CameraModel<T> {
    pub fn new(
        intrinsics: Matrix3<T>,
        extrinsic: RigidTransform<T>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if (intrinsics[(2, 2)] - T::one()).abs() > T::of(1e-9) {
            return Err(GeometryError::InvalidCamera("K[2][2] must be 1".into()));
        }
        if intrinsics[(0, 0)] <= T::zero() || intrinsics[(1, 1)] <= T::zero() {
            return Err(GeometryError::InvalidCamera(
                "focal lengths must be positive".into(),
            ));
        }
        for (r, c) in [(1, 0), (2, 0), (2, 1)] {
            if intrinsics[(r, c)].abs() > T::of(1e-9) {
                return Err(GeometryError::InvalidCamera(
                    "K must be upper triangular".into(),
                ));
            }
        }
        let (cx, cy) = (intrinsics[(0, 2)], intrinsics[(1, 2)]);
        if cx < T::zero() || cx > T::of(width as f64) || cy < T::zero() || cy > T::of(height as f64)
        {
            return Err(GeometryError::InvalidCamera(
                "principal point outside image".into(),
            ));
        }
        Ok(Self {
            intrinsics,
            extrinsic,
            width,
            height,
        })
    }

    /// Simple centered-principal-point camera.
    pub fn with_focal(
        focal: T,
        width: usize,
        height: usize,
        extrinsic: RigidTransform<T>,
    ) -> Result<Self, GeometryError> {
        let two = T::of(2.0);
        let k = Matrix3::new(
            focal,
            T::zero(),
            T::of(width as f64) / two,
            T::zero(),
            focal,
            T::of(height as f64) / two,
            T::zero(),
            T::zero(),
            T::one(),
        );
        Self::new(k, extrinsic, width, height)
    }

    /// Camera at `center` looking toward `target`, +y image axis pointing
    /// along world -up (image rows grow downward).
    pub fn look_at(
        center: Vector3<T>,
        target: Vector3<T>,
        up: Vector3<T>,
        focal: T,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let z = (target - center).normalize();
        let x = up.cross(&z);
        if x.norm() < T::of(1e-9) {
            return Err(GeometryError::DegenerateGeometry(
                "look_at: view direction parallel to up".into(),
            ));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // rows of the rotation are the camera axes expressed in world
        let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let extrinsic = RigidTransform {
            rotation: rot,
            translation: -(rot * center),
        };
        Self::with_focal(focal, width, height, extrinsic)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<T> {
        self.extrinsic.inverse().translation
    }

    /// Project a world point: `Some((pixel, depth))`, or `None` when the
    /// point lies at or behind the camera plane.
    pub fn project(&self, p: &Vector3<T>) -> Option<(Vector2<T>, T)> {
        let cam = self.extrinsic.apply(p);
        let depth = cam[2];
        if depth <= depth_eps::<T>() {
            return None;
        }
        let h = self.intrinsics * cam;
        Some((Vector2::new(h[0] / depth, h[1] / depth), depth))
    }

    /// Project every point of a cloud; invalid (behind-camera) points map
    /// to `None` in the returned list.
    pub fn project_points(&self, cloud: &PointCloud<T>) -> Vec<Option<Vector2<T>>> {
        cloud
            .points
            .iter()
            .map(|p| self.project(p).map(|(px, _)| px))
            .collect()
    }

    pub fn contains_pixel(&self, px: &Vector2<T>) -> bool {
        px[0] >= T::zero()
            && px[1] >= T::zero()
            && px[0] < T::of(self.width as f64)
            && px[1] < T::of(self.height as f64)
    }

    /// World-space unit ray through a pixel, anchored at the camera center.
    pub fn pixel_ray(&self, px: &Vector2<T>) -> (Vector3<T>, Vector3<T>) {
        let k = &self.intrinsics;
        let x = (px[0] - k[(0, 2)]) / k[(0, 0)];
        // account for skew K[0][1]
        let y = (px[1] - k[(1, 2)]) / k[(1, 1)];
        let x = x - k[(0, 1)] * y / k[(0, 0)];
        let dir_cam = Vector3::new(x, y, T::one());
        let inv = self.extrinsic.inverse();
        let dir = inv.apply_dir(&dir_cam).normalize();
        (inv.translation, dir)
    }
}

/// Result of two-view triangulation: the midpoint of the closest approach
/// of the two pixel rays, plus the reprojection error in each view.
#[derive(Clone, Copy, Debug)]
pub struct Triangulation<T: Scalar> {
    pub point: Vector3<T>,
    pub reproj_error_left: T,
    pub reproj_error_right: T,
}

/// Linear least-squares triangulation over the two pixel rays.
///
/// Fails on coincident camera centers or near-parallel rays (< 0.5 deg).
pub fn triangulate<T: Scalar>(
    pixel_left: &Vector2<T>,
    pixel_right: &Vector2<T>,
    cam_left: &CameraModel<T>,
    cam_right: &CameraModel<T>,
) -> Result<Triangulation<T>, GeometryError> {
    let (c1, d1) = cam_left.pixel_ray(pixel_left);
    let (c2, d2) = cam_right.pixel_ray(pixel_right);

    if (c1 - c2).norm() < T::of(1e-9) {
        return Err(GeometryError::DegenerateGeometry(
            "camera centers coincide".into(),
        ));
    }
    let cos = d1.dot(&d2).abs().min(T::one());
    let min_angle = T::of(0.5f64.to_radians());
    if cos.acos() < min_angle {
        return Err(GeometryError::DegenerateGeometry(format!(
            "rays nearly parallel ({} deg)",
            cos.acos().as_f64().to_degrees()
        )));
    }

    // Closest points on the two rays: minimize |c1 + t1 d1 - c2 - t2 d2|.
    let w = c1 - c2;
    let b = d1.dot(&d2);
    let d = d1.dot(&w);
    let e = d2.dot(&w);
    let denom = T::one() - b * b;
    let t1 = (b * e - d) / denom;
    let t2 = (e - b * d) / denom;
    let p1 = c1 + d1 * t1;
    let p2 = c2 + d2 * t2;
    let point = (p1 + p2) * T::of(0.5);

    let err = |cam: &CameraModel<T>, px: &Vector2<T>| -> T {
        match cam.project(&point) {
            Some((proj, _)) => (proj - px).norm(),
            None => T::of(f64::INFINITY),
        }
    };

    Ok(Triangulation {
        point,
        reproj_error_left: err(cam_left, pixel_left),
        reproj_error_right: err(cam_right, pixel_right),
    })
}
