use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};

use super::{GeometryError, PointCloud, RigidTransform, Role};
use crate::scalar::Scalar;
use crate::util::{read_f32, read_magic, read_u32, write_f32, write_u32};

/// Truncated signed distance grid: D^3 values in meters, negative inside,
/// clamped to +-truncation.
///
/// The grid cube spans [-extent/2, extent/2]^3 in its own frame; `origin`
/// maps grid coordinates to world (the frame is wrist-centered in the
/// pipeline). Values are stored x-fastest.
#[derive(Clone, Debug)]
pub struct TsdfGrid<T: Scalar> {
    resolution: usize,
    extent: T,
    truncation: T,
    origin: RigidTransform<T>,
    values: Vec<T>,
}

pub const MIN_RESOLUTION: usize = 8;

impl<T: Scalar> TsdfGrid<T> {
    /// Build a grid from raw values (x-fastest); values are clamped to the
    /// truncation band.
    pub fn new(
        resolution: usize,
        extent: T,
        truncation: T,
        origin: RigidTransform<T>,
        mut values: Vec<T>,
    ) -> Result<Self, GeometryError> {
        if resolution < MIN_RESOLUTION {
            return Err(GeometryError::ResolutionTooSmall(resolution, MIN_RESOLUTION));
        }
        if values.len() != resolution * resolution * resolution {
            return Err(GeometryError::DimensionMismatch(format!(
                "expected {} values, got {}",
                resolution.pow(3),
                values.len()
            )));
        }
        if extent <= T::zero() || truncation <= T::zero() {
            return Err(GeometryError::InvalidArgument(
                "extent and truncation must be positive".into(),
            ));
        }
        if values.iter().any(|v| !v.finite()) {
            return Err(GeometryError::NonFinite("tsdf values"));
        }
        for v in &mut values {
            *v = (*v).clamp(-truncation, truncation);
        }
        Ok(Self {
            resolution,
            extent,
            truncation,
            origin,
            values,
        })
    }

    /// Grid filled with +truncation (all empty space).
    pub fn filled_empty(
        resolution: usize,
        extent: T,
        truncation: T,
        origin: RigidTransform<T>,
    ) -> Result<Self, GeometryError> {
        let values = vec![truncation; resolution * resolution * resolution];
        Self::new(resolution, extent, truncation, origin, values)
    }

    /// Sample an SDF at every voxel center (grid-frame coordinates) and
    /// clamp into the truncation band.
    pub fn from_sdf(
        resolution: usize,
        extent: T,
        truncation: T,
        origin: RigidTransform<T>,
        mut sdf: impl FnMut(Vector3<T>) -> T,
    ) -> Result<Self, GeometryError> {
        if resolution < MIN_RESOLUTION {
            return Err(GeometryError::ResolutionTooSmall(resolution, MIN_RESOLUTION));
        }
        let mut values = Vec::with_capacity(resolution.pow(3));
        for z in 0..resolution {
            for y in 0..resolution {
                for x in 0..resolution {
                    let c = Self::center_for(resolution, extent, x, y, z);
                    values.push(sdf(c));
                }
            }
        }
        Self::new(resolution, extent, truncation, origin, values)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn extent(&self) -> T {
        self.extent
    }

    pub fn truncation(&self) -> T {
        self.truncation
    }

    pub fn origin(&self) -> &RigidTransform<T> {
        &self.origin
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn voxel_size(&self) -> T {
        self.extent / T::of(self.resolution as f64)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    #[inline]
    pub fn value(&self, x: usize, y: usize, z: usize) -> T {
        self.values[self.index(x, y, z)]
    }

    fn center_for(resolution: usize, extent: T, x: usize, y: usize, z: usize) -> Vector3<T> {
        let vox = extent / T::of(resolution as f64);
        let half = extent / T::of(2.0);
        let coord = |i: usize| -half + vox * (T::of(i as f64) + T::of(0.5));
        Vector3::new(coord(x), coord(y), coord(z))
    }

    /// Voxel center in the grid frame.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<T> {
        Self::center_for(self.resolution, self.extent, x, y, z)
    }

    /// Voxel center in world coordinates.
    pub fn voxel_center_world(&self, x: usize, y: usize, z: usize) -> Vector3<T> {
        self.origin.apply(&self.voxel_center(x, y, z))
    }

    /// Voxel centers with |value| <= threshold, in world coordinates.
    ///
    /// An empty result is allowed; it signals a failed reconstruction to
    /// the caller.
    pub fn surface_points(&self, threshold: T, role: Role) -> Result<PointCloud<T>, GeometryError> {
        if threshold <= T::zero() {
            return Err(GeometryError::InvalidArgument(
                "surface threshold must be positive".into(),
            ));
        }
        let mut points = Vec::new();
        let d = self.resolution;
        for z in 0..d {
            for y in 0..d {
                for x in 0..d {
                    if self.value(x, y, z).abs() <= threshold {
                        points.push(self.voxel_center_world(x, y, z));
                    }
                }
            }
        }
        PointCloud::new(points, role)
    }

    /// Convert the scalar type (used to hand f64 grids to f32 models).
    pub fn cast<U: Scalar>(&self) -> TsdfGrid<U> {
        let origin = RigidTransform {
            rotation: self.origin.rotation.map(|v| U::of(v.as_f64())),
            translation: self.origin.translation.map(|v| U::of(v.as_f64())),
        };
        TsdfGrid {
            resolution: self.resolution,
            extent: U::of(self.extent.as_f64()),
            truncation: U::of(self.truncation.as_f64()),
            origin,
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Replace stored values (clamping applies). Shape must match.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self, GeometryError> {
        Self::new(
            self.resolution,
            self.extent,
            self.truncation,
            self.origin,
            values,
        )
    }

    const MAGIC: &'static [u8; 4] = b"TSDF";

    /// Binary layout: "TSDF", u32 D, f32 extent, f32 truncation, 12 x f32
    /// origin (row-major rotation then translation), D^3 f32 values
    /// x-fastest. Little-endian throughout.
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        write_u32(w, self.resolution as u32)?;
        write_f32(w, self.extent.as_f64() as f32)?;
        write_f32(w, self.truncation.as_f64() as f32)?;
        for v in self.origin.to_row_major() {
            write_f32(w, v.as_f64() as f32)?;
        }
        for v in &self.values {
            write_f32(w, v.as_f64() as f32)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, GeometryError> {
        if !read_magic(r, Self::MAGIC)? {
            return Err(GeometryError::Format("bad TSDF magic".into()));
        }
        let resolution = read_u32(r)? as usize;
        if resolution < MIN_RESOLUTION || resolution > 1024 {
            return Err(GeometryError::Format(format!(
                "unreasonable resolution {resolution}"
            )));
        }
        let extent = T::of(read_f32(r)? as f64);
        let truncation = T::of(read_f32(r)? as f64);
        let mut packed = [T::zero(); 12];
        for v in &mut packed {
            *v = T::of(read_f32(r)? as f64);
        }
        // The file stores f32, so validate at f32 precision and keep the
        // values untouched (re-orthonormalizing would break byte-stable
        // round trips).
        let rot = Matrix3::new(
            packed[0], packed[1], packed[2], packed[3], packed[4], packed[5], packed[6], packed[7],
            packed[8],
        );
        let dev = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if dev > T::of(1e-4) || (rot.determinant() - T::one()).abs() > T::of(1e-4) {
            return Err(GeometryError::Format(
                "origin rotation not orthonormal".into(),
            ));
        }
        let origin = RigidTransform {
            rotation: rot,
            translation: Vector3::new(packed[9], packed[10], packed[11]),
        };
        let count = resolution * resolution * resolution;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(T::of(read_f32(r)? as f64));
        }
        Self::new(resolution, extent, truncation, origin, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_grid(radius: f64) -> TsdfGrid<f64> {
        TsdfGrid::from_sdf(
            32,
            0.24,
            0.024,
            RigidTransform::identity(),
            |p: Vector3<f64>| p.norm() - radius,
        )
        .unwrap()
    }

    #[test]
    fn values_are_clamped_to_truncation() {
        let g = sphere_grid(0.05);
        assert!(g.values().iter().all(|v| v.abs() <= g.truncation()));
        // center voxel is deep inside → clamped to -truncation
        let c = g.resolution() / 2;
        assert_eq!(g.value(c, c, c), -g.truncation());
    }

    #[test]
    fn all_empty_grid_yields_empty_surface() {
        let g = TsdfGrid::<f64>::filled_empty(16, 0.24, 0.024, RigidTransform::identity()).unwrap();
        let cloud = g.surface_points(0.01, Role::Object).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn sphere_surface_points_lie_near_radius() {
        let g = sphere_grid(0.06);
        let vox = g.voxel_size();
        let cloud = g.surface_points(vox, Role::Object).unwrap();
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            assert!(
                (p.norm() - 0.06).abs() <= vox + 1e-12,
                "point {p:?} too far from the sphere surface"
            );
        }
    }

    #[test]
    fn threshold_at_truncation_returns_every_unclamped_voxel() {
        let g = sphere_grid(0.06);
        let cloud = g.surface_points(g.truncation(), Role::Object).unwrap();
        let expected = g
            .values()
            .iter()
            .filter(|v| v.abs() <= g.truncation())
            .count();
        // every voxel satisfies |v| <= truncation after clamping
        assert_eq!(cloud.len(), expected);
        assert_eq!(cloud.len(), g.values().len());
    }

    #[test]
    fn binary_round_trip_is_stable() {
        let origin = RigidTransform::from_axis_angle(
            Vector3::new(0.3, -0.8, 0.5),
            1.1,
            Vector3::new(0.02, -0.04, 0.31),
        );
        let g = TsdfGrid::from_sdf(32, 0.24, 0.024, origin, |p: Vector3<f64>| p.norm() - 0.055)
            .unwrap();
        let mut buf = Vec::new();
        g.write(&mut buf).unwrap();
        let back = TsdfGrid::<f64>::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.resolution(), g.resolution());

        // writing the re-read grid reproduces the file byte for byte
        let mut buf2 = Vec::new();
        back.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_too_small_resolution() {
        let r = TsdfGrid::<f64>::filled_empty(4, 0.24, 0.024, RigidTransform::identity());
        assert!(matches!(r, Err(GeometryError::ResolutionTooSmall(4, _))));
    }
}
