use nalgebra::Vector3;

use super::{GeometryError, Mesh, RigidTransform, TsdfGrid};
use crate::scalar::Scalar;

/// How to handle meshes that fail the watertightness check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignMode {
    /// Reject non-watertight meshes.
    Strict,
    /// Fall back to unsigned distances and flag the result.
    UnsignedFallback,
}

/// Voxelization result; `unsigned_fallback` is set when the mesh was not
/// watertight and distances carry no sign.
pub struct Voxelized<T: Scalar> {
    pub grid: TsdfGrid<T>,
    pub unsigned_fallback: bool,
}

/// Exact distance from a point to a triangle (Ericson-style region test).
fn point_triangle_distance<T: Scalar>(
    p: &Vector3<T>,
    a: &Vector3<T>,
    b: &Vector3<T>,
    c: &Vector3<T>,
) -> T {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= T::zero() && d2 <= T::zero() {
        return ap.norm();
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= T::zero() && d4 <= d3 {
        return bp.norm();
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= T::zero() && d1 >= T::zero() && d3 <= T::zero() {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm();
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= T::zero() && d5 <= d6 {
        return cp.norm();
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= T::zero() && d2 >= T::zero() && d6 <= T::zero() {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm();
    }

    let va = d3 * d6 - d5 * d4;
    if va <= T::zero() && (d4 - d3) >= T::zero() && (d5 - d6) >= T::zero() {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b) * w).norm();
    }

    let denom = T::one() / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

/// Moller-Trumbore ray/triangle intersection; returns t and the barycentric
/// margin (distance of the hit from the triangle border, in barycentric
/// units) so callers can detect grazing hits.
fn ray_triangle<T: Scalar>(
    orig: &Vector3<T>,
    dir: &Vector3<T>,
    a: &Vector3<T>,
    b: &Vector3<T>,
    c: &Vector3<T>,
) -> Option<(T, T)> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < T::of(1e-14) {
        return None;
    }
    let inv_det = T::one() / det;
    let tvec = orig - a;
    let u = tvec.dot(&pvec) * inv_det;
    if u < T::zero() || u > T::one() {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < T::zero() || u + v > T::one() {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    if t <= T::zero() {
        return None;
    }
    let margin = u.min(v).min(T::one() - u - v);
    Some((t, margin))
}

/// Crossing parameters of a ray against the whole mesh; `None` when any
/// hit grazes a triangle border (parity would be unreliable).
fn ray_crossings<T: Scalar>(
    mesh: &Mesh<T>,
    orig: &Vector3<T>,
    dir: &Vector3<T>,
) -> Option<Vec<T>> {
    let margin_eps = T::of(1e-9);
    let mut ts = Vec::new();
    for tri in &mesh.triangles {
        if let Some((t, margin)) = ray_triangle(
            orig,
            dir,
            &mesh.vertices[tri[0]],
            &mesh.vertices[tri[1]],
            &mesh.vertices[tri[2]],
        ) {
            if margin < margin_eps {
                return None;
            }
            ts.push(t);
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(ts)
}

/// Per-voxel fallback parity test with a few fixed jittered directions.
fn inside_by_parity<T: Scalar>(mesh: &Mesh<T>, p: &Vector3<T>) -> bool {
    let dirs = [
        Vector3::new(T::of(0.577_215), T::of(0.301_11), T::of(0.759_13)),
        Vector3::new(T::of(-0.391_7), T::of(0.841_23), T::of(0.372_77)),
        Vector3::new(T::of(0.203_09), T::of(-0.530_87), T::of(0.822_76)),
    ];
    for dir in dirs {
        if let Some(ts) = ray_crossings(mesh, p, &dir.normalize()) {
            return ts.len() % 2 == 1;
        }
    }
    // Every cast grazed an edge; count the last direction's hits anyway.
    let dir = dirs[2].normalize();
    let hits = mesh
        .triangles
        .iter()
        .filter(|tri| {
            ray_triangle(
                p,
                &dir,
                &mesh.vertices[tri[0]],
                &mesh.vertices[tri[1]],
                &mesh.vertices[tri[2]],
            )
            .is_some()
        })
        .count();
    hits % 2 == 1
}

/// Sample a mesh into a truncated signed distance grid.
///
/// `frame` maps grid coordinates to the mesh's (world) frame; distances are
/// computed at voxel centers and clamped to +-truncation, negative inside.
/// Sign comes from ray parity, swept once per z column.
pub fn mesh_to_tsdf<T: Scalar>(
    mesh: &Mesh<T>,
    frame: &RigidTransform<T>,
    resolution: usize,
    extent: T,
    truncation: T,
    mode: SignMode,
) -> Result<Voxelized<T>, GeometryError> {
    if resolution < super::tsdf::MIN_RESOLUTION {
        return Err(GeometryError::ResolutionTooSmall(
            resolution,
            super::tsdf::MIN_RESOLUTION,
        ));
    }
    if mesh.triangles.is_empty() {
        return Err(GeometryError::InvalidMesh("mesh has no triangles".into()));
    }
    let watertight = mesh.is_watertight();
    if !watertight && mode == SignMode::Strict {
        return Err(GeometryError::NonWatertight);
    }

    let d = resolution;
    let vox = extent / T::of(d as f64);
    let half = extent / T::of(2.0);
    let coord = |i: usize| -half + vox * (T::of(i as f64) + T::of(0.5));

    // Inside flags, x-fastest like the grid itself.
    let mut inside = vec![false; d * d * d];
    if watertight {
        let dir_world = frame.apply_dir(&Vector3::new(T::zero(), T::zero(), T::one()));
        for y in 0..d {
            for x in 0..d {
                let start_grid = Vector3::new(coord(x), coord(y), -half - vox);
                let orig = frame.apply(&start_grid);
                match ray_crossings(mesh, &orig, &dir_world) {
                    Some(ts) => {
                        // a voxel is inside when an odd number of crossings
                        // lie beyond it along the column
                        for z in 0..d {
                            let t_v = coord(z) - (-half - vox);
                            let ahead = ts.iter().filter(|&&t| t > t_v).count();
                            inside[x + d * (y + d * z)] = ahead % 2 == 1;
                        }
                    }
                    None => {
                        // grazing hit: fall back to per-voxel jittered rays
                        for z in 0..d {
                            let c = frame.apply(&Vector3::new(coord(x), coord(y), coord(z)));
                            inside[x + d * (y + d * z)] = inside_by_parity(mesh, &c);
                        }
                    }
                }
            }
        }
    }

    let mut values = Vec::with_capacity(d * d * d);
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let world = frame.apply(&Vector3::new(coord(x), coord(y), coord(z)));
                let mut dist = T::of(f64::INFINITY);
                for tri in &mesh.triangles {
                    let t = point_triangle_distance(
                        &world,
                        &mesh.vertices[tri[0]],
                        &mesh.vertices[tri[1]],
                        &mesh.vertices[tri[2]],
                    );
                    if t < dist {
                        dist = t;
                    }
                }
                let dist = dist.min(truncation);
                values.push(if inside[x + d * (y + d * z)] { -dist } else { dist });
            }
        }
    }

    let grid = TsdfGrid::new(resolution, extent, truncation, *frame, values)?;
    Ok(Voxelized {
        grid,
        unsigned_fallback: !watertight,
    })
}
