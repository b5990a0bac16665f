use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;

use super::GeometryError;
use crate::scalar::Scalar;

/// Which body a cloud (or mask) describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Role {
    Hand,
    Object,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Hand => "hand",
            Role::Object => "object",
        }
    }
}

/// 3D points in meters with a fixed hand/object role.
#[derive(Clone, Debug)]
pub struct PointCloud<T: Scalar> {
    pub points: Vec<Vector3<T>>,
    role: Role,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Vector3<T>>, role: Role) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.iter().all(|v| v.finite())) {
            return Err(GeometryError::NonFinite("point cloud"));
        }
        Ok(Self { points, role })
    }

    pub fn empty(role: Role) -> Self {
        Self {
            points: Vec::new(),
            role,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &super::RigidTransform<T>) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            role: self.role,
        }
    }

    /// ASCII PLY with a per-vertex `role` property (0 = hand, 1 = object).
    pub fn write_ply<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.points.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "property uchar role")?;
        writeln!(w, "end_header")?;
        let role = match self.role {
            Role::Hand => 0,
            Role::Object => 1,
        };
        for p in &self.points {
            writeln!(
                w,
                "{} {} {} {}",
                p[0].as_f64() as f32,
                p[1].as_f64() as f32,
                p[2].as_f64() as f32,
                role
            )?;
        }
        Ok(())
    }

    pub fn read_ply<R: BufRead>(r: &mut R) -> Result<Self, GeometryError> {
        let mut lines = r.lines();
        let mut count: Option<usize> = None;
        let mut header_done = false;
        for line in lines.by_ref() {
            let line = line?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("element vertex ") {
                count = Some(
                    rest.trim()
                        .parse()
                        .map_err(|_| GeometryError::Format("bad vertex count".into()))?,
                );
            }
            if line == "end_header" {
                header_done = true;
                break;
            }
        }
        if !header_done {
            return Err(GeometryError::Format("missing end_header".into()));
        }
        let count = count.ok_or_else(|| GeometryError::Format("missing element vertex".into()))?;
        let mut points = Vec::with_capacity(count);
        let mut role = Role::Object;
        for _ in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| GeometryError::Format("truncated vertex list".into()))??;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(GeometryError::Format("short vertex record".into()));
            }
            let parse = |s: &str| -> Result<T, GeometryError> {
                s.parse::<f64>()
                    .map(T::of)
                    .map_err(|_| GeometryError::Format("bad float".into()))
            };
            points.push(Vector3::new(
                parse(fields[0])?,
                parse(fields[1])?,
                parse(fields[2])?,
            ));
            role = if fields[3] == "0" { Role::Hand } else { Role::Object };
        }
        PointCloud::new(points, role)
    }
}

/// Uniform-grid nearest-neighbor index with an exact expanding-shell query.
struct CellIndex<T: Scalar> {
    cells: HashMap<(i32, i32, i32), Vec<usize>>,
    key_min: (i32, i32, i32),
    key_max: (i32, i32, i32),
    cell_size: T,
    points: Vec<Vector3<T>>,
}

impl<T: Scalar> CellIndex<T> {
    fn build(points: &[Vector3<T>]) -> Self {
        let mut min = points[0];
        let mut max = points[0];
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let span = (max - min).norm().max(T::of(1e-9));
        // aim for a few points per cell
        let n = points.len() as f64;
        let cell_size = span / T::of(n.cbrt().max(1.0));
        let mut cells: HashMap<(i32, i32, i32), Vec<usize>> = HashMap::new();
        let mut key_min = (i32::MAX, i32::MAX, i32::MAX);
        let mut key_max = (i32::MIN, i32::MIN, i32::MIN);
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell_size);
            key_min = (key_min.0.min(k.0), key_min.1.min(k.1), key_min.2.min(k.2));
            key_max = (key_max.0.max(k.0), key_max.1.max(k.1), key_max.2.max(k.2));
            cells.entry(k).or_default().push(i);
        }
        Self {
            cells,
            key_min,
            key_max,
            cell_size,
            points: points.to_vec(),
        }
    }

    fn key(p: &Vector3<T>, cell: T) -> (i32, i32, i32) {
        let f = |v: T| (v / cell).floor().as_f64() as i32;
        (f(p[0]), f(p[1]), f(p[2]))
    }

    fn brute_sq(&self, q: &Vector3<T>) -> T {
        let mut best = T::of(f64::INFINITY);
        for p in &self.points {
            let d = (p - q).norm_squared();
            if d < best {
                best = d;
            }
        }
        best
    }

    /// Exact squared distance to the nearest indexed point.
    fn nearest_sq(&self, q: &Vector3<T>) -> T {
        let base = Self::key(q, self.cell_size);
        // Chebyshev distance from the query cell to the occupied box; rings
        // below this are guaranteed empty.
        let axis_gap = |v: i32, lo: i32, hi: i32| -> i32 {
            if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0
            }
        };
        let start = axis_gap(base.0, self.key_min.0, self.key_max.0)
            .max(axis_gap(base.1, self.key_min.1, self.key_max.1))
            .max(axis_gap(base.2, self.key_min.2, self.key_max.2));
        if start > 32 {
            // far-field query: shell enumeration would be slower than a scan
            return self.brute_sq(q);
        }
        let axis_reach = |v: i32, lo: i32, hi: i32| -> i32 { (v - lo).abs().max((hi - v).abs()) };
        let last = axis_reach(base.0, self.key_min.0, self.key_max.0)
            .max(axis_reach(base.1, self.key_min.1, self.key_max.1))
            .max(axis_reach(base.2, self.key_min.2, self.key_max.2));

        let mut best = T::of(f64::INFINITY);
        for ring in start..=last {
            // Points in a cell at Chebyshev ring r are at least (r-1)*h away.
            let lower = T::of((ring - 1).max(0) as f64) * self.cell_size;
            if best.finite() && lower * lower > best {
                break;
            }
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = (base.0 + dx, base.1 + dy, base.2 + dz);
                        if let Some(ids) = self.cells.get(&key) {
                            for &i in ids {
                                let d = (self.points[i] - q).norm_squared();
                                if d < best {
                                    best = d;
                                }
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Symmetric Chamfer distance in cm^2 between two non-empty clouds given
/// in meters: per-point-averaged squared nearest-neighbor distance, summed
/// over both directions.
pub fn chamfer_distance<T: Scalar>(
    gt: &PointCloud<T>,
    pred: &PointCloud<T>,
) -> Result<T, GeometryError> {
    if gt.is_empty() || pred.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let m2cm2 = T::of(1e4);
    let dir = |from: &PointCloud<T>, to: &PointCloud<T>| -> T {
        let index = CellIndex::build(&to.points);
        let mut sum = T::zero();
        for p in &from.points {
            sum += index.nearest_sq(p);
        }
        sum / T::of(from.len() as f64)
    };
    Ok((dir(gt, pred) + dir(pred, gt)) * m2cm2)
}

#[cfg(test)]
pub(crate) fn chamfer_brute_force<T: Scalar>(gt: &PointCloud<T>, pred: &PointCloud<T>) -> T {
    let dir = |from: &PointCloud<T>, to: &PointCloud<T>| -> T {
        let mut sum = T::zero();
        for p in &from.points {
            let mut best = T::of(f64::INFINITY);
            for q in &to.points {
                let d = (p - q).norm_squared();
                if d < best {
                    best = d;
                }
            }
            sum += best;
        }
        sum / T::of(from.len() as f64)
    };
    (dir(gt, pred) + dir(pred, gt)) * T::of(1e4)
}
