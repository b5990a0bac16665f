use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;

use super::GeometryError;
use crate::scalar::Scalar;

/// Indexed triangle mesh in meters.
///
/// Construction validates indices and drops zero-area triangles.
#[derive(Clone, Debug)]
pub struct Mesh<T: Scalar> {
    pub vertices: Vec<Vector3<T>>,
    pub triangles: Vec<[usize; 3]>,
}

impl<T: Scalar> Mesh<T> {
    pub fn new(
        vertices: Vec<Vector3<T>>,
        triangles: Vec<[usize; 3]>,
    ) -> Result<Self, GeometryError> {
        let n = vertices.len();
        for tri in &triangles {
            if tri.iter().any(|&i| i >= n) {
                return Err(GeometryError::InvalidMesh(format!(
                    "triangle index out of range (vertex count {n})"
                )));
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.finite())) {
            return Err(GeometryError::NonFinite("mesh vertices"));
        }
        let area_eps = T::of(1e-14);
        let triangles = triangles
            .into_iter()
            .filter(|t| {
                let a = vertices[t[0]];
                let e1 = vertices[t[1]] - a;
                let e2 = vertices[t[2]] - a;
                e1.cross(&e2).norm() > area_eps
            })
            .collect();
        Ok(Self {
            vertices,
            triangles,
        })
    }

    /// A closed 2-manifold has every undirected edge shared by exactly two
    /// triangles, once per direction.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut directed: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *directed.entry((a, b)).or_insert(0) += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    pub fn bounds(&self) -> (Vector3<T>, Vector3<T>) {
        let mut min = self.vertices[0];
        let mut max = self.vertices[0];
        for v in &self.vertices {
            for a in 0..3 {
                min[a] = min[a].min(v[a]);
                max[a] = max[a].max(v[a]);
            }
        }
        (min, max)
    }

    /// Parse ASCII OBJ-style vertex/face records. Faces may carry
    /// `v/vt/vn` attributes and are fan-triangulated when they have more
    /// than three corners.
    pub fn read_obj<R: BufRead>(r: &mut R) -> Result<Self, GeometryError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let mut fields = line.split_whitespace();
            match fields.next() {
                Some("v") => {
                    let mut coords = [T::zero(); 3];
                    for c in &mut coords {
                        let s = fields.next().ok_or_else(|| {
                            GeometryError::Format(format!("line {}: short vertex", lineno + 1))
                        })?;
                        *c = s.parse::<f64>().map(T::of).map_err(|_| {
                            GeometryError::Format(format!("line {}: bad coordinate", lineno + 1))
                        })?;
                    }
                    vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Result<Vec<usize>, GeometryError> = fields
                        .map(|f| {
                            let v = f.split('/').next().unwrap_or(f);
                            v.parse::<isize>()
                                .map_err(|_| {
                                    GeometryError::Format(format!(
                                        "line {}: bad face index",
                                        lineno + 1
                                    ))
                                })
                                .and_then(|i| {
                                    // OBJ is 1-based; negatives count from the end
                                    let n = vertices.len() as isize;
                                    let j = if i < 0 { n + i } else { i - 1 };
                                    if j < 0 || j >= n {
                                        Err(GeometryError::Format(format!(
                                            "line {}: face index out of range",
                                            lineno + 1
                                        )))
                                    } else {
                                        Ok(j as usize)
                                    }
                                })
                        })
                        .collect();
                    let idx = idx?;
                    if idx.len() < 3 {
                        return Err(GeometryError::Format(format!(
                            "line {}: face needs 3+ corners",
                            lineno + 1
                        )));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Mesh::new(vertices, triangles)
    }

    pub fn write_obj<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0].as_f64(), v[1].as_f64(), v[2].as_f64())?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    /// Axis-aligned box centered on the origin, outward-facing triangles.
    pub fn cuboid(half_extents: Vector3<T>) -> Self {
        let h = half_extents;
        let sign = |b: bool| if b { T::one() } else { -T::one() };
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            vertices.push(Vector3::new(
                h[0] * sign(i & 1 != 0),
                h[1] * sign(i & 2 != 0),
                h[2] * sign(i & 4 != 0),
            ));
        }
        // Corner indices: bit0 = +x, bit1 = +y, bit2 = +z.
        let quads: [[usize; 4]; 6] = [
            [1, 3, 7, 5], // +x
            [0, 4, 6, 2], // -x
            [2, 6, 7, 3], // +y
            [0, 1, 5, 4], // -y
            [4, 5, 7, 6], // +z
            [0, 2, 3, 1], // -z
        ];
        let mut triangles = Vec::with_capacity(12);
        for q in quads {
            triangles.push([q[0], q[1], q[2]]);
            triangles.push([q[0], q[2], q[3]]);
        }
        Mesh::new(vertices, triangles).expect("cuboid construction")
    }

    /// Latitude/longitude sphere centered on the origin.
    pub fn uv_sphere(radius: T, rings: usize, segments: usize) -> Self {
        assert!(rings >= 3 && segments >= 3);
        let mut vertices = vec![Vector3::new(T::zero(), T::zero(), radius)];
        for i in 1..rings {
            let polar = T::pi() * T::of(i as f64) / T::of(rings as f64);
            for j in 0..segments {
                let azim = T::two_pi() * T::of(j as f64) / T::of(segments as f64);
                vertices.push(Vector3::new(
                    radius * polar.sin() * azim.cos(),
                    radius * polar.sin() * azim.sin(),
                    radius * polar.cos(),
                ));
            }
        }
        vertices.push(Vector3::new(T::zero(), T::zero(), -radius));
        let south = vertices.len() - 1;
        let ring_start = |i: usize| 1 + (i - 1) * segments;

        let mut triangles = Vec::new();
        for j in 0..segments {
            let jn = (j + 1) % segments;
            triangles.push([0, ring_start(1) + j, ring_start(1) + jn]);
        }
        for i in 1..rings - 1 {
            for j in 0..segments {
                let jn = (j + 1) % segments;
                let (a, b) = (ring_start(i) + j, ring_start(i) + jn);
                let (c, d) = (ring_start(i + 1) + j, ring_start(i + 1) + jn);
                triangles.push([a, c, d]);
                triangles.push([a, d, b]);
            }
        }
        for j in 0..segments {
            let jn = (j + 1) % segments;
            triangles.push([south, ring_start(rings - 1) + jn, ring_start(rings - 1) + j]);
        }
        Mesh::new(vertices, triangles).expect("sphere construction")
    }
}
