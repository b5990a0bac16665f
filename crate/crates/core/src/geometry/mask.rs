use nalgebra::Vector2;

use super::{CameraModel, GeometryError, PointCloud, Role};
use crate::scalar::Scalar;

/// Binary segmentation mask; dimensions match the owning camera's image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    role: Role,
}

impl Mask {
    pub fn empty(width: usize, height: usize, role: Role) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
            role,
        }
    }

    pub fn from_bits(
        width: usize,
        height: usize,
        bits: Vec<bool>,
        role: Role,
    ) -> Result<Self, GeometryError> {
        if bits.len() != width * height {
            return Err(GeometryError::DimensionMismatch(format!(
                "mask bits {} != {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
            role,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when the (possibly fractional) pixel lies on a set cell.
    pub fn contains_pixel(&self, px: f64, py: f64) -> bool {
        if px < 0.0 || py < 0.0 {
            return false;
        }
        let (x, y) = (px.floor() as usize, py.floor() as usize);
        x < self.width && y < self.height && self.get(x, y)
    }

    /// Euclidean-disk dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let mut out = Mask::empty(self.width, self.height, self.role);
        let r = radius as isize;
        let r2 = (radius * radius) as isize;
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                if !self.get(x as usize, y as usize) {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy > r2 {
                            continue;
                        }
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0 && ny >= 0 && nx < self.width as isize && ny < self.height as isize
                        {
                            out.set(nx as usize, ny as usize, true);
                        }
                    }
                }
            }
        }
        out
    }

    /// Mark erosion/dilation noise: erode then dilate by independent radii.
    pub fn erode(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let mut out = Mask::empty(self.width, self.height, self.role);
        let r = radius as isize;
        let r2 = (radius * radius) as isize;
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let mut keep = self.get(x as usize, y as usize);
                'scan: for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy > r2 {
                            continue;
                        }
                        let (nx, ny) = (x + dx, y + dy);
                        let inside = nx >= 0
                            && ny >= 0
                            && nx < self.width as isize
                            && ny < self.height as isize
                            && self.get(nx as usize, ny as usize);
                        if !inside {
                            keep = false;
                            break 'scan;
                        }
                    }
                }
                out.set(x as usize, y as usize, keep);
            }
        }
        out
    }

    pub fn centroid(&self) -> Option<Vector2<f64>> {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        if n == 0 {
            None
        } else {
            Some(Vector2::new(sx / n as f64, sy / n as f64))
        }
    }

    pub fn bounding_box(&self) -> Option<BoundingBox2D> {
        let mut min = (usize::MAX, usize::MAX);
        let mut max = (0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    min = (min.0.min(x), min.1.min(y));
                    max = (max.0.max(x), max.1.max(y));
                }
            }
        }
        if !any {
            return None;
        }
        Some(BoundingBox2D::clipped(
            Vector2::new(min.0 as f64, min.1 as f64),
            Vector2::new(max.0 as f64 + 1.0, max.1 as f64 + 1.0),
            self.width,
            self.height,
        ))
    }
}

/// Pixel-space axis-aligned box, clipped to image bounds on construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox2D {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

impl BoundingBox2D {
    pub fn clipped(min: Vector2<f64>, max: Vector2<f64>, width: usize, height: usize) -> Self {
        let clamp = |v: Vector2<f64>| {
            Vector2::new(v[0].clamp(0.0, width as f64), v[1].clamp(0.0, height as f64))
        };
        let (mut lo, mut hi) = (clamp(min), clamp(max));
        for a in 0..2 {
            if lo[a] > hi[a] {
                std::mem::swap(&mut lo[a], &mut hi[a]);
            }
        }
        Self { min: lo, max: hi }
    }

    pub fn center(&self) -> Vector2<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn size(&self) -> Vector2<f64> {
        self.max - self.min
    }
}

/// Intersection over union of two equally sized masks; an empty union
/// scores 0.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, GeometryError> {
    if a.width != b.width || a.height != b.height {
        return Err(GeometryError::DimensionMismatch(format!(
            "mask {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(b.bits.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Upper hull/lower hull (monotone chain); returns hull vertices CCW.
fn convex_hull(points: &mut Vec<Vector2<f64>>) -> Vec<Vector2<f64>> {
    points.sort_by(|a, b| (a[0], a[1]).partial_cmp(&(b[0], b[1])).unwrap());
    points.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    let n = points.len();
    if n < 3 {
        return points.clone();
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * n);
    for p in points.iter() {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in points.iter().rev() {
        while hull.len() >= lower_len
            && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Project a cloud and rasterize the convex hull of the projections.
///
/// Fewer than three non-collinear projections degrade to plotting the
/// projected points themselves. Behind-camera points are skipped.
pub fn convex_hull_mask<T: Scalar>(
    cloud: &PointCloud<T>,
    camera: &CameraModel<T>,
) -> Result<Mask, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let mut projections: Vec<Vector2<f64>> = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        if let Some((px, _)) = camera.project(p) {
            projections.push(Vector2::new(px[0].as_f64(), px[1].as_f64()));
        }
    }
    let mut mask = Mask::empty(camera.width, camera.height, cloud.role());
    let hull = convex_hull(&mut projections);
    if hull.len() < 3 {
        for p in &hull {
            if p[0] >= 0.0 && p[1] >= 0.0 {
                let (x, y) = (p[0].floor() as usize, p[1].floor() as usize);
                if x < mask.width && y < mask.height {
                    mask.set(x, y, true);
                }
            }
        }
        return Ok(mask);
    }

    // Scanline fill over pixel centers inside the CCW hull.
    let (mut lo_x, mut lo_y) = (f64::INFINITY, f64::INFINITY);
    let (mut hi_x, mut hi_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &hull {
        lo_x = lo_x.min(p[0]);
        lo_y = lo_y.min(p[1]);
        hi_x = hi_x.max(p[0]);
        hi_y = hi_y.max(p[1]);
    }
    let x0 = lo_x.floor().max(0.0) as usize;
    let y0 = lo_y.floor().max(0.0) as usize;
    let x1 = (hi_x.ceil() as usize).min(mask.width.saturating_sub(1));
    let y1 = (hi_y.ceil() as usize).min(mask.height.saturating_sub(1));
    let eps = 1e-9;
    for y in y0..=y1.min(mask.height - 1) {
        for x in x0..=x1.min(mask.width - 1) {
            let c = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut inside = true;
            for i in 0..hull.len() {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
                if cross < -eps {
                    inside = false;
                    break;
                }
            }
            if inside {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}
