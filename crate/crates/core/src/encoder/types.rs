use super::EncoderError;
use crate::geometry::Mask;
use crate::{Camera, Pose, Vec2};

/// Channel-major float image (channels x height x width).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

/// Square crop window in full-image pixel coordinates: the region
/// [center - size/2, center + size/2]^2 resampled to the crop resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub center: Vec2,
    pub size: f64,
}

impl CropWindow {
    /// Full-image pixel -> crop pixel for a crop of `crop_res` pixels.
    pub fn to_crop(&self, px: Vec2, crop_res: usize) -> Vec2 {
        let half = self.size * 0.5;
        let scale = crop_res as f64 / self.size;
        Vec2::new(
            (px[0] - (self.center[0] - half)) * scale,
            (px[1] - (self.center[1] - half)) * scale,
        )
    }

    pub fn contains(&self, px: Vec2) -> bool {
        let half = self.size * 0.5;
        (px[0] - self.center[0]).abs() <= half && (px[1] - self.center[1]).abs() <= half
    }
}

/// One camera view of the scene: background-removed crop channels, the
/// segmentation masks at camera resolution, the per-view wrist pose
/// estimate (wrist frame -> world) and the camera.
#[derive(Clone, Debug)]
pub struct ViewObservation {
    pub image: ImageBuf,
    pub crop: CropWindow,
    pub mask_hand: Mask,
    pub mask_object: Mask,
    pub wrist_pose: Pose,
    pub camera: Camera,
}

impl ViewObservation {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.image.channels != 3 {
            return Err(EncoderError::DimensionMismatch(format!(
                "observation image must have 3 channels, got {}",
                self.image.channels
            )));
        }
        if self.mask_hand.width() != self.camera.width
            || self.mask_hand.height() != self.camera.height
            || self.mask_object.width() != self.camera.width
            || self.mask_object.height() != self.camera.height
        {
            return Err(EncoderError::DimensionMismatch(
                "masks must match the camera image size".into(),
            ));
        }
        if !self
            .wrist_pose
            .translation
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(EncoderError::DimensionMismatch(
                "wrist pose must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Per-token probabilities over codebook indices: d^3 rows of C values,
/// each row summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionGrid {
    d: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl DistributionGrid {
    pub fn new(d: usize, classes: usize, probs: Vec<f64>) -> Result<Self, EncoderError> {
        if probs.len() != d * d * d * classes {
            return Err(EncoderError::InvalidDistribution(format!(
                "want {} values, got {}",
                d * d * d * classes,
                probs.len()
            )));
        }
        for (v, row) in probs.chunks_exact(classes).enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0 + 1e-9).contains(&p) {
                    return Err(EncoderError::InvalidDistribution(format!(
                        "token {v}: probability {p} outside [0,1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(EncoderError::InvalidDistribution(format!(
                    "token {v}: row sums to {sum}"
                )));
            }
        }
        Ok(Self { d, classes, probs })
    }

    pub fn uniform(d: usize, classes: usize) -> Self {
        let p = 1.0 / classes as f64;
        Self {
            d,
            classes,
            probs: vec![p; d * d * d * classes],
        }
    }

    pub fn resolution(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tokens(&self) -> usize {
        self.d * self.d * self.d
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.probs[token * self.classes..(token + 1) * self.classes]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Highest-probability index per token; ties break to the lowest index.
    pub fn argmax_tokens(&self) -> Vec<u32> {
        (0..self.tokens())
            .map(|v| {
                let row = self.row(v);
                let mut best = 0usize;
                let mut best_p = row[0];
                for (i, &p) in row.iter().enumerate().skip(1) {
                    if p > best_p {
                        best_p = p;
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_rows_must_normalize() {
        assert!(DistributionGrid::new(1, 2, vec![0.5, 0.5]).is_ok());
        assert!(DistributionGrid::new(1, 2, vec![0.9, 0.2]).is_err());
        assert!(DistributionGrid::new(1, 2, vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let g = DistributionGrid::new(1, 4, vec![0.2, 0.3, 0.3, 0.2]).unwrap();
        assert_eq!(g.argmax_tokens(), vec![1]);
        let g = DistributionGrid::uniform(1, 4);
        assert_eq!(g.argmax_tokens(), vec![0]);
    }

    #[test]
    fn crop_window_maps_pixels() {
        let w = CropWindow {
            center: Vec2::new(64.0, 64.0),
            size: 32.0,
        };
        let p = w.to_crop(Vec2::new(48.0, 80.0), 64);
        assert_eq!(p, Vec2::new(0.0, 64.0));
        assert!(w.contains(Vec2::new(50.0, 60.0)));
        assert!(!w.contains(Vec2::new(10.0, 60.0)));
    }
}
