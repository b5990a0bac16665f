use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;

use super::types::{DistributionGrid, ViewObservation};
use super::EncoderError;
use crate::nn::{read_params, write_params, ConvSpec, LayerSpec, NodeId, Stack, Tape, Taps, Tensor};
use crate::scalar::Scalar;
use crate::Vec3;

/// Encoder architecture and loss weights.
#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    /// Codebook size C (classification classes per token).
    pub classes: usize,
    /// Token grid resolution d per axis.
    pub token_res: usize,
    /// Physical edge length of the wrist-centered grid (meters).
    pub grid_extent: f64,
    /// Square crop resolution fed to the trunk.
    pub crop_res: usize,
    /// Trunk output feature channels.
    pub feat_ch: usize,
    /// Head conv width.
    pub head_width: usize,
    /// Cross-entropy weight for the empty-space index.
    pub w_empty: f64,
    /// Cross-entropy weight for all other indices.
    pub w_other: f64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            classes: 64,
            token_res: 4,
            grid_extent: 0.24,
            crop_res: 64,
            feat_ch: 48,
            head_width: 64,
            w_empty: 0.25,
            w_other: 0.75,
        }
    }
}

/// Extra per-token channels appended to the sampled image features:
/// normalized grid coordinates and camera-ray depth.
const COORD_CHANNELS: usize = 4;

/// Shared image trunk plus one classification head per class.
#[derive(Clone, Debug)]
pub struct EncoderModel<T: Scalar> {
    pub params: EncoderParams,
    pub trunk: Stack<T>,
    pub head_hand: Stack<T>,
    pub head_object: Stack<T>,
    /// Empty-space codebook index per class, from the trained codecs.
    pub empty_token_hand: Option<u32>,
    pub empty_token_object: Option<u32>,
}

impl<T: Scalar> EncoderModel<T> {
    fn trunk_specs(p: &EncoderParams) -> Result<Vec<LayerSpec>, EncoderError> {
        if p.crop_res % 8 != 0 {
            return Err(EncoderError::InvalidConfig(
                "crop resolution must be divisible by 8".into(),
            ));
        }
        let widths = [16usize, 32, p.feat_ch];
        let mut specs = Vec::new();
        let mut in_ch = 3usize;
        for w in widths {
            if w % 4 != 0 {
                return Err(EncoderError::InvalidConfig(
                    "trunk widths must be divisible by 4".into(),
                ));
            }
            specs.push(LayerSpec::Conv2d(ConvSpec {
                in_ch,
                out_ch: w,
                kernel: 4,
                stride: 2,
                padding: 1,
            }));
            specs.push(LayerSpec::GroupNorm {
                channels: w,
                groups: 4,
            });
            specs.push(LayerSpec::Relu);
            in_ch = w;
        }
        specs.push(LayerSpec::Conv2d(ConvSpec {
            in_ch,
            out_ch: p.feat_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
        }));
        Ok(specs)
    }

    fn head_specs(p: &EncoderParams) -> Result<Vec<LayerSpec>, EncoderError> {
        if p.head_width % 4 != 0 {
            return Err(EncoderError::InvalidConfig(
                "head width must be divisible by 4".into(),
            ));
        }
        Ok(vec![
            LayerSpec::Conv3d(ConvSpec {
                in_ch: p.feat_ch + COORD_CHANNELS,
                out_ch: p.head_width,
                kernel: 3,
                stride: 1,
                padding: 1,
            }),
            LayerSpec::GroupNorm {
                channels: p.head_width,
                groups: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Conv3d(ConvSpec {
                in_ch: p.head_width,
                out_ch: p.head_width,
                kernel: 3,
                stride: 1,
                padding: 1,
            }),
            LayerSpec::GroupNorm {
                channels: p.head_width,
                groups: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Conv3d(ConvSpec {
                in_ch: p.head_width,
                out_ch: p.classes,
                kernel: 1,
                stride: 1,
                padding: 0,
            }),
        ])
    }

    pub fn init(params: EncoderParams, rng: &mut ChaCha8Rng) -> Result<Self, EncoderError> {
        Ok(Self {
            params,
            trunk: Stack::init(&Self::trunk_specs(&params)?, rng),
            head_hand: Stack::init(&Self::head_specs(&params)?, rng),
            head_object: Stack::init(&Self::head_specs(&params)?, rng),
            empty_token_hand: None,
            empty_token_object: None,
        })
    }

    pub fn feature_map_res(&self) -> usize {
        self.params.crop_res / 8
    }

    /// Token-center positions in the wrist (grid) frame.
    pub fn token_centers(&self) -> Vec<Vec3> {
        let d = self.params.token_res;
        let cell = self.params.grid_extent / d as f64;
        let half = self.params.grid_extent / 2.0;
        let mut out = Vec::with_capacity(d * d * d);
        for z in 0..d {
            for y in 0..d {
                for x in 0..d {
                    let c = |i: usize| -half + cell * (i as f64 + 0.5);
                    out.push(Vec3::new(c(x), c(y), c(z)));
                }
            }
        }
        out
    }

    /// Coordinate channels [4, d^3]: normalized x, y, z and ray depth.
    fn coord_channels(&self, obs: &ViewObservation) -> Tensor<T> {
        let centers = self.token_centers();
        let n = centers.len();
        let half = self.params.grid_extent / 2.0;
        let mut data = vec![T::zero(); COORD_CHANNELS * n];
        for (v, c) in centers.iter().enumerate() {
            data[v] = T::of(c[0] / half);
            data[n + v] = T::of(c[1] / half);
            data[2 * n + v] = T::of(c[2] / half);
            let world = obs.wrist_pose.apply(c);
            let depth = obs.camera.extrinsic.apply(&world)[2];
            data[3 * n + v] = T::of(depth);
        }
        Tensor::new(&[COORD_CHANNELS, n], data).expect("coord channels")
    }

    /// Register every parameter on a tape (trainable or frozen).
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> EncoderIds {
        EncoderIds {
            trunk: self.trunk.register(tape, trainable),
            head_hand: self.head_hand.register(tape, trainable),
            head_object: self.head_object.register(tape, trainable),
        }
    }

    /// Forward pass on an existing tape; returns per-class probability
    /// nodes of shape [C, d, d, d].
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        ids: &EncoderIds,
        obs: &ViewObservation,
    ) -> Result<(NodeId, NodeId), EncoderError> {
        obs.validate()?;
        let p = &self.params;
        let img = Tensor::new(
            &[3, obs.image.height, obs.image.width],
            obs.image.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .map_err(|e| EncoderError::DimensionMismatch(e.to_string()))?;
        if obs.image.height != p.crop_res || obs.image.width != p.crop_res {
            return Err(EncoderError::DimensionMismatch(format!(
                "crop is {}x{}, model expects {}",
                obs.image.width, obs.image.height, p.crop_res
            )));
        }
        let x = tape.constant(img);
        let feat = self.trunk.forward(tape, &ids.trunk, x)?;

        let fres = self.feature_map_res();
        let (taps, in_view) = sample_taps::<T>(
            obs,
            &self.token_centers(),
            p.crop_res,
            fres,
        );
        if in_view == 0 {
            return Err(EncoderError::GridOutsideImage);
        }
        let sampled = tape.grid_sample(feat, taps)?; // [F, d^3]
        let coords = tape.constant(self.coord_channels(obs));
        let stacked = tape.concat0(sampled, coords)?; // [F+4, d^3]
        let d = p.token_res;
        let grid = tape.reshape(stacked, &[p.feat_ch + COORD_CHANNELS, d, d, d])?;

        let logits_h = self.head_hand.forward(tape, &ids.head_hand, grid)?;
        let logits_o = self.head_object.forward(tape, &ids.head_object, grid)?;
        // softmax over the class axis
        let to_probs = |tape: &mut Tape<T>, logits: NodeId| -> Result<NodeId, EncoderError> {
            let flat = tape.reshape(logits, &[p.classes, d * d * d])?;
            let sm = tape.softmax(flat)?;
            Ok(tape.reshape(sm, &[p.classes, d, d, d])?)
        };
        let ph = to_probs(tape, logits_h)?;
        let po = to_probs(tape, logits_o)?;
        Ok((ph, po))
    }

    /// Predict the per-view hand and object token distributions.
    pub fn predict_distribution(
        &self,
        obs: &ViewObservation,
    ) -> Result<(DistributionGrid, DistributionGrid), EncoderError> {
        let mut tape = Tape::new();
        let ids = self.register(&mut tape, false);
        let (ph, po) = self.forward_on_tape(&mut tape, &ids, obs)?;
        let to_grid = |t: &Tape<T>, id: NodeId| -> Result<DistributionGrid, EncoderError> {
            let v = t.value(id);
            let d = self.params.token_res;
            let c = self.params.classes;
            let n = d * d * d;
            let data = v.data();
            // [C, d^3] -> rows [d^3, C]
            let mut probs = vec![0.0f64; n * c];
            for ci in 0..c {
                for vi in 0..n {
                    probs[vi * c + ci] = data[ci * n + vi].as_f64();
                }
            }
            // renormalize against f32 rounding before validation
            for row in probs.chunks_exact_mut(c) {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    for p in row.iter_mut() {
                        *p /= s;
                    }
                }
            }
            DistributionGrid::new(d, c, probs)
        };
        Ok((to_grid(&tape, ph)?, to_grid(&tape, po)?))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.trunk.named_params("trunk");
        out.extend(self.head_hand.named_params("head_hand"));
        out.extend(self.head_object.named_params("head_object"));
        out
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), EncoderError> {
        let meta: Vec<(&str, f64)> = vec![
            ("meta.classes", self.params.classes as f64),
            ("meta.token_res", self.params.token_res as f64),
            ("meta.grid_extent", self.params.grid_extent),
            ("meta.crop_res", self.params.crop_res as f64),
            ("meta.feat_ch", self.params.feat_ch as f64),
            ("meta.head_width", self.params.head_width as f64),
            ("meta.w_empty", self.params.w_empty),
            ("meta.w_other", self.params.w_other),
        ];
        let meta_tensors: Vec<(String, Tensor<T>)> = meta
            .into_iter()
            .map(|(k, v)| (k.to_string(), Tensor::scalar_value(T::of(v))))
            .collect();
        let empty_h = self
            .empty_token_hand
            .map(|t| ("meta.empty_token_hand".to_string(), Tensor::scalar_value(T::of(t as f64))));
        let empty_o = self
            .empty_token_object
            .map(|t| ("meta.empty_token_object".to_string(), Tensor::scalar_value(T::of(t as f64))));

        let mut named: Vec<(String, &Tensor<T>)> = self.named_params();
        for (k, v) in meta_tensors.iter() {
            named.push((k.clone(), v));
        }
        if let Some((k, ref v)) = empty_h {
            named.push((k, v));
        }
        if let Some((k, ref v)) = empty_o {
            named.push((k, v));
        }
        write_params(w, &named)?;
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self, EncoderError> {
        let named: Vec<(String, Tensor<T>)> = read_params(r)?;
        let map: std::collections::BTreeMap<String, Tensor<T>> = named.into_iter().collect();
        let meta = |key: &str| -> Result<f64, EncoderError> {
            map.get(key)
                .ok_or_else(|| EncoderError::Format(format!("missing {key}")))?
                .item()
                .map(|v| v.as_f64())
                .map_err(|_| EncoderError::Format(format!("{key} must be scalar")))
        };
        let params = EncoderParams {
            classes: meta("meta.classes")? as usize,
            token_res: meta("meta.token_res")? as usize,
            grid_extent: meta("meta.grid_extent")?,
            crop_res: meta("meta.crop_res")? as usize,
            feat_ch: meta("meta.feat_ch")? as usize,
            head_width: meta("meta.head_width")? as usize,
            w_empty: meta("meta.w_empty")?,
            w_other: meta("meta.w_other")?,
        };
        let mut rng = crate::util::rng_stream(0, 0);
        let mut model = Self::init(params, &mut rng)?;
        model.trunk.load_named("trunk", &map)?;
        model.head_hand.load_named("head_hand", &map)?;
        model.head_object.load_named("head_object", &map)?;
        model.empty_token_hand = map
            .get("meta.empty_token_hand")
            .map(|t| t.item().map(|v| v.as_f64() as u32))
            .transpose()
            .map_err(|_| EncoderError::Format("bad empty_token_hand".into()))?;
        model.empty_token_object = map
            .get("meta.empty_token_object")
            .map(|t| t.item().map(|v| v.as_f64() as u32))
            .transpose()
            .map_err(|_| EncoderError::Format("bad empty_token_object".into()))?;
        Ok(model)
    }
}

/// Node ids of the registered encoder parameters.
pub struct EncoderIds {
    pub trunk: Vec<Vec<NodeId>>,
    pub head_hand: Vec<Vec<NodeId>>,
    pub head_object: Vec<Vec<NodeId>>,
}

/// Bilinear taps into the crop's feature map for each token center, plus
/// the count of tokens landing inside the image.
///
/// A token samples zero features when it projects behind the camera,
/// outside the camera image, or outside the crop window.
pub fn sample_taps<T: Scalar>(
    obs: &ViewObservation,
    centers: &[Vec3],
    crop_res: usize,
    feat_res: usize,
) -> (Vec<Taps<T>>, usize) {
    let mut taps = Vec::with_capacity(centers.len());
    let mut in_view = 0usize;
    let scale = feat_res as f64 / crop_res as f64;
    for c in centers {
        let world = obs.wrist_pose.apply(c);
        let tap = obs.camera.project(&world).and_then(|(px, _)| {
            if !obs.camera.contains_pixel(&px) || !obs.crop.contains(px) {
                return None;
            }
            let crop_px = obs.crop.to_crop(px, crop_res);
            let fx = crop_px[0] * scale - 0.5;
            let fy = crop_px[1] * scale - 0.5;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let wx = fx - x0;
            let wy = fy - y0;
            let clamp = |v: f64| (v.max(0.0) as usize).min(feat_res - 1);
            let (x0i, x1i) = (clamp(x0), clamp(x0 + 1.0));
            let (y0i, y1i) = (clamp(y0), clamp(y0 + 1.0));
            let idx = |y: usize, x: usize| y * feat_res + x;
            Some([
                (idx(y0i, x0i), T::of((1.0 - wx) * (1.0 - wy))),
                (idx(y0i, x1i), T::of(wx * (1.0 - wy))),
                (idx(y1i, x0i), T::of((1.0 - wx) * wy)),
                (idx(y1i, x1i), T::of(wx * wy)),
            ])
        });
        if tap.is_some() {
            in_view += 1;
        }
        taps.push(tap);
    }
    (taps, in_view)
}

/// Sample a 2D feature map at the projected token centers: the per-token
/// feature grid of the paper's lifting step, as a plain [d^3, F] tensor.
///
/// Out-of-image tokens receive zero features; it is an error when every
/// token is out of image.
pub fn build_feature_grid(
    obs: &ViewObservation,
    features: &Tensor<f64>,
    token_res: usize,
    grid_extent: f64,
    crop_res: usize,
) -> Result<Tensor<f64>, EncoderError> {
    obs.validate()?;
    let shape = features.shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(EncoderError::DimensionMismatch(format!(
            "feature map must be [F, R, R], got {shape:?}"
        )));
    }
    let (f, fres) = (shape[0], shape[1]);
    let d = token_res;
    let cell = grid_extent / d as f64;
    let half = grid_extent / 2.0;
    let mut centers = Vec::with_capacity(d * d * d);
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let c = |i: usize| -half + cell * (i as f64 + 0.5);
                centers.push(Vec3::new(c(x), c(y), c(z)));
            }
        }
    }
    let (taps, in_view) = sample_taps::<f64>(obs, &centers, crop_res, fres);
    if in_view == 0 {
        return Err(EncoderError::GridOutsideImage);
    }
    let mut tape = Tape::<f64>::new();
    let map = tape.constant(features.clone());
    let sampled = tape.grid_sample(map, taps)?; // [F, d^3]
    let st = tape.transpose2d(sampled)?; // [d^3, F]
    let _ = f;
    Ok(tape.value(st).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::types::{CropWindow, ImageBuf};
    use crate::geometry::{CameraModel, Mask, RigidTransform, Role};
    use crate::util::rng_stream;
    use nalgebra::Vector3;
    use rand::Rng;

    fn test_obs(wrist_shift: Vec3, cam_shift: Vec3) -> ViewObservation {
        let camera = CameraModel::look_at(
            Vector3::new(0.0, -0.1, -0.8) + cam_shift,
            Vector3::zeros() + cam_shift,
            Vector3::new(0.0, 1.0, 0.0),
            110.0,
            128,
            128,
        )
        .unwrap();
        let wrist_pose = RigidTransform::translation_only(wrist_shift + cam_shift);
        let (wc, _) = camera
            .project(&wrist_pose.translation)
            .expect("wrist visible");
        ViewObservation {
            image: ImageBuf::zeros(3, 64, 64),
            crop: CropWindow {
                center: wc,
                size: 80.0,
            },
            mask_hand: Mask::empty(128, 128, Role::Hand),
            mask_object: Mask::empty(128, 128, Role::Object),
            wrist_pose,
            camera,
        }
    }

    fn rand_features(seed: u64, f: usize, r: usize) -> Tensor<f64> {
        let mut rng = rng_stream(seed, 9);
        Tensor::from_fn(&[f, r, r], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_feature_map_gives_constant_grid() {
        let obs = test_obs(Vec3::zeros(), Vec3::zeros());
        let features = Tensor::full(&[2, 8, 8], 0.37f64);
        let grid = build_feature_grid(&obs, &features, 4, 0.24, 64).unwrap();
        let mut nonzero = 0usize;
        for row in grid.data().chunks_exact(2) {
            if row.iter().any(|&v| v != 0.0) {
                assert!((row[0] - 0.37).abs() < 1e-12);
                assert!((row[1] - 0.37).abs() < 1e-12);
                nonzero += 1;
            }
        }
        assert!(nonzero > 0, "some tokens must land in the image");
    }

    #[test]
    fn feature_grid_is_translation_equivariant() {
        let shift = Vec3::new(0.07, -0.03, 0.05);
        let a = test_obs(Vec3::zeros(), Vec3::zeros());
        let b = test_obs(Vec3::zeros(), shift);
        let features = rand_features(1, 3, 8);
        let ga = build_feature_grid(&a, &features, 4, 0.24, 64).unwrap();
        let gb = build_feature_grid(&b, &features, 4, 0.24, 64).unwrap();
        for (x, y) in ga.data().iter().zip(gb.data().iter()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn voxel_on_feature_cell_center_copies_exactly() {
        // Build a token center that projects exactly onto a feature node
        // by construction: use the oracle formula per voxel to verify the
        // bilinear path against a scalar reimplementation.
        let obs = test_obs(Vec3::zeros(), Vec3::zeros());
        let features = rand_features(2, 4, 8);
        let grid = build_feature_grid(&obs, &features, 4, 0.24, 64).unwrap();

        // scalar oracle: project + bilinear per voxel
        let d = 4usize;
        let cell = 0.24 / d as f64;
        let half = 0.12;
        let mut vi = 0usize;
        for z in 0..d {
            for y in 0..d {
                for x in 0..d {
                    let c = |i: usize| -half + cell * (i as f64 + 0.5);
                    let world = obs.wrist_pose.apply(&Vec3::new(c(x), c(y), c(z)));
                    let expect: Vec<f64> = match obs.camera.project(&world) {
                        Some((px, _))
                            if obs.camera.contains_pixel(&px) && obs.crop.contains(px) =>
                        {
                            let crop_px = obs.crop.to_crop(px, 64);
                            let fx = crop_px[0] * 8.0 / 64.0 - 0.5;
                            let fy = crop_px[1] * 8.0 / 64.0 - 0.5;
                            let x0 = fx.floor();
                            let y0 = fy.floor();
                            let (wx, wy) = (fx - x0, fy - y0);
                            let cl = |v: f64| (v.max(0.0) as usize).min(7);
                            let (x0i, x1i) = (cl(x0), cl(x0 + 1.0));
                            let (y0i, y1i) = (cl(y0), cl(y0 + 1.0));
                            (0..4)
                                .map(|f| {
                                    let g = |yy: usize, xx: usize| {
                                        features.data()[(f * 8 + yy) * 8 + xx]
                                    };
                                    g(y0i, x0i) * (1.0 - wx) * (1.0 - wy)
                                        + g(y0i, x1i) * wx * (1.0 - wy)
                                        + g(y1i, x0i) * (1.0 - wx) * wy
                                        + g(y1i, x1i) * wx * wy
                                })
                                .collect()
                        }
                        _ => vec![0.0; 4],
                    };
                    for (fch, &e) in expect.iter().enumerate() {
                        let got = grid.data()[vi * 4 + fch];
                        assert!((got - e).abs() < 1e-12, "voxel {vi} ch {fch}");
                    }
                    vi += 1;
                }
            }
        }
    }

    #[test]
    fn all_tokens_out_of_image_is_an_error() {
        let mut obs = test_obs(Vec3::zeros(), Vec3::zeros());
        // wrist far behind the camera
        obs.wrist_pose = RigidTransform::translation_only(Vec3::new(0.0, -0.1, -5.0));
        let features = rand_features(3, 2, 8);
        let r = build_feature_grid(&obs, &features, 4, 0.24, 64);
        assert!(matches!(r, Err(EncoderError::GridOutsideImage)));
    }

    #[test]
    fn predict_distribution_rows_sum_to_one_and_is_deterministic() {
        let params = EncoderParams {
            classes: 8,
            token_res: 2,
            feat_ch: 8,
            head_width: 8,
            ..Default::default()
        };
        let model: EncoderModel<f32> =
            EncoderModel::init(params, &mut rng_stream(1, 0)).unwrap();
        let obs = test_obs(Vec3::zeros(), Vec3::zeros());
        let (ph, po) = model.predict_distribution(&obs).unwrap();
        let (ph2, po2) = model.predict_distribution(&obs).unwrap();
        assert_eq!(ph, ph2);
        assert_eq!(po, po2);
        // row validation is enforced by the DistributionGrid constructor;
        // double check a row anyway
        let row = ph.row(0);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(po.classes(), 8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = EncoderParams {
            classes: 8,
            token_res: 2,
            feat_ch: 8,
            head_width: 8,
            ..Default::default()
        };
        let mut model: EncoderModel<f32> =
            EncoderModel::init(params, &mut rng_stream(2, 0)).unwrap();
        model.empty_token_hand = Some(3);
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = EncoderModel::<f32>::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params.classes, 8);
        assert_eq!(back.empty_token_hand, Some(3));
        assert_eq!(back.empty_token_object, None);
        for ((na, ta), (nb, tb)) in model.named_params().iter().zip(back.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }
}
