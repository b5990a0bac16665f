use rand_chacha::ChaCha8Rng;

use super::{NnError, NodeId, Tape, Tensor};
use crate::scalar::Scalar;

/// Convolution hyperparameters (isotropic kernel).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// The layer set needed by the codec and encoder networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3d(ConvSpec),
    TransposedConv3d(ConvSpec),
    Conv2d(ConvSpec),
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    GroupNorm {
        channels: usize,
        groups: usize,
    },
    /// Softmax over the leading (channel) axis.
    Softmax,
}

impl LayerSpec {
    /// Parameter names and shapes, in registration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Conv3d(c) => vec![
                ("w", vec![c.out_ch, c.in_ch, c.kernel, c.kernel, c.kernel]),
                ("b", vec![c.out_ch]),
            ],
            LayerSpec::TransposedConv3d(c) => vec![
                ("w", vec![c.in_ch, c.out_ch, c.kernel, c.kernel, c.kernel]),
                ("b", vec![c.out_ch]),
            ],
            LayerSpec::Conv2d(c) => vec![
                ("w", vec![c.out_ch, c.in_ch, c.kernel, c.kernel]),
                ("b", vec![c.out_ch]),
            ],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                ("w", vec![*in_features, *out_features]),
                ("b", vec![*out_features]),
            ],
            LayerSpec::Relu | LayerSpec::Softmax => vec![],
            LayerSpec::GroupNorm { channels, .. } => {
                vec![("gamma", vec![*channels]), ("beta", vec![*channels])]
            }
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Conv3d(c) | LayerSpec::TransposedConv3d(c) => c.in_ch * c.kernel.pow(3),
            LayerSpec::Conv2d(c) => c.in_ch * c.kernel.pow(2),
            LayerSpec::Linear { in_features, .. } => *in_features,
            _ => 1,
        }
    }
}

/// A layer spec plus its parameter tensors.
#[derive(Clone, Debug)]
pub struct Layer<T: Scalar> {
    pub spec: LayerSpec,
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> Layer<T> {
    /// He-style uniform init scaled by fan-in: weights in
    /// [-sqrt(6/fan_in), +sqrt(6/fan_in)], biases zero, norm scales one.
    pub fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / spec.fan_in() as f64).sqrt();
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| match name {
                "w" => Tensor::rand_uniform(&shape, -bound, bound, rng),
                "gamma" => Tensor::full(&shape, T::one()),
                _ => Tensor::zeros(&shape),
            })
            .collect();
        Self { spec, params }
    }

    /// Record this layer on the tape. `param_ids` must match `self.params`
    /// in length and order (typically from [`Stack::register`]).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        param_ids: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId, NnError> {
        match &self.spec {
            LayerSpec::Conv3d(c) => {
                tape.conv3d(x, param_ids[0], Some(param_ids[1]), c.stride, c.padding)
            }
            LayerSpec::TransposedConv3d(c) => {
                tape.tconv3d(x, param_ids[0], Some(param_ids[1]), c.stride, c.padding)
            }
            LayerSpec::Conv2d(c) => {
                tape.conv2d(x, param_ids[0], Some(param_ids[1]), c.stride, c.padding)
            }
            LayerSpec::Linear { .. } => tape.linear(x, param_ids[0], Some(param_ids[1])),
            LayerSpec::Relu => Ok(tape.relu(x)),
            LayerSpec::GroupNorm { groups, .. } => {
                tape.group_norm(x, param_ids[0], param_ids[1], *groups)
            }
            LayerSpec::Softmax => {
                let shape = tape.value(x).shape().to_vec();
                let cols: usize = shape[1..].iter().product::<usize>().max(1);
                let flat = tape.reshape(x, &[shape[0], cols])?;
                let sm = tape.softmax(flat)?;
                tape.reshape(sm, &shape)
            }
        }
    }
}

/// An ordered stack of layers (a whole sub-network).
#[derive(Clone, Debug)]
pub struct Stack<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Stack<T> {
    pub fn init(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: specs
                .iter()
                .map(|s| Layer::init(s.clone(), rng))
                .collect(),
        }
    }

    /// Register every parameter on a tape; trainable or frozen.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Vec<NodeId>> {
        self.layers
            .iter()
            .map(|layer| {
                layer
                    .params
                    .iter()
                    .map(|p| {
                        if trainable {
                            tape.param(p.clone())
                        } else {
                            tape.constant(p.clone())
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        param_ids: &[Vec<NodeId>],
        mut x: NodeId,
    ) -> Result<NodeId, NnError> {
        for (layer, ids) in self.layers.iter().zip(param_ids.iter()) {
            x = layer.forward(tape, ids, x)?;
        }
        Ok(x)
    }

    /// Flat parameter views with dotted names (`prefix.layer_idx.name`).
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for ((name, _), tensor) in layer.spec.param_shapes().iter().zip(layer.params.iter()) {
                out.push((format!("{prefix}.{i}.{name}"), tensor));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(|p| p.shape().to_vec()))
            .collect()
    }

    /// Load parameters from a named map (inverse of `named_params`).
    pub fn load_named(
        &mut self,
        prefix: &str,
        source: &std::collections::BTreeMap<String, Tensor<T>>,
    ) -> Result<(), NnError> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for ((name, shape), tensor) in layer
                .spec
                .param_shapes()
                .iter()
                .zip(layer.params.iter_mut())
            {
                let key = format!("{prefix}.{i}.{name}");
                let loaded = source
                    .get(&key)
                    .ok_or_else(|| NnError::Format(format!("missing parameter {key}")))?;
                if loaded.shape() != shape.as_slice() {
                    return Err(NnError::Format(format!(
                        "parameter {key}: shape {:?} != expected {:?}",
                        loaded.shape(),
                        shape
                    )));
                }
                *tensor = loaded.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let specs = vec![
            LayerSpec::Conv3d(ConvSpec {
                in_ch: 1,
                out_ch: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            }),
            LayerSpec::GroupNorm {
                channels: 4,
                groups: 2,
            },
            LayerSpec::Relu,
        ];
        let a: Stack<f32> = Stack::init(&specs, &mut crate::util::rng_stream(3, 0));
        let b: Stack<f32> = Stack::init(&specs, &mut crate::util::rng_stream(3, 0));
        for (x, y) in a.named_params("m").iter().zip(b.named_params("m").iter()) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
        }
    }

    #[test]
    fn named_params_round_trip_through_map() {
        let specs = vec![LayerSpec::Linear {
            in_features: 3,
            out_features: 2,
        }];
        let src: Stack<f64> = Stack::init(&specs, &mut crate::util::rng_stream(4, 0));
        let map: std::collections::BTreeMap<String, Tensor<f64>> = src
            .named_params("net")
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect();
        let mut dst: Stack<f64> = Stack::init(&specs, &mut crate::util::rng_stream(5, 0));
        dst.load_named("net", &map).unwrap();
        assert_eq!(
            src.named_params("net")[0].1,
            dst.named_params("net")[0].1
        );
    }
}
