use super::gemm::{col2im2d, col2im3d, gemm_nn, gemm_nt, gemm_tn, im2col2d, im2col3d, ConvGeom};
use super::{NnError, Tensor};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Bilinear sample of one grid cell: four (flat index, weight) taps into a
/// [H, W] map, or `None` when the sample lies outside the image.
pub type Taps<T> = Option<[(usize, T); 4]>;

enum Op<T: Scalar> {
    Leaf,
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    Abs(NodeId),
    Log {
        x: NodeId,
        eps: T,
    },
    /// Softmax over axis 0 of a [C, cols] tensor.
    Softmax(NodeId),
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        out_ch: usize,
    },
    /// Transposed 3D convolution; `geom` describes the equivalent forward
    /// convolution from the (larger) output back to the input.
    TConv3d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        in_ch: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        out_ch: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    },
    /// Row gather: out[i, :] = table[indices[i], :].
    Embed {
        table: NodeId,
        indices: Vec<usize>,
    },
    /// Bilinear image sampling: map [F, H, W] -> out [F, V].
    GridSample {
        map: NodeId,
        taps: Vec<Taps<T>>,
    },
    StopGrad,
    Reshape(NodeId),
    /// Concatenate along axis 0; trailing dims must agree.
    Concat0(NodeId, NodeId),
    /// Transpose a 2D tensor.
    Transpose2d(NodeId),
}

fn transpose_data<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

enum Cache<T> {
    None,
    /// im2col matrix kept for the convolution backward pass.
    Col(Vec<T>),
    /// Normalized activations and per-group inverse stddev.
    GroupNorm { xhat: Vec<T>, inv_std: Vec<T> },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
    cache: Cache<T>,
}

/// Gradients per tape node, produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Append-only computation graph with reverse-mode differentiation.
///
/// Build one tape per forward pass; `backward` may be called once.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    /// Count of log() inputs clamped at eps during forward passes.
    pub log_saturations: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(layer: &str, detail: String) -> NnError {
    NnError::ShapeMismatch {
        layer: layer.to_string(),
        detail,
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            log_saturations: 0,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool, cache: Cache<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            cache,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; gradients are not tracked through it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false, Cache::None)
    }

    /// Trainable input; `backward` produces a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, true, Cache::None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.needs(x);
        self.push(Op::Relu(x), value, ng, Cache::None)
    }

    fn elementwise_pair(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(
                name,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape(), data).expect("same shape");
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(op, value, ng, Cache::None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let value = self.value(x).map(|v| v * k);
        let ng = self.needs(x);
        self.push(Op::Scale(x, k), value, ng, Cache::None)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let ng = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar_value(total), ng, Cache::None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = T::of(self.value(x).numel() as f64);
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let ng = self.needs(x);
        self.push(
            Op::Mean(x),
            Tensor::scalar_value(total / n),
            ng,
            Cache::None,
        )
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.abs());
        let ng = self.needs(x);
        self.push(Op::Abs(x), value, ng, Cache::None)
    }

    /// ln(max(x, eps)); clamped inputs are counted in `log_saturations`.
    pub fn log(&mut self, x: NodeId, eps: T) -> NodeId {
        let mut saturated = 0usize;
        let value = self.value(x).map(|v| {
            if v < eps {
                saturated += 1;
                eps.ln()
            } else {
                v.ln()
            }
        });
        self.log_saturations += saturated;
        let ng = self.needs(x);
        self.push(Op::Log { x, eps }, value, ng, Cache::None)
    }

    /// Blocks gradient flow; the value passes through unchanged.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(Op::StopGrad, value, false, Cache::None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let value = self.value(x).reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape(x), value, ng, Cache::None))
    }

    pub fn concat0(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() || sa.len() < 1 || sa[1..] != sb[1..] {
            return Err(mismatch("concat", format!("{sa:?} vs {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(&shape, data).expect("concat shape");
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat0(a, b), value, ng, Cache::None))
    }

    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(mismatch("transpose", format!("want 2D, got {shape:?}")));
        }
        let data = transpose_data(self.value(x).data(), shape[0], shape[1]);
        let value = Tensor::new(&[shape[1], shape[0]], data).expect("transpose shape");
        let ng = self.needs(x);
        Ok(self.push(Op::Transpose2d(x), value, ng, Cache::None))
    }

    /// Softmax over axis 0 of a [C, cols] tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(mismatch("softmax", format!("want [C, cols], got {shape:?}")));
        }
        let (c, cols) = (shape[0], shape[1]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * cols];
        for j in 0..cols {
            let mut max = xd[j];
            for i in 1..c {
                max = max.max(xd[i * cols + j]);
            }
            let mut denom = T::zero();
            for i in 0..c {
                let e = (xd[i * cols + j] - max).exp();
                out[i * cols + j] = e;
                denom += e;
            }
            for i in 0..c {
                out[i * cols + j] /= denom;
            }
        }
        let value = Tensor::new(&shape, out).expect("softmax shape");
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax(x), value, ng, Cache::None))
    }

    /// out[i, :] = table[indices[i], :]
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, NnError> {
        let shape = self.value(table).shape().to_vec();
        if shape.len() != 2 {
            return Err(mismatch("embed", format!("table must be [C, S], got {shape:?}")));
        }
        let (c, s) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(mismatch("embed", format!("index {bad} out of range {c}")));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(&td[i * s..(i + 1) * s]);
        }
        let value = Tensor::new(&[indices.len(), s], data).expect("embed shape");
        let ng = self.needs(table);
        Ok(self.push(
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
            value,
            ng,
            Cache::None,
        ))
    }

    /// Bilinear sampling of a [F, H, W] map at precomputed taps -> [F, V].
    pub fn grid_sample(&mut self, map: NodeId, taps: Vec<Taps<T>>) -> Result<NodeId, NnError> {
        let shape = self.value(map).shape().to_vec();
        if shape.len() != 3 {
            return Err(mismatch(
                "grid_sample",
                format!("map must be [F, H, W], got {shape:?}"),
            ));
        }
        let (f, hw) = (shape[0], shape[1] * shape[2]);
        for t in taps.iter().flatten() {
            if t.iter().any(|&(idx, _)| idx >= hw) {
                return Err(mismatch("grid_sample", "tap index out of range".into()));
            }
        }
        let v = taps.len();
        let md = self.value(map).data();
        let mut data = vec![T::zero(); f * v];
        for (vi, tap) in taps.iter().enumerate() {
            if let Some(tap) = tap {
                for fi in 0..f {
                    let plane = &md[fi * hw..(fi + 1) * hw];
                    let mut acc = T::zero();
                    for &(idx, w) in tap {
                        acc += plane[idx] * w;
                    }
                    data[fi * v + vi] = acc;
                }
            }
        }
        let value = Tensor::new(&[f, v], data).expect("grid sample shape");
        let ng = self.needs(map);
        Ok(self.push(Op::GridSample { map, taps }, value, ng, Cache::None))
    }

    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(mismatch("linear", format!("x {xs:?} vs w {ws:?}")));
        }
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [g] {
                return Err(mismatch(
                    "linear",
                    format!("bias {:?} vs out features {g}", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![T::zero(); n * g];
        gemm_nn(&mut out, self.value(x).data(), self.value(w).data(), n, f, g);
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for row in out.chunks_exact_mut(g) {
                for (o, &bv) in row.iter_mut().zip(bd.iter()) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(&[n, g], out).expect("linear shape");
        let ng = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(Op::Linear { x, w, b }, value, ng, Cache::None))
    }

    /// 3D convolution: x [C, D, H, W], w [OC, C, k, k, k] -> [OC, OD, OH, OW].
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(mismatch(
                "conv3d",
                format!("x must be [C,D,H,W] (got {xs:?}), w [OC,C,k,k,k] (got {ws:?})"),
            ));
        }
        if ws[1] != xs[0] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(mismatch(
                "conv3d",
                format!("w {ws:?} incompatible with input channels {}", xs[0]),
            ));
        }
        let (out_ch, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new_3d(xs[0], [xs[1], xs[2], xs[3]], k, stride, padding)
            .ok_or_else(|| mismatch("conv3d", format!("kernel {k} larger than padded input")))?;
        if let Some(b) = b {
            if self.value(b).shape() != [out_ch] {
                return Err(mismatch("conv3d", "bias/out-channel mismatch".into()));
            }
        }
        let col = im2col3d(self.value(x).data(), &geom);
        let ov = geom.out_voxels();
        let mut out = vec![T::zero(); out_ch * ov];
        gemm_nn(
            &mut out,
            self.value(w).data(),
            &col,
            out_ch,
            geom.patch_len(),
            ov,
        );
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for (c, row) in out.chunks_exact_mut(ov).enumerate() {
                for o in row.iter_mut() {
                    *o += bd[c];
                }
            }
        }
        let shape = [out_ch, geom.output[0], geom.output[1], geom.output[2]];
        let value = Tensor::new(&shape, out).expect("conv3d shape");
        let ng = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Op::Conv3d {
                x,
                w,
                b,
                geom,
                out_ch,
            },
            value,
            ng,
            Cache::Col(col),
        ))
    }

    /// Transposed 3D convolution: x [C, D, H, W], w [C, OC, k, k, k]
    /// -> [OC, (D-1)s - 2p + k, ...].
    pub fn tconv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(mismatch(
                "transposed_conv3d",
                format!("x must be [C,D,H,W] (got {xs:?}), w [C,OC,k,k,k] (got {ws:?})"),
            ));
        }
        if ws[0] != xs[0] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(mismatch(
                "transposed_conv3d",
                format!("w {ws:?} incompatible with input channels {}", xs[0]),
            ));
        }
        let (in_ch, out_ch, k) = (ws[0], ws[1], ws[2]);
        let out_dim = |i: usize| -> Result<usize, NnError> {
            ((i - 1) * stride + k)
                .checked_sub(2 * padding)
                .filter(|&v| v > 0)
                .ok_or_else(|| mismatch("transposed_conv3d", "non-positive output dim".into()))
        };
        let od = [out_dim(xs[1])?, out_dim(xs[2])?, out_dim(xs[3])?];
        // geometry of the equivalent forward conv (output side -> input side)
        let geom = ConvGeom::new_3d(out_ch, od, k, stride, padding)
            .ok_or_else(|| mismatch("transposed_conv3d", "bad geometry".into()))?;
        if geom.output != vec![xs[1], xs[2], xs[3]] {
            return Err(mismatch(
                "transposed_conv3d",
                format!("inconsistent geometry: {:?} vs {:?}", geom.output, &xs[1..]),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [out_ch] {
                return Err(mismatch("transposed_conv3d", "bias/out-channel mismatch".into()));
            }
        }
        let iv: usize = xs[1..].iter().product();
        let patch = geom.patch_len(); // out_ch * k^3
        let mut col = vec![T::zero(); patch * iv];
        // col[OC*k^3, IV] = w^T [OC*k^3, C] x [C, IV]
        gemm_tn(
            &mut col,
            self.value(w).data(),
            self.value(x).data(),
            in_ch,
            patch,
            iv,
        );
        let mut out = col2im3d(&col, &geom);
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            let ov: usize = od.iter().product();
            for (c, row) in out.chunks_exact_mut(ov).enumerate() {
                for o in row.iter_mut() {
                    *o += bd[c];
                }
            }
        }
        let shape = [out_ch, od[0], od[1], od[2]];
        let value = Tensor::new(&shape, out).expect("tconv3d shape");
        let ng = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Op::TConv3d {
                x,
                w,
                b,
                geom,
                in_ch,
            },
            value,
            ng,
            Cache::None,
        ))
    }

    /// 2D convolution: x [C, H, W], w [OC, C, k, k] -> [OC, OH, OW].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(mismatch(
                "conv2d",
                format!("x must be [C,H,W] (got {xs:?}), w [OC,C,k,k] (got {ws:?})"),
            ));
        }
        if ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(mismatch(
                "conv2d",
                format!("w {ws:?} incompatible with input channels {}", xs[0]),
            ));
        }
        let (out_ch, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new_2d(xs[0], [xs[1], xs[2]], k, stride, padding)
            .ok_or_else(|| mismatch("conv2d", format!("kernel {k} larger than padded input")))?;
        if let Some(b) = b {
            if self.value(b).shape() != [out_ch] {
                return Err(mismatch("conv2d", "bias/out-channel mismatch".into()));
            }
        }
        let col = im2col2d(self.value(x).data(), &geom);
        let ov = geom.out_voxels();
        let mut out = vec![T::zero(); out_ch * ov];
        gemm_nn(
            &mut out,
            self.value(w).data(),
            &col,
            out_ch,
            geom.patch_len(),
            ov,
        );
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for (c, row) in out.chunks_exact_mut(ov).enumerate() {
                for o in row.iter_mut() {
                    *o += bd[c];
                }
            }
        }
        let shape = [out_ch, geom.output[0], geom.output[1]];
        let value = Tensor::new(&shape, out).expect("conv2d shape");
        let ng = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
            },
            value,
            ng,
            Cache::Col(col),
        ))
    }

    /// Group normalization over a [C, ...] tensor (one sample).
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    ) -> Result<NodeId, NnError> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return Err(mismatch("group_norm", "input must have a channel axis".into()));
        }
        let c = xs[0];
        if groups == 0 || c % groups != 0 {
            return Err(mismatch(
                "group_norm",
                format!("groups {groups} must divide channels {c}"),
            ));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(mismatch("group_norm", "gamma/beta must be [C]".into()));
        }
        let spatial: usize = xs[1..].iter().product::<usize>().max(1);
        let cg = c / groups;
        let m = T::of((cg * spatial) as f64);
        let eps = T::of(1e-5);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); groups];
        let mut out = vec![T::zero(); xd.len()];
        for g in 0..groups {
            let lo = g * cg * spatial;
            let hi = lo + cg * spatial;
            let mut mean = T::zero();
            for &v in &xd[lo..hi] {
                mean += v;
            }
            mean /= m;
            let mut var = T::zero();
            for &v in &xd[lo..hi] {
                let d = v - mean;
                var += d * d;
            }
            var /= m;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[g] = istd;
            for i in lo..hi {
                let ch = i / spatial;
                let xh = (xd[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
        let value = Tensor::new(&xs, out).expect("group norm shape");
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            },
            value,
            ng,
            Cache::GroupNorm { xhat, inv_std },
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the tape's single
    /// backward budget; call again only after building a fresh forward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>, NnError> {
        if self.consumed {
            return Err(NnError::BackwardConsumed);
        }
        self.consumed = true;
        let loss_val = self.nodes[loss.0].value.item()?;
        if !loss_val.finite() {
            return Err(NnError::NonFiniteLoss);
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar_value(T::one()));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = grads[i].take().expect("present");
            self.accumulate_parents(i, &grad, &mut grads)?;
            // keep leaf grads; interior grads are dropped to save memory
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }

    fn add_into(dst: &mut Option<Tensor<T>>, shape: &[usize], contrib: Vec<T>) {
        match dst {
            Some(t) => {
                for (d, s) in t.data_mut().iter_mut().zip(contrib.iter()) {
                    *d += *s;
                }
            }
            None => *dst = Some(Tensor::new(shape, contrib).expect("gradient shape")),
        }
    }

    fn accumulate_parents(
        &self,
        i: usize,
        grad: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NnError> {
        let node = &self.nodes[i];
        let gd = grad.data();
        let send = |id: NodeId, contrib: Vec<T>, grads: &mut [Option<Tensor<T>>]| {
            if self.nodes[id.0].needs_grad {
                Self::add_into(&mut grads[id.0], self.nodes[id.0].value.shape(), contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Relu(x) => {
                let xd = self.nodes[x.0].value.data();
                let contrib = gd
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                send(*x, contrib, grads);
            }
            Op::Add(a, b) => {
                send(*a, gd.to_vec(), grads);
                send(*b, gd.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec(), grads);
                send(*b, gd.iter().map(|&g| -g).collect(), grads);
            }
            Op::Mul(a, b) => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                send(
                    *a,
                    gd.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect(),
                    grads,
                );
                send(
                    *b,
                    gd.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect(),
                    grads,
                );
            }
            Op::Scale(x, k) => {
                send(*x, gd.iter().map(|&g| g * *k).collect(), grads);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                send(*x, vec![gd[0]; n], grads);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let g = gd[0] / T::of(n as f64);
                send(*x, vec![g; n], grads);
            }
            Op::Abs(x) => {
                let xd = self.nodes[x.0].value.data();
                let contrib = gd
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                send(*x, contrib, grads);
            }
            Op::Log { x, eps } => {
                let xd = self.nodes[x.0].value.data();
                let contrib = gd
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v < *eps { T::zero() } else { g / v })
                    .collect();
                send(*x, contrib, grads);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let shape = node.value.shape();
                let (c, cols) = (shape[0], shape[1]);
                let mut contrib = vec![T::zero(); y.len()];
                for j in 0..cols {
                    let mut dot = T::zero();
                    for i2 in 0..c {
                        dot += gd[i2 * cols + j] * y[i2 * cols + j];
                    }
                    for i2 in 0..c {
                        let idx = i2 * cols + j;
                        contrib[idx] = y[idx] * (gd[idx] - dot);
                    }
                }
                send(*x, contrib, grads);
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let (n, f, g) = (xs[0], xs[1], ws[1]);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); n * f];
                    gemm_nt(&mut dx, gd, self.nodes[w.0].value.data(), n, g, f);
                    send(*x, dx, grads);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); f * g];
                    gemm_tn(&mut dw, self.nodes[x.0].value.data(), gd, n, f, g);
                    send(*w, dw, grads);
                }
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![T::zero(); g];
                        for row in gd.chunks_exact(g) {
                            for (d, &v) in db.iter_mut().zip(row.iter()) {
                                *d += v;
                            }
                        }
                        send(*b, db, grads);
                    }
                }
            }
            Op::Conv3d {
                x,
                w,
                b,
                geom,
                out_ch,
            }
            | Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_ch,
            } => {
                self.conv_backward(i, *x, *w, *b, geom, *out_ch, gd, grads)?;
            }
            Op::TConv3d {
                x,
                w,
                b,
                geom,
                in_ch,
            } => {
                // dY gathered with the forward-conv geometry gives d_col
                let d_col = im2col3d(gd, geom);
                let iv: usize = self.nodes[x.0].value.shape()[1..].iter().product();
                let patch = geom.patch_len();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); in_ch * iv];
                    gemm_nn(&mut dx, self.nodes[w.0].value.data(), &d_col, *in_ch, patch, iv);
                    send(*x, dx, grads);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); in_ch * patch];
                    gemm_nt(
                        &mut dw,
                        self.nodes[x.0].value.data(),
                        &d_col,
                        *in_ch,
                        iv,
                        patch,
                    );
                    send(*w, dw, grads);
                }
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let ov: usize = geom.input.iter().product();
                        let mut db = vec![T::zero(); geom.channels];
                        for (c, row) in gd.chunks_exact(ov).enumerate() {
                            for &v in row {
                                db[c] += v;
                            }
                        }
                        send(*b, db, grads);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            } => {
                let (xhat, inv_std) = match &node.cache {
                    Cache::GroupNorm { xhat, inv_std } => (xhat, inv_std),
                    _ => unreachable!("group norm cache"),
                };
                let xs = self.nodes[x.0].value.shape();
                let c = xs[0];
                let spatial: usize = xs[1..].iter().product::<usize>().max(1);
                let cg = c / groups;
                let m = T::of((cg * spatial) as f64);
                let gamma_d = self.nodes[gamma.0].value.data();

                if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ch in 0..c {
                        for s in 0..spatial {
                            let idx = ch * spatial + s;
                            dgamma[ch] += gd[idx] * xhat[idx];
                            dbeta[ch] += gd[idx];
                        }
                    }
                    send(*gamma, dgamma, grads);
                    send(*beta, dbeta, grads);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); gd.len()];
                    for g in 0..*groups {
                        let lo = g * cg * spatial;
                        let hi = lo + cg * spatial;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for idx in lo..hi {
                            let ch = idx / spatial;
                            let dxh = gd[idx] * gamma_d[ch];
                            s1 += dxh;
                            s2 += dxh * xhat[idx];
                        }
                        for idx in lo..hi {
                            let ch = idx / spatial;
                            let dxh = gd[idx] * gamma_d[ch];
                            dx[idx] = inv_std[g] * (dxh - (s1 + xhat[idx] * s2) / m);
                        }
                    }
                    send(*x, dx, grads);
                }
            }
            Op::Embed { table, indices } => {
                if self.nodes[table.0].needs_grad {
                    let shape = self.nodes[table.0].value.shape();
                    let s = shape[1];
                    let mut dt = vec![T::zero(); shape[0] * s];
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..s {
                            dt[idx * s + j] += gd[row * s + j];
                        }
                    }
                    send(*table, dt, grads);
                }
            }
            Op::GridSample { map, taps } => {
                if self.nodes[map.0].needs_grad {
                    let shape = self.nodes[map.0].value.shape();
                    let (f, hw) = (shape[0], shape[1] * shape[2]);
                    let v = taps.len();
                    let mut dm = vec![T::zero(); f * hw];
                    for (vi, tap) in taps.iter().enumerate() {
                        if let Some(tap) = tap {
                            for fi in 0..f {
                                let g = gd[fi * v + vi];
                                if g == T::zero() {
                                    continue;
                                }
                                for &(idx, wgt) in tap {
                                    dm[fi * hw + idx] += g * wgt;
                                }
                            }
                        }
                    }
                    send(*map, dm, grads);
                }
            }
            Op::Reshape(x) => {
                send(*x, gd.to_vec(), grads);
            }
            Op::Transpose2d(x) => {
                let shape = node.value.shape();
                send(*x, transpose_data(gd, shape[0], shape[1]), grads);
            }
            Op::Concat0(a, b) => {
                let na = self.nodes[a.0].value.numel();
                send(*a, gd[..na].to_vec(), grads);
                send(*b, gd[na..].to_vec(), grads);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node_idx: usize,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: &ConvGeom,
        out_ch: usize,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NnError> {
        let col = match &self.nodes[node_idx].cache {
            Cache::Col(col) => col,
            _ => unreachable!("conv cache"),
        };
        let ov = geom.out_voxels();
        let patch = geom.patch_len();
        let is_3d = geom.input.len() == 3;
        if self.nodes[w.0].needs_grad {
            let mut dw = vec![T::zero(); out_ch * patch];
            gemm_nt(&mut dw, gd, col, out_ch, ov, patch);
            Self::add_into(&mut grads[w.0], self.nodes[w.0].value.shape(), dw);
        }
        if self.nodes[x.0].needs_grad {
            let mut d_col = vec![T::zero(); patch * ov];
            gemm_tn(&mut d_col, self.nodes[w.0].value.data(), gd, out_ch, patch, ov);
            let dx = if is_3d {
                col2im3d(&d_col, geom)
            } else {
                col2im2d(&d_col, geom)
            };
            Self::add_into(&mut grads[x.0], self.nodes[x.0].value.shape(), dx);
        }
        if let Some(b) = b {
            if self.nodes[b.0].needs_grad {
                let mut db = vec![T::zero(); out_ch];
                for (c, row) in gd.chunks_exact(ov).enumerate() {
                    for &v in row {
                        db[c] += v;
                    }
                }
                Self::add_into(&mut grads[b.0], self.nodes[b.0].value.shape(), db);
            }
        }
        Ok(())
    }
}
