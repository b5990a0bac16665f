//! Row-major matrix kernels and patch gather/scatter (im2col) used by the
//! convolution layers. The inner loops stream contiguous rows so the
//! compiler can vectorize them.

use crate::scalar::Scalar;

/// c[m,n] += a[m,k] * b[k,n]
pub fn gemm_nn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
pub fn gemm_nt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn gemm_tn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a (possibly strided/padded) convolution along one spatial
/// layout; `input` are source dims, `output` the per-axis result dims.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_dim(i: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        (i + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
    }

    pub fn new_3d(
        channels: usize,
        input: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let output: Option<Vec<usize>> = input
            .iter()
            .map(|&i| Self::out_dim(i, kernel, stride, padding))
            .collect();
        Some(Self {
            channels,
            input: input.to_vec(),
            output: output?,
            kernel,
            stride,
            padding,
        })
    }

    pub fn new_2d(
        channels: usize,
        input: [usize; 2],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let output: Option<Vec<usize>> = input
            .iter()
            .map(|&i| Self::out_dim(i, kernel, stride, padding))
            .collect();
        Some(Self {
            channels,
            input: input.to_vec(),
            output: output?,
            kernel,
            stride,
            padding,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.pow(self.input.len() as u32)
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }
}

/// Gather 3D patches: x [C, D, H, W] -> col [C*k^3, OD*OH*OW].
pub fn im2col3d<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (d, h, w) = (g.input[0], g.input[1], g.input[2]);
    let (od, oh, ow) = (g.output[0], g.output[1], g.output[2]);
    let ov = od * oh * ow;
    let mut col = vec![T::zero(); g.patch_len() * ov];
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (((c * k + kd) * k + kh) * k + kw) * ov;
                    for oz in 0..od {
                        let iz = (oz * s + kd) as isize - p as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + kh) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst0 = row + (oz * oh + oy) * ow;
                            let src0 = (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * s + kw) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                col[dst0 + ox] = xc[src0 + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add 3D patches back: col [C*k^3, OD*OH*OW] -> x [C, D, H, W].
pub fn col2im3d<T: Scalar>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let (d, h, w) = (g.input[0], g.input[1], g.input[2]);
    let (od, oh, ow) = (g.output[0], g.output[1], g.output[2]);
    let ov = od * oh * ow;
    let mut x = vec![T::zero(); g.channels * d * h * w];
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (((c * k + kd) * k + kh) * k + kw) * ov;
                    for oz in 0..od {
                        let iz = (oz * s + kd) as isize - p as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + kh) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src0 = row + (oz * oh + oy) * ow;
                            let dst0 = (iz as usize * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * s + kw) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                xc[dst0 + ix as usize] += col[src0 + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Gather 2D patches: x [C, H, W] -> col [C*k^2, OH*OW].
pub fn im2col2d<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (h, w) = (g.input[0], g.input[1]);
    let (oh, ow) = (g.output[0], g.output[1]);
    let ov = oh * ow;
    let mut col = vec![T::zero(); g.patch_len() * ov];
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((c * k + kh) * k + kw) * ov;
                for oy in 0..oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst0 = row + oy * ow;
                    let src0 = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[dst0 + ox] = xc[src0 + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add 2D patches back: col [C*k^2, OH*OW] -> x [C, H, W].
pub fn col2im2d<T: Scalar>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let (h, w) = (g.input[0], g.input[1]);
    let (oh, ow) = (g.output[0], g.output[1]);
    let ov = oh * ow;
    let mut x = vec![T::zero(); g.channels * h * w];
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.channels {
        let xc = &mut x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = ((c * k + kh) * k + kw) * ov;
                for oy in 0..oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src0 = row + oy * ow;
                    let dst0 = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xc[dst0 + ix as usize] += col[src0 + ox];
                    }
                }
            }
        }
    }
    x
}
