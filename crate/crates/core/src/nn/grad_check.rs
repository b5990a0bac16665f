//! Central finite-difference validation of every differentiable op, plus
//! the naive convolution oracle. All checks run in f64.

use rand::Rng;

use super::*;
use crate::util::rng_stream;

const FD_STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;

/// Builds a scalar loss from registered parameters. Receives the tape and
/// the node ids of the parameters, in order.
type LossBuilder = dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId;

/// Compare analytic gradients against central differences for every
/// element of every parameter.
fn check(params: &[Tensor<f64>], build: &LossBuilder) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).expect("backward");

    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(ids[pi])
            .unwrap_or_else(|| panic!("no gradient for param {pi}"));
        for ei in 0..p.numel() {
            let eval = |delta: f64| -> f64 {
                let mut tape = Tape::new();
                let ids: Vec<NodeId> = params
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if i == pi {
                            let mut t = t.clone();
                            t.data_mut()[ei] += delta;
                            tape.param(t)
                        } else {
                            tape.param(t.clone())
                        }
                    })
                    .collect();
                let loss = build(&mut tape, &ids);
                tape.value(loss).item().unwrap()
            };
            let fd = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let an = analytic.data()[ei];
            let denom = fd.abs().max(an.abs()).max(1e-4);
            let rel = (fd - an).abs() / denom;
            assert!(
                rel < REL_TOL,
                "param {pi} elem {ei}: analytic {an} vs fd {fd} (rel {rel})"
            );
        }
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_stream(seed, 77);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random positive tensor bounded away from relu/abs/log kinks.
fn rand_tensor_offset(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = rng_stream(seed, 78);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Project the output to a scalar with fixed random weights so every
/// element influences the loss.
fn project(tape: &mut Tape<f64>, out: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(rand_tensor(&shape, seed));
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

#[test]
fn relu_forward_matches_definition() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_gradient() {
    // keep inputs away from the kink at zero
    let x = rand_tensor_offset(&[4, 3], 1, 0.1, 1.0);
    let mut neg = rand_tensor_offset(&[4, 3], 2, -1.0, -0.1);
    for (i, v) in neg.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v; // mix of strictly positive and strictly negative
        }
    }
    for t in [x, neg] {
        check(&[t], &|tape, ids| {
            let y = tape.relu(ids[0]);
            project(tape, y, 100)
        });
    }
}

#[test]
fn elementwise_and_reduction_gradients() {
    let a = rand_tensor(&[2, 5], 3);
    let b = rand_tensor(&[2, 5], 4);
    check(&[a.clone(), b.clone()], &|tape, ids| {
        let s = tape.add(ids[0], ids[1]).unwrap();
        let m = tape.mul(s, ids[1]).unwrap();
        let d = tape.sub(m, ids[0]).unwrap();
        let sc = tape.scale(d, 0.7);
        tape.mean(sc)
    });
    // abs away from zero
    let c = rand_tensor_offset(&[7], 5, 0.2, 1.5);
    check(&[c], &|tape, ids| {
        let y = tape.abs(ids[0]);
        project(tape, y, 101)
    });
    // log away from the clamp
    let d = rand_tensor_offset(&[6], 6, 0.3, 2.0);
    check(&[d], &|tape, ids| {
        let y = tape.log(ids[0], 1e-12);
        project(tape, y, 102)
    });
}

#[test]
fn softmax_gradient() {
    let x = rand_tensor(&[5, 4], 7);
    check(&[x], &|tape, ids| {
        let y = tape.softmax(ids[0]).unwrap();
        project(tape, y, 103)
    });
}

#[test]
fn linear_gradient() {
    let x = rand_tensor(&[3, 4], 8);
    let w = rand_tensor(&[4, 2], 9);
    let b = rand_tensor(&[2], 10);
    check(&[x, w, b], &|tape, ids| {
        let y = tape.linear(ids[0], ids[1], Some(ids[2])).unwrap();
        project(tape, y, 104)
    });
}

#[test]
fn conv3d_gradient_stride1() {
    let x = rand_tensor(&[2, 5, 5, 5], 11);
    let w = rand_tensor(&[3, 2, 3, 3, 3], 12);
    let b = rand_tensor(&[3], 13);
    check(&[x, w, b], &|tape, ids| {
        let y = tape.conv3d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
        project(tape, y, 105)
    });
}

#[test]
fn conv3d_gradient_strided() {
    let x = rand_tensor(&[1, 6, 6, 6], 14);
    let w = rand_tensor(&[2, 1, 4, 4, 4], 15);
    let b = rand_tensor(&[2], 16);
    check(&[x, w, b], &|tape, ids| {
        let y = tape.conv3d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap();
        project(tape, y, 106)
    });
}

#[test]
fn transposed_conv3d_gradient() {
    let x = rand_tensor(&[2, 3, 3, 3], 17);
    let w = rand_tensor(&[2, 3, 4, 4, 4], 18);
    let b = rand_tensor(&[3], 19);
    check(&[x, w, b], &|tape, ids| {
        let y = tape.tconv3d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap();
        project(tape, y, 107)
    });
}

#[test]
fn conv2d_gradient() {
    let x = rand_tensor(&[2, 8, 8], 20);
    let w = rand_tensor(&[3, 2, 3, 3], 21);
    let b = rand_tensor(&[3], 22);
    check(&[x, w, b], &|tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap();
        project(tape, y, 108)
    });
}

#[test]
fn group_norm_gradient() {
    let x = rand_tensor(&[4, 3, 3, 3], 23);
    let gamma = rand_tensor_offset(&[4], 24, 0.5, 1.5);
    let beta = rand_tensor(&[4], 25);
    check(&[x, gamma, beta], &|tape, ids| {
        let y = tape.group_norm(ids[0], ids[1], ids[2], 2).unwrap();
        project(tape, y, 109)
    });
}

#[test]
fn embed_gradient() {
    let table = rand_tensor(&[6, 3], 26);
    check(&[table], &|tape, ids| {
        let y = tape.embed(ids[0], &[0, 2, 2, 5, 1]).unwrap();
        project(tape, y, 110)
    });
}

#[test]
fn grid_sample_gradient() {
    let map = rand_tensor(&[3, 4, 4], 27);
    // taps into a 4x4 plane, mixed in/out of bounds
    let taps: Vec<tape::Taps<f64>> = vec![
        Some([(0, 0.25), (1, 0.25), (4, 0.25), (5, 0.25)]),
        Some([(10, 0.9), (11, 0.05), (14, 0.03), (15, 0.02)]),
        None,
        Some([(5, 1.0), (6, 0.0), (9, 0.0), (10, 0.0)]),
    ];
    check(&[map], &move |tape, ids| {
        let y = tape.grid_sample(ids[0], taps.clone()).unwrap();
        project(tape, y, 111)
    });
}

#[test]
fn transpose_and_concat_gradients() {
    let a = rand_tensor(&[3, 5], 35);
    let b = rand_tensor(&[2, 5], 36);
    check(&[a, b], &|tape, ids| {
        let at = tape.transpose2d(ids[0]).unwrap(); // [5, 3]
        let att = tape.transpose2d(at).unwrap(); // back to [3, 5]
        let cat = tape.concat0(att, ids[1]).unwrap(); // [5, 5]
        project(tape, cat, 113)
    });
}

#[test]
fn composite_network_gradient() {
    // conv3d -> group_norm -> relu -> tconv3d, the codec building blocks
    let x = rand_tensor(&[1, 4, 4, 4], 28);
    let w1 = rand_tensor(&[4, 1, 3, 3, 3], 29);
    let b1 = rand_tensor(&[4], 30);
    let gamma = rand_tensor_offset(&[4], 31, 0.5, 1.5);
    let beta = rand_tensor(&[4], 32);
    let w2 = rand_tensor(&[4, 1, 4, 4, 4], 33);
    let b2 = rand_tensor(&[1], 34);
    check(&[x, w1, b1, gamma, beta, w2, b2], &|tape, ids| {
        let y = tape.conv3d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap();
        let y = tape.group_norm(y, ids[3], ids[4], 2).unwrap();
        let y = tape.relu(y);
        let y = tape.tconv3d(y, ids[5], Some(ids[6]), 2, 1).unwrap();
        project(tape, y, 112)
    });
}

#[test]
fn conv3d_identity_kernel_preserves_interior() {
    // 3x3x3 delta kernel: output equals input everywhere with padding 1
    let mut tape = Tape::<f64>::new();
    let x = rand_tensor(&[1, 5, 5, 5], 40);
    let xid = tape.constant(x.clone());
    let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
    w.data_mut()[13] = 1.0; // center of the 3x3x3 kernel
    let wid = tape.constant(w);
    let y = tape.conv3d(xid, wid, None, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

/// Direct 7-loop convolution oracle.
#[allow(clippy::too_many_arguments)]
fn naive_conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let (ci, d, h, ww) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let od = (d + 2 * padding - k) / stride + 1;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (ww + 2 * padding - k) / stride + 1;
    let mut out = Tensor::zeros(&[co, od, oh, ow]);
    for oc in 0..co {
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..ci {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iz = (oz * stride + kz) as isize - padding as isize;
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= ww as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ic * d + iz as usize) * h + iy as usize) * ww
                                        + ix as usize;
                                    let wi = (((oc * ci + ic) * k + kz) * k + ky) * k + kx;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                    }
                    let oi = ((oc * od + oz) * oh + oy) * ow + ox;
                    out.data_mut()[oi] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_matches_naive_oracle() {
    for (seed, stride, padding) in [(50u64, 1usize, 0usize), (51, 1, 1), (52, 2, 1)] {
        let x = rand_tensor(&[2, 8, 8, 8], seed);
        let w = rand_tensor(&[3, 2, 3, 3, 3], seed + 10);
        let b = rand_tensor(&[3], seed + 20);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv3d(xi, wi, Some(bi), stride, padding).unwrap();
        let want = naive_conv3d(&x, &w, &b, stride, padding);
        assert_eq!(tape.value(y).shape(), want.shape());
        for (a, e) in tape.value(y).data().iter().zip(want.data().iter()) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn sum_loss_gradient_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(&[7], 60));
    let loss = tape.sum(x);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn stop_gradient_blocks_upstream_flow() {
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(&[5], 61));
    let sg = tape.stop_grad(x);
    let loss = tape.sum(sg);
    // downstream value identical
    assert_eq!(tape.value(sg).data(), tape.value(x).data());
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).is_none(), "stop-grad must zero upstream grads");
}

#[test]
fn stop_gradient_leaves_other_paths_intact() {
    // loss = sum(x * sg(x)): gradient wrt x is sg(x) (treated constant)
    let mut tape = Tape::new();
    let data = rand_tensor(&[4], 62);
    let x = tape.param(data.clone());
    let sg = tape.stop_grad(x);
    let prod = tape.mul(x, sg).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), data.data());
}

#[test]
fn backward_twice_errors() {
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(&[3], 63));
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert!(matches!(
        tape.backward(loss),
        Err(NnError::BackwardConsumed)
    ));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(&[3], 64));
    assert!(matches!(
        tape.backward(x),
        Err(NnError::NonScalarLoss(_))
    ));
}

#[test]
fn shape_mismatch_error_names_layer() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 4, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 5, 3, 3, 3]));
    let err = tape.conv3d(x, w, None, 1, 1).unwrap_err();
    match err {
        NnError::ShapeMismatch { layer, detail } => {
            assert_eq!(layer, "conv3d");
            assert!(detail.contains('2'), "detail should name dims: {detail}");
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[2, 6, 6, 6], 70));
        let w = tape.constant(rand_tensor(&[4, 2, 3, 3, 3], 71));
        let y = tape.conv3d(x, w, None, 2, 1).unwrap();
        let g = tape.constant(rand_tensor(&[4], 72));
        let b = tape.constant(rand_tensor(&[4], 73));
        let y = tape.group_norm(y, g, b, 4).unwrap();
        tape.value(y).data().to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
