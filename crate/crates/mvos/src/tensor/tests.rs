//! Op-level tests: hand-computed examples plus finite-difference oracles.

use super::gradcheck::{fill_uniform, grad_check, DEFAULT_EPS, DEFAULT_RTOL};
use super::*;
use crate::error::Error;

fn t64(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    fill_uniform(&mut t, -1.0, 1.0, seed);
    t
}

#[test]
fn conv_box_sum_by_hand() {
    // 3x3 ones, 3x3 ones kernel, pad 1: center sees all 9, corners see 4
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
    let w = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.at(0, 0, 1, 1), 9.0);
    assert_eq!(out.at(0, 0, 0, 0), 4.0);
    assert_eq!(out.at(0, 0, 0, 2), 4.0);
    assert_eq!(out.at(0, 0, 2, 0), 4.0);
    assert_eq!(out.at(0, 0, 2, 2), 4.0);
    assert_eq!(out.at(0, 0, 0, 1), 6.0);
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::<f64>::new();
    let xv = t64(Shape::new(2, 3, 5, 5), 11);
    let x = tape.leaf(xv.clone());
    let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
    for c in 0..3 {
        w.data[c * 3 + c] = 1.0;
    }
    let w = tape.leaf(w);
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).data, xv.data);
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w = tape.leaf(Tensor::zeros(Shape::new(4, 3, 3, 3)));
    match tape.conv2d(x, w, None, 1, 1) {
        Err(Error::Dim { axis, .. }) => assert_eq!(axis, "in_channels"),
        other => panic!("expected dim error, got {other:?}"),
    }
    // non-integral output size: 5x5, k=3, stride 2, pad 0 -> (5-3)/2+1 = 2 ok; use stride 3
    let x5 = tape.leaf(Tensor::zeros(Shape::new(1, 1, 5, 5)));
    let w3 = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 3)));
    assert!(matches!(tape.conv2d(x5, w3, None, 3, 0), Err(Error::Config(_))));
}

#[test]
fn conv_grads_match_finite_differences() {
    let x = t64(Shape::new(2, 3, 5, 5), 1);
    let w = t64(Shape::new(4, 3, 3, 3), 2);
    let b = t64(Shape::new(1, 4, 1, 1), 3);
    let report = grad_check(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
            // square the output so dL/dx depends on w and x nontrivially
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        },
        &[x, w, b],
        DEFAULT_EPS,
        DEFAULT_RTOL,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn conv_strided_grads_match_finite_differences() {
    let x = t64(Shape::new(1, 2, 7, 7), 4);
    let w = t64(Shape::new(3, 2, 3, 3), 5);
    let b = t64(Shape::new(1, 3, 1, 1), 6);
    let report = grad_check(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
            tape.sum(y)
        },
        &[x, w, b],
        DEFAULT_EPS,
        DEFAULT_RTOL,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn pointwise_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(
        Shape::new(1, 1, 1, 3),
        vec![0.0, -2.0, 0.0],
    ));
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).data[0], 0.5);
    let t = tape.tanh(x).unwrap();
    assert_eq!(tape.value(t).data[0], 0.0);
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data[1], 0.0);
}

#[test]
fn pointwise_grads_match_finite_differences() {
    // keep relu inputs away from 0
    let mut x = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
    fill_uniform(&mut x, 0.1, 1.0, 21);
    for kind in [PointwiseKind::Sigmoid, PointwiseKind::Tanh, PointwiseKind::Relu] {
        let report = grad_check(
            |tape, ids| {
                let y = tape.pointwise(kind, ids[0])?;
                let y2 = tape.mul(y, y)?;
                tape.sum(y2)
            },
            &[x.clone()],
            DEFAULT_EPS,
            DEFAULT_RTOL,
        )
        .unwrap();
        assert!(report.pass, "{kind:?}: max rel err {}", report.max_rel_err);
    }
}

#[test]
fn elementwise_identity_scale_and_shift() {
    let mut tape = Tape::<f64>::new();
    let xv = t64(Shape::new(1, 3, 4, 4), 31);
    let x = tape.leaf(xv.clone());
    let ones = tape.leaf(Tensor::full(Shape::new(1, 3, 1, 1), 1.0));
    let y = tape.mul(x, ones).unwrap();
    assert_eq!(tape.value(y).data, xv.data);
    let zeros = tape.leaf(Tensor::zeros(Shape::new(1, 1, 4, 4)));
    let z = tape.add(x, zeros).unwrap();
    assert_eq!(tape.value(z).data, xv.data);
}

#[test]
fn elementwise_channel_scale_by_hand() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(Shape::new(1, 2, 1, 1), vec![5.0, 7.0]));
    let g = tape.leaf(Tensor::new(Shape::new(1, 2, 1, 1), vec![2.0, 3.0]));
    let y = tape.mul(x, g).unwrap();
    assert_eq!(tape.value(y).data, vec![10.0, 21.0]);
}

#[test]
fn elementwise_rejects_incompatible() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
    assert!(matches!(tape.mul(a, b), Err(Error::Dim { .. })));
}

#[test]
fn broadcast_grads_match_finite_differences() {
    let a = t64(Shape::new(2, 3, 4, 4), 41);
    for (label, bshape) in [
        ("per-channel", Shape::new(1, 3, 1, 1)),
        ("per-pixel", Shape::new(1, 1, 4, 4)),
        ("per-image", Shape::new(1, 3, 4, 4)),
    ] {
        let b = t64(bshape, 42);
        for kind in [EltKind::Add, EltKind::Mul] {
            let report = grad_check(
                |tape, ids| {
                    let y = tape.elementwise(kind, ids[0], ids[1])?;
                    let y2 = tape.mul(y, y)?;
                    tape.sum(y2)
                },
                &[a.clone(), b.clone()],
                DEFAULT_EPS,
                DEFAULT_RTOL,
            )
            .unwrap();
            assert!(report.pass, "{label} {kind:?}: max rel err {}", report.max_rel_err);
        }
    }
}

#[test]
fn broadcast_grad_equals_tiled_grad() {
    // gradient of a broadcast operand equals the axis-sum of the gradient
    // of an explicitly tiled operand
    let a = t64(Shape::new(1, 3, 4, 4), 51);
    let b = t64(Shape::new(1, 3, 1, 1), 52);
    let mut tiled = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
    for c in 0..3 {
        for i in 0..16 {
            tiled.data[c * 16 + i] = b.data[c];
        }
    }

    let grad_bcast = {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf_grad(b.clone());
        let y = tape.mul(av, bv).unwrap();
        let y2 = tape.mul(y, y).unwrap();
        let loss = tape.sum(y2).unwrap();
        tape.backward(loss).unwrap();
        tape.grad(bv).unwrap().to_vec()
    };
    let grad_tiled_summed = {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf_grad(tiled);
        let y = tape.mul(av, bv).unwrap();
        let y2 = tape.mul(y, y).unwrap();
        let loss = tape.sum(y2).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(bv).unwrap();
        (0..3)
            .map(|c| g[c * 16..(c + 1) * 16].iter().sum::<f64>())
            .collect::<Vec<f64>>()
    };
    for (x, y) in grad_bcast.iter().zip(&grad_tiled_summed) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn upsample_constant_preserved() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(Shape::new(1, 2, 3, 3), 2.5));
    let y = tape.upsample_bilinear(x, 7, 9).unwrap();
    assert!(tape.value(y).data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn upsample_hand_weights() {
    // [0, 1] -> width 4 under align-corners-false: [0, 0.25, 0.75, 1]
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]));
    let y = tape.upsample_bilinear(x, 1, 4).unwrap();
    let got = &tape.value(y).data;
    let want = [0.0, 0.25, 0.75, 1.0];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{got:?}");
    }
}

#[test]
fn upsample_rejects_downscale() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 4, 4)));
    assert!(matches!(tape.upsample_bilinear(x, 2, 4), Err(Error::Config(_))));
}

#[test]
fn upsample_grads_match_finite_differences() {
    let x = t64(Shape::new(1, 2, 3, 4), 61);
    let report = grad_check(
        |tape, ids| {
            let y = tape.upsample_bilinear(ids[0], 7, 9)?;
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        },
        &[x],
        DEFAULT_EPS,
        DEFAULT_RTOL,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn maxpool_by_hand_and_tie_break() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_grad(Tensor::new(
        Shape::new(1, 1, 2, 2),
        vec![1.0, 2.0, 3.0, 4.0],
    ));
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data, vec![4.0]);

    // constant block: grad routed to the first element only
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_grad(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data, vec![3.0]);
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_rejects_odd_dims() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 3, 4)));
    assert!(matches!(tape.maxpool2(x), Err(Error::Config(_))));
}

#[test]
fn maxpool_grads_match_finite_differences() {
    // fill with well-separated values so no window has near-ties
    let mut x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
    for (i, v) in x.data.iter_mut().enumerate() {
        *v = ((i * 37) % 101) as f64 * 0.05;
    }
    let report = grad_check(
        |tape, ids| {
            let y = tape.maxpool2(ids[0])?;
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        },
        &[x],
        DEFAULT_EPS,
        DEFAULT_RTOL,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn reduce_values_and_grads() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_grad(Tensor::full(Shape::new(1, 2, 2, 2), 1.5));
    let g = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(g).shape, Shape::new(1, 2, 1, 1));
    assert_eq!(tape.value(g).data, vec![1.5, 1.5]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_grad(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.value(s).item(), 4.0);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn backward_of_square_is_two_x() {
    let xv = t64(Shape::new(1, 1, 2, 3), 71);
    let mut tape = Tape::new();
    let x = tape.leaf_grad(xv.clone());
    let y = tape.mul(x, x).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    for (gi, xi) in g.iter().zip(&xv.data) {
        assert!((gi - 2.0 * xi).abs() < 1e-12);
    }
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_grad(Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
}

#[test]
fn backward_rejects_nonscalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_grad(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
}

#[test]
fn unused_parameter_gets_zero_grad() {
    let used = Parameter::new("used", Tensor::<f64>::full(Shape::scalar(), 2.0), ParamGroup::NonRecurrent);
    let unused = Parameter::new("unused", Tensor::<f64>::full(Shape::scalar(), 3.0), ParamGroup::NonRecurrent);
    let mut tape = Tape::new();
    let u = tape.param(&used);
    let _nu = tape.param(&unused);
    let loss = tape.sum(u).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.param_grad(&used).unwrap(), &[1.0]);
    assert_eq!(tape.param_grad(&unused).unwrap(), &[0.0]);
}

#[test]
fn param_rebind_accumulates_across_uses() {
    // f(p) = sum(p * c1) + sum(p * c2): grad = c1 + c2
    let p = Parameter::new("p", Tensor::<f64>::full(Shape::scalar(), 1.0), ParamGroup::NonRecurrent);
    let mut tape = Tape::new();
    let a = tape.param(&p);
    let b = tape.param(&p);
    assert_eq!(a, b);
    let c1 = tape.leaf(Tensor::scalar(2.0));
    let c2 = tape.leaf(Tensor::scalar(5.0));
    let t1 = tape.mul(a, c1).unwrap();
    let t2 = tape.mul(b, c2).unwrap();
    let s = tape.add(t1, t2).unwrap();
    let loss = tape.sum(s).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.param_grad(&p).unwrap(), &[7.0]);
}

#[test]
fn gradcheck_detects_wrong_gradient() {
    // a custom scalar with a deliberately doubled gradient must fail
    let x = t64(Shape::new(1, 1, 1, 4), 81);
    let report = grad_check(
        |tape, ids| {
            let v = tape.value(ids[0]);
            let value = v.data.iter().map(|&a| a * a).sum::<f64>();
            let wrong: Vec<f64> = v.data.iter().map(|&a| 4.0 * a).collect(); // should be 2a
            tape.custom_scalar(ids[0], value, wrong)
        },
        &[x],
        DEFAULT_EPS,
        DEFAULT_RTOL,
    )
    .unwrap();
    assert!(!report.pass);
}

#[test]
fn gradcheck_linear_is_exact() {
    let x = t64(Shape::new(1, 1, 2, 2), 91);
    let report = grad_check(|tape, ids| tape.sum(ids[0]), &[x], DEFAULT_EPS, 1e-9).unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn gradcheck_sigmoid_chain() {
    let x = t64(Shape::new(1, 1, 2, 2), 92);
    let report = grad_check(
        |tape, ids| {
            let s = tape.sigmoid(ids[0])?;
            let t = tape.tanh(s)?;
            tape.sum(t)
        },
        &[x],
        DEFAULT_EPS,
        DEFAULT_RTOL,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn scale_and_offset() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf_grad(Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]));
    let y = tape.scale(x, 3.0).unwrap();
    let z = tape.offset(y, 1.0).unwrap();
    assert_eq!(tape.value(z).data, vec![4.0, 7.0]);
    let loss = tape.sum(z).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn forward_ops_stay_finite() {
    // property over a few seeds: finite inputs in [-10, 10] keep finite outputs
    for seed in 0..8u64 {
        let mut x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        fill_uniform(&mut x, -10.0, 10.0, seed);
        let mut w = Tensor::<f64>::zeros(Shape::new(2, 3, 3, 3));
        fill_uniform(&mut w, -10.0, 10.0, seed + 100);
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let wi = tape.leaf(w);
        let y = tape.conv2d(xi, wi, None, 1, 1).unwrap();
        let s = tape.sigmoid(y).unwrap();
        let t = tape.tanh(s).unwrap();
        let r = tape.relu(t).unwrap();
        let p = tape.maxpool2(r).unwrap();
        let u = tape.upsample_bilinear(p, 4, 4).unwrap();
        let g = tape.global_avg_pool(u).unwrap();
        assert!(tape.value(g).all_finite());
    }
}
