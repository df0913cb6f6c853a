use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{check_grads, max_rel_err, FD_STEP};
use super::{Graph, NodeId, Value};

const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn assert_ok(name: &str, leaves: &[ArrayD<f64>], build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let checks = check_grads(leaves, build, FD_STEP);
    let worst = max_rel_err(&checks);
    assert!(
        worst <= TOL,
        "{name}: max rel err {worst:.3e} exceeds {TOL:.0e}; per-leaf: {:?}",
        checks
            .iter()
            .map(|c| (c.max_rel_err, c.argmax, c.analytic, c.numeric))
            .collect::<Vec<_>>()
    );
}

#[test]
fn grad_conv2d_stride1_pad1() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 5, 6]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    assert_ok("conv2d s1 p1", &[x, w, b], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1);
        g.sum_all(y)
    });
}

#[test]
fn grad_conv2d_on_one_by_one_map() {
    // 1x1 output maps flip ndarray's dot into column-major results; the
    // coarsest pyramid stage hits this in every backward pass.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[3, 1, 1]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    assert_ok("conv2d 1x1 map", &[x, w, b], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1);
        let y = g.silu(y);
        g.sum_all(y)
    });
}

#[test]
fn grad_conv2d_stride2_no_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 7, 7]);
    let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    assert_ok("conv2d s2", &[x, w], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], None, 2, 1);
        // Nonlinearity after the conv so the weight gradient is not constant.
        let y = g.silu(y);
        g.sum_all(y)
    });
}

#[test]
fn grad_conv2d_1x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[4, 3, 3]);
    let w = rand_tensor(&mut rng, &[2, 4, 1, 1]);
    let b = rand_tensor(&mut rng, &[2]);
    assert_ok("conv2d 1x1", &[x, w, b], |g, ids| {
        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 0);
        let y = g.sigmoid(y);
        g.sum_all(y)
    });
}

#[test]
fn grad_silu() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 4, 4]);
    assert_ok("silu", &[x], |g, ids| {
        let y = g.silu(ids[0]);
        let y = g.mul(y, y);
        g.sum_all(y)
    });
}

#[test]
fn grad_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 3]);
    assert_ok("sigmoid", &[x], |g, ids| {
        let y = g.sigmoid(ids[0]);
        let y = g.mul(y, y);
        g.sum_all(y)
    });
}

#[test]
fn grad_softmax_c_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[4, 3, 2]);
    let pick = rand_tensor(&mut rng, &[4, 3, 2]);
    assert_ok("softmax_c [C,H,W]", &[x], move |g, ids| {
        let y = g.softmax_c(ids[0]);
        let w = g.constant(pick.clone());
        let y = g.mul(y, w);
        g.sum_all(y)
    });
}

#[test]
fn grad_softmax_c_1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[5]);
    let pick = rand_tensor(&mut rng, &[5]);
    assert_ok("softmax_c [C]", &[x], move |g, ids| {
        let y = g.softmax_c(ids[0]);
        let w = g.constant(pick.clone());
        let y = g.mul(y, w);
        g.sum_all(y)
    });
}

#[test]
fn grad_log_clamp_above_eps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // Keep values well above eps so the finite difference never crosses the
    // clamp boundary.
    let x = rand_tensor(&mut rng, &[3, 4]).mapv(|t| 0.5 + 0.4 * t);
    assert_ok("log_clamp", &[x], |g, ids| {
        let y = g.log_clamp(ids[0], 1e-12);
        g.sum_all(y)
    });
}

#[test]
fn log_clamp_zero_grad_in_clamped_region() {
    let mut g = Graph::new();
    let x = g.param(Value::new(
        ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.0, 1e-15, 0.5]).unwrap(),
    ));
    let y = g.log_clamp(x, 1e-12);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    let dx = grads.get(x).unwrap();
    assert_eq!(dx[[0]], 0.0, "clamped at zero must have zero gradient");
    assert_eq!(dx[[1]], 0.0, "clamped below eps must have zero gradient");
    assert!((dx[[2]] - 2.0).abs() < 1e-12, "d ln(x)/dx = 1/x above eps");
}

#[test]
fn grad_add_mul_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    assert_ok("add/mul/affine", &[a, b], |g, ids| {
        let s = g.add(ids[0], ids[1]);
        let p = g.mul(s, ids[0]);
        let t = g.affine(p, 2.5, -0.3);
        g.sum_all(t)
    });
}

#[test]
fn grad_add_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&mut rng, &[2, 2]);
    let b = rand_tensor(&mut rng, &[2, 2]);
    let c = rand_tensor(&mut rng, &[2, 2]);
    assert_ok("add_n", &[a, b, c], |g, ids| {
        let s = g.add_n(&[ids[0], ids[1], ids[2], ids[0]]);
        let s = g.mul(s, s);
        g.sum_all(s)
    });
}

#[test]
fn grad_mean_all() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 5]);
    assert_ok("mean_all", &[x], |g, ids| {
        let y = g.mul(ids[0], ids[0]);
        g.mean_all(y)
    });
}

#[test]
fn grad_concat_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, &[2, 4, 4]);
    let b = rand_tensor(&mut rng, &[3, 4, 4]);
    assert_ok("concat_c + crop", &[a, b], |g, ids| {
        let c = g.concat_c(&[ids[0], ids[1]]);
        let c = g.crop(c, 1, 0, 2, 3);
        let c = g.mul(c, c);
        g.sum_all(c)
    });
}

#[test]
fn grad_resize_bilinear_up_and_down() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    assert_ok("resize up", &[x.clone()], |g, ids| {
        let y = g.resize_bilinear(ids[0], 6, 8);
        let y = g.mul(y, y);
        g.sum_all(y)
    });
    assert_ok("resize down", &[x], |g, ids| {
        let y = g.resize_bilinear(ids[0], 2, 2);
        let y = g.mul(y, y);
        g.sum_all(y)
    });
}

#[test]
fn grad_broadcast_pixel_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let v = rand_tensor(&mut rng, &[3]);
    let m = rand_tensor(&mut rng, &[3, 2, 2]);
    assert_ok("broadcast_c/pixel_vec/stack_rows", &[v, m], |g, ids| {
        let tiled = g.broadcast_c(ids[0], 2, 2);
        let s = g.add(tiled, ids[1]);
        let p00 = g.pixel_vec(s, 0, 0);
        let p11 = g.pixel_vec(s, 1, 1);
        let rows = g.stack_rows(&[p00, p11]);
        let rows = g.mul(rows, rows);
        g.sum_all(rows)
    });
}

#[test]
fn grad_linear_2d_and_1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x2 = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    assert_ok("linear [N,C]", &[x2, w.clone(), b.clone()], |g, ids| {
        let y = g.linear(ids[0], ids[1], Some(ids[2]));
        let y = g.silu(y);
        g.sum_all(y)
    });
    let x1 = rand_tensor(&mut rng, &[3]);
    assert_ok("linear [C]", &[x1, w, b], |g, ids| {
        let y = g.linear(ids[0], ids[1], Some(ids[2]));
        let y = g.mul(y, y);
        g.sum_all(y)
    });
}

#[test]
fn grad_gram_symmetrize_diag() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let pick = rand_tensor(&mut rng, &[3, 3]);
    assert_ok("gram/symmetrize/diag", &[x], move |g, ids| {
        let m = g.gram_scaled(ids[0], 0.5);
        let m = g.symmetrize(m);
        let m = g.add_diag_const(m, 1.0);
        let m = g.sigmoid(m);
        let w = g.constant(pick.clone());
        let m = g.mul(m, w);
        g.sum_all(m)
    });
}

#[test]
fn grad_dot_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let v = rand_tensor(&mut rng, &[4]);
    let m = rand_tensor(&mut rng, &[4, 3, 3]);
    assert_ok("dot_c", &[v, m], |g, ids| {
        let y = g.dot_c(ids[0], ids[1]);
        let y = g.sigmoid(y);
        let y = g.mul(y, y);
        g.sum_all(y)
    });
}

#[test]
fn grad_composite_pipeline_shape() {
    // A miniature of the real network: conv -> silu -> resize -> concat ->
    // 1x1 conv -> softmax, with a gathered descriptor driving a gram matrix.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let img = rand_tensor(&mut rng, &[2, 8, 8]);
    let w1 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b1 = rand_tensor(&mut rng, &[3]);
    let wp = rand_tensor(&mut rng, &[2, 6, 1, 1]);
    let wl = rand_tensor(&mut rng, &[3, 3]);
    assert_ok("composite", &[img, w1, b1, wp, wl], |g, ids| {
        let f = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1); // [3,4,4]
        let f = g.silu(f);
        let up = g.resize_bilinear(f, 8, 8);
        let up2 = g.resize_bilinear(f, 8, 8);
        let cat = g.concat_c(&[up, up2]); // [6,8,8]
        let p = g.conv2d(cat, ids[3], None, 1, 0); // [2,8,8]
        let p = g.softmax_c(p);
        let lp = g.log_clamp(p, 1e-12);
        let ce = g.mean_all(lp);
        let d0 = g.pixel_vec(f, 1, 2);
        let d1 = g.pixel_vec(f, 3, 0);
        let rows = g.stack_rows(&[d0, d1]);
        let proj = g.linear(rows, ids[4], None);
        let m = g.gram_scaled(proj, 0.57);
        let m = g.sigmoid(m);
        let ms = g.mean_all(m);
        let tot = g.add(ce, ms);
        g.affine(tot, 1.0, 0.0)
    });
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Value::new(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5)));
    let c = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
    let y = g.mul(x, c);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none(), "constant must not accumulate gradient");
    let dx = grads.get(x).unwrap();
    assert!(dx.iter().all(|&v| (v - 2.0).abs() < 1e-12));
}

#[test]
fn gradient_accumulates_across_reuse() {
    let mut g = Graph::new();
    let x = g.param(Value::new(ArrayD::from_elem(IxDyn(&[2]), 3.0)));
    let y = g.add(x, x); // dy/dx = 2
    let s = g.sum_all(y);
    let grads = g.backward(s);
    let dx = grads.get(x).unwrap();
    assert!(dx.iter().all(|&v| (v - 2.0).abs() < 1e-12));
}

#[test]
fn unreached_nodes_have_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Value::new(ArrayD::from_elem(IxDyn(&[2]), 1.0)));
    let orphan = g.param(Value::new(ArrayD::from_elem(IxDyn(&[2]), 1.0)));
    let s = g.sum_all(x);
    let grads = g.backward(s);
    assert!(grads.get(orphan).is_none());
    assert!(grads.get(x).is_some());
}

#[test]
#[should_panic(expected = "shape mismatch")]
fn add_panics_on_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
    let b = g.constant(ArrayD::zeros(IxDyn(&[3, 2])));
    g.add(a, b);
}

#[test]
#[should_panic(expected = "root must be scalar")]
fn backward_panics_on_non_scalar_root() {
    let mut g = Graph::new();
    let a = g.param(Value::new(ArrayD::zeros(IxDyn(&[2]))));
    g.backward(a);
}

#[test]
fn conv_matches_direct_convolution() {
    // Cross-check GEMM conv against a literal nested-loop implementation.
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_tensor(&mut rng, &[3, 6, 5]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let (stride, pad) = (2, 1);

    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let wn = g.constant(w.clone());
    let bn = g.constant(b.clone());
    let y = g.conv2d(xn, wn, Some(bn), stride, pad);
    let yv = g.value(y);

    let (h, wd) = (6usize, 5usize);
    let oh = (h + 2 * pad - 3) / stride + 1;
    let ow = (wd + 2 * pad - 3) / stride + 1;
    assert_eq!(yv.shape(), &[4, oh, ow]);
    for co in 0..4 {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b[[co]];
                for ci in 0..3 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let r = (i * stride + ki) as isize - pad as isize;
                            let c = (j * stride + kj) as isize - pad as isize;
                            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < wd {
                                acc += x[[ci, r as usize, c as usize]]
                                    * w[[co, ci, ki, kj]];
                            }
                        }
                    }
                }
                let got = yv[[co, i, j]];
                assert!(
                    (got - acc).abs() < 1e-12,
                    "conv mismatch at [{co},{i},{j}]: {got} vs {acc}"
                );
            }
        }
    }
}

#[test]
fn softmax_channels_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = rand_tensor(&mut rng, &[5, 3, 4]).mapv(|t| t * 20.0);
    let mut g = Graph::new();
    let xn = g.constant(x);
    let y = g.softmax_c(xn);
    let yv = g.value(y);
    for i in 0..3 {
        for j in 0..4 {
            let s: f64 = (0..5).map(|c| yv[[c, i, j]]).sum();
            assert!((s - 1.0).abs() < 1e-12, "softmax column sums to {s}");
        }
    }
    assert!(yv.iter().all(|&v| v > 0.0));
}
