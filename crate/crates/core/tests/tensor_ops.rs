mod common;

use common::*;
use proptest::prelude::*;
use thermodiff::tensor::{broadcast_shape, BinaryOp, Resample, UnaryOp};
use thermodiff::{Graph, Rng, Tensor};

const TOL: f64 = 1e-3;

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(1);
    let a = rand_tensor(&[5, 7], &mut rng);
    let b = rand_tensor(&[7, 3], &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert!(g.value(c).max_abs_diff(&naive_matmul(&a, &b)) < 1e-6);
}

#[test]
fn batched_matmul_broadcasts_leading_axes() {
    let mut rng = Rng::new(2);
    let a = rand_tensor(&[2, 1, 3, 4], &mut rng);
    let b = rand_tensor(&[3, 4, 2], &mut rng);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[2, 3, 3, 2]);
    for i in 0..2 {
        for j in 0..3 {
            let am = a.slice_outer(i, 1).unwrap().reshape(&[3, 4]).unwrap();
            let bm = b.slice_outer(j, 1).unwrap().reshape(&[4, 2]).unwrap();
            let want = naive_matmul(&am, &bm);
            let got = &g.value(c).data()[(i * 3 + j) * 6..(i * 3 + j + 1) * 6];
            for (x, y) in got.iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = Rng::new(3);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 2, 5)] {
        let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
        let w = rand_tensor(&[4, 3, k, k], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
        let want = naive_conv2d(&x, &w, Some(&b), stride, pad);
        assert_eq!(g.shape(y), want.shape());
        assert!(g.value(y).max_abs_diff(&want) < 1e-5, "stride {stride} pad {pad} k {k}");
    }
}

#[test]
fn group_norm_matches_two_pass() {
    let mut rng = Rng::new(4);
    let x = Tensor::from_fn(&[2, 6, 4, 3], |i| (i as f32 * 0.37).sin() * 3.0 + 1.5);
    let scale = rand_tensor(&[6], &mut rng);
    let shift = rand_tensor(&[6], &mut rng);
    let mut g = Graph::new();
    let vx = g.constant(x.clone());
    let (vs, vb) = (g.constant(scale.clone()), g.constant(shift.clone()));
    let y = g.group_norm(vx, 3, 1e-5, vs, vb).unwrap();
    let want = naive_group_norm(&x, 3, 1e-5, scale.data(), shift.data());
    assert!(g.value(y).max_abs_diff(&want) < 1e-5);
}

#[test]
fn softmax_sums_to_one() {
    let mut rng = Rng::new(5);
    let x = Tensor::from_fn(&[3, 5, 4], |_| rng.uniform(-20.0, 20.0));
    let mut g = Graph::new();
    let v = g.constant(x);
    for axis in 0..3 {
        let s = g.softmax(v, axis).unwrap();
        let y = g.value(s);
        let shape = y.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..shape[axis])
                    .map(|k| y.data()[(o * shape[axis] + k) * inner + i] as f64)
                    .sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
        assert!(y.data().iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn avg_pool_matches_block_mean() {
    let mut rng = Rng::new(6);
    let x = rand_tensor(&[2, 3, 6, 4], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let d = g.resample(v, Resample::Down).unwrap();
    assert!(g.value(d).max_abs_diff(&block_mean(&x)) < 1e-6);
}

#[test]
fn down_up_keeps_constant_image() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::full(&[1, 3, 8, 8], -0.4));
    let d = g.resample(v, Resample::Down).unwrap();
    let u = g.resample(d, Resample::Up).unwrap();
    assert_eq!(g.value(u), g.value(v));
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut rng = Rng::new(9);
        let x = rand_tensor(&[2, 4, 8, 8], &mut rng);
        let w = rand_tensor(&[4, 4, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (vx, vw) = (g.constant(x), g.constant(w));
        let y = g.conv2d(vx, vw, None, 1, 1).unwrap();
        let s = g.softmax(y, 3).unwrap();
        g.value(s).clone()
    };
    assert_eq!(build(), build());
}

#[test]
fn parallel_and_sequential_agree() {
    let mut rng = Rng::new(10);
    let x = rand_tensor(&[3, 4, 9, 9], &mut rng);
    let w = rand_tensor(&[5, 4, 3, 3], &mut rng);
    let run = |par: bool| {
        thermodiff::parallel::set_enabled(par);
        let mut g = Graph::new();
        let vx = g.param(x.clone());
        let vw = g.param(w.clone());
        let y = g.conv2d(vx, vw, None, 1, 1).unwrap();
        let y2 = g.square(y);
        let l = g.mean(y2);
        g.backward(l).unwrap();
        (g.value(y).clone(), g.grad(vx).unwrap(), g.grad(vw).unwrap())
    };
    let a = run(true);
    let b = run(false);
    thermodiff::parallel::set_enabled(true);
    assert!(a.0.max_abs_diff(&b.0) <= 1e-5);
    assert!(a.1.max_abs_diff(&b.1) <= 1e-5);
    assert!(a.2.max_abs_diff(&b.2) <= 1e-5);
}

// ---- finite-difference checks ------------------------------------------

#[test]
fn fd_binary_ops_with_broadcasting() {
    let mut rng = Rng::new(20);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[3, 1], &mut rng);
    let b_pos = b.map(|v| v.abs() + 0.5);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let rhs = if op == BinaryOp::Div { b_pos.clone() } else { b.clone() };
        let checks = grad_check(&[a.clone(), rhs], 21, |g, v| g.binary(op, v[0], v[1]).unwrap());
        assert_grads(&format!("{op:?}"), &checks, TOL);
    }
}

#[test]
fn fd_unary_ops() {
    let mut rng = Rng::new(22);
    // Keep away from the kink of |x|.
    let x = rand_tensor(&[4, 8], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    for op in [
        UnaryOp::Neg,
        UnaryOp::Silu,
        UnaryOp::Square,
        UnaryOp::Abs,
        UnaryOp::Sigmoid,
        UnaryOp::Exp,
        UnaryOp::Tanh,
    ] {
        let checks = grad_check(std::slice::from_ref(&x), 23, |g, v| g.unary(op, v[0]));
        assert_grads(&format!("{op:?}"), &checks, TOL);
    }
    let checks = grad_check(std::slice::from_ref(&x), 24, |g, v| g.scale(v[0], -1.7));
    assert_grads("scale", &checks, TOL);
    let checks = grad_check(std::slice::from_ref(&x), 25, |g, v| g.add_scalar(v[0], 0.3));
    assert_grads("add_scalar", &checks, TOL);
    let checks = grad_check(std::slice::from_ref(&x), 26, |g, v| g.sum(v[0]));
    assert_grads("sum", &checks, TOL);
    let checks = grad_check(&[x], 27, |g, v| g.mean(v[0]));
    assert_grads("mean", &checks, TOL);
}

#[test]
fn fd_matmul_and_shape_ops() {
    let mut rng = Rng::new(30);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[4, 5], &mut rng);
    let checks = grad_check(&[a.clone(), b], 31, |g, v| g.matmul(v[0], v[1]).unwrap());
    assert_grads("matmul", &checks, TOL);

    let checks = grad_check(std::slice::from_ref(&a), 32, |g, v| g.transpose_last2(v[0]).unwrap());
    assert_grads("transpose", &checks, TOL);

    let checks = grad_check(std::slice::from_ref(&a), 33, |g, v| g.reshape(v[0], &[6, 4]).unwrap());
    assert_grads("reshape", &checks, TOL);

    let c = rand_tensor(&[2, 1, 4], &mut rng);
    let checks = grad_check(&[a, c], 34, |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    assert_grads("concat", &checks, TOL);
}

#[test]
fn fd_conv2d() {
    let mut rng = Rng::new(40);
    let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng).map(|v| v * 0.5);
    let b = rand_tensor(&[3], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let checks = grad_check(&[x.clone(), w.clone(), b.clone()], 41, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()
        });
        assert_grads(&format!("conv2d s{stride} p{pad}"), &checks, TOL);
    }
}

#[test]
fn fd_group_norm() {
    let mut rng = Rng::new(50);
    let x = rand_tensor(&[2, 4, 2, 3], &mut rng);
    let s = rand_tensor(&[4], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let checks = grad_check(&[x, s, b], 51, |g, v| {
        g.group_norm(v[0], 2, 1e-5, v[1], v[2]).unwrap()
    });
    assert_grads("group_norm", &checks, TOL);
}

#[test]
fn fd_softmax_and_resample() {
    let mut rng = Rng::new(60);
    let x = rand_tensor(&[2, 4, 6], &mut rng);
    for axis in [1, 2] {
        let checks = grad_check(std::slice::from_ref(&x), 61, |g, v| g.softmax(v[0], axis).unwrap());
        assert_grads("softmax", &checks, TOL);
    }
    let y = rand_tensor(&[1, 2, 4, 4], &mut rng);
    let checks = grad_check(std::slice::from_ref(&y), 62, |g, v| g.resample(v[0], Resample::Down).unwrap());
    assert_grads("avg_pool", &checks, TOL);
    let checks = grad_check(&[y], 63, |g, v| g.resample(v[0], Resample::Up).unwrap());
    assert_grads("upsample", &checks, TOL);
}

#[test]
fn attention_matches_explicit_loops() {
    let mut rng = Rng::new(80);
    let shape = [2, 3, 4, 9];
    let (q, k, v) = (
        rand_tensor(&shape, &mut rng),
        rand_tensor(&shape, &mut rng),
        rand_tensor(&shape, &mut rng),
    );
    let mut g = Graph::no_grad();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(qv, kv, vv, 0.5).unwrap();
    let want = naive_attention(&q, &k, &v, 0.5);
    assert!(g.value(out).max_abs_diff(&want) < 1e-5);
}

#[test]
fn fd_attention() {
    let mut rng = Rng::new(81);
    let shape = [2, 3, 5];
    let inputs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&shape, &mut rng)).collect();
    let checks = grad_check(&inputs, 82, |g, v| g.attention(v[0], v[1], v[2], 0.7).unwrap());
    assert_grads("attention", &checks, TOL);
}

#[test]
fn fd_composite_chain() {
    let mut rng = Rng::new(70);
    let x = rand_tensor(&[1, 2, 4, 4], &mut rng);
    let w = rand_tensor(&[4, 2, 3, 3], &mut rng).map(|v| v * 0.4);
    let s = rand_tensor(&[4], &mut rng);
    let checks = grad_check(&[x, w, s], 71, |g, v| {
        let h = g.conv2d(v[0], v[1], None, 1, 1).unwrap();
        let zero = g.constant(Tensor::zeros(&[4]));
        let h = g.group_norm(h, 2, 1e-5, v[2], zero).unwrap();
        let h = g.silu(h);
        let t = g.reshape(h, &[1, 4, 16]).unwrap();
        let tt = g.transpose_last2(t).unwrap();
        let att = g.matmul(tt, t).unwrap();
        let att = g.scale(att, 0.25);
        let p = g.softmax(att, 2).unwrap();
        let o = g.matmul(t, p).unwrap();
        let o = g.reshape(o, &[1, 4, 4, 4]).unwrap();
        g.resample(o, Resample::Down).unwrap()
    });
    assert_grads("composite", &checks, TOL);
}

// ---- broadcasting oracle -------------------------------------------------

fn shape_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..=4, 1usize..=4).prop_flat_map(|(ra, rb)| {
        let out = prop::collection::vec(1usize..=4, ra.max(rb));
        (out, prop::collection::vec(any::<bool>(), 8)).prop_map(move |(out, mask)| {
            let rank = out.len();
            let a: Vec<usize> = out[rank - ra..]
                .iter()
                .enumerate()
                .map(|(i, &d)| if mask[i] { 1 } else { d })
                .collect();
            let b: Vec<usize> = out[rank - rb..]
                .iter()
                .enumerate()
                .map(|(i, &d)| if mask[4 + i] { 1 } else { d })
                .collect();
            (a, b)
        })
    })
}

/// Scalar-loop broadcast: unravel each output index and clamp to 0 along unit axes.
fn oracle_broadcast_add(a: &Tensor, b: &Tensor) -> Tensor {
    let out = broadcast_shape(a.shape(), b.shape()).unwrap();
    let n: usize = out.iter().product();
    let fetch = |t: &Tensor, idx: &[usize]| {
        let s = t.shape();
        let off = idx.len() - s.len();
        let mut flat = 0;
        for (d, &ext) in s.iter().enumerate() {
            let i = if ext == 1 { 0 } else { idx[off + d] };
            flat = flat * ext + i;
        }
        t.data()[flat]
    };
    let data = (0..n)
        .map(|mut lin| {
            let mut idx = vec![0; out.len()];
            for d in (0..out.len()).rev() {
                idx[d] = lin % out[d];
                lin /= out[d];
            }
            fetch(a, &idx) * 2.0 + fetch(b, &idx)
        })
        .collect();
    Tensor::new(&out, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn broadcasting_matches_scalar_loops((sa, sb) in shape_pair(), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = rand_tensor(&sa, &mut rng);
        let b = rand_tensor(&sb, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let a2 = g.scale(va, 2.0);
        let c = g.add(a2, vb).unwrap();
        prop_assert_eq!(g.value(c), &oracle_broadcast_add(&a, &b));
    }

    #[test]
    fn broadcast_backward_reduces_to_input_shape((sa, sb) in shape_pair(), seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = rand_tensor(&sa, &mut rng);
        let b = rand_tensor(&sb, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.param(a), g.param(b));
        let c = g.mul(va, vb).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();
        let (ga, gb) = (g.grad(va).unwrap(), g.grad(vb).unwrap());
        prop_assert_eq!(ga.shape(), &sa[..]);
        prop_assert_eq!(gb.shape(), &sb[..]);
    }
}
