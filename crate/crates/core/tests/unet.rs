mod common;

use common::*;
use thermodiff::diffusion::{training_loss, LossNorm, NoiseSchedule, ScheduleSpec};
use thermodiff::unet::{
    preset_with_width, self_attention_block, AttentionWeights, UNet, Variant, Width,
};
use thermodiff::{Graph, Rng, Tensor};

struct BlockWeights {
    scale: Tensor,
    shift: Tensor,
    q: (Tensor, Tensor),
    k: (Tensor, Tensor),
    v: (Tensor, Tensor),
    proj: (Tensor, Tensor),
}

fn block_weights(c: usize, rng: &mut Rng) -> BlockWeights {
    let mut conv = || {
        (
            Tensor::uniform(&[c, c, 1, 1], -0.6, 0.6, rng),
            Tensor::uniform(&[c], -0.2, 0.2, rng),
        )
    };
    let (q, k, v, proj) = (conv(), conv(), conv(), conv());
    BlockWeights {
        scale: Tensor::uniform(&[c], 0.5, 1.5, rng),
        shift: Tensor::uniform(&[c], -0.3, 0.3, rng),
        q,
        k,
        v,
        proj,
    }
}

fn run_block(x: &Tensor, heads: usize, groups: usize, w: &BlockWeights) -> Tensor {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let mut pair = |p: &(Tensor, Tensor)| (g.constant(p.0.clone()), g.constant(p.1.clone()));
    let (q, k, v, proj) = (pair(&w.q), pair(&w.k), pair(&w.v), pair(&w.proj));
    let aw = AttentionWeights {
        norm_scale: g.constant(w.scale.clone()),
        norm_shift: g.constant(w.shift.clone()),
        groups,
        q,
        k,
        v,
        proj,
    };
    let out = self_attention_block(&mut g, xv, heads, &aw).unwrap();
    g.value(out).clone()
}

/// Group norm, per-head softmax attention over pixels, projection and
/// residual, written out with plain loops.
fn oracle_block(x: &Tensor, heads: usize, groups: usize, w: &BlockWeights) -> Tensor {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let (d, l) = (c / heads, h * wd);
    let xn = naive_group_norm(x, groups, 1e-5, w.scale.data(), w.shift.data());
    let q = naive_conv2d(&xn, &w.q.0, Some(&w.q.1), 1, 0);
    let k = naive_conv2d(&xn, &w.k.0, Some(&w.k.1), 1, 0);
    let v = naive_conv2d(&xn, &w.v.0, Some(&w.v.1), 1, 0);
    let heads_view = |t: Tensor| t.reshape(&[n, heads, d, l]).unwrap();
    let att = naive_attention(
        &heads_view(q),
        &heads_view(k),
        &heads_view(v),
        1.0 / (d as f64).sqrt(),
    )
    .reshape(&[n, c, h, wd])
    .unwrap();
    let p = naive_conv2d(&att, &w.proj.0, Some(&w.proj.1), 1, 0);
    x.zip_map(&p, |a, b| a + b).unwrap()
}

#[test]
fn attention_block_matches_loop_oracle() {
    let mut rng = Rng::new(40);
    for &(n, c, h, w, heads, groups) in &[(2, 8, 3, 4, 2, 4), (1, 6, 5, 5, 3, 3), (1, 4, 2, 2, 1, 1)] {
        let x = rand_tensor(&[n, c, h, w], &mut rng);
        let bw = block_weights(c, &mut rng);
        let got = run_block(&x, heads, groups, &bw);
        let want = oracle_block(&x, heads, groups, &bw);
        let diff = got.max_abs_diff(&want);
        assert!(diff < 1e-5, "{n}x{c}x{h}x{w} heads {heads}: {diff:e}");
    }
}

#[test]
fn single_token_attention_passes_values_through() {
    // With one pixel the softmax is exactly 1, so the block reduces to x + proj(v(norm(x))).
    let mut rng = Rng::new(41);
    let x = rand_tensor(&[3, 4, 1, 1], &mut rng);
    let bw = block_weights(4, &mut rng);
    let got = run_block(&x, 2, 2, &bw);
    let xn = naive_group_norm(&x, 2, 1e-5, bw.scale.data(), bw.shift.data());
    let v = naive_conv2d(&xn, &bw.v.0, Some(&bw.v.1), 1, 0);
    let p = naive_conv2d(&v, &bw.proj.0, Some(&bw.proj.1), 1, 0);
    let want = x.zip_map(&p, |a, b| a + b).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-5);
}

#[test]
fn attention_block_gradients() {
    let mut rng = Rng::new(42);
    let x = rand_tensor(&[1, 4, 2, 3], &mut rng);
    let bw = block_weights(4, &mut rng);
    let inputs = vec![
        x,
        bw.scale,
        bw.shift,
        bw.q.0,
        bw.q.1,
        bw.k.0,
        bw.k.1,
        bw.v.0,
        bw.v.1,
        bw.proj.0,
        bw.proj.1,
    ];
    let checks = grad_check(&inputs, 7, |g, v| {
        let aw = AttentionWeights {
            norm_scale: v[1],
            norm_shift: v[2],
            groups: 2,
            q: (v[3], v[4]),
            k: (v[5], v[6]),
            v: (v[7], v[8]),
            proj: (v[9], v[10]),
        };
        self_attention_block(g, v[0], 2, &aw).unwrap()
    });
    assert_grads("attention block", &checks, 1e-2);
}

#[test]
fn variants_differ_only_by_factor_two_attention() {
    let one = preset_with_width(Variant::I, 32, Width::Tiny).unwrap();
    let two = preset_with_width(Variant::II, 32, Width::Tiny).unwrap();
    let m1 = UNet::build(&one, &mut Rng::new(3)).unwrap();
    let m2 = UNet::build(&two, &mut Rng::new(3)).unwrap();
    assert!(!m1.attention_factors().contains(&2));
    assert!(m2.attention_factors().contains(&2));

    let table1 = m1.params().shape_table();
    let table2 = m2.params().shape_table();
    let extra: Vec<&String> = table2
        .iter()
        .filter(|e| !table1.contains(e))
        .map(|(n, _)| n)
        .collect();
    assert!(table1.iter().all(|e| table2.contains(e)));
    // Level 1 runs at factor 2: its down and up attention blocks are the only additions.
    assert!(!extra.is_empty());
    assert!(
        extra.iter().all(|n| n.starts_with("down.1.attn") || n.starts_with("up.1.attn")),
        "{extra:?}"
    );
}

#[test]
fn variants_produce_different_outputs_with_trained_like_weights() {
    let mut rng = Rng::new(44);
    let x = Tensor::uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut rng);
    let y = rand_tensor(&[1, 1, 32, 32], &mut rng);
    let mut outs = Vec::new();
    for v in [Variant::I, Variant::II] {
        let cfg = preset_with_width(v, 32, Width::Tiny).unwrap();
        let mut m = UNet::build(&cfg, &mut Rng::new(9)).unwrap();
        randomize(m.params_mut(), 0.05, &mut Rng::new(10));
        let out = m.predict(&x, &y, &[20]).unwrap();
        assert!(out.all_finite());
        outs.push(out);
    }
    assert!(outs[0].max_abs_diff(&outs[1]) > 1e-4);
}

#[test]
fn every_weight_receives_gradient() {
    let cfg = probe_config();
    let mut rng = Rng::new(45);
    let mut m = UNet::build(&cfg, &mut rng).unwrap();
    randomize(m.params_mut(), 0.3, &mut rng);
    let s = NoiseSchedule::new(&ScheduleSpec::desk()).unwrap();
    let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let y0 = Tensor::uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
    let eps = rand_tensor(&[2, 1, 8, 8], &mut rng);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true);
    let loss = training_loss(&mut g, &bound, &x, &y0, &[5, 60], &eps, &s, LossNorm::L2).unwrap();
    g.backward(loss).unwrap();
    for ((name, _), grad) in m.params().iter().zip(bound.grads(&g)) {
        let norm: f64 = grad.data().iter().map(|&v| (v as f64).powi(2)).sum();
        assert!(norm > 0.0 && norm.is_finite(), "{name} has gradient norm {norm}");
    }
}

#[test]
fn probe_model_is_small() {
    let m = UNet::build(&probe_config(), &mut Rng::new(0)).unwrap();
    assert!(m.num_parameters() <= 10_000, "{}", m.num_parameters());
    assert_eq!(m.attention_factors(), vec![1, 2, 4, 2, 2, 1, 1]);
}
