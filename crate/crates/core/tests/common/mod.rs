//! Independent oracles shared by the integration and acceptance suites.
//! Nothing here calls the kernels under test except through the public graph API.

#![allow(dead_code)]

use thermodiff::{Graph, Rng, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

/// Gradient-check outcome for one input tensor.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: (usize, f64, f64),
    pub checked: usize,
}

/// Relative error with a unit floor on the denominator, so entries whose true
/// gradient is near zero are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare backprop against central finite differences for every element of
/// every input. `f` builds the op output from input vars; the scalar loss is
/// `sum(out * r)` with a fixed random `r`, evaluated in f64 outside the graph.
pub fn grad_check(
    inputs: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) -> Vec<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let mut rng = Rng::new(seed);
    let weights = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng);
    let wv = g.constant(weights.clone());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum()
    };

    let mut results = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut worst = (0, 0.0, 0.0);
        let mut max_err: f64 = 0.0;
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP as f32;
            minus[k].data_mut()[j] -= FD_STEP as f32;
            // Actual step after f32 rounding.
            let h = plus[k].data()[j] as f64 - minus[k].data()[j] as f64;
            let numeric = (eval(&plus) - eval(&minus)) / h;
            let a = analytic.data()[j] as f64;
            let e = rel_err(a, numeric);
            if e > max_err {
                max_err = e;
                worst = (j, a, numeric);
            }
        }
        results.push(GradCheck {
            max_rel_err: max_err,
            worst,
            checked: input.numel(),
        });
    }
    results
}

pub fn assert_grads(name: &str, checks: &[GradCheck], tol: f64) {
    for (i, c) in checks.iter().enumerate() {
        assert!(
            c.max_rel_err < tol,
            "{name}: input {i} max rel err {:.3e} at {:?}",
            c.max_rel_err,
            c.worst
        );
    }
}

pub fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Triple-loop batched-free matrix product, f64 accumulation.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f64;
            for p in 0..k {
                s += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
            }
            out[i * n + j] = s as f32;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Direct six-loop convolution.
pub fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut s = bias.map_or(0.0, |b| b.data()[oi] as f64);
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xo * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oi * c + ci) * kh + ki) * kw + kj];
                                s += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + y) * wo + xo] = s as f32;
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

/// Two-pass group normalization.
pub fn naive_group_norm(x: &Tensor, groups: usize, eps: f64, scale: &[f32], shift: &[f32]) -> Tensor {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let cpg = c / groups;
    let mut out = x.clone();
    for ni in 0..n {
        for gi in 0..groups {
            let idx: Vec<usize> = (gi * cpg..(gi + 1) * cpg)
                .flat_map(|ci| (0..spatial).map(move |p| (ni * c + ci) * spatial + p))
                .collect();
            let mean = idx.iter().map(|&i| x.data()[i] as f64).sum::<f64>() / idx.len() as f64;
            let var = idx
                .iter()
                .map(|&i| (x.data()[i] as f64 - mean).powi(2))
                .sum::<f64>()
                / idx.len() as f64;
            for &i in &idx {
                let ci = (i / spatial) % c;
                let xhat = (x.data()[i] as f64 - mean) / (var + eps).sqrt();
                out.data_mut()[i] = (xhat * scale[ci] as f64 + shift[ci] as f64) as f32;
            }
        }
    }
    out
}

/// Mean over each 2×2 block of the trailing two axes.
pub fn block_mean(x: &Tensor) -> Tensor {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let planes: usize = s[..r - 2].iter().product();
    let mut out = Vec::new();
    for p in 0..planes {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let mut acc = 0.0f64;
                for di in 0..2 {
                    for dj in 0..2 {
                        acc += x.data()[p * h * w + (2 * i + di) * w + 2 * j + dj] as f64;
                    }
                }
                out.push((acc / 4.0) as f32);
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 2] = h / 2;
    shape[r - 1] = w / 2;
    Tensor::new(&shape, out).unwrap()
}

/// Attention on `[b, d, l]` operands with explicit loops and f64 exponentials.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Tensor {
    let s = q.shape();
    let (d, l) = (s[s.len() - 2], s[s.len() - 1]);
    let b = q.numel() / (d * l);
    let at = |t: &Tensor, bi: usize, c: usize, j: usize| t.data()[bi * d * l + c * l + j] as f64;
    let mut out = vec![0.0f32; q.numel()];
    for bi in 0..b {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| scale * (0..d).map(|c| at(q, bi, c, i) * at(k, bi, c, j)).sum::<f64>())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d {
                let o: f64 = (0..l).map(|j| w[j] / z * at(v, bi, c, j)).sum();
                out[bi * d * l + c * l + i] = o as f32;
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

/// A small network (under 10k weights) with attention at every factor.
pub fn probe_config() -> thermodiff::unet::UNetConfig {
    thermodiff::unet::UNetConfig {
        in_channels_source: 3,
        in_channels_target: 1,
        base_channels: 4,
        channel_mult: vec![1, 1],
        res_blocks_per_level: 1,
        attention_levels: [1, 2, 4].into_iter().collect(),
        heads: 2,
        groupnorm_groups: 2,
        time_embed_dim: 8,
        max_attention_tokens: 4096,
    }
}

/// Replace every weight with `N(0, scale²)` so no path is silenced by zero init.
pub fn randomize(params: &mut thermodiff::unet::ParamStore, scale: f32, rng: &mut Rng) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
    }
}

/// Training loss of `model` in a gradient-free graph.
pub fn loss_value(
    model: &thermodiff::unet::UNet,
    x: &Tensor,
    y0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    s: &thermodiff::diffusion::NoiseSchedule,
) -> f64 {
    let mut g = Graph::no_grad();
    let l = thermodiff::diffusion::training_loss(
        &mut g,
        model,
        x,
        y0,
        t,
        eps,
        s,
        thermodiff::diffusion::LossNorm::L2,
    )
    .unwrap();
    g.value(l).item() as f64
}

/// Largest relative error between backprop and central differences (step
/// `h`) of the training loss over the parameters selected by `pick`. The
/// denominator is floored at `floor`.
#[allow(clippy::too_many_arguments)]
pub fn loss_param_fd(
    model: &thermodiff::unet::UNet,
    x: &Tensor,
    y0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    s: &thermodiff::diffusion::NoiseSchedule,
    h: f32,
    floor: f64,
    pick: impl Fn(usize, usize) -> bool,
) -> (f64, usize) {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let l = thermodiff::diffusion::training_loss(
        &mut g,
        &bound,
        x,
        y0,
        t,
        eps,
        s,
        thermodiff::diffusion::LossNorm::L2,
    )
    .unwrap();
    g.backward(l).unwrap();
    let grads = bound.grads(&g);
    drop(g);

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut params = model.params().clone();
    for (k, grad) in grads.iter().enumerate() {
        for j in 0..grad.numel() {
            if !pick(k, j) {
                continue;
            }
            let orig = params.tensors()[k].data()[j];
            params.tensors_mut()[k].data_mut()[j] = orig + h;
            let hi = params.tensors()[k].data()[j] as f64;
            let lp = loss_value(&model.with_params(params.clone()).unwrap(), x, y0, t, eps, s);
            params.tensors_mut()[k].data_mut()[j] = orig - h;
            let lo = params.tensors()[k].data()[j] as f64;
            let lm = loss_value(&model.with_params(params.clone()).unwrap(), x, y0, t, eps, s);
            params.tensors_mut()[k].data_mut()[j] = orig;
            let numeric = (lp - lm) / (hi - lo);
            let a = grad.data()[j] as f64;
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            checked += 1;
        }
    }
    (worst, checked)
}
