//! Building blocks of the denoiser. Each layer holds [`ParamId`]s into the
//! model's [`ParamStore`]; forward passes resolve them through a [`Ctx`].

use super::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result, Rng};

pub(crate) const NORM_EPS: f32 = 1e-5;

/// Graph plus the vars bound to every parameter.
pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub vars: &'a [Var],
}

impl Ctx<'_> {
    fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut Rng,
        zero: bool,
    ) -> Result<Self> {
        let shape = [cout, cin, k, k];
        let w = if zero {
            Tensor::zeros(&shape)
        } else {
            kaiming_uniform(&shape, cin * k * k, rng)
        };
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            pad: k / 2,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        cx.g.conv2d(x, w, Some(b), 1, self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(format!("{name}.scale"), Tensor::ones(&[channels]))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels]))?,
            groups,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (s, b) = (cx.p(self.scale), cx.p(self.shift));
        cx.g.group_norm(x, self.groups, NORM_EPS, s, b)
    }
}

/// `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (cin as f32).sqrt();
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::uniform(&[cin, cout], -bound, bound, rng),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        let h = cx.g.matmul(x, w)?;
        cx.g.add(h, b)
    }
}

/// GroupNorm → SiLU → conv, time scale-shift, GroupNorm → SiLU → conv, plus skip.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb_scale: Linear,
    emb_shift: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    cout: usize,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), cin, groups)?,
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, rng, false)?,
            emb_scale: Linear::new(store, &format!("{name}.emb_scale"), emb_dim, cout, rng)?,
            emb_shift: Linear::new(store, &format!("{name}.emb_shift"), emb_dim, cout, rng)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), cout, groups)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, rng, false)?,
            skip: if cin != cout {
                Some(Conv::new(store, &format!("{name}.skip"), cin, cout, 1, rng, false)?)
            } else {
                None
            },
            cout,
        })
    }

    /// `emb` is the already-activated time embedding `[N, emb_dim]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, emb: Var) -> Result<Var> {
        let n = cx.g.shape(x)[0];
        let h = self.norm1.forward(cx, x)?;
        let h = cx.g.silu(h);
        let h = self.conv1.forward(cx, h)?;
        let h = self.norm2.forward(cx, h)?;

        let scale = self.emb_scale.forward(cx, emb)?;
        let scale = cx.g.reshape(scale, &[n, self.cout, 1, 1])?;
        let scale = cx.g.add_scalar(scale, 1.0);
        let shift = self.emb_shift.forward(cx, emb)?;
        let shift = cx.g.reshape(shift, &[n, self.cout, 1, 1])?;
        let h = cx.g.mul(h, scale)?;
        let h = cx.g.add(h, shift)?;

        let h = cx.g.silu(h);
        let h = self.conv2.forward(cx, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(cx, x)?,
            None => x,
        };
        cx.g.add(skip, h)
    }
}

/// Multi-head self-attention over the spatial positions of a feature map.
#[derive(Clone, Debug)]
pub(crate) struct AttnBlock {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    proj: Conv,
    heads: usize,
    pub factor: usize,
}

impl AttnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        groups: usize,
        factor: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), channels, groups)?,
            q: Conv::new(store, &format!("{name}.q"), channels, channels, 1, rng, false)?,
            k: Conv::new(store, &format!("{name}.k"), channels, channels, 1, rng, false)?,
            v: Conv::new(store, &format!("{name}.v"), channels, channels, 1, rng, false)?,
            proj: Conv::new(store, &format!("{name}.proj"), channels, channels, 1, rng, false)?,
            heads,
            factor,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, max_tokens: usize) -> Result<Var> {
        let s = cx.g.shape(x);
        let tokens = s[2] * s[3];
        if tokens > max_tokens {
            return Err(Error::Config(format!(
                "attention at factor {} needs {tokens} tokens, above the limit of {max_tokens}",
                self.factor
            )));
        }
        let conv = |c: &Conv| (cx.p(c.weight), cx.p(c.bias));
        let weights = AttentionWeights {
            norm_scale: cx.p(self.norm.scale),
            norm_shift: cx.p(self.norm.shift),
            groups: self.norm.groups,
            q: conv(&self.q),
            k: conv(&self.k),
            v: conv(&self.v),
            proj: conv(&self.proj),
        };
        self_attention_block(cx.g, x, self.heads, &weights)
    }
}

/// Vars for one attention block. Projections are 1×1 convs given as `(weight [C, C, 1, 1], bias [C])`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub norm_scale: Var,
    pub norm_shift: Var,
    pub groups: usize,
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub proj: (Var, Var),
}

/// Group-normalize, project to per-head queries/keys/values over the `H·W`
/// tokens, apply scaled dot-product attention (scale `1/√(C/heads)`), project
/// back and add the input.
pub fn self_attention_block(
    g: &mut Graph,
    x: Var,
    heads: usize,
    w: &AttentionWeights,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("attention expects [N, C, H, W], got {s:?}")));
    }
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    let d = c / heads;
    let l = h * wd;
    let xn = g.group_norm(x, w.groups, NORM_EPS, w.norm_scale, w.norm_shift)?;
    let q = g.conv2d(xn, w.q.0, Some(w.q.1), 1, 0)?;
    let k = g.conv2d(xn, w.k.0, Some(w.k.1), 1, 0)?;
    let v = g.conv2d(xn, w.v.0, Some(w.v.1), 1, 0)?;
    // Channel-major layout makes [N, C, H, W] → [N, heads, d, L] a pure reshape.
    let q = g.reshape(q, &[n, heads, d, l])?;
    let k = g.reshape(k, &[n, heads, d, l])?;
    let v = g.reshape(v, &[n, heads, d, l])?;
    let out = g.attention(q, k, v, 1.0 / (d as f32).sqrt())?;
    let out = g.reshape(out, &[n, c, h, wd])?;
    let out = g.conv2d(out, w.proj.0, Some(w.proj.1), 1, 0)?;
    g.add(x, out)
}
