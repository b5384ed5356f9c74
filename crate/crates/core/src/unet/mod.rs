//! Conditional U-Net noise predictor `ε̂ = f(x, y_t, t)`.
//!
//! The source `x` and noisy target `y_t` are concatenated along channels at the
//! input. Resolution levels run at downsample factors `1, 2, .., 2^(L-1)` and
//! the middle block at `2^L`; a self-attention block follows every residual
//! block whose factor is in `attention_levels`. The time embedding enters every
//! residual block as a per-channel scale/shift.

mod layers;
mod params;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::tensor::{Graph, Resample, Tensor, Var};
use crate::{Error, Result, Rng};

pub use layers::{self_attention_block, AttentionWeights};
use layers::{AttnBlock, Conv, Ctx, Linear, Norm, ResBlock};
pub use params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels_source: usize,
    pub in_channels_target: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Downsample factors that get self-attention, e.g. `{2, 4, 8, 16}`.
    pub attention_levels: BTreeSet<usize>,
    pub heads: usize,
    pub groupnorm_groups: usize,
    pub time_embed_dim: usize,
    /// Attention blocks refuse inputs with more spatial tokens than this.
    pub max_attention_tokens: usize,
}

/// The two attention-placement variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Attention at `h/4, h/8, h/16`.
    I,
    /// Attention at `h/2, h/4, h/8, h/16`.
    II,
}

impl Variant {
    pub fn attention_levels(self) -> BTreeSet<usize> {
        match self {
            Variant::I => [4, 8, 16].into(),
            Variant::II => [2, 4, 8, 16].into(),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "i" | "1" => Ok(Variant::I),
            "II" | "ii" | "2" => Ok(Variant::II),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

/// Width presets. `Desk` is the default 64-channel network; `Tiny` is small
/// enough to train in minutes on one CPU core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Width {
    #[default]
    Desk,
    Tiny,
}

/// Attention-variant preset; every field other than `attention_levels` is shared.
pub fn preset(variant: Variant, image_size: usize) -> Result<UNetConfig> {
    preset_with_width(variant, image_size, Width::Desk)
}

pub fn preset_with_width(variant: Variant, image_size: usize, width: Width) -> Result<UNetConfig> {
    if image_size == 0 || !image_size.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "image size {image_size} is not a positive multiple of 16"
        )));
    }
    let mut cfg = match width {
        Width::Desk => UNetConfig {
            in_channels_source: 3,
            in_channels_target: 1,
            base_channels: 64,
            channel_mult: vec![1, 2, 2, 4],
            res_blocks_per_level: 2,
            attention_levels: BTreeSet::new(),
            heads: 4,
            groupnorm_groups: 16,
            time_embed_dim: 256,
            max_attention_tokens: 4096,
        },
        Width::Tiny => UNetConfig {
            in_channels_source: 3,
            in_channels_target: 1,
            base_channels: 16,
            channel_mult: vec![1, 2, 2, 2],
            res_blocks_per_level: 1,
            attention_levels: BTreeSet::new(),
            heads: 2,
            groupnorm_groups: 4,
            time_embed_dim: 64,
            max_attention_tokens: 4096,
        },
    };
    cfg.attention_levels = variant.attention_levels();
    Ok(cfg)
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    /// Downsample factor of the middle block.
    pub fn bottom_factor(&self) -> usize {
        1 << self.levels()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad(format!("invalid channel_mult {:?}", self.channel_mult));
        }
        if self.in_channels_source == 0 || self.in_channels_target == 0 {
            return bad("input channel counts must be positive".into());
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return bad(format!("base_channels {} must be even and positive", self.base_channels));
        }
        if self.res_blocks_per_level == 0 || self.heads == 0 || self.time_embed_dim == 0 {
            return bad("res_blocks_per_level, heads and time_embed_dim must be positive".into());
        }
        let groups = self.groupnorm_groups;
        if groups == 0 || !self.base_channels.is_multiple_of(groups) {
            return bad(format!(
                "base_channels {} not divisible by {groups} groups",
                self.base_channels
            ));
        }
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            if !c.is_multiple_of(groups) || !c.is_multiple_of(self.heads) {
                return bad(format!(
                    "level {l} has {c} channels, not divisible by {groups} groups and {} heads",
                    self.heads
                ));
            }
        }
        for &f in &self.attention_levels {
            if !f.is_power_of_two() || f > self.bottom_factor() {
                return bad(format!(
                    "attention factor {f} must be a power of two <= {}",
                    self.bottom_factor()
                ));
            }
        }
        Ok(())
    }

    /// Side length divisibility required of inputs.
    pub fn required_divisor(&self) -> usize {
        self.bottom_factor()
    }
}

/// Sinusoidal embedding of `t`: `dim/2` sines followed by `dim/2` cosines at
/// log-spaced frequencies `10000^(-i/(dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize, max_t: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding dim {dim} must be even")));
    }
    if t > max_t {
        return Err(Error::Range(format!("timestep {t} above {max_t}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    Tensor::new(&[dim], out)
}

#[derive(Clone, Debug)]
struct DownLevel {
    res: Vec<ResBlock>,
    attn: Vec<Option<AttnBlock>>,
}

#[derive(Clone, Debug)]
struct UpLevel {
    upsample: Conv,
    res: Vec<ResBlock>,
    attn: Vec<Option<AttnBlock>>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    input: Conv,
    time1: Linear,
    time2: Linear,
    down: Vec<DownLevel>,
    mid_res1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid_res2: ResBlock,
    up: Vec<UpLevel>,
    out_norm: Norm,
    out_conv: Conv,
}

impl UNet {
    /// Instantiate weights: Kaiming-uniform convs, zero biases, unit norms and
    /// a zero output conv (so an untrained model predicts ε̂ = 0).
    pub fn build(cfg: &UNetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let groups = cfg.groupnorm_groups;
        let emb = cfg.time_embed_dim;
        let attn_at = |ps: &mut ParamStore, name: String, ch: usize, f: usize, rng: &mut Rng| {
            if cfg.attention_levels.contains(&f) {
                AttnBlock::new(ps, &name, ch, cfg.heads, groups, f, rng).map(Some)
            } else {
                Ok(None)
            }
        };

        let c0 = cfg.level_channels(0);
        let input = Conv::new(
            &mut ps,
            "input.conv",
            cfg.in_channels_source + cfg.in_channels_target,
            c0,
            3,
            rng,
            false,
        )?;
        let time1 = Linear::new(&mut ps, "time.lin1", cfg.base_channels, emb, rng)?;
        let time2 = Linear::new(&mut ps, "time.lin2", emb, emb, rng)?;

        let mut skip_channels = vec![c0];
        let mut ch = c0;
        let mut down = Vec::new();
        for l in 0..cfg.levels() {
            let cout = cfg.level_channels(l);
            let factor = 1 << l;
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for r in 0..cfg.res_blocks_per_level {
                res.push(ResBlock::new(
                    &mut ps,
                    &format!("down.{l}.res.{r}"),
                    ch,
                    cout,
                    emb,
                    groups,
                    rng,
                )?);
                ch = cout;
                attn.push(attn_at(&mut ps, format!("down.{l}.attn.{r}"), ch, factor, rng)?);
                skip_channels.push(ch);
            }
            if l + 1 < cfg.levels() {
                skip_channels.push(ch);
            }
            down.push(DownLevel { res, attn });
        }

        let bottom = cfg.bottom_factor();
        let mid_res1 = ResBlock::new(&mut ps, "mid.res.0", ch, ch, emb, groups, rng)?;
        let mid_attn = attn_at(&mut ps, "mid.attn".into(), ch, bottom, rng)?;
        let mid_res2 = ResBlock::new(&mut ps, "mid.res.1", ch, ch, emb, groups, rng)?;

        let mut up = Vec::new();
        for l in (0..cfg.levels()).rev() {
            let cout = cfg.level_channels(l);
            let factor = 1 << l;
            let upsample = Conv::new(&mut ps, &format!("up.{l}.upsample.conv"), ch, ch, 3, rng, false)?;
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for r in 0..=cfg.res_blocks_per_level {
                let skip = skip_channels.pop().expect("skip bookkeeping");
                res.push(ResBlock::new(
                    &mut ps,
                    &format!("up.{l}.res.{r}"),
                    ch + skip,
                    cout,
                    emb,
                    groups,
                    rng,
                )?);
                ch = cout;
                attn.push(attn_at(&mut ps, format!("up.{l}.attn.{r}"), ch, factor, rng)?);
            }
            up.push(UpLevel { upsample, res, attn });
        }
        debug_assert!(skip_channels.is_empty());

        let out_norm = Norm::new(&mut ps, "out.norm", ch, groups)?;
        let out_conv = Conv::new(&mut ps, "out.conv", ch, cfg.in_channels_target, 3, rng, true)?;

        Ok(Self {
            config: cfg.clone(),
            params: ps,
            input,
            time1,
            time2,
            down,
            mid_res1,
            mid_attn,
            mid_res2,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same architecture with a different set of weights (e.g. the EMA copy).
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        self.params.check_compatible(&params)?;
        let mut m = self.clone();
        m.params = params;
        Ok(m)
    }

    /// Downsample factor of every attention block, in forward order.
    pub fn attention_factors(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for lvl in &self.down {
            out.extend(lvl.attn.iter().flatten().map(|a| a.factor));
        }
        out.extend(self.mid_attn.iter().map(|a| a.factor));
        for lvl in &self.up {
            out.extend(lvl.attn.iter().flatten().map(|a| a.factor));
        }
        out
    }

    /// Register every weight array in `g`. With `trainable`, they require grad.
    pub fn bind<'m>(&'m self, g: &mut Graph, trainable: bool) -> Bound<'m> {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Bound { model: self, vars }
    }

    /// Convenience forward without gradients.
    pub fn predict(&self, x: &Tensor, yt: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let bound = self.bind(&mut g, false);
        let (xv, yv) = (g.constant(x.clone()), g.constant(yt.clone()));
        let out = bound.forward(&mut g, xv, yv, t)?;
        Ok(g.value(out).clone())
    }

    fn check_inputs(&self, xs: &[usize], ys: &[usize], t: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if xs.len() != 4 || ys.len() != 4 {
            return Err(Error::shape(xs, ys, "unet inputs must be [N, C, H, W]"));
        }
        if xs[0] != ys[0] || xs[2..] != ys[2..] {
            return Err(Error::shape(xs, ys, "source and target misaligned"));
        }
        if xs[1] != cfg.in_channels_source || ys[1] != cfg.in_channels_target {
            return Err(Error::shape(
                &[cfg.in_channels_source, cfg.in_channels_target],
                &[xs[1], ys[1]],
                "unet channel counts",
            ));
        }
        let div = cfg.required_divisor();
        if !xs[2].is_multiple_of(div) || !xs[3].is_multiple_of(div) {
            return Err(Error::Geometry(format!(
                "spatial extent {}x{} not divisible by {div}",
                xs[2], xs[3]
            )));
        }
        if t.len() != xs[0] {
            return Err(Error::Range(format!(
                "{} timesteps for a batch of {}",
                t.len(),
                xs[0]
            )));
        }
        Ok(())
    }
}

/// A model whose weights have been registered in a particular graph.
pub struct Bound<'m> {
    model: &'m UNet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every parameter after `g.backward`, in store order
    /// (zeros where nothing was propagated).
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.model.params.tensors())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, yt: Var, t: &[usize]) -> Result<Var> {
        let m = self.model;
        let cfg = &m.config;
        m.check_inputs(g.shape(x), g.shape(yt), t)?;
        let n = t.len();

        let mut temb = Vec::with_capacity(n * cfg.base_channels);
        for &ti in t {
            temb.extend(timestep_embedding(ti, cfg.base_channels, usize::MAX)?.into_data());
        }
        let temb = g.constant(Tensor::new(&[n, cfg.base_channels], temb)?);

        let mut cx = Ctx {
            g,
            vars: &self.vars,
        };
        let e = m.time1.forward(&mut cx, temb)?;
        let e = cx.g.silu(e);
        let e = m.time2.forward(&mut cx, e)?;
        let emb = cx.g.silu(e);

        let max_tok = cfg.max_attention_tokens;
        let inp = cx.g.concat(&[x, yt], 1)?;
        let mut h = m.input.forward(&mut cx, inp)?;
        let mut skips = vec![h];
        for (l, lvl) in m.down.iter().enumerate() {
            for (res, attn) in lvl.res.iter().zip(&lvl.attn) {
                h = res.forward(&mut cx, h, emb)?;
                if let Some(a) = attn {
                    h = a.forward(&mut cx, h, max_tok)?;
                }
                skips.push(h);
            }
            h = cx.g.resample(h, Resample::Down)?;
            if l + 1 < m.down.len() {
                skips.push(h);
            }
        }

        h = m.mid_res1.forward(&mut cx, h, emb)?;
        if let Some(a) = &m.mid_attn {
            h = a.forward(&mut cx, h, max_tok)?;
        }
        h = m.mid_res2.forward(&mut cx, h, emb)?;

        for lvl in &m.up {
            h = cx.g.resample(h, Resample::Up)?;
            h = lvl.upsample.forward(&mut cx, h)?;
            for (res, attn) in lvl.res.iter().zip(&lvl.attn) {
                let skip = skips.pop().expect("skip bookkeeping");
                let cat = cx.g.concat(&[h, skip], 1)?;
                h = res.forward(&mut cx, cat, emb)?;
                if let Some(a) = attn {
                    h = a.forward(&mut cx, h, max_tok)?;
                }
            }
        }

        let h = m.out_norm.forward(&mut cx, h)?;
        let h = cx.g.silu(h);
        m.out_conv.forward(&mut cx, h)
    }
}

impl NoisePredictor for Bound<'_> {
    fn predict_noise(&self, g: &mut Graph, x: Var, yt: Var, t: &[usize]) -> Result<Var> {
        self.forward(g, x, yt, t)
    }
}

/// Inference adaptor: binds the weights as constants on every call.
impl NoisePredictor for UNet {
    fn predict_noise(&self, g: &mut Graph, x: Var, yt: Var, t: &[usize]) -> Result<Var> {
        let bound = self.bind(g, false);
        bound.forward(g, x, yt, t)
    }
}
