//! Diffusion mathematics: noise schedules, closed-form forward corruption,
//! the Gaussian posterior of the forward process, and the conditional
//! ancestral sampler.
//!
//! Conventions: timesteps are 1-based (`1..=T`), `alpha(t)` is the per-step
//! retention factor and `gamma(t) = alpha(1) * .. * alpha(t)` with
//! `gamma(0) = 1`. All schedule arithmetic is done in `f64`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Serializable description of a schedule; enough to rebuild it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    /// Linear betas in `[1e-4, 0.02]` over 1000 steps.
    pub fn reference() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    /// Cosine profile over 100 steps; the default for small runs.
    pub fn desk() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::desk()
    }
}

/// Reverse-step variance choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    /// Posterior variance `(1-γ_{t-1})(1-α_t)/(1-γ_t)`.
    #[default]
    Posterior,
    /// `1 - α_t`.
    Beta,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossNorm {
    L1,
    #[default]
    L2,
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    /// `alphas[t-1] = α_t`.
    alphas: Vec<f64>,
    /// `gammas[t] = γ_t`, `gammas[0] = 1`.
    gammas: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    pub fn new(spec: &ScheduleSpec) -> Result<Self> {
        let t_max = spec.timesteps;
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        let (b0, b1) = (spec.beta_start, spec.beta_end);
        if !(b0 > 0.0 && b0 <= b1 && b1 < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{b0}, {b1}]"
            )));
        }
        let alphas: Vec<f64> = match spec.kind {
            ScheduleKind::Linear => (0..t_max)
                .map(|i| {
                    let frac = if t_max == 1 {
                        0.0
                    } else {
                        i as f64 / (t_max - 1) as f64
                    };
                    1.0 - (b0 + (b1 - b0) * frac)
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=t_max)
                    .map(|t| (f(t) / f(t - 1)).clamp(0.001, 0.9999))
                    .collect()
            }
        };
        let mut gammas = Vec::with_capacity(t_max + 1);
        gammas.push(1.0);
        for a in &alphas {
            let prev = *gammas.last().unwrap();
            gammas.push(prev * a);
        }
        if gammas[t_max].partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("schedule underflows: gamma_T == 0".into()));
        }
        Ok(Self {
            spec: spec.clone(),
            alphas,
            gammas,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.alphas.len()
    }

    /// α_t for `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// γ_t for `0 <= t <= T`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gammas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `[γ_0, γ_1, .., γ_T]`.
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Range(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// Posterior coefficients `(c_y0, c_yt, σ²)` of `q(y_{t-1} | y_t, y_0)`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t)?;
        let (a, g, gp) = (self.alpha(t), self.gamma(t), self.gamma(t - 1));
        if g >= 1.0 {
            return Err(Error::Range(format!("gamma_{t} = 1; posterior undefined")));
        }
        let denom = 1.0 - g;
        Ok((
            gp.sqrt() * (1.0 - a) / denom,
            a.sqrt() * (1.0 - gp) / denom,
            (1.0 - gp) * (1.0 - a) / denom,
        ))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape(), what));
    }
    Ok(())
}

/// `√γ·y0 + √(1-γ)·ε` for an explicit γ.
pub fn corrupt(y0: &Tensor, eps: &Tensor, gamma: f64) -> Result<Tensor> {
    same_shape(y0, eps, "corrupt")?;
    let (a, b) = (gamma.sqrt(), (1.0 - gamma).max(0.0).sqrt());
    y0.zip_map(eps, |y, e| (a * y as f64 + b * e as f64) as f32)
}

/// Closed-form sample of `q(y_t | y_0)`.
pub fn q_sample(y0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    corrupt(y0, eps, s.gamma(t))
}

/// One forward step `q(y_t | y_{t-1})`: `√α_t·y_prev + √(1-α_t)·ε`.
pub fn q_step(y_prev: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    same_shape(y_prev, eps, "q_step")?;
    let a = s.alpha(t);
    let (ca, cb) = (a.sqrt(), (1.0 - a).sqrt());
    y_prev.zip_map(eps, |y, e| (ca * y as f64 + cb * e as f64) as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Tensor,
    pub sigma_sq: f64,
}

/// Mean and variance of the Gaussian `q(y_{t-1} | y_t, y_0)`.
pub fn posterior_params(
    y0: &Tensor,
    yt: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<PosteriorParams> {
    same_shape(y0, yt, "posterior_params")?;
    let (c0, ct, var) = s.posterior_coefficients(t)?;
    Ok(PosteriorParams {
        mu: y0.zip_map(yt, |a, b| (c0 * a as f64 + ct * b as f64) as f32)?,
        sigma_sq: var,
    })
}

const MIN_GAMMA: f64 = 1e-12;

/// Invert the closed-form corruption: `(y_t - √(1-γ_t)·ε̂) / √γ_t`.
pub fn predict_y0(yt: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    same_shape(yt, eps_hat, "predict_y0")?;
    let g = s.gamma(t);
    if g < MIN_GAMMA {
        return Err(Error::Numeric(format!(
            "gamma_{t} = {g:e} is below {MIN_GAMMA:e}; schedule too aggressive for T = {}",
            s.timesteps()
        )));
    }
    let (sg, sn) = (g.sqrt(), (1.0 - g).sqrt());
    yt.zip_map(eps_hat, |y, e| ((y as f64 - sn * e as f64) / sg) as f32)
}

/// A network that estimates the noise in `y_t` given the source `x`.
pub trait NoisePredictor {
    /// `x: [N, Cs, H, W]`, `yt: [N, Ct, H, W]`, one timestep per sample.
    fn predict_noise(&self, g: &mut Graph, x: Var, yt: Var, t: &[usize]) -> Result<Var>;
}

/// Mean over elements of `|ε - ε̂|^p` for a batch, recorded in `g`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    g: &mut Graph,
    model: &dyn NoisePredictor,
    x: &Tensor,
    y0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    s: &NoiseSchedule,
    norm: LossNorm,
) -> Result<Var> {
    let (xs, ys) = (x.shape(), y0.shape());
    if xs.len() != 4 || ys.len() != 4 || xs[0] != ys[0] || xs[2..] != ys[2..] {
        return Err(Error::shape(xs, ys, "training_loss source/target"));
    }
    same_shape(y0, eps, "training_loss noise")?;
    let n = ys[0];
    if t.len() != n {
        return Err(Error::Range(format!("{} timesteps for a batch of {n}", t.len())));
    }
    let per = y0.numel() / n.max(1);
    let mut yt = Vec::with_capacity(y0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let y = Tensor::new(&ys[1..], y0.data()[i * per..(i + 1) * per].to_vec())?;
        let e = Tensor::new(&ys[1..], eps.data()[i * per..(i + 1) * per].to_vec())?;
        yt.extend(q_sample(&y, ti, &e, s)?.into_data());
    }
    let xv = g.constant(x.clone());
    let ytv = g.constant(Tensor::new(ys, yt)?);
    let ev = g.constant(eps.clone());
    let eps_hat = model.predict_noise(g, xv, ytv, t)?;
    let diff = g.sub(ev, eps_hat)?;
    let err = match norm {
        LossNorm::L1 => g.abs(diff),
        LossNorm::L2 => g.square(diff),
    };
    Ok(g.mean(err))
}

/// One reverse step `y_t → y_{t-1}` for a batch sharing timestep `t`.
pub fn p_sample_step(
    model: &dyn NoisePredictor,
    x: &Tensor,
    yt: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    variance: VarianceKind,
    rng: &mut Rng,
) -> Result<Tensor> {
    s.check_t(t)?;
    let n = *yt.shape().first().unwrap_or(&1);
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let ytv = g.constant(yt.clone());
    let ts = vec![t; n];
    let eps_hat = model.predict_noise(&mut g, xv, ytv, &ts)?;
    let y0_hat = predict_y0(yt, g.value(eps_hat), t, s)?.map(|v| v.clamp(-1.0, 1.0));
    let post = posterior_params(&y0_hat, yt, t, s)?;
    if t == 1 {
        return Ok(post.mu);
    }
    let var = match variance {
        VarianceKind::Posterior => post.sigma_sq,
        VarianceKind::Beta => 1.0 - s.alpha(t),
    };
    let sigma = var.sqrt();
    let mut out = post.mu;
    for v in out.data_mut() {
        *v = (*v as f64 + sigma * rng.normal() as f64) as f32;
    }
    Ok(out)
}

/// Full reverse chain from `y_T ~ N(0, I)` down to `ŷ_0`, conditioned on `x`.
///
/// The initial noise and every per-step draw come from independent child
/// streams of `rng`, so the result is a pure function of (weights, x, rng key).
pub fn sample(
    model: &dyn NoisePredictor,
    x: &Tensor,
    target_channels: usize,
    s: &NoiseSchedule,
    variance: VarianceKind,
    rng: &Rng,
) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Geometry(format!("source must be [N, C, H, W], got {xs:?}")));
    }
    let shape = [xs[0], target_channels, xs[2], xs[3]];
    let mut y = Tensor::randn(&shape, &mut rng.split(0));
    for t in (1..=s.timesteps()).rev() {
        y = p_sample_step(model, x, &y, t, s, variance, &mut rng.split(t as u64))?;
    }
    Ok(y.map(|v| v.clamp(-1.0, 1.0)))
}
