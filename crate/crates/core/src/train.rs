//! Optimization, EMA, checkpoints, evaluation and the comparison protocols
//! (day/night matrix, attention-placement ablation, pretrain then finetune).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    self, batches, load_dataset, synth_generate_range, Batch, DatasetManifest, ImagePair, Split,
    SynthSceneSpec, Tag,
};
use crate::diffusion::{sample, training_loss, LossNorm, NoiseSchedule, ScheduleSpec, VarianceKind};
use crate::metrics::{evaluate_images, CellMetrics, FeatureExtractor, MetricsGrid, MetricsReport};
use crate::unet::{preset_with_width, ParamStore, UNet, UNetConfig, Variant, Width};
use crate::{parallel, Error, Graph, Result, Rng, Tensor};

// ---- configuration ---------------------------------------------------------

/// Where training or evaluation pairs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataRef {
    /// `root/{split}/{rgb,thermal}` layout.
    Dir {
        root: PathBuf,
        split: Split,
        #[serde(default)]
        tag: Option<Tag>,
    },
    /// A saved [`DatasetManifest`].
    Manifest {
        path: PathBuf,
        #[serde(default)]
        tag: Option<Tag>,
    },
    /// Scenes `offset..offset + count` of a synthetic generator.
    Synth {
        spec: SynthSceneSpec,
        count: usize,
        #[serde(default)]
        offset: usize,
    },
}

impl DataRef {
    pub fn load(&self, image_size: usize) -> Result<Vec<ImagePair>> {
        match self {
            DataRef::Dir { root, split, tag } => {
                let mut m = DatasetManifest::scan(root, *split)?;
                if let Some(t) = tag {
                    m = m.filter_tag(*t);
                }
                load_dataset(&m, Some(image_size))
            }
            DataRef::Manifest { path, tag } => {
                let mut m = DatasetManifest::load(path)?;
                if let Some(t) = tag {
                    m = m.filter_tag(*t);
                }
                load_dataset(&m, Some(image_size))
            }
            DataRef::Synth {
                spec,
                count,
                offset,
            } => {
                if spec.image_size != image_size {
                    return Err(Error::Config(format!(
                        "synthetic spec renders {} px but the run uses {image_size} px",
                        spec.image_size
                    )));
                }
                Ok(synth_generate_range(spec, *offset, *count)?.0)
            }
        }
    }
}

/// Concatenate several sources; ids must stay unique.
pub fn load_sources(refs: &[DataRef], image_size: usize) -> Result<Vec<ImagePair>> {
    let mut out = Vec::new();
    for r in refs {
        out.extend(r.load(image_size)?);
    }
    let mut ids: Vec<&str> = out.iter().map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Data(format!("id {} appears in more than one source", w[0])));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay per step, scaled by `lr`.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub train_data: Vec<DataRef>,
    pub image_size: usize,
    pub model: UNetConfig,
    pub schedule: ScheduleSpec,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_decay: f32,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub loss: LossNorm,
    /// Random horizontal flips.
    pub augment: bool,
    /// When finetuning, start from the base EMA weights rather than the raw ones.
    pub finetune_from_ema: bool,
}

impl TrainConfig {
    /// Defaults for one of the attention variants at the given width.
    pub fn preset(
        variant: Variant,
        width: Width,
        image_size: usize,
        train_data: Vec<DataRef>,
    ) -> Result<Self> {
        Ok(Self {
            train_data,
            image_size,
            model: preset_with_width(variant, image_size, width)?,
            schedule: ScheduleSpec::desk(),
            optimizer: AdamConfig::default(),
            batch_size: 8,
            steps: 3000,
            ema_decay: 0.999,
            seed: 0,
            checkpoint_every: 0,
            loss: LossNorm::L2,
            augment: true,
            finetune_from_ema: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        NoiseSchedule::new(&self.schedule)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if o.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        let div = self.model.required_divisor();
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return bad(format!("image_size {} not divisible by {div}", self.image_size));
        }
        if self.train_data.is_empty() {
            return bad("no training data sources".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---- optimizer and EMA -----------------------------------------------------

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(&[params.len()], &[grads.len()], "adam gradient count"));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.t as i32);
        let step = (c.lr as f64 * bc2.sqrt() / bc1) as f32;
        let eps = (c.eps as f64 * bc2.sqrt()) as f32;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(p.shape(), g.shape(), "adam gradient"));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps) + c.lr * c.weight_decay * *w;
            }
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 − decay)·w`, elementwise.
pub fn ema_update(ema: &mut ParamStore, weights: &ParamStore, decay: f32) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Range(format!("EMA decay {decay} outside [0, 1)")));
    }
    ema.check_compatible(weights)?;
    for (e, w) in ema.tensors_mut().iter_mut().zip(weights.tensors()) {
        for (a, &b) in e.data_mut().iter_mut().zip(w.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

// ---- checkpoints -----------------------------------------------------------

const MAGIC: &[u8; 8] = b"TDIFFCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub step: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// Hash of the checkpoint this run was finetuned from.
    #[serde(default)]
    pub base_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub weights: ParamStore,
    pub ema: ParamStore,
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_vec(r: &mut impl Read, len: u64, what: &str) -> Result<Vec<u8>> {
    if len > 1 << 34 {
        return Err(Error::Checkpoint(format!("implausible {what} length {len}")));
    }
    let mut b = vec![0u8; len as usize];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(b)
}

impl Checkpoint {
    pub fn model_config(&self) -> &UNetConfig {
        &self.manifest.config.model
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(&self.manifest.config.schedule)
    }

    /// Rebuild the network with either the EMA or raw weights.
    pub fn model(&self, use_ema: bool) -> Result<UNet> {
        let skeleton = UNet::build(self.model_config(), &mut Rng::new(0))?;
        skeleton.with_params(if use_ema { self.ema.clone() } else { self.weights.clone() })
    }

    /// Magic, version, manifest length and JSON, then `count` arrays each
    /// encoded as name, rank, dims and little-endian `f32` data.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(manifest.len() + 8 * self.weights.num_scalars() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let arrays: Vec<(String, &Tensor)> = self
            .weights
            .iter()
            .map(|(n, t)| (format!("raw/{n}"), t))
            .chain(self.ema.iter().map(|(n, t)| (format!("ema/{n}"), t)))
            .collect();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut r: impl Read) -> Result<Self> {
        let magic: [u8; 8] = read_exact(&mut r)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = read_u64(&mut r)?;
        let manifest: CheckpointManifest = serde_json::from_slice(&read_vec(&mut r, len, "manifest")?)?;
        let count = read_u32(&mut r)?;
        let (mut weights, mut ema) = (ParamStore::new(), ParamStore::new());
        for _ in 0..count {
            let name_len = read_u32(&mut r)?;
            let name = String::from_utf8(read_vec(&mut r, name_len as u64, "name")?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)?;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("array {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = read_vec(&mut r, 4 * numel as u64, "array data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data)?;
            match name.split_once('/') {
                Some(("raw", n)) => weights.add(n, t)?,
                Some(("ema", n)) => ema.add(n, t)?,
                _ => return Err(Error::Checkpoint(format!("unexpected array {name}"))),
            };
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        weights.check_compatible(&ema)?;
        let ck = Self {
            manifest,
            weights,
            ema,
        };
        UNet::build(ck.model_config(), &mut Rng::new(0))?
            .params()
            .check_compatible(&ck.weights)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(std::io::BufReader::new(fs::File::open(path)?))
    }
}

// ---- training --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    /// Wall-clock time since the run started.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Receives `loss.csv`, the frozen config and checkpoints when set.
    pub out_dir: Option<PathBuf>,
    /// Log progress every this many steps (0 disables).
    pub log_every: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEP: u64 = 2;
const STREAM_INIT: u64 = 3;

struct Sampler<'a> {
    pairs: &'a [ImagePair],
    batch_size: usize,
    shuffle: Rng,
    epoch: u64,
    pending: std::vec::IntoIter<Result<Batch>>,
}

impl<'a> Sampler<'a> {
    fn new(pairs: &'a [ImagePair], batch_size: usize, seed: u64) -> Self {
        Self {
            pairs,
            batch_size,
            shuffle: Rng::new(seed).split(STREAM_SHUFFLE),
            epoch: 0,
            pending: Vec::new().into_iter(),
        }
    }

    fn next_batch(&mut self) -> Result<Batch> {
        loop {
            if let Some(b) = self.pending.next() {
                return b;
            }
            let seed = self.shuffle.split(self.epoch).next_u64();
            self.epoch += 1;
            self.pending = batches(self.pairs, self.batch_size, Some(seed))?
                .collect::<Vec<_>>()
                .into_iter();
        }
    }
}

fn flip_batch(b: &Batch, rng: &mut Rng) -> Result<Batch> {
    let flips: Vec<bool> = (0..b.len()).map(|_| rng.bernoulli(0.5)).collect();
    let flip = |t: &Tensor| {
        let per = t.numel() / b.len();
        let w = *t.shape().last().unwrap();
        let mut out = t.clone();
        for (i, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            if flips[i] {
                chunk.chunks_mut(w).for_each(<[f32]>::reverse);
            }
        }
        out
    };
    Ok(Batch {
        x: flip(&b.x),
        y0: flip(&b.y0),
        tags: b.tags.clone(),
        ids: b.ids.clone(),
    })
}

/// Train from scratch on the configured sources.
pub fn train(cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pairs = load_sources(&cfg.train_data, cfg.image_size)?;
    train_on(cfg, &pairs, None, opts)
}

/// Continue from `base` on the sources in `cfg` with a fresh optimizer.
pub fn finetune(base: &Checkpoint, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pairs = load_sources(&cfg.train_data, cfg.image_size)?;
    finetune_on(base, cfg, &pairs, opts)
}

pub fn finetune_on(
    base: &Checkpoint,
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    let fresh = UNet::build(&cfg.model, &mut Rng::new(0))?;
    fresh.params().check_compatible(&base.weights)?;
    let init = if cfg.finetune_from_ema {
        base.ema.clone()
    } else {
        base.weights.clone()
    };
    let mut out = train_on(cfg, pairs, Some(init), opts)?;
    out.checkpoint.manifest.base_hash = Some(base.manifest.config_hash.clone());
    if let Some(dir) = &opts.out_dir {
        out.checkpoint.save(&dir.join("last.ckpt"))?;
    }
    Ok(out)
}

/// The core loop over already-loaded pairs, optionally starting from given weights.
pub fn train_on(
    cfg: &TrainConfig,
    pairs: &[ImagePair],
    init: Option<ParamStore>,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let schedule = NoiseSchedule::new(&cfg.schedule)?;
    let mut model = UNet::build(&cfg.model, &mut Rng::new(cfg.seed).split(STREAM_INIT))?;
    if let Some(p) = init {
        model = model.with_params(p)?;
    }
    let mut ema = model.params().clone();
    let mut adam = Adam::new(cfg.optimizer, model.params());
    let hash = cfg.hash();

    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            cfg.save(&dir.join("config.json"))?;
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(dir.join("loss.csv"))?;
            w.write_record(["step", "loss", "lr", "seconds"])?;
            Some(w)
        }
        None => None,
    };

    let started = Instant::now();
    let mut sampler = Sampler::new(pairs, cfg.batch_size, cfg.seed);
    let step_root = Rng::new(cfg.seed).split(STREAM_STEP);
    let mut log = Vec::with_capacity(cfg.steps);
    let t_max = schedule.timesteps();

    let snapshot = |step: usize, model: &UNet, ema: &ParamStore, log: &[LossRecord]| {
        let mut metrics = BTreeMap::new();
        if let Some(last) = log.last() {
            metrics.insert("final_loss".to_string(), last.loss as f64);
            let tail = &log[log.len().saturating_sub(100)..];
            let mean = tail.iter().map(|r| r.loss as f64).sum::<f64>() / tail.len() as f64;
            metrics.insert("mean_loss_last_100".to_string(), mean);
        }
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_VERSION,
                config_hash: hash.clone(),
                config: cfg.clone(),
                step,
                metrics,
                base_hash: None,
            },
            weights: model.params().clone(),
            ema: ema.clone(),
        }
    };

    for step in 1..=cfg.steps {
        let mut rng = step_root.split(step as u64);
        let mut batch = sampler.next_batch()?;
        if cfg.augment {
            batch = flip_batch(&batch, &mut rng)?;
        }
        let n = batch.len();
        let t: Vec<usize> = (0..n).map(|_| rng.int_inclusive(1, t_max)).collect();
        let eps = Tensor::randn(batch.y0.shape(), &mut rng);

        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let loss = training_loss(&mut g, &bound, &batch.x, &batch.y0, &t, &eps, &schedule, cfg.loss)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss: loss_value,
                ids: batch.ids,
            });
        }
        g.backward(loss)?;
        let grads = bound.grads(&g);
        drop(g);
        adam.step(model.params_mut(), &grads)?;
        ema_update(&mut ema, model.params(), cfg.ema_decay)?;

        let rec = LossRecord {
            step,
            loss: loss_value,
            lr: cfg.optimizer.lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = csv.as_mut() {
            w.serialize(&rec)?;
        }
        if opts.log_every > 0 && step % opts.log_every == 0 {
            log::info!("step {step}/{} loss {loss_value:.5} ({:.1}s)", cfg.steps, rec.seconds);
        }
        log.push(rec);
        if let (Some(dir), true) = (
            &opts.out_dir,
            cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps,
        ) {
            snapshot(step, &model, &ema, &log).save(&dir.join(format!("step_{step:06}.ckpt")))?;
        }
    }
    if let Some(w) = csv.as_mut() {
        w.flush()?;
    }
    let checkpoint = snapshot(cfg.steps, &model, &ema, &log);
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

// ---- evaluation ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Evaluate only the first `n` pairs (by id order) when set.
    pub n_samples: Option<usize>,
    pub seed: u64,
    pub use_ema: bool,
    pub variance: VarianceKind,
    /// Refuse checkpoints whose schedule differs from this.
    pub expect_schedule: Option<ScheduleSpec>,
    /// Refuse checkpoints whose network differs from this.
    pub expect_model: Option<UNetConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_samples: None,
            seed: 0,
            use_ema: true,
            variance: VarianceKind::Posterior,
            expect_schedule: None,
            expect_model: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub ids: Vec<String>,
    pub generated: Vec<Tensor>,
}

/// Sample `ŷ₀` for every pair and score it against the ground truth. Pair
/// `i` uses the `i`-th child stream of `seed`, so results do not depend on
/// how images are scheduled across threads.
pub fn evaluate(
    ckpt: &Checkpoint,
    pairs: &[ImagePair],
    extractor: &dyn FeatureExtractor,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    if let Some(s) = &opts.expect_schedule {
        if s != &ckpt.manifest.config.schedule {
            return Err(Error::Architecture(format!(
                "checkpoint schedule {:?} differs from requested {s:?}",
                ckpt.manifest.config.schedule
            )));
        }
    }
    if let Some(m) = &opts.expect_model {
        UNet::build(m, &mut Rng::new(0))?
            .params()
            .check_compatible(&ckpt.weights)?;
    }
    let model = ckpt.model(opts.use_ema)?;
    let schedule = ckpt.schedule()?;
    evaluate_model(&model, &schedule, pairs, extractor, opts)
}

pub fn evaluate_model(
    model: &UNet,
    schedule: &NoiseSchedule,
    pairs: &[ImagePair],
    extractor: &dyn FeatureExtractor,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    let mut sorted: Vec<&ImagePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(n) = opts.n_samples {
        sorted.truncate(n);
    }
    if sorted.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let root = Rng::new(opts.seed);
    let ct = model.config().in_channels_target;
    let generated = parallel::map_range(sorted.len(), |i| -> Result<Tensor> {
        let p = sorted[i];
        let x = p.source.clone().reshape(&[1, 3, p.height(), p.width()])?;
        let y = sample(model, &x, ct, schedule, opts.variance, &root.split(i as u64))?;
        y.reshape(&[ct, p.height(), p.width()])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = sorted.iter().map(|p| p.id.clone()).collect();
    let reference: Vec<Tensor> = sorted.iter().map(|p| p.target.clone()).collect();
    let report = evaluate_images(&ids, &generated, &reference, extractor)?;
    Ok(EvalOutcome {
        report,
        ids,
        generated,
    })
}

/// Score the grayscale of each source as if it were the generated thermal image.
pub fn grayscale_baseline(pairs: &[ImagePair], extractor: &dyn FeatureExtractor) -> Result<MetricsReport> {
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let gray = pairs
        .iter()
        .map(|p| data::grayscale(&p.source))
        .collect::<Result<Vec<_>>>()?;
    let reference: Vec<Tensor> = pairs.iter().map(|p| p.target.clone()).collect();
    evaluate_images(&ids, &gray, &reference, extractor)
}

// ---- protocols -------------------------------------------------------------

/// A named evaluation set.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub name: String,
    pub pairs: Vec<ImagePair>,
}

#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub grid: MetricsGrid,
    /// `(train label, test label) → report`
    pub reports: BTreeMap<(String, String), MetricsReport>,
    pub checkpoints: BTreeMap<String, Checkpoint>,
}

fn require_same_network(a: &TrainConfig, b: &TrainConfig, what: &str) -> Result<()> {
    if a.model != b.model || a.schedule != b.schedule || a.image_size != b.image_size {
        return Err(Error::Config(format!(
            "{what}: configurations must share network, schedule and image size"
        )));
    }
    Ok(())
}

/// Train one model per named configuration and score every model on every
/// evaluation set. Rows of the grid are evaluation sets, columns the training
/// configurations.
pub fn ablation_matrix(
    train_cfgs: &[(String, TrainConfig)],
    eval_sets: &[EvalSet],
    extractor: &dyn FeatureExtractor,
    eval: &EvalOptions,
    opts: &RunOptions,
) -> Result<MatrixOutcome> {
    let Some((_, first)) = train_cfgs.first() else {
        return Err(Error::Config("no training configurations".into()));
    };
    for (name, c) in train_cfgs {
        require_same_network(first, c, name)?;
    }
    let mut reports = BTreeMap::new();
    let mut checkpoints = BTreeMap::new();
    let mut cells = vec![Vec::new(); eval_sets.len()];
    for (name, c) in train_cfgs {
        let run = RunOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("train_{name}"))),
            log_every: opts.log_every,
        };
        log::info!("training {name}");
        let ck = train(c, &run)?.checkpoint;
        for (row, set) in eval_sets.iter().enumerate() {
            let r = evaluate(&ck, &set.pairs, extractor, eval)?.report;
            cells[row].push(r.summary());
            reports.insert((name.clone(), set.name.clone()), r);
        }
        checkpoints.insert(name.clone(), ck);
    }
    let grid = MetricsGrid {
        title: "Training data (columns) evaluated on test data (rows)".into(),
        row_header: "test".into(),
        col_header: "train".into(),
        rows: eval_sets.iter().map(|s| s.name.clone()).collect(),
        cols: train_cfgs.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        extractor: extractor.name(),
    };
    if let Some(dir) = &opts.out_dir {
        fs::write(dir.join("matrix.json"), serde_json::to_string_pretty(&grid)?)?;
        fs::write(dir.join("matrix.txt"), grid.to_text())?;
    }
    Ok(MatrixOutcome {
        grid,
        reports,
        checkpoints,
    })
}

/// Paths (dotted) of every leaf where two JSON values differ.
fn json_diff(a: &serde_json::Value, b: &serde_json::Value, path: &str, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => json_diff(u, v, &p, out),
                    _ => out.push(p),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

/// Field paths in which two configurations differ.
pub fn config_differences(a: &TrainConfig, b: &TrainConfig) -> Result<Vec<String>> {
    let mut out = Vec::new();
    json_diff(&serde_json::to_value(a)?, &serde_json::to_value(b)?, "", &mut out);
    Ok(out)
}

/// Error unless `a` and `b` differ in `model.attention_levels` and nowhere else.
pub fn check_attention_only_difference(a: &TrainConfig, b: &TrainConfig) -> Result<()> {
    let diff = config_differences(a, b)?;
    let allowed = "model.attention_levels";
    let others: Vec<&String> = diff.iter().filter(|d| d.as_str() != allowed).collect();
    if !others.is_empty() {
        return Err(Error::Config(format!(
            "attention ablation configs may differ only in {allowed}; also differ in {others:?}"
        )));
    }
    if diff.is_empty() {
        return Err(Error::Config("attention ablation configs are identical".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionArm {
    pub label: String,
    pub attention_levels: Vec<usize>,
    /// Downsample factor of every attention block found in the built network.
    pub attention_blocks: Vec<usize>,
    pub parameters: usize,
    /// Mean training loss over the last 100 steps.
    pub final_loss: f64,
    pub metrics: CellMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub arms: Vec<AttentionArm>,
    pub extractor: String,
}

impl AttentionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Attention placement ablation");
        let _ = writeln!(
            s,
            "{:<10} {:<18} {:>10} {:>11} {:>9} {:>8} {:>10}",
            "model", "attention at", "params", "final loss", "PSNR", "SSIM", "FID"
        );
        for a in &self.arms {
            let levels = a
                .attention_levels
                .iter()
                .map(|l| format!("h/{l}"))
                .collect::<Vec<_>>()
                .join(",");
            let fid = a.metrics.fid.map_or("n/a".into(), |f| format!("{f:.3}"));
            let _ = writeln!(
                s,
                "{:<10} {:<18} {:>10} {:>11.5} {:>9.3} {:>8.4} {:>10}",
                a.label, levels, a.parameters, a.final_loss, a.metrics.psnr, a.metrics.ssim, fid
            );
        }
        let _ = writeln!(s, "FID extractor: {} (values comparable only within this extractor)", self.extractor);
        s
    }

    pub fn arm(&self, label: &str) -> Option<&AttentionArm> {
        self.arms.iter().find(|a| a.label == label)
    }
}

/// Train and evaluate two configurations that differ only in where attention sits.
pub fn ablate_attention(
    arms: [(&str, &TrainConfig); 2],
    eval_set: &[ImagePair],
    extractor: &dyn FeatureExtractor,
    eval: &EvalOptions,
    opts: &RunOptions,
) -> Result<AttentionReport> {
    check_attention_only_difference(arms[0].1, arms[1].1)?;
    let mut out = Vec::new();
    for (label, cfg) in arms {
        let run = RunOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("model_{label}"))),
            log_every: opts.log_every,
        };
        let trained = train(cfg, &run)?;
        let model = trained.checkpoint.model(eval.use_ema)?;
        let blocks = model.attention_factors();
        let wanted: std::collections::BTreeSet<usize> = blocks.iter().copied().collect();
        let reachable: std::collections::BTreeSet<usize> = cfg
            .model
            .attention_levels
            .iter()
            .copied()
            .filter(|f| *f <= cfg.model.bottom_factor())
            .collect();
        if wanted != reachable {
            return Err(Error::Architecture(format!(
                "model {label}: attention blocks at {wanted:?}, configured {reachable:?}"
            )));
        }
        let report = evaluate(&trained.checkpoint, eval_set, extractor, eval)?.report;
        out.push(AttentionArm {
            label: label.to_string(),
            attention_levels: cfg.model.attention_levels.iter().copied().collect(),
            attention_blocks: blocks,
            parameters: model.num_parameters(),
            final_loss: trained
                .checkpoint
                .manifest
                .metrics
                .get("mean_loss_last_100")
                .copied()
                .unwrap_or(f64::NAN),
            metrics: report.summary(),
        });
    }
    let report = AttentionReport {
        arms: out,
        extractor: extractor.name(),
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("attention.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(dir.join("attention.txt"), report.to_text())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        let spec = SynthSceneSpec {
            image_size: 16,
            pedestrian_radius: data::Span::new(0.1, 0.2),
            vehicle_height: data::Span::new(0.1, 0.2),
            ..Default::default()
        };
        let mut c = TrainConfig::preset(
            Variant::II,
            Width::Tiny,
            16,
            vec![DataRef::Synth {
                spec,
                count: 4,
                offset: 0,
            }],
        )
        .unwrap();
        c.steps = 2;
        c.batch_size = 2;
        c
    }

    #[test]
    fn hash_tracks_content() {
        let a = tiny_cfg();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn validation() {
        let mut c = tiny_cfg();
        c.ema_decay = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.image_size = 24;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.train_data.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_diff_paths() {
        let a = tiny_cfg();
        let mut b = a.clone();
        b.model.heads = 4;
        b.model.attention_levels.insert(1);
        let d = config_differences(&a, &b).unwrap();
        assert_eq!(d, ["model.attention_levels", "model.heads"]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &ps);
        opt.step(&mut ps, &[Tensor::new(&[2], vec![3.0, -0.5]).unwrap()]).unwrap();
        let w = ps.get(crate::unet::ParamId(0)).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = Checkpoint::from_bytes(&b"NOTACKPT0000"[..]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
