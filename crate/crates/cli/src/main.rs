use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use thermodiff::data::{
    comparison_strip, gray_image, save_rgb, synth_generate_range, write_dataset, ImagePair,
    Split, SynthMode, SynthSceneSpec, Tag,
};
use thermodiff::diffusion::VarianceKind;
use thermodiff::metrics::{FeatureExtractor, FeatureFile, RandomProjection};
use thermodiff::train::{
    ablate_attention, ablation_matrix, evaluate, finetune, load_sources, train, Checkpoint,
    DataRef, EvalOptions, EvalSet, RunOptions, TrainConfig,
};
use thermodiff::unet::{Variant, Width};

const OUT_ROOT_ENV: &str = "THERMODIFF_OUT_ROOT";
const GRID_ROWS: usize = 16;

#[derive(Parser)]
#[command(name = "thermodiff", version, about = "Conditional diffusion for RGB to thermal translation")]
struct Cli {
    /// Output directory (defaults to $THERMODIFF_OUT_ROOT/<command>, or runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Disable data-parallel kernels.
    #[arg(long, global = true)]
    sequential: bool,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic paired dataset with train and test splits.
    SynthData(SynthArgs),
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint on new data.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate thermal images for a dataset and write comparison grids.
    Sample(EvalArgs),
    /// Generate and score against ground truth.
    Evaluate(EvalArgs),
    /// Train on day, night and both; score each on day and night test sets.
    AblateDaynight(AblationArgs),
    /// Train the two attention placements and compare them.
    AblateAttention(AblationArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TagArg {
    Day,
    Night,
    All,
}

impl TagArg {
    fn tag(self) -> Option<Tag> {
        match self {
            TagArg::Day => Some(Tag::Day),
            TagArg::Night => Some(Tag::Night),
            TagArg::All => None,
        }
    }

    fn modes(self) -> Vec<SynthMode> {
        match self {
            TagArg::Day => vec![SynthMode::Day],
            TagArg::Night => vec![SynthMode::Night],
            TagArg::All => vec![SynthMode::Day, SynthMode::Night],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WidthArg {
    Desk,
    Tiny,
}

impl From<WidthArg> for Width {
    fn from(w: WidthArg) -> Self {
        match w {
            WidthArg::Desk => Width::Desk,
            WidthArg::Tiny => Width::Tiny,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Scene generator parameters as JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Training scenes per period.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Test scenes per period (defaults to a quarter of --n).
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, value_enum, default_value = "all")]
    tag: TagArg,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Training configuration JSON; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory, split directory or manifest JSON. Synthetic scenes when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    tag: Option<TagArg>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, value_enum)]
    width: Option<WidthArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Synthetic training scenes per period when --data is absent.
    #[arg(long, default_value_t = 500)]
    n: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory, split directory or manifest JSON.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    tag: TagArg,
    /// Evaluate only the first n pairs (by id).
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Args, Clone)]
struct ScoringArgs {
    /// Use raw weights instead of the EMA copy.
    #[arg(long)]
    raw: bool,
    #[arg(long, value_enum, default_value = "posterior")]
    variance: VarianceArg,
    /// Precomputed feature CSV (id,v1,...) for FID instead of the random-projection extractor.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Dimension of the random-projection features.
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceArg {
    Posterior,
    Beta,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Test scenes per period when --data is absent.
    #[arg(long, default_value_t = 24)]
    n_test: usize,
    /// Evaluate only the first n test pairs per set.
    #[arg(long)]
    n_eval: Option<usize>,
    #[command(flatten)]
    scoring: ScoringArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<thermodiff::Error>() {
        Some(thermodiff::Error::NonFiniteLoss { .. } | thermodiff::Error::Numeric(_)) => 3,
        Some(
            thermodiff::Error::Checkpoint(_)
            | thermodiff::Error::Io(_)
            | thermodiff::Error::Json(_)
            | thermodiff::Error::Geometry(_),
        ) => 2,
        Some(err) if err.is_data_error() => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    thermodiff::parallel::set_enabled(!cli.sequential);
    let name = match &cli.command {
        Command::SynthData(_) => "synth-data",
        Command::Train(_) => "train",
        Command::Finetune { .. } => "finetune",
        Command::Sample(_) => "sample",
        Command::Evaluate(_) => "evaluate",
        Command::AblateDaynight(_) => "ablate-daynight",
        Command::AblateAttention(_) => "ablate-attention",
    };
    let out = cli.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(name)
    });
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        log_every: if cli.verbose { 50 } else { 0 },
    };
    match cli.command {
        Command::SynthData(a) => synth_data(&a, cli.seed, &out),
        Command::Train(a) => {
            let cfg = resolve_train(&a, cli.seed, None)?;
            let done = train(&cfg, &opts)?;
            report_training(&done.checkpoint, &out);
            Ok(())
        }
        Command::Finetune { ckpt, train } => {
            let base = Checkpoint::load(&ckpt)?;
            let cfg = resolve_train(&train, cli.seed, Some(&base.manifest.config))?;
            write_json(
                &out.join("command.json"),
                &json!({ "command": name, "base_checkpoint": ckpt, "config": cfg }),
            )?;
            let done = finetune(&base, &cfg, &opts)?;
            report_training(&done.checkpoint, &out);
            Ok(())
        }
        Command::Sample(a) => eval_command(&a, cli.seed, &out, false),
        Command::Evaluate(a) => eval_command(&a, cli.seed, &out, true),
        Command::AblateDaynight(a) => ablate_daynight(&a, cli.seed, &out, &opts),
        Command::AblateAttention(a) => attention_command(&a, cli.seed, &out, &opts),
    }
}

fn report_training(ck: &Checkpoint, out: &Path) {
    let loss = ck.manifest.metrics.get("final_loss").copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {loss:.5}; checkpoint {}",
        ck.manifest.step,
        out.join("last.ckpt").display()
    );
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn synth_data(a: &SynthArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<SynthSceneSpec>(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .map_err(thermodiff::Error::from)?,
        None => SynthSceneSpec::default(),
    };
    if let Some(s) = a.image_size {
        spec.image_size = s;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    if a.n == 0 {
        bail!(thermodiff::Error::Config("--n must be at least 1".into()));
    }
    let n_test = a.n_test.unwrap_or((a.n / 4).max(1));
    let mut specs = Vec::new();
    for (split, start, count) in [(Split::Train, 0, a.n), (Split::Test, a.n, n_test)] {
        let mut pairs = Vec::new();
        for mode in a.tag.modes() {
            let s = SynthSceneSpec { mode, ..spec.clone() };
            pairs.extend(synth_generate_range(&s, start, count)?.0);
            if split == Split::Train {
                specs.push(s);
            }
        }
        let manifest = write_dataset(out, split, &pairs)?;
        manifest.save(&out.join(split.as_str()).join("manifest.json"))?;
    }
    write_json(
        &out.join("oracle.json"),
        &json!({
            "generator": "synthetic scenes; thermal is a per-pixel function of RGB",
            "specs": specs,
            "train": { "first_index": 0, "count": a.n },
            "test": { "first_index": a.n, "count": n_test },
        }),
    )?;
    println!(
        "wrote {} train and {} test pairs to {}",
        a.n * specs.len(),
        n_test * specs.len(),
        out.display()
    );
    Ok(())
}

/// Interpret `--data`: a manifest JSON, a split directory containing `rgb/`,
/// or a dataset root holding `split/`.
fn data_ref(path: &Path, split: Split, tag: Option<Tag>) -> Result<DataRef> {
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(DataRef::Manifest {
            path: path.to_path_buf(),
            tag,
        });
    }
    if path.join("rgb").is_dir() {
        let split_name = path
            .file_name()
            .and_then(|s| s.to_str())
            .context("split directory has no name")?;
        let split: Split = split_name
            .parse()
            .map_err(|_| thermodiff::Error::Data(format!("{split_name} is not a split name")))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        return Ok(DataRef::Dir { root, split, tag });
    }
    if !path.is_dir() {
        return Err(thermodiff::Error::MissingFile(path.to_path_buf()).into());
    }
    Ok(DataRef::Dir {
        root: path.to_path_buf(),
        split,
        tag,
    })
}

fn synth_refs(image_size: usize, seed: u64, modes: &[SynthMode], offset: usize, count: usize) -> Vec<DataRef> {
    modes
        .iter()
        .map(|&mode| DataRef::Synth {
            spec: SynthSceneSpec {
                image_size,
                mode,
                seed,
                ..Default::default()
            },
            count,
            offset,
        })
        .collect()
}

/// Flags over config file over `base` over presets.
fn resolve_train(a: &TrainArgs, seed: Option<u64>, base: Option<&TrainConfig>) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, base) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(b)) => b.clone(),
        (None, None) => TrainConfig::preset(
            a.variant.unwrap_or(Variant::II),
            a.width.map(Width::from).unwrap_or(Width::Desk),
            a.image_size.unwrap_or(64),
            Vec::new(),
        )?,
    };
    if let Some(size) = a.image_size {
        cfg.image_size = size;
    }
    if let Some(v) = a.variant {
        cfg.model.attention_levels = v.attention_levels();
    }
    if let Some(w) = a.width {
        let attention = cfg.model.attention_levels.clone();
        cfg.model = thermodiff::unet::preset_with_width(Variant::II, cfg.image_size, w.into())?;
        cfg.model.attention_levels = attention;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let tag = a.tag.unwrap_or(TagArg::Day);
    if let Some(d) = &a.data {
        cfg.train_data = vec![data_ref(d, Split::Train, tag.tag())?];
    } else if cfg.train_data.is_empty() || a.tag.is_some() {
        cfg.train_data = synth_refs(cfg.image_size, cfg.seed, &tag.modes(), 0, a.n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn extractor(s: &ScoringArgs, seed: u64) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match &s.features {
        Some(p) => Box::new(FeatureFile::load(p)?),
        None => Box::new(RandomProjection {
            seed,
            dim: s.feature_dim,
            ..Default::default()
        }),
    })
}

fn eval_options(s: &ScoringArgs, seed: u64, n: Option<usize>) -> EvalOptions {
    EvalOptions {
        n_samples: n,
        seed,
        use_ema: !s.raw,
        variance: match s.variance {
            VarianceArg::Posterior => VarianceKind::Posterior,
            VarianceArg::Beta => VarianceKind::Beta,
        },
        ..Default::default()
    }
}

/// Rows of source | ground truth | generated, stacked vertically.
fn write_grid(path: &Path, pairs: &[&ImagePair], generated: &[thermodiff::Tensor]) -> Result<()> {
    let rows = pairs
        .iter()
        .zip(generated)
        .take(GRID_ROWS)
        .map(|(p, g)| comparison_strip(&p.source, &[&p.target, g]))
        .collect::<thermodiff::Result<Vec<_>>>()?;
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let (w, h) = first.dimensions();
    let mut grid = image::RgbImage::new(w, h * rows.len() as u32);
    for (i, r) in rows.iter().enumerate() {
        image::imageops::replace(&mut grid, r, 0, (h * i as u32) as i64);
    }
    save_rgb(&grid, path)?;
    Ok(())
}

fn eval_command(a: &EvalArgs, seed: Option<u64>, out: &Path, score: bool) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let seed = seed.unwrap_or(0);
    let data = data_ref(&a.data, Split::Test, a.tag.tag())?;
    let opts = eval_options(&a.scoring, seed, a.n);
    write_json(
        &out.join("command.json"),
        &json!({
            "command": if score { "evaluate" } else { "sample" },
            "checkpoint": a.ckpt,
            "checkpoint_config_hash": ck.manifest.config_hash,
            "data": data,
            "n": a.n,
            "seed": seed,
            "use_ema": opts.use_ema,
            "variance": opts.variance,
            "features": a.scoring.features,
            "feature_dim": a.scoring.feature_dim,
        }),
    )?;
    let pairs = data.load(ck.manifest.config.image_size)?;
    let ex = extractor(&a.scoring, seed)?;
    let res = evaluate(&ck, &pairs, ex.as_ref(), &opts)?;

    let gen_dir = out.join("generated");
    std::fs::create_dir_all(&gen_dir)?;
    for (id, g) in res.ids.iter().zip(&res.generated) {
        gray_image(g)?
            .save(gen_dir.join(format!("{id}.png")))
            .with_context(|| format!("writing generated image {id}"))?;
    }
    let by_id: std::collections::HashMap<&str, &ImagePair> =
        pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let ordered: Vec<&ImagePair> = res.ids.iter().map(|id| by_id[id.as_str()]).collect();
    write_grid(&out.join("grid.png"), &ordered, &res.generated)?;
    if score {
        write_json(&out.join("metrics.json"), &res.report)?;
        std::fs::write(out.join("metrics.txt"), res.report.to_text())?;
        print!("{}", res.report.to_text());
    } else {
        println!("wrote {} samples to {}", res.ids.len(), gen_dir.display());
    }
    Ok(())
}

/// Day and night test sets, from `--data` (test split) or synthetic scenes after the training range.
fn test_sets(a: &AblationArgs, cfg: &TrainConfig, modes: &[SynthMode]) -> Result<Vec<EvalSet>> {
    modes
        .iter()
        .map(|&mode| {
            let tag = mode.tag();
            let r = match &a.train.data {
                Some(d) => data_ref(d, Split::Test, Some(tag))?,
                None => synth_refs(cfg.image_size, cfg.seed, &[mode], a.train.n, a.n_test).remove(0),
            };
            let pairs = r.load(cfg.image_size)?;
            if pairs.is_empty() {
                bail!(thermodiff::Error::Data(format!("no {tag} test pairs")));
            }
            Ok(EvalSet {
                name: tag.to_string(),
                pairs,
            })
        })
        .collect()
}

fn ablate_daynight(a: &AblationArgs, seed: Option<u64>, out: &Path, opts: &RunOptions) -> Result<()> {
    let base = resolve_train(&a.train, seed, None)?;
    let period = |modes: &[SynthMode]| -> Result<Vec<DataRef>> {
        match &a.train.data {
            Some(d) => modes
                .iter()
                .map(|m| data_ref(d, Split::Train, Some(m.tag())))
                .collect(),
            None => Ok(synth_refs(base.image_size, base.seed, modes, 0, a.train.n)),
        }
    };
    let arms = [
        ("day", vec![SynthMode::Day]),
        ("night", vec![SynthMode::Night]),
        ("day+night", vec![SynthMode::Day, SynthMode::Night]),
    ];
    let mut cfgs = Vec::new();
    for (name, modes) in &arms {
        let mut c = base.clone();
        c.train_data = period(modes)?;
        c.validate()?;
        cfgs.push((name.to_string(), c));
    }
    let sets = test_sets(a, &base, &[SynthMode::Day, SynthMode::Night])?;
    write_json(
        &out.join("command.json"),
        &json!({
            "command": "ablate-daynight",
            "train": cfgs.iter().map(|(n, c)| json!({ "name": n, "config": c })).collect::<Vec<_>>(),
            "test_sets": sets.iter().map(|s| json!({ "name": s.name, "ids": s.pairs.iter().map(|p| &p.id).collect::<Vec<_>>() })).collect::<Vec<_>>(),
            "n_eval": a.n_eval,
        }),
    )?;
    let ex = extractor(&a.scoring, base.seed)?;
    let eval = eval_options(&a.scoring, base.seed, a.n_eval);
    let res = ablation_matrix(&cfgs, &sets, ex.as_ref(), &eval, opts)?;
    print!("{}", res.grid.to_text());
    Ok(())
}

fn attention_command(a: &AblationArgs, seed: Option<u64>, out: &Path, opts: &RunOptions) -> Result<()> {
    let mut two = resolve_train(&a.train, seed, None)?;
    two.model.attention_levels = Variant::II.attention_levels();
    let mut one = two.clone();
    one.model.attention_levels = Variant::I.attention_levels();
    let modes = a.train.tag.unwrap_or(TagArg::Day).modes();
    let eval_pairs: Vec<ImagePair> = match &a.train.data {
        Some(d) => load_sources(&[data_ref(d, Split::Test, a.train.tag.and_then(TagArg::tag))?], two.image_size)?,
        None => test_sets(a, &two, &modes)?.into_iter().flat_map(|s| s.pairs).collect(),
    };
    write_json(
        &out.join("command.json"),
        &json!({
            "command": "ablate-attention",
            "model_I": one,
            "model_II": two,
            "eval_ids": eval_pairs.iter().map(|p| &p.id).collect::<Vec<_>>(),
            "n_eval": a.n_eval,
        }),
    )?;
    let ex = extractor(&a.scoring, two.seed)?;
    let eval = eval_options(&a.scoring, two.seed, a.n_eval);
    let report = ablate_attention([("I", &one), ("II", &two)], &eval_pairs, ex.as_ref(), &eval, opts)?;
    print!("{}", report.to_text());
    Ok(())
}
