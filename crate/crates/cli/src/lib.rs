//! Command-line front end: config parsing and the six workflows.

pub mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use secotrans::data::{
    generate_toy_dataset, load_dataset, load_toy_dataset, save_png, tensor_to_rgb, write_toy_dataset, ImageSet,
};
use secotrans::evaluation::{
    consistency_iou, export_content_codes, image_strip, interpolate_content, nn_matching_score, write_embeddings_csv,
    ConsistencyReport, ContentOrigin,
};
use secotrans::networks::{DomainId, Model};
use secotrans::training::{train, Checkpoint, Resume};
use serde::Serialize;

pub use config::{Direction, ImageSize, Overrides, RunConfig};

pub const DEVICE_ENV: &str = "SECOTRANS_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "secotrans", version, about = "Shared-content, fixed-style image translation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Domain A (synthetic) image directory.
    #[arg(long, global = true)]
    pub data_a: Option<PathBuf>,
    /// Domain B (real) image directory.
    #[arg(long, global = true)]
    pub data_b: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to resume from or evaluate.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub direction: Option<Direction>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<u64>,
    /// Working resolution as WxH.
    #[arg(long, global = true)]
    pub image_size: Option<ImageSize>,
    /// Require bit-reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch, or resume with --checkpoint.
    Train {
        /// Resume even if the checkpoint was produced under a different configuration.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Translate every image of the source domain's directory.
    Translate,
    /// Write a procedural toy dataset (a/, b/, masks/, manifest.json).
    GenToy {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Export pooled content codes and nearest-neighbor matching scores.
    EvalContent,
    /// Shape-mask IoU of translated toy images.
    EvalConsistency {
        /// Toy dataset directory written by gen-toy.
        #[arg(long)]
        toy: PathBuf,
    },
    /// Content interpolation strips under both styles.
    Interpolate {
        #[arg(long)]
        steps: Option<usize>,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            data_a: self.data_a.clone(),
            data_b: self.data_b.clone(),
            out: self.out.clone(),
            seed: self.seed,
            epochs: self.epochs,
            image_size: self.image_size,
            deterministic: self.deterministic,
        }
    }

    /// File (or defaults), overrides, then validation.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint.as_deref().context("this command needs --checkpoint PATH")
    }
}

/// Only the CPU backend exists; `auto` and an unset variable select it.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(()),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("auto") || v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => bail!("{DEVICE_ENV}={v} is not available; supported devices: cpu, auto"),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    check_device()?;
    let cfg = cli.global.resolve()?;
    if cfg.train.deterministic {
        log::info!("deterministic mode: execution is single-threaded and seeded");
    }
    match &cli.command {
        Command::Train { allow_config_mismatch } => cmd_train(&cli.global, &cfg, *allow_config_mismatch),
        Command::Translate => cmd_translate(&cli.global, &cfg),
        Command::GenToy { count } => cmd_gen_toy(&cfg, count.unwrap_or(cfg.toy.count), cli.global.out.as_deref()),
        Command::EvalContent => cmd_eval_content(&cli.global, &cfg),
        Command::EvalConsistency { toy } => cmd_eval_consistency(&cli.global, &cfg, toy),
        Command::Interpolate { steps } => cmd_interpolate(&cli.global, &cfg, steps.unwrap_or(cfg.interpolate.steps)),
    }
}

fn cmd_train(args: &GlobalArgs, cfg: &RunConfig, allow_config_mismatch: bool) -> Result<()> {
    let set_a = load_dataset::<f32>(&cfg.dataset("data_a")?).context("loading domain A")?;
    let set_b = load_dataset::<f32>(&cfg.dataset("data_b")?).context("loading domain B")?;
    log::info!("domain A: {} images, domain B: {} images", set_a.len(), set_b.len());
    let resume = match &args.checkpoint {
        Some(path) => Resume::From { path: path.clone(), allow_config_mismatch },
        None => Resume::Fresh,
    };
    let ckpt = train(cfg.train_config(), &set_a, &set_b, &resume)?;
    println!("trained {} steps; checkpoint in {}", ckpt.step, cfg.train.output_dir.display());
    Ok(())
}

fn load_model(args: &GlobalArgs) -> Result<(Checkpoint<f32>, Model<f32>)> {
    let path = args.checkpoint()?;
    let ckpt = Checkpoint::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ckpt.model.clone();
    Ok((ckpt, model))
}

/// Working resolution: `--image-size` if given, else the checkpoint's.
fn working_size(args: &GlobalArgs, ckpt: &Checkpoint<f32>) -> [u32; 2] {
    args.image_size.map_or(ckpt.config.image_size, |s| s.0)
}

fn load_domain(cfg: &RunConfig, key: &str, size: [u32; 2]) -> Result<ImageSet<f32>> {
    let mut spec = cfg.dataset(key)?;
    spec.resize_to = size;
    load_dataset(&spec).with_context(|| format!("loading {key}"))
}

fn out_dir(args: &GlobalArgs, cfg: &RunConfig, sub: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| cfg.train.output_dir.join(sub))
}

fn cmd_translate(args: &GlobalArgs, cfg: &RunConfig) -> Result<()> {
    let direction = args.direction.context("translate needs --direction a2b|b2a")?;
    let (ckpt, model) = load_model(args)?;
    let source = direction.source();
    let key = if source == DomainId::A { "data_a" } else { "data_b" };
    let set = load_domain(cfg, key, working_size(args, &ckpt))?;
    let out = out_dir(args, cfg, &format!("translated_{}", if source == DomainId::A { "a2b" } else { "b2a" }));
    let style = model.style(source.other());
    for (i, id) in set.ids().iter().enumerate() {
        let x = set.batch(&[i], &[false])?;
        let y = model.translate(&x, style)?;
        let name = Path::new(id).with_extension("png");
        save_png(&tensor_to_rgb(y.tensor(), 0), &out.join(name))?;
    }
    println!("translated {} images into {}", set.len(), out.display());
    Ok(())
}

fn cmd_gen_toy(cfg: &RunConfig, count: usize, out: Option<&Path>) -> Result<()> {
    let out = out.context("gen-toy needs --out DIR")?;
    if count == 0 {
        bail!("invalid configuration `toy.count`: must be at least 1");
    }
    let [w, h] = cfg.toy.image_size;
    let scenes = generate_toy_dataset(cfg.toy.seed, count, (w, h))?;
    write_toy_dataset(out, cfg.toy.seed, &scenes)?;
    println!("wrote {count} toy scenes ({w}x{h}) to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ContentScores {
    n_a: usize,
    n_b: usize,
    /// NN matching of translated A→B codes against source A codes.
    nn_ab: Option<f64>,
    nn_ba: Option<f64>,
    /// The same scores with translated codes shuffled; expected near 1/n.
    shuffled_ab: Option<f64>,
    shuffled_ba: Option<f64>,
}

fn shuffled_score(src: &[Vec<f64>], trans: &[Vec<f64>], seed: u64) -> Result<f64> {
    let mut perm: Vec<usize> = (0..trans.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let shuffled: Vec<Vec<f64>> = perm.iter().map(|&j| trans[j].clone()).collect();
    Ok(nn_matching_score(src, &shuffled)?)
}

fn cmd_eval_content(args: &GlobalArgs, cfg: &RunConfig) -> Result<()> {
    let (ckpt, model) = load_model(args)?;
    let size = working_size(args, &ckpt);
    let out = out_dir(args, cfg, "eval_content");
    if cfg.data_a.root.is_none() && cfg.data_b.root.is_none() {
        bail!("eval-content needs --data-a and/or --data-b");
    }
    let mut rows = Vec::new();
    let mut scores = ContentScores { n_a: 0, n_b: 0, nn_ab: None, nn_ba: None, shuffled_ab: None, shuffled_ba: None };
    for (key, src, trans) in
        [("data_a", ContentOrigin::SourceA, ContentOrigin::TranslatedAb), ("data_b", ContentOrigin::SourceB, ContentOrigin::TranslatedBa)]
    {
        if cfg.dataset(key).is_err() {
            continue;
        }
        let set = load_domain(cfg, key, size)?;
        let n = set.len();
        let images = set.all()?;
        let ids = set.ids().to_vec();
        let c_src = export_content_codes(&model, &images, &ids, &vec![src; n])?;
        let c_trans = export_content_codes(&model, &images, &ids, &vec![trans; n])?;
        let (vs, vt): (Vec<_>, Vec<_>) =
            (c_src.iter().map(|e| e.vector.clone()).collect(), c_trans.iter().map(|e| e.vector.clone()).collect());
        let score = nn_matching_score(&vs, &vt)?;
        let chance = shuffled_score(&vs, &vt, cfg.train.seed)?;
        if src == ContentOrigin::SourceA {
            (scores.n_a, scores.nn_ab, scores.shuffled_ab) = (n, Some(score), Some(chance));
        } else {
            (scores.n_b, scores.nn_ba, scores.shuffled_ba) = (n, Some(score), Some(chance));
        }
        rows.extend(c_src);
        rows.extend(c_trans);
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_embeddings_csv(&out.join("embeddings.csv"), &rows)?;
    let json = serde_json::to_string_pretty(&scores)?;
    std::fs::write(out.join("content_scores.json"), &json)?;
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct ConsistencyOutput {
    a2b: ConsistencyReport,
    b2a: ConsistencyReport,
}

fn cmd_eval_consistency(args: &GlobalArgs, cfg: &RunConfig, toy: &Path) -> Result<()> {
    let (_, model) = load_model(args)?;
    let (_, scenes) = load_toy_dataset(toy).with_context(|| format!("loading toy dataset {}", toy.display()))?;
    let out = out_dir(args, cfg, "eval_consistency");
    let mut reports = Vec::new();
    for source in [DomainId::A, DomainId::B] {
        let mut entries = Vec::with_capacity(scenes.len());
        for scene in &scenes {
            let sample = scene.sample::<f32>(source);
            let translated = model.translate(&sample.image, model.style(source.other()))?;
            entries.push(consistency_iou(&scene.id, &sample, &translated)?);
        }
        reports.push(ConsistencyReport::from_entries(entries));
    }
    let b2a = reports.pop().expect("two reports");
    let a2b = reports.pop().expect("two reports");
    println!("mean IoU a2b {:.4}, b2a {:.4}", a2b.mean_iou, b2a.mean_iou);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("consistency.json");
    std::fs::write(&path, serde_json::to_string_pretty(&ConsistencyOutput { a2b, b2a })?)?;
    Ok(())
}

fn cmd_interpolate(args: &GlobalArgs, cfg: &RunConfig, steps: usize) -> Result<()> {
    if steps < 2 {
        bail!("invalid configuration `interpolate.steps`: must be at least 2");
    }
    let (ckpt, model) = load_model(args)?;
    let source = args.direction.map_or(DomainId::A, Direction::source);
    let key = if source == DomainId::A { "data_a" } else { "data_b" };
    let set = load_domain(cfg, key, working_size(args, &ckpt))?;
    if set.len() < 2 {
        bail!("interpolation needs at least two images in {key}");
    }
    let out = out_dir(args, cfg, "interpolate");
    let pairs = cfg.interpolate.pairs.min(set.len() - 1).max(1);
    let mut written = 0;
    for p in 0..pairs {
        let c1 = model.encode(&set.batch(&[p], &[false])?)?;
        let c2 = model.encode(&set.batch(&[p + 1], &[false])?)?;
        for style in [DomainId::A, DomainId::B] {
            let frames = interpolate_content(&model, &c1, &c2, steps, model.style(style))?;
            let stem = |i: usize| Path::new(&set.ids()[i]).file_stem().map(|s| s.to_string_lossy().into_owned());
            let name = format!(
                "{}_{}_style_{style}.png",
                stem(p).unwrap_or_else(|| p.to_string()),
                stem(p + 1).unwrap_or_else(|| (p + 1).to_string())
            );
            save_png(&image_strip(&frames)?, &out.join(name))?;
            written += 1;
        }
    }
    println!("wrote {written} strips of {steps} frames to {}", out.display());
    Ok(())
}
