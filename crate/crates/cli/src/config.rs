use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use secotrans::data::DatasetSpec;
use secotrans::networks::NetworkConfig;
use secotrans::objectives::{GanLoss, LossWeights, PatchSpec};
use secotrans::training::{OptimizerConfig, TrainConfig};
use secotrans::Error;
use serde::{Deserialize, Serialize};

/// `[train]` section: scheduling and run-level settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u64,
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub image_size: [u32; 2],
    pub seed: u64,
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    pub disc_steps: usize,
    pub gan_loss: GanLoss,
    pub hflip: bool,
    pub deterministic: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            image_size: t.image_size,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            output_dir: t.output_dir,
            disc_steps: t.disc_steps,
            gan_loss: t.gan_loss,
            hflip: t.hflip,
            deterministic: false,
        }
    }
}

/// `[data_a]` / `[data_b]`: one domain's image directory. Images are resized to `train.image_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    #[serde(default = "default_extensions")]
    pub extensions: Vec<String>,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub subsample: Option<usize>,
}

fn default_extensions() -> Vec<String> {
    vec!["png".into(), "jpg".into(), "jpeg".into()]
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { root: None, extensions: default_extensions(), shuffle_seed: 0, subsample: None }
    }
}

/// `[toy]`: procedural benchmark generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub seed: u64,
    pub count: usize,
    pub image_size: [u32; 2],
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection { seed: 1, count: 64, image_size: [64, 64] }
    }
}

/// `[interpolate]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolateSection {
    pub steps: usize,
    /// Number of consecutive image pairs to interpolate.
    pub pairs: usize,
}

impl Default for InterpolateSection {
    fn default() -> Self {
        InterpolateSection { steps: 5, pairs: 4 }
    }
}

/// Complete configuration of one invocation, as read from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainSection,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub patch: PatchSpec,
    pub data_a: DataSection,
    pub data_b: DataSection,
    pub toy: ToySection,
    pub interpolate: InterpolateSection,
}

/// Translation direction; `a2b` maps the synthetic domain to the real one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Direction {
    A2b,
    B2a,
}

impl Direction {
    pub fn source(self) -> secotrans::networks::DomainId {
        match self {
            Direction::A2b => secotrans::networks::DomainId::A,
            Direction::B2a => secotrans::networks::DomainId::B,
        }
    }
}

/// `WxH`, e.g. `1024x512`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageSize(pub [u32; 2]);

impl FromStr for ImageSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<u32>().map_err(|_| format!("bad dimension `{v}` in `{s}`"));
        Ok(ImageSize([parse(w)?, parse(h)?]))
    }
}

impl fmt::Display for ImageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0[0], self.0[1])
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data_a: Option<PathBuf>,
    pub data_b: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<u64>,
    pub image_size: Option<ImageSize>,
    pub deterministic: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid configuration: {}", e.message().trim()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// File values, then command-line overrides; `--seed` and `--image-size` also steer the toy generator.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.data_a {
            self.data_a.root = Some(p.clone());
        }
        if let Some(p) = &o.data_b {
            self.data_b.root = Some(p.clone());
        }
        if let Some(p) = &o.out {
            self.train.output_dir = p.clone();
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
            self.toy.seed = s;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(sz) = o.image_size {
            self.train.image_size = sz.0;
            self.toy.image_size = sz.0;
        }
        self.train.deterministic |= o.deterministic;
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            image_size: t.image_size,
            loss: self.loss.clone(),
            patch: self.patch.clone(),
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            output_dir: t.output_dir.clone(),
            disc_steps: t.disc_steps,
            gan_loss: t.gan_loss,
            hflip: t.hflip,
            network: self.network.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Checks every constraint; errors name the offending key as `section.field`.
    pub fn validate(&self) -> Result<()> {
        match self.train_config().validate() {
            Ok(()) => {}
            Err(Error::Config { key, reason }) => {
                let key = if key.contains('.') { key } else { format!("train.{key}") };
                bail!("invalid configuration `{key}`: {reason}");
            }
            Err(e) => return Err(e.into()),
        }
        let [w, h] = self.toy.image_size;
        if w % 4 != 0 || h % 4 != 0 || w < 32 || h < 32 {
            bail!("invalid configuration `toy.image_size`: {w}x{h} must be divisible by 4 with sides of at least 32");
        }
        if self.toy.count == 0 {
            bail!("invalid configuration `toy.count`: must be at least 1");
        }
        if self.interpolate.steps < 2 {
            bail!("invalid configuration `interpolate.steps`: must be at least 2");
        }
        for (key, d) in [("data_a", &self.data_a), ("data_b", &self.data_b)] {
            if d.subsample == Some(0) {
                bail!("invalid configuration `{key}.subsample`: must be at least 1");
            }
            if d.extensions.is_empty() {
                bail!("invalid configuration `{key}.extensions`: must not be empty");
            }
        }
        Ok(())
    }

    /// Loader spec of one domain; fails naming `<section>.root` when no directory is set.
    pub fn dataset(&self, key: &str) -> Result<DatasetSpec> {
        let d = match key {
            "data_a" => &self.data_a,
            _ => &self.data_b,
        };
        let root = d.root.clone().with_context(|| {
            format!("missing required field `{key}.root` (set it in the config or pass --{})", key.replace('_', "-"))
        })?;
        Ok(DatasetSpec {
            root,
            extensions: d.extensions.clone(),
            resize_to: self.train.image_size,
            shuffle_seed: d.shuffle_seed,
            subsample: d.subsample,
        })
    }
}
