//! Experiment configuration files.
//!
//! A configuration is a TOML document:
//!
//! ```toml
//! model = "bundled:mobilenet_v1_reduced"   # or a path to a .mg file
//! out = "runs/v1"
//! seed = 0
//!
//! [data]
//! synthetic = "4,2000,8,0"   # classes,n,hw,seed
//! noise = 2.0
//!
//! [train]
//! epochs = 10
//! init_lr = 0.1
//! augmentation = ["crop", "flip"]
//!
//! [search]
//! episodes = 300
//! budget_fraction = 0.5
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Every key is optional except `model` and the `[data]` source.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{Augment, Dataset, SynthSpec, DEFAULT_NOISE};
use crate::error::{Error, Result};
use crate::gcn::AggregatorKind;
use crate::graph::{bundled, count_flops, parse_model_description, ModelGraph, RatioAssignment};
use crate::network::SupernetOptions;
use crate::search::SearchConfig;
use crate::trainer::{LrSchedule, TrainConfig};

const BUNDLED_PREFIX: &str = "bundled:";

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<String>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    search: RawSearch,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawData {
    synthetic: Option<String>,
    noise: Option<f64>,
    dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    init_lr: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    lr_schedule: Option<String>,
    augmentation: Option<Vec<String>>,
    ratio_grid: Option<Vec<f64>>,
    aggregator: Option<String>,
    hidden_layer: Option<bool>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSearch {
    episodes: Option<usize>,
    warmup_episodes: Option<usize>,
    noise_init: Option<f64>,
    noise_decay: Option<f64>,
    gamma: Option<f64>,
    budget: Option<u64>,
    budget_fraction: Option<f64>,
    batch_size: Option<usize>,
    tau: Option<f64>,
    replay_capacity: Option<usize>,
    hidden: Option<usize>,
    actor_lr: Option<f64>,
    critic_lr: Option<f64>,
    updates_per_episode: Option<usize>,
    reward_window: Option<usize>,
    eval_batch_size: Option<usize>,
}

/// Where the images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Dir(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => Ok(Dataset::synthetic(spec)),
            DataSource::Dir(dir) => Dataset::load(dir),
        }
    }
}

/// How the search budget is stated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Absolute(u64),
    /// Fraction of the unpruned network's MACs.
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, g: &ModelGraph) -> Result<u64> {
        match self {
            Budget::Absolute(b) => Ok(b),
            Budget::Fraction(f) => {
                let full = count_flops(g, &RatioAssignment::full(g))?;
                Ok((full as f64 * f).floor() as u64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// `bundled:<name>` or a resolved path.
    pub model: String,
    pub out: PathBuf,
    pub seed: u64,
    pub data: DataSource,
    pub train: TrainConfig,
    pub aggregator: AggregatorKind,
    pub hidden_layer: bool,
    pub search: SearchConfig,
    pub budget: Budget,
    pub eval_batch_size: usize,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read configuration {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    /// Parses `text`, resolving relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        let model = raw.model.ok_or_else(|| Error::Config("missing `model`".into()))?;
        let model = if model.starts_with(BUNDLED_PREFIX) {
            model
        } else {
            resolve(Path::new(&model)).to_string_lossy().into_owned()
        };
        let seed = raw.seed.unwrap_or(0);

        let data = match (raw.data.synthetic, raw.data.dir) {
            (Some(s), None) => {
                let mut spec = SynthSpec::parse(&s)?;
                spec.noise = raw.data.noise.unwrap_or(DEFAULT_NOISE);
                if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
                    return Err(Error::Config("data.noise must be a non-negative number".into()));
                }
                DataSource::Synthetic(spec)
            }
            (None, Some(d)) => {
                if raw.data.noise.is_some() {
                    return Err(Error::Config("data.noise only applies to synthetic data".into()));
                }
                DataSource::Dir(resolve(&d))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config("set only one of data.synthetic and data.dir".into()))
            }
            (None, None) => return Err(Error::Config("missing [data] synthetic or dir".into())),
        };

        let t = raw.train;
        let mut train = TrainConfig { seed, ..TrainConfig::default() };
        set(&mut train.epochs, t.epochs);
        set(&mut train.batch_size, t.batch_size);
        set(&mut train.init_lr, t.init_lr);
        set(&mut train.momentum, t.momentum);
        set(&mut train.weight_decay, t.weight_decay);
        set(&mut train.ratio_grid, t.ratio_grid);
        if let Some(s) = t.lr_schedule {
            train.lr_schedule = match s.as_str() {
                "cosine" => LrSchedule::Cosine,
                "step" => LrSchedule::Step,
                other => return Err(Error::Config(format!("unknown lr_schedule `{other}`"))),
            };
        }
        if let Some(list) = t.augmentation {
            let mut aug = Augment { crop: false, flip: false };
            for a in &list {
                match a.as_str() {
                    "crop" => aug.crop = true,
                    "flip" => aug.flip = true,
                    other => return Err(Error::Config(format!("unknown augmentation `{other}`"))),
                }
            }
            train.augment = aug;
        }
        let aggregator = match t.aggregator.as_deref() {
            None | Some("graph") => AggregatorKind::Graph,
            Some("node-only") => AggregatorKind::NodeOnly,
            Some(other) => return Err(Error::Config(format!("unknown aggregator `{other}`"))),
        };

        let s = raw.search;
        let mut search = SearchConfig {
            seed,
            ratio_grid: train.ratio_grid.clone(),
            ..SearchConfig::default()
        };
        set(&mut search.episodes, s.episodes);
        set(&mut search.warmup_episodes, s.warmup_episodes);
        set(&mut search.noise_init, s.noise_init);
        set(&mut search.noise_decay, s.noise_decay);
        set(&mut search.gamma, s.gamma);
        set(&mut search.batch_size, s.batch_size);
        set(&mut search.tau, s.tau);
        set(&mut search.replay_capacity, s.replay_capacity);
        set(&mut search.hidden, s.hidden);
        set(&mut search.actor_lr, s.actor_lr);
        set(&mut search.critic_lr, s.critic_lr);
        set(&mut search.updates_per_episode, s.updates_per_episode);
        set(&mut search.reward_window, s.reward_window);
        let budget = match (s.budget, s.budget_fraction) {
            (Some(b), None) => Budget::Absolute(b),
            (None, Some(f)) if f > 0.0 && f <= 1.0 => Budget::Fraction(f),
            (None, Some(f)) => return Err(Error::Config(format!("budget_fraction {f} must lie in (0, 1]"))),
            (None, None) => Budget::Fraction(0.5),
            (Some(_), Some(_)) => {
                return Err(Error::Config("set only one of search.budget and search.budget_fraction".into()))
            }
        };
        let eval_batch_size = s.eval_batch_size.unwrap_or(64);
        if eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }

        let cfg = Self {
            model,
            out: raw.out.map(|p| resolve(&p)).unwrap_or_else(|| base.join("out")),
            seed,
            data,
            train,
            aggregator,
            hidden_layer: t.hidden_layer.unwrap_or(false),
            search,
            budget,
            eval_batch_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.search.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.search.validate()?;
        if !self.model.starts_with(BUNDLED_PREFIX) && !Path::new(&self.model).is_file() {
            return Err(Error::Config(format!("model description `{}` does not exist", self.model)));
        }
        if let DataSource::Dir(d) = &self.data {
            if !d.is_dir() {
                return Err(Error::Config(format!("dataset directory `{}` does not exist", d.display())));
            }
        }
        Ok(())
    }

    pub fn load_model(&self) -> Result<ModelGraph> {
        load_model(&self.model)
    }

    pub fn supernet_options(&self, classes: usize) -> SupernetOptions {
        SupernetOptions {
            classes,
            grid: self.train.ratio_grid.clone(),
            aggregator: self.aggregator,
            hidden_layer: self.hidden_layer,
        }
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

/// Loads `bundled:<name>` or a description file.
pub fn load_model(spec: &str) -> Result<ModelGraph> {
    if let Some(name) = spec.strip_prefix(BUNDLED_PREFIX) {
        return bundled::load(name);
    }
    let text = fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    parse_model_description(&text)
}
