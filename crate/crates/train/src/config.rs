//! Key-value pipeline configuration.
//!
//! One `key = value` per line, `#` starts a comment, unknown keys are
//! rejected. [`PipelineConfig::to_text`] writes every key in a canonical
//! order, so parsing its output reproduces the config exactly.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use mvcorr_core::render::ViewSamplingConfig;
use mvcorr_nn::{EmbedConfig, LossConfig};
use sha2::{Digest, Sha256};

use crate::channels::ChannelSet;
use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    /// Halve the rate when the mean loss of the latest `window` iterations
    /// improves by less than `threshold` (relative) over the window before.
    Plateau { window: usize, threshold: f64 },
    /// Multiply the rate by `factor` after every `every` iterations.
    Exponential { every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Plateau { window, threshold } => window > 0 && (0.0..1.0).contains(&threshold),
            LrSchedule::Exponential { every, factor } => every > 0 && factor > 0.0 && factor <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("invalid lr schedule {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            batch_size: 8,
            iterations: 2000,
            lr: 1e-3,
            schedule: LrSchedule::Plateau {
                window: 200,
                threshold: 0.01,
            },
            checkpoint_every: 500,
        }
    }

    pub fn finetune_default() -> Self {
        TrainConfig {
            batch_size: 8,
            iterations: 1000,
            lr: 1e-3,
            schedule: LrSchedule::Exponential { every: 40, factor: 0.99 },
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainConfig::err(self));
        }
        self.schedule.validate()
    }

    fn err(&self) -> TrainError {
        TrainError::Config(format!("batch size and lr must be positive: {self:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewCount {
    All,
    Count(usize),
}

impl fmt::Display for ViewCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewCount::All => f.write_str("all"),
            ViewCount::Count(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for ViewCount {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(ViewCount::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(ViewCount::Count(n)),
            _ => Err(TrainError::Config(format!("labeled views must be `all` or ≥ 1, got `{s}`"))),
        }
    }
}

/// k labeled shapes, each supervising with all or `v` of its views, repeated
/// over several seeds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotProtocol {
    pub k: usize,
    pub v: ViewCount,
    pub seeds: Vec<u64>,
}

impl Default for FewShotProtocol {
    fn default() -> Self {
        FewShotProtocol {
            k: 2,
            v: ViewCount::All,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl FewShotProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.seeds.is_empty() {
            return Err(TrainError::Config(format!("protocol needs k ≥ 1 and a seed: {self:?}")));
        }
        Ok(())
    }

    /// Parses `k=K,v=V,seed=S` (seed may repeat or use `seeds=a;b;c`).
    pub fn parse(s: &str) -> Result<Self> {
        let mut p = FewShotProtocol {
            seeds: Vec::new(),
            ..Default::default()
        };
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("protocol item `{item}` is not key=value")))?;
            match k.trim() {
                "k" => p.k = parse_num(k, v.trim())?,
                "v" => p.v = v.trim().parse()?,
                "seed" => p.seeds.push(parse_num(k, v.trim())?),
                "seeds" => {
                    for s in v.split(';') {
                        p.seeds.push(parse_num(k, s.trim())?);
                    }
                }
                other => return Err(TrainError::Config(format!("unknown protocol key `{other}`"))),
            }
        }
        if p.seeds.is_empty() {
            p.seeds = FewShotProtocol::default().seeds;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Camera layout; `height`/`width` double as the training resolution.
    pub views: ViewSamplingConfig,
    pub match_eps: f64,
    pub min_overlap: f64,
    pub channels: ChannelSet,
    pub widths: [usize; 4],
    pub dim: usize,
    pub loss: LossConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Unlabeled view pairs per fine-tuning iteration for the regularizer.
    pub ssl_pairs: usize,
    pub protocol: FewShotProtocol,
    pub gamma: f64,
    /// Views per forward pass during inference.
    pub infer_batch: usize,
    /// Rendered views kept in memory by the trainer.
    pub cache_views: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            views: ViewSamplingConfig::default(),
            match_eps: mvcorr_core::correspond::DEFAULT_MATCH_EPS,
            min_overlap: 0.15,
            channels: ChannelSet::ALL,
            widths: EmbedConfig::default().widths,
            dim: EmbedConfig::default().dim,
            loss: LossConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::finetune_default(),
            ssl_pairs: 1,
            protocol: FewShotProtocol::default(),
            gamma: mvcorr_core::aggregate::DEFAULT_GAMMA,
            infer_batch: 4,
            cache_views: 256,
            seed: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| TrainError::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

/// Every recognized key with a one-line description (shown by `--help`).
pub const KEYS: &[(&str, &str)] = &[
    ("image_size", "square render/training resolution in pixels"),
    ("n_views", "cameras per shape"),
    ("radius", "far-camera distance from the origin"),
    ("angle_jitter", "azimuth/elevation jitter, degrees"),
    ("scale_jitter", "relative field-of-view jitter"),
    ("closeup_fraction", "fraction of views placed near the surface"),
    ("closeup_distance", "closeup camera distance to its target point"),
    ("fov", "base vertical field of view, degrees"),
    ("view_seed", "seed of the camera layout"),
    ("match_eps", "3D radius for pixel correspondences"),
    ("min_overlap", "minimum view-pair overlap for contrastive training"),
    ("channels", "network inputs: any of rgb,normal,depth"),
    ("widths", "four hidden convolution widths"),
    ("dim", "embedding dimension D"),
    ("tau", "InfoNCE temperature"),
    ("lambda_reg", "weight of the contrastive regularizer while fine-tuning"),
    ("n_pairs", "matched pixel pairs per view pair"),
    ("pretrain.batch_size", "view pairs per pre-training iteration"),
    ("pretrain.iterations", "pre-training iterations"),
    ("pretrain.lr", "pre-training learning rate"),
    ("pretrain.plateau_window", "iterations per plateau window"),
    ("pretrain.plateau_threshold", "relative improvement below which lr halves"),
    ("pretrain.checkpoint_every", "checkpoint period (0 = final only)"),
    ("finetune.batch_size", "labeled views per fine-tuning iteration"),
    ("finetune.iterations", "fine-tuning iterations"),
    ("finetune.lr", "fine-tuning learning rate"),
    ("finetune.decay_every", "iterations between lr decays"),
    ("finetune.decay_factor", "lr decay factor"),
    ("finetune.checkpoint_every", "checkpoint period (0 = final only)"),
    ("ssl_pairs", "regularizer view pairs per fine-tuning iteration"),
    ("k", "labeled shapes per few-shot run"),
    ("v", "labeled views per shape (`all` or a count)"),
    ("seeds", "few-shot run seeds"),
    ("gamma", "view-weight exponent for label fusion"),
    ("infer_batch", "views per inference forward pass"),
    ("cache_views", "rendered views kept in memory"),
    ("seed", "master seed for initialization and sampling"),
];

impl PipelineConfig {
    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            in_channels: self.channels.count(),
            widths: self.widths,
            dim: self.dim,
        }
    }

    pub fn image_size(&self) -> usize {
        self.views.height
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "image_size" => {
                let n: usize = parse_num(key, v)?;
                self.views.height = n;
                self.views.width = n;
            }
            "n_views" => self.views.n_views = parse_num(key, v)?,
            "radius" => self.views.radius = parse_num(key, v)?,
            "angle_jitter" => self.views.angle_jitter = parse_num(key, v)?,
            "scale_jitter" => self.views.scale_jitter = parse_num(key, v)?,
            "closeup_fraction" => self.views.closeup_fraction = parse_num(key, v)?,
            "closeup_distance" => self.views.closeup_distance = parse_num(key, v)?,
            "fov" => self.views.fov_deg = parse_num(key, v)?,
            "view_seed" => self.views.seed = parse_num(key, v)?,
            "match_eps" => self.match_eps = parse_num(key, v)?,
            "min_overlap" => self.min_overlap = parse_num(key, v)?,
            "channels" => self.channels = v.parse()?,
            "widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                self.widths = w
                    .try_into()
                    .map_err(|_| TrainError::Config("widths needs exactly four values".into()))?;
            }
            "dim" => self.dim = parse_num(key, v)?,
            "tau" => self.loss.tau = parse_num(key, v)?,
            "lambda_reg" => self.loss.lambda_reg = parse_num(key, v)?,
            "n_pairs" => self.loss.n_pairs = parse_num(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_num(key, v)?,
            "pretrain.iterations" => self.pretrain.iterations = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, v)?,
            "pretrain.plateau_window" | "pretrain.plateau_threshold" => {
                let (mut window, mut threshold) = match self.pretrain.schedule {
                    LrSchedule::Plateau { window, threshold } => (window, threshold),
                    _ => (200, 0.01),
                };
                if key.ends_with("window") {
                    window = parse_num(key, v)?;
                } else {
                    threshold = parse_num(key, v)?;
                }
                self.pretrain.schedule = LrSchedule::Plateau { window, threshold };
            }
            "pretrain.checkpoint_every" => self.pretrain.checkpoint_every = parse_num(key, v)?,
            "finetune.batch_size" => self.finetune.batch_size = parse_num(key, v)?,
            "finetune.iterations" => self.finetune.iterations = parse_num(key, v)?,
            "finetune.lr" => self.finetune.lr = parse_num(key, v)?,
            "finetune.decay_every" | "finetune.decay_factor" => {
                let (mut every, mut factor) = match self.finetune.schedule {
                    LrSchedule::Exponential { every, factor } => (every, factor),
                    _ => (40, 0.99),
                };
                if key.ends_with("every") {
                    every = parse_num(key, v)?;
                } else {
                    factor = parse_num(key, v)?;
                }
                self.finetune.schedule = LrSchedule::Exponential { every, factor };
            }
            "finetune.checkpoint_every" => self.finetune.checkpoint_every = parse_num(key, v)?,
            "ssl_pairs" => self.ssl_pairs = parse_num(key, v)?,
            "k" => self.protocol.k = parse_num(key, v)?,
            "v" => self.protocol.v = v.parse()?,
            "seeds" => self.protocol.seeds = parse_list(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "infer_batch" => self.infer_batch = parse_num(key, v)?,
            "cache_views" => self.cache_views = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            _ => return Err(TrainError::UnknownKey { key: key.into(), line: 0 }),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self` and validates.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", i + 1)))?;
            match self.set(k.trim(), v.trim()) {
                Err(TrainError::UnknownKey { key, .. }) => return Err(TrainError::UnknownKey { key, line: i + 1 }),
                Err(TrainError::Config(msg)) => return Err(TrainError::Config(format!("line {}: {msg}", i + 1))),
                other => other?,
            }
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.views.validate()?;
        if self.views.height != self.views.width || self.views.height % 2 != 0 {
            return Err(TrainError::Config(format!(
                "image_size must be even, got {}",
                self.views.height
            )));
        }
        if !(self.match_eps > 0.0) || !(0.0..=1.0).contains(&self.min_overlap) {
            return Err(TrainError::Config("match_eps must be > 0 and min_overlap in [0,1]".into()));
        }
        self.embed_config().validate()?;
        self.loss.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.protocol.validate()?;
        if !(self.gamma >= 0.0) || self.infer_batch == 0 || self.ssl_pairs == 0 {
            return Err(TrainError::Config("gamma ≥ 0, infer_batch ≥ 1 and ssl_pairs ≥ 1 required".into()));
        }
        Ok(())
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = &self.views;
        let join = |xs: &[String]| xs.join(",");
        let mut kv = |k: &str, val: String| {
            let _ = writeln!(s, "{k} = {val}");
        };
        kv("image_size", v.height.to_string());
        kv("n_views", v.n_views.to_string());
        kv("radius", v.radius.to_string());
        kv("angle_jitter", v.angle_jitter.to_string());
        kv("scale_jitter", v.scale_jitter.to_string());
        kv("closeup_fraction", v.closeup_fraction.to_string());
        kv("closeup_distance", v.closeup_distance.to_string());
        kv("fov", v.fov_deg.to_string());
        kv("view_seed", v.seed.to_string());
        kv("match_eps", self.match_eps.to_string());
        kv("min_overlap", self.min_overlap.to_string());
        kv("channels", self.channels.to_string());
        kv("widths", join(&self.widths.map(|w| w.to_string())));
        kv("dim", self.dim.to_string());
        kv("tau", self.loss.tau.to_string());
        kv("lambda_reg", self.loss.lambda_reg.to_string());
        kv("n_pairs", self.loss.n_pairs.to_string());
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            kv(&format!("{name}.batch_size"), t.batch_size.to_string());
            kv(&format!("{name}.iterations"), t.iterations.to_string());
            kv(&format!("{name}.lr"), t.lr.to_string());
            match t.schedule {
                LrSchedule::Plateau { window, threshold } => {
                    kv(&format!("{name}.plateau_window"), window.to_string());
                    kv(&format!("{name}.plateau_threshold"), threshold.to_string());
                }
                LrSchedule::Exponential { every, factor } => {
                    kv(&format!("{name}.decay_every"), every.to_string());
                    kv(&format!("{name}.decay_factor"), factor.to_string());
                }
            }
            kv(&format!("{name}.checkpoint_every"), t.checkpoint_every.to_string());
        }
        kv("ssl_pairs", self.ssl_pairs.to_string());
        kv("k", self.protocol.k.to_string());
        kv("v", self.protocol.v.to_string());
        let seeds: Vec<String> = self.protocol.seeds.iter().map(u64::to_string).collect();
        kv("seeds", join(&seeds));
        kv("gamma", self.gamma.to_string());
        kv("infer_batch", self.infer_batch.to_string());
        kv("cache_views", self.cache_views.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
