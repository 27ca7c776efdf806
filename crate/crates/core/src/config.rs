//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! profile = desk
//! seed = 3
//! loss.temperature = 0.5
//! curation.enabled = true
//! ```
//!
//! `profile` is applied first regardless of its position; every other key
//! overrides the profile's value. Unknown keys are errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::curation::FeatureSource;
use crate::data::{cifar10_paths, load_cifar10_binary, load_mnist, make_synthetic, ImageDataset, Split};
use crate::error::{Error, Result};
use crate::eval::LinearProbeConfig;
use crate::losses::RegularizerKind;
use crate::rng::derive_seed;
use crate::trainer::{AblationCell, ProbeSettings, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "profile: unknown profile `{other}` (expected desk or paper)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!(
                "data.dataset: unknown dataset `{other}` (expected mnist, cifar10 or synthetic)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Keep only the first `n` training images (0: all).
    pub train_limit: usize,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            train_limit: 0,
            synthetic_classes: 10,
            synthetic_per_class: 100,
            synthetic_size: 16,
            synthetic_seed: 0,
        }
    }
}

impl DataConfig {
    /// Loads one split. `root` is ignored for synthetic data, whose test
    /// split is generated from a seed derived from `synthetic_seed`.
    pub fn load(&self, root: Option<&Path>, split: Split) -> Result<ImageDataset> {
        let need_root = || {
            root.ok_or_else(|| {
                Error::Config(format!(
                    "dataset {} needs a data root (--data-root or CURATE_DATA_ROOT)",
                    self.dataset
                ))
            })
        };
        let ds = match self.dataset {
            DatasetKind::Mnist => load_mnist(need_root()?, split)?,
            DatasetKind::Cifar10 => load_cifar10_binary(&cifar10_paths(need_root()?, split))?,
            DatasetKind::Synthetic => {
                let seed = match split {
                    Split::Train => self.synthetic_seed,
                    Split::Test => derive_seed(self.synthetic_seed, 1),
                };
                make_synthetic(
                    self.synthetic_classes,
                    self.synthetic_per_class,
                    self.synthetic_size,
                    seed,
                )?
            }
        };
        Ok(match split {
            Split::Train if self.train_limit > 0 && self.train_limit < ds.len() => ds.take(self.train_limit),
            _ => ds,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Linear,
    Knn,
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "knn" => Ok(ProbeKind::Knn),
            other => Err(Error::Config(format!(
                "unknown probe `{other}` (expected linear or knn)"
            ))),
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Knn => "knn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub knn: ProbeSettings,
    pub linear: LinearProbeConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Knn,
            knn: ProbeSettings::default(),
            linear: LinearProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub regularizers: Vec<RegularizerKind>,
    pub curation: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            regularizers: RegularizerKind::ALL.to_vec(),
            curation: vec![true, false],
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationConfig {
    pub fn cells(&self) -> Vec<AblationCell> {
        AblationCell::grid(&self.regularizers, &self.curation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}` as a number")))
}

fn parse_list<T, F: Fn(&str) -> Result<T>>(v: &str, f: F) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let train = match profile {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::paper(),
        };
        Self {
            profile,
            train,
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Parses configuration text; `profile` is applied before the other keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        let profile = match pairs.iter().rev().find(|(k, _)| *k == "profile") {
            Some((_, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = Self::for_profile(profile);
        for (k, v) in pairs {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.train.encoder.validate().or_else(|e| match e {
            // The input shape is bound to the dataset at training time.
            Error::Config(m) if m.contains("too small") => Ok(()),
            e => Err(e),
        })?;
        if self.probe.knn.k == 0 {
            return Err(Error::Config("probe.k must be at least 1".into()));
        }
        if self.ablation.regularizers.is_empty() || self.ablation.curation.is_empty() || self.ablation.seeds.is_empty()
        {
            return Err(Error::Config("ablation lists must be nonempty".into()));
        }
        Ok(())
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "profile" => {
                let p: Profile = v.parse()?;
                if p != self.profile {
                    return Err(Error::Config("profile: can only be set at parse time".into()));
                }
            }
            "seed" => t.seed = parse_num(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.base_lr" => t.base_lr = parse_num(key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse_num(key, v)?,
            "train.momentum" => t.momentum = parse_num(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "train.standardize" => t.standardize = parse_bool(key, v)?,
            "curation.enabled" => t.curation.enabled = parse_bool(key, v)?,
            "curation.calibration_epoch" => t.curation.calibration_epoch = parse_num(key, v)?,
            "curation.shrinkage" => t.curation.shrinkage = parse_num(key, v)?,
            "curation.source" => t.curation.source = v.parse()?,
            "curation.normalize" => t.curation.normalize = parse_bool(key, v)?,
            "loss.temperature" => t.loss.temperature = parse_num(key, v)?,
            "loss.huber_delta" => t.loss.huber_delta = parse_num(key, v)?,
            "loss.lambda" => t.loss.lambda = parse_num(key, v)?,
            "loss.regularizer" => t.loss.regularizer = v.parse()?,
            "augment.crop_scale_min" => t.transform.crop_scale.0 = parse_num(key, v)?,
            "augment.crop_scale_max" => t.transform.crop_scale.1 = parse_num(key, v)?,
            "augment.flip_prob" => t.transform.flip_prob = parse_num(key, v)?,
            "augment.jitter_prob" => t.transform.jitter_prob = parse_num(key, v)?,
            "augment.brightness" => t.transform.jitter.brightness = parse_num(key, v)?,
            "augment.contrast" => t.transform.jitter.contrast = parse_num(key, v)?,
            "augment.saturation" => t.transform.jitter.saturation = parse_num(key, v)?,
            "augment.grayscale_prob" => t.transform.grayscale_prob = parse_num(key, v)?,
            "augment.output_size" => {
                t.transform.output_size = match parse_num::<usize>(key, v)? {
                    0 => None,
                    s => Some(s),
                }
            }
            "encoder.kind"
            | "encoder.conv_channels"
            | "encoder.kernel_size"
            | "encoder.hidden_dim"
            | "encoder.projection_dim" => {
                let field = &key["encoder.".len()..];
                t.encoder.set(field, v)?;
            }
            "data.dataset" => self.data.dataset = v.parse()?,
            "data.train_limit" => self.data.train_limit = parse_num(key, v)?,
            "data.synthetic.classes" => self.data.synthetic_classes = parse_num(key, v)?,
            "data.synthetic.per_class" => self.data.synthetic_per_class = parse_num(key, v)?,
            "data.synthetic.size" => self.data.synthetic_size = parse_num(key, v)?,
            "data.synthetic.seed" => self.data.synthetic_seed = parse_num(key, v)?,
            "probe.kind" => self.probe.kind = v.parse()?,
            "probe.k" => self.probe.knn.k = parse_num(key, v)?,
            "probe.source" => {
                let s: FeatureSource = v.parse()?;
                self.probe.knn.source = s;
            }
            "probe.epochs" => self.probe.linear.epochs = parse_num(key, v)?,
            "probe.lr" => self.probe.linear.lr = parse_num(key, v)?,
            "probe.seed" => self.probe.linear.seed = parse_num(key, v)?,
            "ablation.regularizers" => self.ablation.regularizers = parse_list(v, str::parse)?,
            "ablation.curation" => self.ablation.curation = parse_list(v, |s| parse_bool(key, s))?,
            "ablation.seeds" => self.ablation.seeds = parse_list(v, |s| parse_num(key, s))?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let mut out = vec![
            ("profile", self.profile.to_string()),
            ("seed", t.seed.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.standardize", t.standardize.to_string()),
            ("curation.enabled", t.curation.enabled.to_string()),
            ("curation.calibration_epoch", t.curation.calibration_epoch.to_string()),
            ("curation.shrinkage", t.curation.shrinkage.to_string()),
            ("curation.source", t.curation.source.to_string()),
            ("curation.normalize", t.curation.normalize.to_string()),
            ("loss.temperature", t.loss.temperature.to_string()),
            ("loss.huber_delta", t.loss.huber_delta.to_string()),
            ("loss.lambda", t.loss.lambda.to_string()),
            ("loss.regularizer", t.loss.regularizer.to_string()),
            ("augment.crop_scale_min", t.transform.crop_scale.0.to_string()),
            ("augment.crop_scale_max", t.transform.crop_scale.1.to_string()),
            ("augment.flip_prob", t.transform.flip_prob.to_string()),
            ("augment.jitter_prob", t.transform.jitter_prob.to_string()),
            ("augment.brightness", t.transform.jitter.brightness.to_string()),
            ("augment.contrast", t.transform.jitter.contrast.to_string()),
            ("augment.saturation", t.transform.jitter.saturation.to_string()),
            ("augment.grayscale_prob", t.transform.grayscale_prob.to_string()),
            ("augment.output_size", t.transform.output_size.unwrap_or(0).to_string()),
        ];
        for (k, v) in t.encoder.to_lines() {
            let key = match k.as_str() {
                "kind" => "encoder.kind",
                "conv_channels" => "encoder.conv_channels",
                "kernel_size" => "encoder.kernel_size",
                "hidden_dim" => "encoder.hidden_dim",
                "projection_dim" => "encoder.projection_dim",
                _ => continue,
            };
            out.push((key, v));
        }
        out.extend([
            ("data.dataset", self.data.dataset.to_string()),
            ("data.train_limit", self.data.train_limit.to_string()),
            ("data.synthetic.classes", self.data.synthetic_classes.to_string()),
            ("data.synthetic.per_class", self.data.synthetic_per_class.to_string()),
            ("data.synthetic.size", self.data.synthetic_size.to_string()),
            ("data.synthetic.seed", self.data.synthetic_seed.to_string()),
            ("probe.kind", self.probe.kind.to_string()),
            ("probe.k", self.probe.knn.k.to_string()),
            ("probe.source", self.probe.knn.source.to_string()),
            ("probe.epochs", self.probe.linear.epochs.to_string()),
            ("probe.lr", self.probe.linear.lr.to_string()),
            ("probe.seed", self.probe.linear.seed.to_string()),
            ("ablation.regularizers", join(&self.ablation.regularizers)),
            ("ablation.curation", join(&self.ablation.curation)),
            ("ablation.seeds", join(&self.ablation.seeds)),
        ]);
        out
    }

    /// Configuration text that parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
