//! Run configuration in a `key=value` text format.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Values are layered: built-in defaults, then a preset, then a file, then
//! individual overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::finet::{BlockStyle, FinetConfig, NormHyper, Variant};
use crate::norm::{GroupSpec, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::train::{Schedule, TrainConfig};

/// Where training and evaluation data come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic(SyntheticKind),
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Synthetic(SyntheticKind::GaussianBlobs) => "blobs",
            DatasetKind::Synthetic(SyntheticKind::LinearlySeparable) => "separable",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            other => other.parse().map(DatasetKind::Synthetic),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Step,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub group_spec: GroupSpec,
    pub use_se: bool,
    pub cifar_adapted: bool,
    pub affine: bool,
    pub epsilon: f64,
    pub bn_momentum: f64,
    pub block_style: BlockStyle,
    pub classes: usize,
    pub input_size: usize,
    pub dropout: f64,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub dataset: DatasetKind,
    /// Empty means "use `FINEGRAIN_DATA_DIR`".
    pub data_dir: Option<PathBuf>,
    /// Training samples used (0 = all).
    pub train_subset: usize,
    /// Test samples used (0 = all).
    pub test_subset: usize,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

impl Default for RunConfig {
    /// Desk-scale CIFAR-10 run: Finet-Small, 20 epochs of batch 64, step
    /// decay ×10 at epochs 10 and 15, on a 5000/1000 subset.
    fn default() -> Self {
        RunConfig {
            variant: Variant::Small,
            group_spec: GroupSpec::FixedGroups(1),
            use_se: false,
            cifar_adapted: true,
            affine: true,
            epsilon: DEFAULT_EPSILON,
            bn_momentum: DEFAULT_MOMENTUM,
            block_style: BlockStyle::Residual,
            classes: 10,
            input_size: 32,
            dropout: 0.2,
            lr: 0.1,
            schedule: ScheduleKind::Step,
            milestones: vec![10, 15],
            lr_factor: 10.0,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            augment: true,
            dataset: DatasetKind::Cifar10,
            data_dir: None,
            train_subset: 5000,
            test_subset: 1000,
            checkpoint: PathBuf::from("finet.ckpt"),
            metrics_csv: PathBuf::from("metrics.csv"),
        }
    }
}

pub const KEYS: [&str; 28] = [
    "variant",
    "group_spec",
    "use_se",
    "cifar_adapted",
    "affine",
    "epsilon",
    "bn_momentum",
    "block_style",
    "classes",
    "input_size",
    "dropout",
    "lr",
    "schedule",
    "milestones",
    "lr_factor",
    "sgd_momentum",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "augment",
    "dataset",
    "data_dir",
    "train_subset",
    "test_subset",
    "checkpoint",
    "metrics_csv",
    "preset",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {v:?} for {key}"))),
    }
}

impl RunConfig {
    /// Full-scale settings. `imagenet`: 224×224, 1000 classes, linear decay
    /// from 0.2 over 320 epochs, batch 512, weight decay 4e-5. `cifar`: full
    /// CIFAR-10, 200 epochs, batch 128, ×10 decay at epochs 100 and 150.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "imagenet" => {
                self.cifar_adapted = false;
                self.classes = 1000;
                self.input_size = 224;
                self.schedule = ScheduleKind::Linear;
                self.lr = 0.2;
                self.epochs = 320;
                self.batch_size = 512;
                self.weight_decay = 4e-5;
                self.augment = false;
            }
            "cifar" => {
                self.cifar_adapted = true;
                self.classes = 10;
                self.input_size = 32;
                self.schedule = ScheduleKind::Step;
                self.lr = 0.1;
                self.milestones = vec![100, 150];
                self.lr_factor = 10.0;
                self.epochs = 200;
                self.batch_size = 128;
                self.weight_decay = 5e-4;
                self.train_subset = 0;
                self.test_subset = 0;
                self.augment = true;
            }
            "desk" => *self = RunConfig::default(),
            _ => return Err(Error::config(format!("unknown preset {name:?} (imagenet, cifar, desk)"))),
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = v.parse()?,
            "group_spec" => self.group_spec = v.parse()?,
            "use_se" => self.use_se = parse_bool(key, v)?,
            "cifar_adapted" => self.cifar_adapted = parse_bool(key, v)?,
            "affine" => self.affine = parse_bool(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "bn_momentum" => self.bn_momentum = parse(key, v)?,
            "block_style" => self.block_style = v.parse()?,
            "classes" => self.classes = parse(key, v)?,
            "input_size" => self.input_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "step" => ScheduleKind::Step,
                    "linear" => ScheduleKind::Linear,
                    _ => return Err(Error::config(format!("unknown schedule {v:?} (step, linear)"))),
                }
            }
            "milestones" => {
                self.milestones = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|m| parse(key, m.trim())).collect::<Result<_>>()?
                }
            }
            "lr_factor" => self.lr_factor = parse(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train_subset" => self.train_subset = parse(key, v)?,
            "test_subset" => self.test_subset = parse(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "metrics_csv" => self.metrics_csv = PathBuf::from(v),
            "preset" => self.apply_preset(v)?,
            other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key=value` line of `text` in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Format { path: path.to_path_buf(), msg: m },
            other => other,
        })
    }

    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn layered(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.batch_size == 0 || self.input_size == 0 {
            return Err(Error::config("classes, batch_size and input_size must be positive"));
        }
        if !(self.epsilon > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("epsilon must be positive and bn_momentum within [0, 1]"));
        }
        self.train().schedule.validate()
    }

    pub fn finet(&self) -> FinetConfig {
        FinetConfig {
            variant: self.variant,
            group_spec: self.group_spec,
            use_se: self.use_se,
            cifar_adapted: self.cifar_adapted,
            classes: self.classes,
            input_size: self.input_size,
            style: self.block_style,
            dropout: self.dropout,
            norm: NormHyper { affine: self.affine, epsilon: self.epsilon, momentum: self.bn_momentum },
            seed: self.seed,
            ..FinetConfig::imagenet(self.variant, self.group_spec, self.use_se)
        }
    }

    /// Training settings. `steps_per_epoch` only matters for linear decay,
    /// which needs the total number of optimizer steps.
    pub fn train_with_steps(&self, steps_per_epoch: usize) -> TrainConfig {
        let schedule = match self.schedule {
            ScheduleKind::Step => {
                Schedule::Step { lr0: self.lr, milestones: self.milestones.clone(), factor: self.lr_factor }
            }
            ScheduleKind::Linear => Schedule::Linear { lr0: self.lr, total_steps: self.epochs * steps_per_epoch },
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule,
            momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            augment: self.augment,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        self.train_with_steps(1)
    }
}

impl fmt::Display for RunConfig {
    /// Every key in canonical order; parsing the output reproduces `self`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let milestones: Vec<String> = self.milestones.iter().map(usize::to_string).collect();
        let schedule = match self.schedule {
            ScheduleKind::Step => "step",
            ScheduleKind::Linear => "linear",
        };
        let group = match self.group_spec {
            GroupSpec::FixedGroups(g) => format!("G={g}"),
            GroupSpec::ChannelsPerGroup(k) => format!("C/G={k}"),
        };
        writeln!(f, "variant={}", self.variant)?;
        writeln!(f, "group_spec={group}")?;
        writeln!(f, "use_se={}", self.use_se)?;
        writeln!(f, "cifar_adapted={}", self.cifar_adapted)?;
        writeln!(f, "affine={}", self.affine)?;
        writeln!(f, "epsilon={:?}", self.epsilon)?;
        writeln!(f, "bn_momentum={:?}", self.bn_momentum)?;
        writeln!(f, "block_style={}", self.block_style)?;
        writeln!(f, "classes={}", self.classes)?;
        writeln!(f, "input_size={}", self.input_size)?;
        writeln!(f, "dropout={:?}", self.dropout)?;
        writeln!(f, "lr={:?}", self.lr)?;
        writeln!(f, "schedule={schedule}")?;
        writeln!(f, "milestones={}", milestones.join(","))?;
        writeln!(f, "lr_factor={:?}", self.lr_factor)?;
        writeln!(f, "sgd_momentum={:?}", self.sgd_momentum)?;
        writeln!(f, "weight_decay={:?}", self.weight_decay)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "augment={}", self.augment)?;
        writeln!(f, "dataset={}", self.dataset)?;
        writeln!(f, "data_dir={}", self.data_dir.as_deref().map(|p| p.display().to_string()).unwrap_or_default())?;
        writeln!(f, "train_subset={}", self.train_subset)?;
        writeln!(f, "test_subset={}", self.test_subset)?;
        writeln!(f, "checkpoint={}", self.checkpoint.display())?;
        writeln!(f, "metrics_csv={}", self.metrics_csv.display())
    }
}
