use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::objective::TemperatureState;

/// Environment variable that replaces `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "VARCON_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    VarCon,
    SupCon,
    InfoNce,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "cifar10" => Ok(Self::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected synthetic or cifar10)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "varcon" => Ok(Self::VarCon),
            "supcon" => Ok(Self::SupCon),
            "infonce" => Ok(Self::InfoNce),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected varcon, supcon or infonce)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::VarCon => "varcon",
            Self::SupCon => "supcon",
            Self::InfoNce => "infonce",
        })
    }
}

/// Everything a training run depends on. Serialized as flat `key = value`
/// lines; see [`RunConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub num_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub cifar_dir: Option<PathBuf>,
    pub cifar_train_limit: usize,
    pub cifar_val_limit: usize,
    pub val_fraction: f64,

    pub loss: LossKind,
    pub tau1: f64,
    pub epsilon_init: f64,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    /// The epsilon step uses `lr * epsilon_lr_scale`.
    pub epsilon_lr_scale: f64,
    pub leave_one_out: bool,

    /// Source samples per step; each contributes two views.
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub balanced_batches: bool,

    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,

    pub flip_prob: f64,
    pub crop_padding: usize,
    pub jitter_strength: f64,

    pub seed: u64,
    pub data_seed: u64,
    pub aug_seed: u64,

    pub knn_k: usize,
    pub output_dir: PathBuf,
    pub record_wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            num_classes: 5,
            per_class: 256,
            input_dim: 32,
            separation: 6.0,
            cifar_dir: None,
            cifar_train_limit: 5000,
            cifar_val_limit: 1000,
            val_fraction: 0.2,
            loss: LossKind::VarCon,
            tau1: 0.1,
            epsilon_init: 0.02,
            epsilon_min: 0.0,
            epsilon_max: 0.08,
            epsilon_lr_scale: 1.0,
            leave_one_out: false,
            batch_size: 128,
            epochs: 25,
            warmup_epochs: 2,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            balanced_batches: false,
            hidden_dims: vec![64],
            embed_dim: 16,
            flip_prob: 0.5,
            crop_padding: 4,
            jitter_strength: 0.2,
            seed: 0,
            data_seed: 0,
            aug_seed: 0,
            knn_k: 10,
            output_dir: PathBuf::from("runs/default"),
            record_wall_clock: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|d| parse(key, d.trim())).collect()
}

impl RunConfig {
    /// Every configuration key, in file order.
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "num_classes",
        "per_class",
        "input_dim",
        "separation",
        "cifar_dir",
        "cifar_train_limit",
        "cifar_val_limit",
        "val_fraction",
        "loss",
        "tau1",
        "epsilon_init",
        "epsilon_min",
        "epsilon_max",
        "epsilon_lr_scale",
        "leave_one_out",
        "batch_size",
        "epochs",
        "warmup_epochs",
        "base_lr",
        "momentum",
        "weight_decay",
        "balanced_batches",
        "hidden_dims",
        "embed_dim",
        "flip_prob",
        "crop_padding",
        "jitter_strength",
        "seed",
        "data_seed",
        "aug_seed",
        "knn_k",
        "output_dir",
        "record_wall_clock",
    ];

    /// Sets one field from its textual form. Dashes in `key` are read as
    /// underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "dataset" => self.dataset = value.parse()?,
            "num_classes" => self.num_classes = parse(k, value)?,
            "per_class" => self.per_class = parse(k, value)?,
            "input_dim" => self.input_dim = parse(k, value)?,
            "separation" => self.separation = parse(k, value)?,
            "cifar_dir" => {
                self.cifar_dir = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "cifar_train_limit" => self.cifar_train_limit = parse(k, value)?,
            "cifar_val_limit" => self.cifar_val_limit = parse(k, value)?,
            "val_fraction" => self.val_fraction = parse(k, value)?,
            "loss" => self.loss = value.parse()?,
            "tau1" => self.tau1 = parse(k, value)?,
            "epsilon_init" => self.epsilon_init = parse(k, value)?,
            "epsilon_min" => self.epsilon_min = parse(k, value)?,
            "epsilon_max" => self.epsilon_max = parse(k, value)?,
            "epsilon_lr_scale" => self.epsilon_lr_scale = parse(k, value)?,
            "leave_one_out" => self.leave_one_out = parse_bool(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(k, value)?,
            "base_lr" => self.base_lr = parse(k, value)?,
            "momentum" => self.momentum = parse(k, value)?,
            "weight_decay" => self.weight_decay = parse(k, value)?,
            "balanced_batches" => self.balanced_batches = parse_bool(k, value)?,
            "hidden_dims" => self.hidden_dims = parse_dims(k, value)?,
            "embed_dim" => self.embed_dim = parse(k, value)?,
            "flip_prob" => self.flip_prob = parse(k, value)?,
            "crop_padding" => self.crop_padding = parse(k, value)?,
            "jitter_strength" => self.jitter_strength = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "data_seed" => self.data_seed = parse(k, value)?,
            "aug_seed" => self.aug_seed = parse(k, value)?,
            "knn_k" => self.knn_k = parse(k, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "record_wall_clock" => self.record_wall_clock = parse_bool(k, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of `key` in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key.replace('-', "_").as_str() {
            "dataset" => self.dataset.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "per_class" => self.per_class.to_string(),
            "input_dim" => self.input_dim.to_string(),
            "separation" => self.separation.to_string(),
            "cifar_dir" => self
                .cifar_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "cifar_train_limit" => self.cifar_train_limit.to_string(),
            "cifar_val_limit" => self.cifar_val_limit.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "loss" => self.loss.to_string(),
            "tau1" => self.tau1.to_string(),
            "epsilon_init" => self.epsilon_init.to_string(),
            "epsilon_min" => self.epsilon_min.to_string(),
            "epsilon_max" => self.epsilon_max.to_string(),
            "epsilon_lr_scale" => self.epsilon_lr_scale.to_string(),
            "leave_one_out" => self.leave_one_out.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "balanced_batches" => self.balanced_batches.to_string(),
            "hidden_dims" => self
                .hidden_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "embed_dim" => self.embed_dim.to_string(),
            "flip_prob" => self.flip_prob.to_string(),
            "crop_padding" => self.crop_padding.to_string(),
            "jitter_strength" => self.jitter_strength.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "aug_seed" => self.aug_seed.to_string(),
            "knn_k" => self.knn_k.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "record_wall_clock" => self.record_wall_clock.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and text
    /// after `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (number, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got `{raw}`", number + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", number + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key in [`RunConfig::KEYS`] order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Replaces `output_dir` with the value of [`OUTPUT_DIR_ENV`] if it is
    /// set and non-empty.
    pub fn apply_env_overrides(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    /// Encoder layer widths from input to embedding.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.embed_dim))
            .collect()
    }

    pub fn augmentation(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            flip_prob: self.flip_prob,
            crop_padding: self.crop_padding,
            jitter_strength: self.jitter_strength,
            rng_seed: self.aug_seed,
        }
    }

    pub fn temperatures(&self) -> Result<TemperatureState> {
        TemperatureState::new(self.tau1, self.epsilon_init, self.epsilon_min, self.epsilon_max)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks ranges; returns warnings for settings that are legal but
    /// likely unintended.
    pub fn validate(&self) -> Result<Vec<String>> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.dataset == DatasetKind::Synthetic {
            if self.num_classes < 2 || self.per_class < 2 || self.input_dim == 0 {
                return fail("synthetic data needs num_classes >= 2, per_class >= 2, input_dim >= 1".into());
            }
            if !(self.separation >= 0.0 && self.separation.is_finite()) {
                return fail(format!("separation must be non-negative, got {}", self.separation));
            }
        }
        if self.dataset == DatasetKind::Cifar10 && self.cifar_dir.is_none() {
            return fail("dataset = cifar10 requires cifar_dir".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(self.tau1 > 0.0 && self.tau1.is_finite()) {
            return fail(format!("tau1 must be positive, got {}", self.tau1));
        }
        if self.loss == LossKind::VarCon {
            self.temperatures()?;
        }
        if self.batch_size == 0 || self.embed_dim == 0 || self.knn_k == 0 {
            return fail("batch_size, embed_dim and knn_k must be positive".into());
        }
        if self.hidden_dims.contains(&0) {
            return fail("hidden_dims entries must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return fail(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("epsilon_lr_scale", self.epsilon_lr_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        self.augmentation().validate()?;
        let mut warnings = Vec::new();
        let classes = match self.dataset {
            DatasetKind::Synthetic => self.num_classes,
            DatasetKind::Cifar10 => crate::data::CIFAR_CLASSES,
        };
        if self.batch_size < 2 * classes {
            warnings.push(format!(
                "batch_size {} is below twice the class count ({classes}); many classes will be missing per batch",
                self.batch_size
            ));
        }
        Ok(warnings)
    }
}
