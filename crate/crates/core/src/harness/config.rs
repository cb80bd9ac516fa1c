use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::forecast_decode::LossScope;
use crate::model::{FrameworkKind, ModelConfig};
use crate::numerics::OptimizerKind;
use crate::synthworld::WorldConfig;

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

macro_rules! config_fields {
    ($( $(#[$doc:meta])* $name:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of a run. Files hold one `key = value` per line.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[$doc])* pub $name: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $( $name: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => self.$name = parse_value(key, value)?, )*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($name), show(&self.$name)) ),*]
            }
        }
    };
}

fn show<T: Display>(v: &T) -> String {
    v.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Optimizer(pub OptimizerKind);

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer(OptimizerKind::Sgd)),
            "adam" => Ok(Optimizer(OptimizerKind::Adam)),
            "adamw" => Ok(Optimizer(OptimizerKind::AdamW)),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

config_fields! {
    seed: u64 = 0,
    framework: FrameworkKind = FrameworkKind::CiVsf,
    /// Output directory.
    out: String = "out".into(),
    /// Dataset container; empty means `<out>/data.civsf`.
    data: String = String::new(),
    /// Checkpoint to read; empty means `<out>/<framework>.ckpt`.
    checkpoint: String = String::new(),

    samples: usize = 200,
    image_size: usize = 32,
    days: usize = 365,
    start_doy: u16 = 1,
    regions: usize = 6,
    crop_classes: usize = 5,
    image_gap_min: u16 = 3,
    image_gap_max: u16 = 15,
    sigma: f64 = 0.01,

    patch: usize = 8,
    hidden: usize = 32,
    vit_depth: usize = 2,
    vit_heads: usize = 4,
    seq_depth: usize = 2,
    seq_heads: usize = 4,
    ffn_mult: usize = 2,

    context: usize = 6,
    mask_ratio: f64 = 0.5,
    weather_mask_ratio: f64 = 0.5,
    gap_min: u32 = 1,
    gap_max: u32 = 150,
    epochs_total: usize = 80,
    epochs_forecast: usize = 30,
    epochs_1a: usize = 15,
    epochs_1b: usize = 10,
    lr: f64 = 1e-3,
    weight_decay: f64 = 0.0,
    optimizer: Optimizer = Optimizer(OptimizerKind::Adam),
    batch_size: usize = 8,
    loss_scope: LossScope = LossScope::Full,
    k_step_weight: f64 = 1.0,
    /// Save a resumable checkpoint every this many epochs; 0 disables.
    checkpoint_every: usize = 0,
    split_train: f64 = 0.6,
    split_val: f64 = 0.2,

    head: String = "sm-forecast".into(),
    /// Fine-tuning epochs; 0 picks the head's default.
    ft_epochs: usize = 0,
    ft_lr: f64 = 1e-3,
    ft_weight_decay: f64 = 0.01,
    ft_instances: usize = 1,
    protocol: String = "in-region".into(),
    corruption: f64 = 50.0,
    crop_timestamps: usize = 10,

    bands: String = "B4,B3,B2".into(),
    gradcheck_threshold: f64 = 1e-4,
    gradcheck_seeds: usize = 10,
}

impl Config {
    /// Reads `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text: sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let mut entries = self.entries();
        entries.sort();
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text, hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 16 hex digits of [`Config::hash`].
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// `config_hash=… seed=…`, stamped on every artifact.
    pub fn provenance(&self) -> String {
        format!("config_hash={} seed={}", self.short_hash(), self.seed)
    }

    /// [`Config::provenance`] as a `#` comment line for text artifacts.
    pub fn provenance_line(&self) -> String {
        format!("# {}", self.provenance())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().encoder.validate()?;
        if self.seq_heads == 0 || !self.hidden.is_multiple_of(self.seq_heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} attention heads",
                self.hidden, self.seq_heads
            )));
        }
        for (k, r) in [
            ("mask_ratio", self.mask_ratio),
            ("weather_mask_ratio", self.weather_mask_ratio),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("`{k}` = {r} outside [0, 1)")));
            }
        }
        if self.context < 2 {
            return Err(Error::Config("`context` must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be positive".into()));
        }
        if self.gap_min == 0 || self.gap_max < self.gap_min {
            return Err(Error::Config(format!(
                "gap range [{}, {}] is empty or starts at 0",
                self.gap_min, self.gap_max
            )));
        }
        if !(self.lr > 0.0 && self.ft_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.corruption) {
            return Err(Error::Config(format!(
                "`corruption` = {} outside [0, 100]",
                self.corruption
            )));
        }
        crate::harness::report::parse_bands(&self.bands)?;
        self.world_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: self.image_size,
                patch: self.patch,
                hidden: self.hidden,
                vit_depth: self.vit_depth,
                vit_heads: self.vit_heads,
                ffn_mult: self.ffn_mult,
            },
            seq_depth: self.seq_depth,
            seq_heads: self.seq_heads,
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            size: self.image_size,
            days: self.days,
            start_doy: self.start_doy,
            regions: self.regions,
            crop_classes: self.crop_classes,
            gap_min: self.image_gap_min,
            gap_max: self.image_gap_max,
            sigma: self.sigma,
            ..WorldConfig::default()
        }
    }

    pub fn data_path(&self) -> std::path::PathBuf {
        if self.data.is_empty() {
            Path::new(&self.out).join("data.civsf")
        } else {
            self.data.clone().into()
        }
    }

    pub fn checkpoint_path(&self) -> std::path::PathBuf {
        if self.checkpoint.is_empty() {
            Path::new(&self.out).join(format!("{}.ckpt", self.framework))
        } else {
            self.checkpoint.clone().into()
        }
    }
}
