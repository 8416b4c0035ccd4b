//! Flat `key = value` configuration files.
//!
//! Lines starting with `#` and blank lines are ignored. Keys are namespaced
//! (`model.*`, `disc.*`, `train.*`, `infer.*`, `data.*`, `palette.*`); every
//! key is optional and unknown keys are rejected. [`Config::to_text`] writes
//! the full key set and is what checkpoints embed.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::ClassPalette;
use crate::error::{Error, Result};
use crate::infer::SlidingWindowConfig;
use crate::models::{DiscriminatorConfig, GtnetConfig};
use crate::train::TrainConfig;

/// Where training data comes from. An empty `dir` means a synthetic set
/// generated from the remaining fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataConfig {
    pub dir: String,
    pub images: usize,
    pub val: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: String::new(),
            images: 240,
            val: 40,
            size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: GtnetConfig,
    pub disc: DiscriminatorConfig,
    pub train: TrainConfig,
    pub infer: SlidingWindowConfig,
    pub data: DataConfig,
    pub palette: ClassPalette,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: GtnetConfig::default(),
            disc: DiscriminatorConfig::default(),
            train: TrainConfig::default(),
            infer: SlidingWindowConfig::default(),
            data: DataConfig::default(),
            palette: ClassPalette::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<V: Display>(xs: &[V]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_color(key: &str, value: &str) -> Result<[u8; 3]> {
    let parts: Vec<u8> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: color {value:?} needs three components")))
}

impl Config {
    /// Generator settings with the initialization seed taken from `train.seed`.
    pub fn generator_config(&self) -> GtnetConfig {
        GtnetConfig {
            seed: self.train.seed,
            ..self.model.clone()
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_channels: self.model.in_channels,
            num_classes: self.model.num_classes,
            seed: self.train.seed ^ 0x5eed_d15c,
            ..self.disc.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        self.palette.validate()?;
        if self.palette.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "palette has {} classes but model.num_classes = {}",
                self.palette.len(),
                self.model.num_classes
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses and validates a config file's text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", no + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, d, t, i, data) = (&mut self.model, &mut self.disc, &mut self.train, &mut self.infer, &mut self.data);
        match key {
            "model.in_channels" => m.in_channels = parse(key, v)?,
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.stage_widths" => m.stage_widths = parse_list(key, v)?,
            "model.stage_depths" => m.stage_depths = parse_list(key, v)?,
            "model.tokens_per_bucket" => m.tokens_per_bucket = parse(key, v)?,
            "model.input_size" => m.reference_size = parse(key, v)?,
            "model.ass_hidden" => m.ass_hidden = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.head_width" => m.head_width = parse(key, v)?,
            "disc.widths" => {
                d.widths = parse_list(key, v)?
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected four widths")))?
            }
            "disc.kernel" => d.kernel = parse(key, v)?,
            "disc.stride" => d.stride = parse(key, v)?,
            "disc.negative_slope" => d.negative_slope = parse(key, v)?,
            "train.lr" => t.optimizer.lr = parse(key, v)?,
            "train.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "train.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "train.eps" => t.optimizer.eps = parse(key, v)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.d_steps_per_g_step" => t.d_steps_per_g_step = parse(key, v)?,
            "train.mse_weight" => t.weights.mse = parse(key, v)?,
            "train.dice_weight" => t.weights.dice = parse(key, v)?,
            "train.adversarial_weight" => t.weights.adversarial = parse(key, v)?,
            "train.adversarial" => t.adversarial = parse(key, v)?,
            "train.augment" => t.augment = parse(key, v)?,
            "train.parallel" => t.parallel = parse(key, v)?,
            "infer.tile" => i.tile = parse(key, v)?,
            "infer.overlap" => i.overlap = parse(key, v)?,
            "infer.mode" => i.mode = parse(key, v)?,
            "infer.batch" => i.batch = parse(key, v)?,
            "data.dir" => data.dir = v.to_string(),
            "data.images" => data.images = parse(key, v)?,
            "data.val" => data.val = parse(key, v)?,
            "data.size" => data.size = parse(key, v)?,
            "data.seed" => data.seed = parse(key, v)?,
            "palette.names" => self.palette.names = v.split(',').map(|s| s.trim().to_string()).collect(),
            "palette.colors" => {
                self.palette.colors = v.split(';').map(|c| parse_color(key, c)).collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, d, t, i, data) = (&self.model, &self.disc, &self.train, &self.infer, &self.data);
        let colors = self
            .palette
            .colors
            .iter()
            .map(|c| join(c))
            .collect::<Vec<_>>()
            .join(";");
        vec![
            ("model.in_channels", m.in_channels.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.stage_widths", join(&m.stage_widths)),
            ("model.stage_depths", join(&m.stage_depths)),
            ("model.tokens_per_bucket", m.tokens_per_bucket.to_string()),
            ("model.input_size", m.reference_size.to_string()),
            ("model.ass_hidden", m.ass_hidden.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.head_width", m.head_width.to_string()),
            ("disc.widths", join(&d.widths)),
            ("disc.kernel", d.kernel.to_string()),
            ("disc.stride", d.stride.to_string()),
            ("disc.negative_slope", d.negative_slope.to_string()),
            ("train.lr", t.optimizer.lr.to_string()),
            ("train.beta1", t.optimizer.beta1.to_string()),
            ("train.beta2", t.optimizer.beta2.to_string()),
            ("train.eps", t.optimizer.eps.to_string()),
            ("train.weight_decay", t.optimizer.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.d_steps_per_g_step", t.d_steps_per_g_step.to_string()),
            ("train.mse_weight", t.weights.mse.to_string()),
            ("train.dice_weight", t.weights.dice.to_string()),
            ("train.adversarial_weight", t.weights.adversarial.to_string()),
            ("train.adversarial", t.adversarial.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.parallel", t.parallel.to_string()),
            ("infer.tile", i.tile.to_string()),
            ("infer.overlap", i.overlap.to_string()),
            ("infer.mode", i.mode.as_str().to_string()),
            ("infer.batch", i.batch.to_string()),
            ("data.dir", data.dir.clone()),
            ("data.images", data.images.to_string()),
            ("data.val", data.val.to_string()),
            ("data.size", data.size.to_string()),
            ("data.seed", data.seed.to_string()),
            ("palette.names", self.palette.names.join(",")),
            ("palette.colors", colors),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
