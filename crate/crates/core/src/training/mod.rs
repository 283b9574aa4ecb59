//! Adversarial training: losses, RMSProp and the critic/generator loop.

pub mod losses;
pub mod optim;
pub mod trainer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::model::{NoiseMode, UNetConfig};

pub use losses::{
    composite_hints, critic_input, critic_loss, critic_loss_grad, generator_loss, generator_loss_grad, l1_loss,
    l1_loss_grad, mask_loss, mask_loss_grad, GeneratorLoss,
};
pub use optim::RmsProp;
pub use trainer::{checkpoint_dir, train, LossRecord, TrainState, LOSSES_FILE};

/// Where the ground-truth hint pixels are pasted into the generator output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CompositeScope {
    /// Only the critic sees the composited output; L1 and mask terms see the raw output.
    #[default]
    CriticOnly,
    /// Every loss term sees the composited output.
    Everywhere,
}

impl fmt::Display for CompositeScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompositeScope::CriticOnly => "critic_only",
            CompositeScope::Everywhere => "everywhere",
        })
    }
}

impl FromStr for CompositeScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "critic_only" => Ok(CompositeScope::CriticOnly),
            "everywhere" => Ok(CompositeScope::Everywhere),
            other => Err(format!("unknown composite scope `{other}` (expected critic_only|everywhere)")),
        }
    }
}

/// Training hyperparameters plus the network shape knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_l1: f64,
    pub lambda_mask: f64,
    pub learning_rate: f64,
    pub clip_c: f64,
    pub critic_steps_per_gen: usize,
    pub batch_size: usize,
    /// Generator updates; each is preceded by `critic_steps_per_gen` critic updates.
    pub max_iterations: usize,
    pub seed: u64,
    pub noise_mode: NoiseMode,
    pub composite_scope: CompositeScope,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Random horizontal flips of whole pairs.
    pub augment: bool,
    /// `None` picks the deepest net the image size allows, up to 16.
    pub depth: Option<usize>,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub batch_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 100.0,
            lambda_mask: 100.0,
            learning_rate: 5e-5,
            clip_c: 0.01,
            critic_steps_per_gen: 5,
            batch_size: 1,
            max_iterations: 2000,
            seed: 0,
            noise_mode: NoiseMode::Off,
            composite_scope: CompositeScope::CriticOnly,
            checkpoint_every: 500,
            rmsprop_decay: 0.99,
            rmsprop_eps: 1e-8,
            augment: false,
            depth: None,
            base_channels: UNetConfig::DEFAULT_BASE_CHANNELS,
            leaky_slope: UNetConfig::DEFAULT_LEAKY_SLOPE,
            batch_norm: true,
        }
    }
}

/// Every config key with a one-line description, in display order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("lambda_l1", "weight of the L1 reconstruction term"),
    ("lambda_mask", "weight of the hint-mask term"),
    ("learning_rate", "RMSProp step size for both networks"),
    ("clip_c", "critic weight clipping bound"),
    ("critic_steps_per_gen", "critic updates per generator update"),
    ("batch_size", "pairs per batch"),
    ("max_iterations", "generator updates to run"),
    ("seed", "master seed for init, batching and noise"),
    ("noise_mode", "generator noise during training: off | dropout"),
    ("composite_scope", "hint compositing: critic_only | everywhere"),
    ("checkpoint_every", "iterations between checkpoints (0 = final only)"),
    ("rmsprop_decay", "RMSProp squared-gradient decay"),
    ("rmsprop_eps", "RMSProp denominator epsilon"),
    ("augment", "random horizontal flips: true | false"),
    ("depth", "U-Net layer count, or auto"),
    ("base_channels", "channels of the first encoder block"),
    ("leaky_slope", "leaky ReLU negative slope"),
    ("batch_norm", "batch normalization on inner blocks: true | false"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value `{value}` for `{key}`: {e}"))
}

impl TrainConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lambda_l1" => self.lambda_l1.to_string(),
            "lambda_mask" => self.lambda_mask.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "clip_c" => self.clip_c.to_string(),
            "critic_steps_per_gen" => self.critic_steps_per_gen.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_iterations" => self.max_iterations.to_string(),
            "seed" => self.seed.to_string(),
            "noise_mode" => self.noise_mode.to_string(),
            "composite_scope" => self.composite_scope.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "rmsprop_decay" => self.rmsprop_decay.to_string(),
            "rmsprop_eps" => self.rmsprop_eps.to_string(),
            "augment" => self.augment.to_string(),
            "depth" => self.depth.map_or("auto".into(), |d| d.to_string()),
            "base_channels" => self.base_channels.to_string(),
            "leaky_slope" => self.leaky_slope.to_string(),
            "batch_norm" => self.batch_norm.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "lambda_l1" => self.lambda_l1 = parse(key, value)?,
            "lambda_mask" => self.lambda_mask = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "clip_c" => self.clip_c = parse(key, value)?,
            "critic_steps_per_gen" => self.critic_steps_per_gen = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_iterations" => self.max_iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "noise_mode" => self.noise_mode = parse(key, value)?,
            "composite_scope" => self.composite_scope = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "rmsprop_decay" => self.rmsprop_decay = parse(key, value)?,
            "rmsprop_eps" => self.rmsprop_eps = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "depth" => {
                self.depth = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "base_channels" => self.base_channels = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "batch_norm" => self.batch_norm = parse(key, value)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    /// Applies every entry of a `key = value` file.
    pub fn apply_kv(&mut self, kv: &KvFile, origin: &Path) -> Result<()> {
        for (k, v, line) in &kv.entries {
            self.set(k, v).map_err(|reason| Error::Parse {
                path: origin.to_path_buf(),
                line: *line,
                reason,
            })?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        for (k, _) in CONFIG_KEYS {
            kv.push(*k, self.get(k).expect("listed key"));
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("lambda_l1", self.lambda_l1),
            ("lambda_mask", self.lambda_mask),
            ("learning_rate", self.learning_rate),
            ("clip_c", self.clip_c),
            ("rmsprop_eps", self.rmsprop_eps),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return bad(format!("rmsprop_decay must lie in [0, 1), got {}", self.rmsprop_decay));
        }
        if self.critic_steps_per_gen == 0 {
            return bad("critic_steps_per_gen must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// Generator architecture for square images of side `size`.
    pub fn generator_config(&self, size: usize) -> Result<UNetConfig> {
        let depth = self
            .depth
            .unwrap_or_else(|| UNetConfig::max_depth_for(size).min(UNetConfig::DEFAULT_DEPTH));
        let cfg = UNetConfig {
            base_channels: self.base_channels,
            leaky_slope: self.leaky_slope,
            norm: self.batch_norm,
            ..UNetConfig::generator(size, depth)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
