//! Run configuration and its `key = value` text form.
//!
//! The canonical text (`to_text`) lists every key in a fixed order; it is what
//! checkpoints embed and what the digest covers.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::matching::MatchingConfig;
use crate::objectives::LossWeights;
use crate::reasoning::ReasoningConfig;

/// Which blocks use the interactive transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Interactive matching, plain reasoning.
    B1,
    /// Plain matching, interactive reasoning.
    B2,
    /// Both blocks interactive.
    B3,
    /// Both interactive, plus the warped-mask loss in stage one.
    B4,
}

impl Ablation {
    pub fn interactive_matching(self) -> bool {
        !matches!(self, Ablation::B2)
    }

    pub fn interactive_reasoning(self) -> bool {
        !matches!(self, Ablation::B1)
    }

    pub fn mask_loss(self) -> bool {
        matches!(self, Ablation::B4)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "B1" => Ok(Ablation::B1),
            "B2" => Ok(Ablation::B2),
            "B3" => Ok(Ablation::B3),
            "B4" => Ok(Ablation::B4),
            other => Err(Error::Config(format!("unknown ablation {other:?} (expected B1..B4)"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    pub grid_k: usize,
    pub theta_max: f64,
    pub feature_channels: Vec<usize>,
    pub head_channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub temporal_kernel: usize,
    pub use_positional: bool,
    pub patch: usize,
    pub unet_channels: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_start: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation: Ablation,
    pub perceptual_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = MatchingConfig::default();
        let r = ReasoningConfig::default();
        TrainConfig {
            height: m.height,
            width: m.width,
            grid_k: m.grid_k,
            theta_max: m.theta_max,
            feature_channels: m.feature_channels,
            head_channels: m.head_channels,
            d_model: m.encoder.d_model,
            heads: m.encoder.heads,
            layers: m.encoder.layers,
            d_ff: m.encoder.d_ff,
            temporal_kernel: m.temporal_kernel,
            use_positional: m.encoder.use_positional,
            patch: r.patch,
            unet_channels: r.unet_channels,
            steps: 2000,
            batch_size: 4,
            lr: 1e-4,
            decay_start: 1000,
            weights: LossWeights::default(),
            seed: 0,
            ablation: Ablation::B3,
            perceptual_seed: 0x5eed,
        }
    }
}

/// Keys in canonical order.
pub const KEYS: &[&str] = &[
    "ablation",
    "height",
    "width",
    "grid_k",
    "theta_max",
    "feature_channels",
    "head_channels",
    "d_model",
    "heads",
    "layers",
    "d_ff",
    "temporal_kernel",
    "use_positional",
    "patch",
    "unet_channels",
    "steps",
    "batch_size",
    "lr",
    "decay_start",
    "lambda_l1",
    "lambda_perceptual",
    "lambda_mask",
    "lambda_reg",
    "lambda_mask_warp",
    "seed",
    "perceptual_seed",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Sets one key. Selecting B4 also sets its loss weights (reg and warped-mask at 1).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "ablation" => {
                self.ablation = value.parse()?;
                if self.ablation.mask_loss() {
                    let b4 = LossWeights::b4();
                    (w.reg, w.mask_warp) = (b4.reg, b4.mask_warp);
                } else {
                    w.mask_warp = 0.0;
                }
            }
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "grid_k" => self.grid_k = parse(key, value)?,
            "theta_max" => self.theta_max = parse(key, value)?,
            "feature_channels" => self.feature_channels = parse_list(key, value)?,
            "head_channels" => self.head_channels = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "temporal_kernel" => self.temporal_kernel = parse(key, value)?,
            "use_positional" => self.use_positional = parse_bool(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "unet_channels" => self.unet_channels = parse_list(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "decay_start" => self.decay_start = parse(key, value)?,
            "lambda_l1" => w.l1 = parse(key, value)?,
            "lambda_perceptual" => w.perceptual = parse(key, value)?,
            "lambda_mask" => w.mask = parse(key, value)?,
            "lambda_reg" => w.reg = parse(key, value)?,
            "lambda_mask_warp" => w.mask_warp = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "perceptual_seed" => self.perceptual_seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies pairs on top of the defaults; `ablation` goes first so explicit weights win.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "ablation") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "ablation") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            out.push((k.to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = Self::parse_pairs(text)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let w = &self.weights;
        Some(match key {
            "ablation" => self.ablation.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "grid_k" => self.grid_k.to_string(),
            "theta_max" => self.theta_max.to_string(),
            "feature_channels" => join(&self.feature_channels),
            "head_channels" => self.head_channels.to_string(),
            "d_model" => self.d_model.to_string(),
            "heads" => self.heads.to_string(),
            "layers" => self.layers.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "temporal_kernel" => self.temporal_kernel.to_string(),
            "use_positional" => self.use_positional.to_string(),
            "patch" => self.patch.to_string(),
            "unet_channels" => join(&self.unet_channels),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "decay_start" => self.decay_start.to_string(),
            "lambda_l1" => w.l1.to_string(),
            "lambda_perceptual" => w.perceptual.to_string(),
            "lambda_mask" => w.mask.to_string(),
            "lambda_reg" => w.reg.to_string(),
            "lambda_mask_warp" => w.mask_warp.to_string(),
            "seed" => self.seed.to_string(),
            "perceptual_seed" => self.perceptual_seed.to_string(),
            _ => return None,
        })
    }

    /// Every key in canonical order; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            use_positional: self.use_positional,
        }
    }

    pub fn matching(&self) -> MatchingConfig {
        MatchingConfig {
            height: self.height,
            width: self.width,
            feature_channels: self.feature_channels.clone(),
            encoder: self.encoder(),
            temporal_kernel: self.temporal_kernel,
            grid_k: self.grid_k,
            theta_max: self.theta_max,
            head_channels: self.head_channels,
            interactive: self.ablation.interactive_matching(),
            ..MatchingConfig::default()
        }
    }

    pub fn reasoning(&self) -> ReasoningConfig {
        ReasoningConfig {
            height: self.height,
            width: self.width,
            patch: self.patch,
            encoder: self.encoder(),
            temporal_kernel: self.temporal_kernel,
            unet_channels: self.unet_channels.clone(),
            interactive: self.ablation.interactive_reasoning(),
            ..ReasoningConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.matching().validate().map_err(wrap)?;
        self.reasoning().validate().map_err(wrap)?;
        self.weights.validate().map_err(wrap)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}
