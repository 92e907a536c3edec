//! Declarative architecture + connectivity + quantization description, and
//! the flat key/value config-file format.
//!
//! A config file is plain text, one `key = value` per line, `#` starts a
//! comment. Unknown keys are rejected so typos surface early. See
//! [`DUNetConfig::to_text`] for the full schema with defaults.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    Detection,
    Regression,
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Supervision::Detection => write!(f, "detection"),
            Supervision::Regression => write!(f, "regression"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Binary,
    BinaryAlpha,
    Ternary,
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightMode::Binary => write!(f, "binary"),
            WeightMode::BinaryAlpha => write!(f, "binary-alpha"),
            WeightMode::Ternary => write!(f, "ternary"),
        }
    }
}

/// Bit-width for a dataflow or weight group. `Full` is the 32-bit marker:
/// the group is left in full precision and no quantizer is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitWidth {
    Full,
    Bits(u32),
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Full => 32,
            BitWidth::Bits(b) => b,
        }
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, BitWidth::Bits(_))
    }

    fn parse(s: &str) -> Result<Self> {
        if s == "full" || s == "32" {
            return Ok(BitWidth::Full);
        }
        let b: u32 = s
            .parse()
            .map_err(|_| Error::Config(format!("invalid bit-width `{s}`")))?;
        if b == 0 || b > 32 {
            return Err(Error::Config(format!("bit-width must be in 1..=32, got {b}")));
        }
        Ok(BitWidth::Bits(b))
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BitWidth::Full => write!(f, "full"),
            BitWidth::Bits(b) => write!(f, "{b}"),
        }
    }
}

/// Bit-widths and quantizer choices for weights, inputs, and gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantScheme {
    pub bit_i: BitWidth,
    pub bit_w: BitWidth,
    pub bit_g: BitWidth,
    pub weight_mode: Option<WeightMode>,
    /// Leave the first (stem) and last (head) convolutions unquantized.
    pub skip_first_last: bool,
}

impl Default for QuantScheme {
    fn default() -> Self {
        QuantScheme {
            bit_i: BitWidth::Full,
            bit_w: BitWidth::Full,
            bit_g: BitWidth::Full,
            weight_mode: None,
            skip_first_last: true,
        }
    }
}

impl QuantScheme {
    pub fn full_precision(&self) -> bool {
        !self.bit_i.is_quantized() && !self.bit_w.is_quantized() && !self.bit_g.is_quantized()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bit_i.is_quantized() && self.bit_g.is_quantized() && self.bit_i != self.bit_g {
            return Err(Error::Config(format!(
                "gradients and inputs must share a bit-width when both are quantized (bit_i={}, bit_g={})",
                self.bit_i, self.bit_g
            )));
        }
        match (self.bit_w, self.weight_mode) {
            (BitWidth::Bits(b), Some(WeightMode::Binary) | Some(WeightMode::BinaryAlpha)) if b != 1 => {
                return Err(Error::Config(format!(
                    "binary weight modes require bit_w = 1, got {b}"
                )));
            }
            (BitWidth::Bits(b), Some(WeightMode::Ternary)) if b != 2 => {
                return Err(Error::Config(format!(
                    "ternary weights require bit_w = 2, got {b}"
                )));
            }
            (BitWidth::Bits(_), None) => {
                return Err(Error::Config(
                    "bit_w is quantized but weight_mode is not set".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Parse a compact scheme spec `bit_i/bit_w/bit_g[:weight_mode]`,
    /// e.g. `full/full/full`, `32/1/32:binary`, `8/2/8:ternary`.
    pub fn parse_compact(s: &str) -> Result<Self> {
        let (widths, mode) = match s.split_once(':') {
            Some((w, m)) => (w, Some(m)),
            None => (s, None),
        };
        let parts: Vec<&str> = widths.split('/').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "scheme `{s}` must be bit_i/bit_w/bit_g[:weight_mode]"
            )));
        }
        let bit_w = BitWidth::parse(parts[1])?;
        let weight_mode = match mode {
            Some(m) => Some(parse_weight_mode(m)?),
            None if bit_w.is_quantized() => Some(if bit_w.bits() == 2 {
                WeightMode::Ternary
            } else {
                WeightMode::Binary
            }),
            None => None,
        };
        let scheme = QuantScheme {
            bit_i: BitWidth::parse(parts[0])?,
            bit_w,
            bit_g: BitWidth::parse(parts[2])?,
            weight_mode,
            skip_first_last: true,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn label(&self) -> String {
        let mode = match self.weight_mode {
            Some(m) => format!(":{m}"),
            None => String::new(),
        };
        format!("{}/{}/{}{}", self.bit_i, self.bit_w, self.bit_g, mode)
    }
}

fn parse_weight_mode(s: &str) -> Result<WeightMode> {
    match s {
        "binary" => Ok(WeightMode::Binary),
        "binary-alpha" => Ok(WeightMode::BinaryAlpha),
        "ternary" => Ok(WeightMode::Ternary),
        _ => Err(Error::Config(format!(
            "weight_mode must be binary|binary-alpha|ternary, got `{s}`"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// 2.5e-4 decayed to 5e-5 after 100 epochs, 200 total.
    Pose,
    /// 2.5e-4 divided by 5, 2, 2 at epochs 30, 60, 90.
    Face,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Pose => write!(f, "pose"),
            Schedule::Face => write!(f, "face"),
        }
    }
}

/// Declarative description of a DU-Net experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DUNetConfig {
    /// Number of U-Nets (N).
    pub num_unets: usize,
    /// Top-down blocks per U-Net, mirrored bottom-up (L).
    pub levels: usize,
    /// Connectivity order K, 0 ≤ K ≤ N−1.
    pub order: usize,
    /// Maximum feature resolution after the stem (images are 4× this).
    pub input_resolution: usize,
    pub num_landmarks: usize,
    pub supervision: Supervision,
    /// Second-pass supervision; present iff `iterative`.
    pub supervision2: Option<Supervision>,
    pub iterative: bool,
    pub heatmap_sigma: f64,
    /// Stem output channels (Conv 7×7 stride 2 → this many features).
    pub stem_channels: usize,
    /// Bottleneck 1×1 compression width.
    pub compress_channels: usize,
    /// Bottleneck 3×3 growth width (new features per block).
    pub growth_channels: usize,
    /// Classic stacked baseline: replace the within-U-Net skip concat by
    /// summation and carry only block outputs between blocks.
    pub legacy_sum_skip: bool,
    pub quant: QuantScheme,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub base_lr: f64,
    pub epochs: usize,
    pub augment: bool,
    pub seed: u64,
    /// `synthetic` or a dataset directory path.
    pub dataset: String,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DUNetConfig {
    fn default() -> Self {
        DUNetConfig {
            num_unets: 4,
            levels: 4,
            order: 1,
            input_resolution: 64,
            num_landmarks: 16,
            supervision: Supervision::Detection,
            supervision2: None,
            iterative: false,
            heatmap_sigma: 1.0,
            stem_channels: 128,
            compress_channels: 128,
            growth_channels: 32,
            legacy_sum_skip: false,
            quant: QuantScheme::default(),
            batch_size: 16,
            schedule: Schedule::Pose,
            base_lr: 2.5e-4,
            epochs: 200,
            augment: true,
            seed: 0,
            dataset: "synthetic".into(),
            train_count: 500,
            val_count: 100,
        }
    }
}

impl DUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_unets == 0 {
            return Err(Error::Config("num_unets must be ≥ 1".into()));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be ≥ 1".into()));
        }
        if self.order + 1 > self.num_unets {
            return Err(Error::Config(format!(
                "order must satisfy 0 ≤ K ≤ N−1, got K={} with N={}",
                self.order, self.num_unets
            )));
        }
        let div = 1usize << self.levels;
        if self.input_resolution == 0 || self.input_resolution % div != 0 {
            return Err(Error::Config(format!(
                "input_resolution {} must be divisible by 2^levels = {div}",
                self.input_resolution
            )));
        }
        if self.num_landmarks == 0 {
            return Err(Error::Config("num_landmarks must be ≥ 1".into()));
        }
        if self.iterative != self.supervision2.is_some() {
            return Err(Error::Config(
                "supervision2 must be present exactly when iterative = true".into(),
            ));
        }
        if self.heatmap_sigma <= 0.0 {
            return Err(Error::Config("heatmap_sigma must be positive".into()));
        }
        if self.stem_channels == 0 || self.compress_channels == 0 || self.growth_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        self.quant.validate()
    }

    /// Image resolution expected by the stem (4× the feature resolution).
    pub fn image_resolution(&self) -> usize {
        self.input_resolution * 4
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = DUNetConfig::default();
        let mut weight_mode: Option<WeightMode> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: invalid {what} `{value}`", lineno + 1));
            match key {
                "num_unets" => cfg.num_unets = value.parse().map_err(|_| bad("integer"))?,
                "levels" => cfg.levels = value.parse().map_err(|_| bad("integer"))?,
                "order" => cfg.order = value.parse().map_err(|_| bad("integer"))?,
                "input_resolution" => {
                    cfg.input_resolution = value.parse().map_err(|_| bad("integer"))?
                }
                "num_landmarks" => cfg.num_landmarks = value.parse().map_err(|_| bad("integer"))?,
                "supervision" => cfg.supervision = parse_supervision(value)?,
                "supervision2" => {
                    cfg.supervision2 = if value == "none" {
                        None
                    } else {
                        Some(parse_supervision(value)?)
                    }
                }
                "iterative" => cfg.iterative = parse_bool(value).ok_or_else(|| bad("bool"))?,
                "heatmap_sigma" => cfg.heatmap_sigma = value.parse().map_err(|_| bad("number"))?,
                "stem_channels" => cfg.stem_channels = value.parse().map_err(|_| bad("integer"))?,
                "compress_channels" => {
                    cfg.compress_channels = value.parse().map_err(|_| bad("integer"))?
                }
                "growth_channels" => {
                    cfg.growth_channels = value.parse().map_err(|_| bad("integer"))?
                }
                "legacy_sum_skip" => {
                    cfg.legacy_sum_skip = parse_bool(value).ok_or_else(|| bad("bool"))?
                }
                "bit_i" => cfg.quant.bit_i = BitWidth::parse(value)?,
                "bit_w" => cfg.quant.bit_w = BitWidth::parse(value)?,
                "bit_g" => cfg.quant.bit_g = BitWidth::parse(value)?,
                "weight_mode" => {
                    weight_mode = if value == "none" {
                        None
                    } else {
                        Some(parse_weight_mode(value)?)
                    }
                }
                "skip_first_last" => {
                    cfg.quant.skip_first_last = parse_bool(value).ok_or_else(|| bad("bool"))?
                }
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
                "schedule" => {
                    cfg.schedule = match value {
                        "pose" => Schedule::Pose,
                        "face" => Schedule::Face,
                        _ => return Err(bad("schedule (pose|face)")),
                    }
                }
                "base_lr" => cfg.base_lr = value.parse().map_err(|_| bad("number"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("integer"))?,
                "augment" => cfg.augment = parse_bool(value).ok_or_else(|| bad("bool"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "dataset" => cfg.dataset = value.to_string(),
                "train_count" => cfg.train_count = value.parse().map_err(|_| bad("integer"))?,
                "val_count" => cfg.val_count = value.parse().map_err(|_| bad("integer"))?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
            }
        }
        if cfg.quant.bit_w.is_quantized() {
            cfg.quant.weight_mode = weight_mode.or(Some(if cfg.quant.bit_w.bits() == 2 {
                WeightMode::Ternary
            } else {
                WeightMode::Binary
            }));
        } else {
            cfg.quant.weight_mode = weight_mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Serialize as the flat key/value schema (round-trips through
    /// [`DUNetConfig::from_text`]).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("num_unets", self.num_unets.to_string());
        kv("levels", self.levels.to_string());
        kv("order", self.order.to_string());
        kv("input_resolution", self.input_resolution.to_string());
        kv("num_landmarks", self.num_landmarks.to_string());
        kv("supervision", self.supervision.to_string());
        kv(
            "supervision2",
            self.supervision2.map_or("none".into(), |v| v.to_string()),
        );
        kv("iterative", self.iterative.to_string());
        kv("heatmap_sigma", format!("{:?}", self.heatmap_sigma));
        kv("stem_channels", self.stem_channels.to_string());
        kv("compress_channels", self.compress_channels.to_string());
        kv("growth_channels", self.growth_channels.to_string());
        kv("legacy_sum_skip", self.legacy_sum_skip.to_string());
        kv("bit_i", self.quant.bit_i.to_string());
        kv("bit_w", self.quant.bit_w.to_string());
        kv("bit_g", self.quant.bit_g.to_string());
        kv(
            "weight_mode",
            self.quant.weight_mode.map_or("none".into(), |m| m.to_string()),
        );
        kv("skip_first_last", self.quant.skip_first_last.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("schedule", self.schedule.to_string());
        kv("base_lr", format!("{:?}", self.base_lr));
        kv("epochs", self.epochs.to_string());
        kv("augment", self.augment.to_string());
        kv("seed", self.seed.to_string());
        kv("dataset", self.dataset.clone());
        kv("train_count", self.train_count.to_string());
        kv("val_count", self.val_count.to_string());
        s
    }
}

fn parse_supervision(s: &str) -> Result<Supervision> {
    match s {
        "detection" => Ok(Supervision::Detection),
        "regression" => Ok(Supervision::Regression),
        _ => Err(Error::Config(format!(
            "supervision must be detection|regression, got `{s}`"
        ))),
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}
