//! Run configuration.
//!
//! Configs are TOML with a fixed key set; unknown keys are rejected. The
//! top-level `bits = "W2A4"` shorthand expands into
//! `quant.weight_bits` / `quant.act_bits`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),

    #[error("invalid config: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Search group size: `"auto"` resolves to `max(1, channels / 10)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSize {
    Auto,
    Fixed(usize),
}

impl GroupSize {
    pub fn resolve(&self, channels: usize) -> usize {
        match self {
            GroupSize::Auto => (channels / 10).max(1),
            GroupSize::Fixed(k) => *k,
        }
    }
}

impl Serialize for GroupSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GroupSize::Auto => s.serialize_str("auto"),
            GroupSize::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for GroupSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) if k >= 1 => Ok(GroupSize::Fixed(k as usize)),
            Raw::Num(_) => Err(serde::de::Error::custom("group_size must be >= 1")),
            Raw::Text(s) if s == "auto" => Ok(GroupSize::Auto),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "group_size must be \"auto\" or an integer, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub emb_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            emb_dim: 16,
            init_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub points: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            points: 10_000,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_threshold: f64,
}

impl Default for FpTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 64,
            lr: 1e-3,
            seed: 100,
            loss_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub group_size: GroupSize,
    pub plus_fraction: f64,
    pub plant_outliers: bool,
    pub outlier_fraction: f64,
    pub outlier_sigmas: f64,
    pub outlier_seed: u64,
    pub calib_batch: usize,
    pub calib_samples: usize,
    pub calib_seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_bits: 2,
            act_bits: 4,
            group_size: GroupSize::Auto,
            plus_fraction: 0.0,
            plant_outliers: false,
            outlier_fraction: 0.1,
            outlier_sigmas: 8.0,
            outlier_seed: 55,
            calib_batch: 16,
            calib_samples: 64,
            calib_seed: 321,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub smooth_steps: usize,
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            smooth_steps: 1,
            lambda: 2.0,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub lora_rank: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 32,
            lr: 1e-3,
            seed: 200,
            lora_rank: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: usize,
    pub base_seed: u64,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            base_seed: 777,
            batch: 256,
        }
    }
}

/// Whole-run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Optional `"W<w>A<a>"` shorthand; expanded into the quant section on
    /// load and kept in sync on save.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<String>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub fp_train: FpTrainConfig,
    pub quant: QuantConfig,
    pub distill: DistillSection,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

fn parse_wa(label: &str) -> Option<(u8, u8)> {
    let rest = label.strip_prefix('W')?;
    let a_pos = rest.find('A')?;
    let w: u8 = rest[..a_pos].parse().ok()?;
    let a: u8 = rest[a_pos + 1..].parse().ok()?;
    Some((w, a))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        if let Some(label) = &cfg.bits {
            let (w, a) = parse_wa(label).ok_or_else(|| {
                ConfigError::Invalid(format!("bits shorthand {label:?} is not of the form WxAy"))
            })?;
            cfg.quant.weight_bits = w;
            cfg.quant.act_bits = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// `"W<w>A<a>"` label for reports.
    pub fn wa_label(&self) -> String {
        format!("W{}A{}", self.quant.weight_bits, self.quant.act_bits)
    }

    pub fn validate(&self) -> Result<()> {
        let q = &self.quant;
        if !(2..=15).contains(&q.weight_bits) {
            return Err(ConfigError::Invalid(format!(
                "weight_bits must be in [2, 15], got {}",
                q.weight_bits
            )));
        }
        if !(1..=16).contains(&q.act_bits) {
            return Err(ConfigError::Invalid(format!(
                "act_bits must be in [1, 16], got {}",
                q.act_bits
            )));
        }
        if !(0.0..=0.5).contains(&q.plus_fraction) {
            return Err(ConfigError::Invalid(
                "plus_fraction must be in [0, 0.5]".into(),
            ));
        }
        if let Some(label) = &self.bits {
            if parse_wa(label) != Some((q.weight_bits, q.act_bits)) {
                return Err(ConfigError::Invalid(format!(
                    "bits shorthand {label:?} disagrees with quant section"
                )));
            }
        }
        if self.schedule.steps == 0 {
            return Err(ConfigError::Invalid("schedule.steps must be >= 1".into()));
        }
        if self.distill.smooth_steps + 1 > self.schedule.steps {
            return Err(ConfigError::Invalid(
                "distill.smooth_steps does not fit into the schedule".into(),
            ));
        }
        if self.eval.seeds == 0 {
            return Err(ConfigError::Invalid("eval.seeds must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Fixed point: serialize(parse(serialize(x))) == serialize(x).
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn wa_shorthand_expands() {
        let cfg = RunConfig::from_toml_str("bits = \"W3A6\"\n").unwrap();
        assert_eq!(cfg.quant.weight_bits, 3);
        assert_eq!(cfg.quant.act_bits, 6);
        assert_eq!(cfg.wa_label(), "W3A6");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("frobnicate = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        let err = RunConfig::from_toml_str("[quant]\nnot_a_key = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn group_size_accepts_auto_and_integers() {
        let cfg = RunConfig::from_toml_str("[quant]\ngroup_size = \"auto\"\n").unwrap();
        assert_eq!(cfg.quant.group_size, GroupSize::Auto);
        assert_eq!(cfg.quant.group_size.resolve(64), 6);
        let cfg = RunConfig::from_toml_str("[quant]\ngroup_size = 4\n").unwrap();
        assert_eq!(cfg.quant.group_size, GroupSize::Fixed(4));
        assert!(RunConfig::from_toml_str("[quant]\ngroup_size = \"huge\"\n").is_err());
    }

    #[test]
    fn invalid_shorthand_rejected() {
        assert!(RunConfig::from_toml_str("bits = \"2W4A\"\n").is_err());
        assert!(RunConfig::from_toml_str("bits = \"W99A4\"\n").is_err());
    }

    #[test]
    fn bad_bit_widths_rejected() {
        assert!(RunConfig::from_toml_str("[quant]\nweight_bits = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[quant]\nact_bits = 17\n").is_err());
    }
}
