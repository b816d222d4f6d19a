//! Run configuration, loaded from TOML.
//!
//! Every section has defaults, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::SizeObjectiveConfig;

pub const BITS_PER_MB: f64 = 8.0 * 1024.0 * 1024.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub schedule: SearchSchedule,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: defaults::seed(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            search: SearchConfig::default(),
            schedule: SearchSchedule::default(),
            objective: ObjectiveConfig::default(),
            optimizer: OptimizerConfig::default(),
            retrain: RetrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.t0 > 0.0) || !(s.eta > 0.0) {
            return Err(Error::Config("t0 and eta must be positive".into()));
        }
        if s.epochs == 0 || s.batch_size == 0 || s.block_steps == 0 {
            return Err(Error::Config("epochs, batch_size and block_steps must be positive".into()));
        }
        if s.weight_steps + s.arch_steps == 0 {
            return Err(Error::Config("alternation needs weight or arch steps".into()));
        }
        if s.scale_refresh_steps == 0 {
            return Err(Error::Config("scale_refresh_steps must be positive".into()));
        }
        let bits = &self.search.bits;
        if bits.len() < 2 {
            return Err(Error::Config(format!("need at least two candidate widths, got {bits:?}")));
        }
        if bits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("candidate widths must be strictly increasing, got {bits:?}")));
        }
        if bits.iter().any(|&b| b > crate::quant::FULL_PRECISION_BITS) {
            return Err(Error::Config(format!("candidate widths above 32 bits: {bits:?}")));
        }
        if self.search.warmup_bits == 0 {
            return Err(Error::Config("warmup precision must be at least 1 bit".into()));
        }
        if !(self.search.unroll_rate >= 0.0) {
            return Err(Error::Config("unroll_rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.objective.epsilon) || !(self.objective.lambda >= 0.0) {
            return Err(Error::Config("epsilon must lie in [0, 1] and lambda be non-negative".into()));
        }
        if self.data.n < 100 {
            return Err(Error::Config(format!("dataset needs at least 100 samples, got {}", self.data.n)));
        }
        Ok(())
    }

    /// Steps per temperature epoch; defaults to one pass over the
    /// training split.
    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        self.schedule
            .steps_per_epoch
            .unwrap_or_else(|| train_len.div_ceil(self.schedule.batch_size))
            .max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    pub input_dim: usize,
    pub classes: usize,
    /// 0 gives separable single-cluster classes; larger values give
    /// overlapping antipodal cluster pairs per class.
    pub difficulty: f64,
    pub cache: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 1000,
            input_dim: 16,
            classes: 2,
            difficulty: 0.0,
            cache: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        hidden: Vec<usize>,
        groups: usize,
    },
    Transformer {
        seq_len: usize,
        d_model: usize,
        heads: usize,
        ff_dim: usize,
        groups: usize,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp {
            hidden: vec![64, 64],
            groups: 8,
        }
    }
}

impl ModelConfig {
    pub fn groups(&self) -> usize {
        match self {
            ModelConfig::Mlp { groups, .. } | ModelConfig::Transformer { groups, .. } => *groups,
        }
    }

    pub fn set_groups(&mut self, g: usize) {
        match self {
            ModelConfig::Mlp { groups, .. } | ModelConfig::Transformer { groups, .. } => *groups = g,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchMode {
    FirstOrder,
    Unrolled,
}

impl std::str::FromStr for ArchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-order" => Ok(ArchMode::FirstOrder),
            "unrolled" => Ok(ArchMode::Unrolled),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub bits: Vec<u32>,
    pub mode: ArchMode,
    /// ξ, the step size of the virtual weight update in unrolled mode.
    pub unroll_rate: f64,
    /// Precision of groups whose architecture is still frozen.
    pub warmup_bits: u32,
    pub activation_bits: Option<u32>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            bits: vec![0, 1, 2, 3, 4],
            mode: ArchMode::FirstOrder,
            unroll_rate: 0.0,
            warmup_bits: 8,
            activation_bits: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSchedule {
    /// Initial Gumbel-softmax temperature.
    pub t0: f64,
    /// Temperature decay per epoch.
    pub eta: f64,
    /// Epochs at constant temperature before decay starts.
    pub n0: usize,
    /// Epochs before architecture updates are allowed.
    pub n1: usize,
    pub epochs: usize,
    pub steps_per_epoch: Option<usize>,
    pub warmup_steps: usize,
    pub block_steps: usize,
    pub weight_steps: usize,
    pub arch_steps: usize,
    pub scale_refresh_steps: usize,
    pub batch_size: usize,
}

impl Default for SearchSchedule {
    fn default() -> Self {
        SearchSchedule {
            t0: 1.0,
            eta: 4.0,
            n0: 0,
            n1: 0,
            epochs: 5,
            steps_per_epoch: None,
            warmup_steps: 1000,
            block_steps: 1000,
            weight_steps: 100,
            arch_steps: 100,
            scale_refresh_steps: 100,
            batch_size: 32,
        }
    }
}

/// Size target. Exactly one form is used, checked in the order
/// `target_bits`, `target_mb`, `target_fraction` (of the 32-bit size of
/// the searchable weights).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub target_bits: Option<f64>,
    pub target_mb: Option<f64>,
    pub target_fraction: Option<f64>,
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            target_bits: None,
            target_mb: None,
            target_fraction: Some(0.1),
            epsilon: 0.1,
            lambda: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn resolve(&self, full_precision_bits: u64) -> Result<SizeObjectiveConfig> {
        let target = if let Some(b) = self.target_bits {
            b
        } else if let Some(mb) = self.target_mb {
            mb * BITS_PER_MB
        } else if let Some(f) = self.target_fraction {
            f * full_precision_bits as f64
        } else {
            return Err(Error::Config("objective needs a size target".into()));
        };
        SizeObjectiveConfig::new(target, self.epsilon, self.lambda)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub weight_lr: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub arch_lr: f64,
    /// Global gradient-norm ceiling applied at both levels.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            weight_lr: 2e-5,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            arch_lr: 0.1,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    pub steps: usize,
    pub lr: Option<f64>,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig { steps: 1000, lr: None }
    }
}

mod defaults {
    pub fn seed() -> u64 {
        7
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 3
            [model]
            kind = "transformer"
            seq_len = 4
            d_model = 32
            heads = 4
            ff_dim = 64
            groups = 8
            [search]
            bits = [0, 2, 4]
            mode = "unrolled"
            [objective]
            target_bits = 1000.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.groups(), 8);
        assert_eq!(cfg.search.bits, vec![0, 2, 4]);
        assert_eq!(cfg.search.mode, ArchMode::Unrolled);
        assert_eq!(cfg.objective.resolve(1).unwrap().target_bits, 1000.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("sede = 3").is_err());
        assert!(RunConfig::from_toml_str("[schedule]\nwarmup = 3").is_err());
        assert!(RunConfig::from_toml_str("[model]\nkind = \"mlp\"\nhidden = [8]\ngroups = 2\nfoo = 1").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[search]\nbits = [2]").is_err());
        assert!(RunConfig::from_toml_str("[search]\nbits = [2, 1]").is_err());
        assert!(RunConfig::from_toml_str("[objective]\nepsilon = 1.5").is_err());
        assert!(RunConfig::from_toml_str("[schedule]\nt0 = 0.0").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
