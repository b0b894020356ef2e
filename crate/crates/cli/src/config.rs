//! Run configuration: a TOML file with a complete embedded default.
//! Every run log embeds its config, so a run is reproducible from its
//! header alone.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use auxweight_core::awa::AwaConfig;
use auxweight_core::baselines::{BaselineConstants, ReweighterKind};
use auxweight_core::data::MaskGroup;
use auxweight_core::losses::MainWeights;
use auxweight_core::tunable::AuxConfig;

/// How the tunable parameters start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxInit {
    Equal,
    Random,
}

/// Model optimizer selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for ModelOptConfig {
    fn default() -> Self {
        ModelOptConfig {
            kind: OptKind::AdamW,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Override for the fixed reweighter's constant weights (defaults to the
/// equal-initialization weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedWeightsConfig {
    pub omega_p: Vec<f64>,
    pub omega_s: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub reweighter: ReweighterKind,
    pub iters: u64,
    pub batch_size: usize,
    pub eval_pool: usize,
    pub mask_group: MaskGroup,
    pub out: PathBuf,
    pub log_wallclock: bool,
    pub main_loss: MainWeights,
    pub aux: AuxConfig,
    pub aux_init: AuxInit,
    pub awa: AwaConfig,
    pub model_opt: ModelOptConfig,
    pub baseline: BaselineConstants,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_weights: Option<FixedWeightsConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            reweighter: ReweighterKind::Awa,
            iters: 2000,
            batch_size: 8,
            eval_pool: 64,
            mask_group: MaskGroup::R10_20,
            out: PathBuf::from("run.jsonl"),
            log_wallclock: false,
            main_loss: MainWeights::default(),
            aux: AuxConfig::default(),
            aux_init: AuxInit::Equal,
            awa: AwaConfig::default(),
            model_opt: ModelOptConfig::default(),
            baseline: BaselineConstants::default(),
            fixed_weights: None,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError(format!("config parse error: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.eval_pool == 0 {
            return err("eval_pool must be positive".into());
        }
        if self.aux.terms != 3 {
            return err(format!(
                "training runs require aux.terms = 3 (the extractor has three taps), got {}",
                self.aux.terms
            ));
        }
        if let Err(e) = self.aux.validate() {
            return err(e.to_string());
        }
        if let Err(e) = self.awa.validate() {
            return err(e.to_string());
        }
        if self.model_opt.lr <= 0.0 {
            return err("model_opt.lr must be positive".into());
        }
        if self.main_loss.l1 < 0.0 || self.main_loss.tv < 0.0 {
            return err("main_loss weights must be non-negative".into());
        }
        if let Some(fw) = &self.fixed_weights {
            if fw.omega_p.len() != self.aux.terms || fw.omega_s.len() != self.aux.terms {
                return err("fixed_weights must list one weight per term".into());
            }
            if fw.omega_p.iter().any(|&w| w < 0.0) || fw.omega_s.iter().any(|&w| w < 0.0) {
                return err("fixed_weights must be non-negative".into());
            }
        }
        Ok(())
    }
}
