//! Flat JSON experiment configuration.
//!
//! Unknown keys are rejected so typos in sweep configs fail loudly.

use std::path::Path;

use serde::Deserialize;

use aat_core::data::{SyntheticTaskSpec, TaskKind};
use aat_core::peft::PeftStrategy;
use aat_core::transformer::{ModelConfig, Variant};

fn default_lr() -> f64 {
    1e-3
}

fn default_batch_size() -> usize {
    32
}

fn default_task_seed() -> u64 {
    1000
}

#[derive(Clone, Copy, Debug, Deserialize)]
pub enum TaskKindField {
    #[serde(rename = "single-label")]
    SingleLabel,
    #[serde(rename = "multi-label")]
    MultiLabel,
}

/// One experiment: a model, a synthetic task, and a strategy/seed sweep.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    // model
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub input_time: usize,
    pub input_freq: usize,
    pub num_classes: usize,
    pub adapter_dim: usize,
    pub prompt_len: usize,
    // task
    pub task_kind: TaskKindField,
    pub noise_sigma: f64,
    pub pattern_energy: f64,
    #[serde(default)]
    pub length_profile: Vec<usize>,
    #[serde(default = "default_task_seed")]
    pub task_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    // run
    pub strategies: Vec<String>,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| format!("invalid config: {e}"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.strategies.is_empty() {
            return Err("field 'strategies' must list at least one strategy".into());
        }
        if self.seeds.is_empty() {
            return Err("field 'seeds' must list at least one seed".into());
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err("fields 'n_train'/'n_test' must be positive".into());
        }
        self.parsed_strategies()?;
        self.model_config()
            .validate()
            .map_err(|e| format!("model section: {e}"))?;
        for &t in &self.length_profile {
            if t % self.patch_size != 0 {
                return Err(format!(
                    "field 'length_profile': length {t} is not divisible by patch_size {}",
                    self.patch_size
                ));
            }
        }
        Ok(())
    }

    pub fn parsed_strategies(&self) -> Result<Vec<PeftStrategy>, String> {
        self.strategies
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|e| format!("field 'strategies': {e}"))
            })
            .collect()
    }

    /// Base (vanilla) model description; strategies specialize it.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            embed_dim: self.embed_dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch_size,
            input_time: self.input_time,
            input_freq: self.input_freq,
            num_classes: self.num_classes,
            adapter_dim: self.adapter_dim,
            prompt_len: self.prompt_len,
            variant: Variant::Vanilla,
            layernorm_eps: 1e-6,
            tune_backbone_ln: false,
        }
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_classes: self.num_classes,
            grid: (self.input_time, self.input_freq),
            kind: match self.task_kind {
                TaskKindField::SingleLabel => TaskKind::SingleLabel,
                TaskKindField::MultiLabel => TaskKind::MultiLabel,
            },
            pattern_energy: self.pattern_energy,
            noise_sigma: self.noise_sigma,
            length_profile: self.length_profile.clone(),
            seed: self.task_seed,
        }
    }
}

/// Built-in model presets for `count --preset`.
pub fn preset(name: &str) -> Result<ModelConfig, String> {
    match name {
        "tiny" => Ok(ModelConfig::tiny()),
        "ast-base" => Ok(ModelConfig::ast_base()),
        other => Err(format!("unknown preset '{other}' (expected tiny or ast-base)")),
    }
}
