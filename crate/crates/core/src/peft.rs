//! Fine-tuning strategies as trainable-parameter masks, with analytic
//! parameter accounting.
//!
//! A strategy picks the block variant and prompt usage of the model it
//! fine-tunes, and induces the set of parameter names the optimizer may
//! touch. Accounting works on the analytic parameter inventory, so budget
//! reports for large configurations never allocate a model.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::transformer::{Model, ModelConfig, Variant};

/// Fine-tuning strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PeftStrategy {
    /// Update every parameter.
    Full,
    /// Update the task head only.
    Head,
    /// Update the later half of the blocks plus the head.
    Partial,
    /// Update per-layer prompt tokens plus the head.
    Prompt,
    /// Update the MLP adapters plus the head.
    AatM,
    /// Update the MLP and spatial adapters plus the head.
    AatMs,
    /// Union of the AatMs and Prompt sets.
    Joint,
}

impl PeftStrategy {
    /// All strategies, in the budget-table order.
    pub fn all() -> [PeftStrategy; 7] {
        [
            PeftStrategy::Full,
            PeftStrategy::Head,
            PeftStrategy::Partial,
            PeftStrategy::Prompt,
            PeftStrategy::AatM,
            PeftStrategy::AatMs,
            PeftStrategy::Joint,
        ]
    }

    /// Block wiring the strategy fine-tunes.
    pub fn required_variant(self) -> Variant {
        match self {
            PeftStrategy::AatM => Variant::AatM,
            PeftStrategy::AatMs | PeftStrategy::Joint => Variant::AatMs,
            _ => Variant::Vanilla,
        }
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, PeftStrategy::Prompt | PeftStrategy::Joint)
    }

    /// True when the strategy freezes the entire backbone and adds its own
    /// parameters (the strategies the `tune_backbone_ln` escape hatch
    /// applies to).
    fn freezes_backbone(self) -> bool {
        matches!(
            self,
            PeftStrategy::Prompt | PeftStrategy::AatM | PeftStrategy::AatMs | PeftStrategy::Joint
        )
    }
}

impl fmt::Display for PeftStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PeftStrategy::Full => "full",
            PeftStrategy::Head => "head",
            PeftStrategy::Partial => "partial",
            PeftStrategy::Prompt => "prompt",
            PeftStrategy::AatM => "aat-m",
            PeftStrategy::AatMs => "aat-ms",
            PeftStrategy::Joint => "joint",
        };
        f.write_str(s)
    }
}

impl FromStr for PeftStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PeftStrategy::Full),
            "head" => Ok(PeftStrategy::Head),
            "partial" => Ok(PeftStrategy::Partial),
            "prompt" => Ok(PeftStrategy::Prompt),
            "aat-m" => Ok(PeftStrategy::AatM),
            "aat-ms" => Ok(PeftStrategy::AatMs),
            "joint" => Ok(PeftStrategy::Joint),
            other => Err(Error::config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// One entry of the analytic parameter inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&v| v as u64).product()
    }
}

/// Derives the model configuration a strategy fine-tunes from a base
/// description: block variant from the strategy, prompts kept only when the
/// strategy uses them.
pub fn specialize_config(base: &ModelConfig, strategy: PeftStrategy) -> Result<ModelConfig> {
    if strategy.uses_prompts() && base.prompt_len == 0 {
        return Err(Error::config(format!(
            "strategy {strategy} requires prompt_len > 0"
        )));
    }
    let mut config = base.clone();
    config.variant = strategy.required_variant();
    config.prompt_len = if strategy.uses_prompts() {
        base.prompt_len
    } else {
        0
    };
    config.validate()?;
    Ok(config)
}

/// Full parameter inventory (names and shapes) of the model a configuration
/// describes, in the model's canonical order.
pub fn param_inventory(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.embed_dim;
    let pp = config.patch_size * config.patch_size;
    let hidden = config.mlp_ratio * d;
    let mut specs = vec![
        ParamSpec::new("patch_embed.weight", vec![pp, d]),
        ParamSpec::new("patch_embed.bias", vec![d]),
        ParamSpec::new("cls_token", vec![1, d]),
        ParamSpec::new("pos_embed", vec![config.seq_len(), d]),
    ];
    for i in 0..config.depth {
        let base = format!("blocks.{i}");
        specs.push(ParamSpec::new(format!("{base}.ln1.gamma"), vec![d]));
        specs.push(ParamSpec::new(format!("{base}.ln1.beta"), vec![d]));
        specs.push(ParamSpec::new(format!("{base}.qkv.weight"), vec![d, 3 * d]));
        specs.push(ParamSpec::new(format!("{base}.qkv.bias"), vec![3 * d]));
        specs.push(ParamSpec::new(format!("{base}.proj.weight"), vec![d, d]));
        specs.push(ParamSpec::new(format!("{base}.proj.bias"), vec![d]));
        specs.push(ParamSpec::new(format!("{base}.ln2.gamma"), vec![d]));
        specs.push(ParamSpec::new(format!("{base}.ln2.beta"), vec![d]));
        specs.push(ParamSpec::new(format!("{base}.mlp.w1"), vec![d, hidden]));
        specs.push(ParamSpec::new(format!("{base}.mlp.b1"), vec![hidden]));
        specs.push(ParamSpec::new(format!("{base}.mlp.w2"), vec![hidden, d]));
        specs.push(ParamSpec::new(format!("{base}.mlp.b2"), vec![d]));
        let mut adapter = |kind: &str| {
            specs.push(ParamSpec::new(
                format!("{base}.{kind}.w_down"),
                vec![d, config.adapter_dim],
            ));
            specs.push(ParamSpec::new(
                format!("{base}.{kind}.b_down"),
                vec![config.adapter_dim],
            ));
            specs.push(ParamSpec::new(
                format!("{base}.{kind}.w_up"),
                vec![config.adapter_dim, d],
            ));
            specs.push(ParamSpec::new(format!("{base}.{kind}.b_up"), vec![d]));
        };
        if config.variant.needs_mlp_adapter() {
            adapter("mlp_adapter");
        }
        if config.variant.needs_spatial_adapter() {
            adapter("spatial_adapter");
        }
    }
    specs.push(ParamSpec::new("head.ln.gamma", vec![d]));
    specs.push(ParamSpec::new("head.ln.beta", vec![d]));
    specs.push(ParamSpec::new("head.weight", vec![d, config.num_classes]));
    specs.push(ParamSpec::new("head.bias", vec![config.num_classes]));
    if config.prompt_len > 0 {
        for i in 0..config.depth {
            specs.push(ParamSpec::new(
                format!("prompts.{i}"),
                vec![config.prompt_len, d],
            ));
        }
    }
    specs
}

/// First block index of the "later half" trained by the partial strategy.
fn partial_start(depth: usize) -> usize {
    // the later ceil(L/2) blocks
    depth - depth.div_ceil(2)
}

fn block_index(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

/// Set of parameter names the strategy trains, for a model built from the
/// strategy-specialized configuration.
pub fn trainable_mask(base: &ModelConfig, strategy: PeftStrategy) -> Result<BTreeSet<String>> {
    let config = specialize_config(base, strategy)?;
    let inventory = param_inventory(&config);
    let start = partial_start(config.depth);
    let mut mask = BTreeSet::new();
    for spec in &inventory {
        let name = spec.name.as_str();
        let picked = match strategy {
            PeftStrategy::Full => true,
            PeftStrategy::Head => name.starts_with("head."),
            PeftStrategy::Partial => {
                name.starts_with("head.") || block_index(name).is_some_and(|i| i >= start)
            }
            PeftStrategy::Prompt => name.starts_with("head.") || name.starts_with("prompts."),
            PeftStrategy::AatM => name.starts_with("head.") || name.contains(".mlp_adapter."),
            PeftStrategy::AatMs => {
                name.starts_with("head.")
                    || name.contains(".mlp_adapter.")
                    || name.contains(".spatial_adapter.")
            }
            PeftStrategy::Joint => {
                name.starts_with("head.")
                    || name.starts_with("prompts.")
                    || name.contains(".mlp_adapter.")
                    || name.contains(".spatial_adapter.")
            }
        };
        let ln_escape = config.tune_backbone_ln
            && strategy.freezes_backbone()
            && (name.contains(".ln1.") || name.contains(".ln2."));
        if picked || ln_escape {
            mask.insert(spec.name.clone());
        }
    }
    Ok(mask)
}

/// Tuning/total parameter budget of one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub strategy: PeftStrategy,
    /// Parameters the strategy trains.
    pub tuning: u64,
    /// Backbone plus all added parameters (adapters, prompts) plus head.
    pub total: u64,
}

impl ParamReport {
    pub fn percentage(&self) -> f64 {
        100.0 * self.tuning as f64 / self.total as f64
    }

    pub fn csv_header() -> &'static str {
        "strategy,tuning_params,total_params,percentage"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4}",
            self.strategy,
            self.tuning,
            self.total,
            self.percentage()
        )
    }
}

/// Analytic parameter accounting for a strategy applied to a base
/// configuration. Pure arithmetic over the inventory; no tensors are built.
pub fn count_params(base: &ModelConfig, strategy: PeftStrategy) -> Result<ParamReport> {
    let config = specialize_config(base, strategy)?;
    let inventory = param_inventory(&config);
    let mask = trainable_mask(base, strategy)?;
    let total = inventory.iter().map(ParamSpec::numel).sum();
    let tuning = inventory
        .iter()
        .filter(|s| mask.contains(&s.name))
        .map(ParamSpec::numel)
        .sum();
    Ok(ParamReport {
        strategy,
        tuning,
        total,
    })
}

/// Sets `trainable` on exactly the masked parameters.
///
/// Every mask entry must name an existing parameter; re-applying the same
/// mask is idempotent.
pub fn apply_freeze<S: Scalar>(model: &mut Model<S>, mask: &BTreeSet<String>) -> Result<()> {
    let mut known = BTreeSet::new();
    model.visit_params(&mut |p| {
        known.insert(p.name.clone());
    });
    if let Some(unknown) = mask.iter().find(|name| !known.contains(*name)) {
        return Err(Error::config(format!(
            "freeze mask names unknown parameter '{unknown}'"
        )));
    }
    model.visit_params_mut(&mut |p| {
        p.trainable = mask.contains(&p.name);
    });
    Ok(())
}
