//! Pre-norm audio spectrogram transformer with adapter-aware block variants.
//!
//! The vanilla block computes
//!
//! ```text
//! x' = x + MHSA(LN1(x))
//! out = x' + MLP(LN2(x'))
//! ```
//!
//! The adapted variants keep the backbone weights untouched and splice in
//! bottleneck adapters:
//!
//! ```text
//! aat-m:  out = x' + MLP_Adapter(LN2(x')) + MLP(LN2(x'))
//! aat-ms: xs  = x + Spatial_Adapter(MHSA(LN1(x)))
//!         out = xs + MLP_Adapter(LN2(xs)) + MLP(LN2(xs))
//! ```
//!
//! where the spatial adapter carries its own internal shortcut and the MLP
//! adapter does not. With freshly zero-initialized adapters every variant
//! computes exactly the vanilla function.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::adapters::{prompt_inject, prompt_strip, Adapter, BoundAdapter, PromptBank};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{cast, Scalar};
use crate::tape::{Bindings, RowMixWeights, Tape, Var};
use crate::tensor::{Param, Tensor};

/// Block wiring variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Vanilla,
    /// MLP adapter in parallel with each block's MLP.
    AatM,
    /// MLP adapter plus a shortcut adapter on each attention output.
    AatMs,
}

impl Variant {
    pub fn needs_mlp_adapter(self) -> bool {
        matches!(self, Variant::AatM | Variant::AatMs)
    }

    pub fn needs_spatial_adapter(self) -> bool {
        matches!(self, Variant::AatMs)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Vanilla => "vanilla",
            Variant::AatM => "aat-m",
            Variant::AatMs => "aat-ms",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "aat-m" => Ok(Variant::AatM),
            "aat-ms" => Ok(Variant::AatMs),
            other => Err(Error::config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Full architectural description of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of transformer blocks (L).
    pub depth: usize,
    /// Token width (d).
    pub embed_dim: usize,
    /// Attention heads (h); must divide `embed_dim`.
    pub heads: usize,
    /// MLP hidden width multiplier (hidden = ratio * d).
    pub mlp_ratio: usize,
    /// Side length of the square spectrogram patches (P).
    pub patch_size: usize,
    /// Time frames of the reference input grid (T).
    pub input_time: usize,
    /// Frequency bins of the reference input grid (F).
    pub input_freq: usize,
    /// Classifier output width (C).
    pub num_classes: usize,
    /// Adapter bottleneck width.
    pub adapter_dim: usize,
    /// Prompt tokens per block (0 disables the prompt bank).
    pub prompt_len: usize,
    pub variant: Variant,
    pub layernorm_eps: f64,
    /// When true, fine-tuning strategies that freeze the backbone still
    /// train the block LayerNorm affine parameters.
    pub tune_backbone_ln: bool,
}

impl ModelConfig {
    /// Two-block toy model used throughout the test suites.
    pub fn tiny() -> Self {
        ModelConfig {
            depth: 2,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 2,
            input_time: 8,
            input_freq: 8,
            num_classes: 3,
            adapter_dim: 2,
            prompt_len: 2,
            variant: Variant::Vanilla,
            layernorm_eps: 1e-6,
            tune_backbone_ln: false,
        }
    }

    /// Base-scale configuration used for parameter accounting only.
    pub fn ast_base() -> Self {
        ModelConfig {
            depth: 12,
            embed_dim: 768,
            heads: 12,
            mlp_ratio: 4,
            patch_size: 16,
            input_time: 1024,
            input_freq: 128,
            num_classes: 50,
            adapter_dim: 192,
            prompt_len: 12,
            variant: Variant::Vanilla,
            layernorm_eps: 1e-6,
            tune_backbone_ln: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(v: usize, what: &str) -> Result<()> {
            if v == 0 {
                return Err(Error::config(format!("{what} must be positive")));
            }
            Ok(())
        }
        positive(self.depth, "depth")?;
        positive(self.embed_dim, "embed_dim")?;
        positive(self.heads, "heads")?;
        positive(self.mlp_ratio, "mlp_ratio")?;
        positive(self.patch_size, "patch_size")?;
        positive(self.input_time, "input_time")?;
        positive(self.input_freq, "input_freq")?;
        positive(self.num_classes, "num_classes")?;
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.input_time % self.patch_size != 0 || self.input_freq % self.patch_size != 0 {
            return Err(Error::config(format!(
                "patch_size {} must divide input grid {}x{}",
                self.patch_size, self.input_time, self.input_freq
            )));
        }
        if self.variant.needs_mlp_adapter()
            && (self.adapter_dim == 0 || self.adapter_dim >= self.embed_dim)
        {
            return Err(Error::config(format!(
                "adapter_dim must satisfy 0 < {} < {} for variant {}",
                self.adapter_dim, self.embed_dim, self.variant
            )));
        }
        Ok(())
    }

    /// Patch grid of the reference input, time-major: `(T/P, F/P)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.input_time / self.patch_size,
            self.input_freq / self.patch_size,
        )
    }

    /// Number of spectrogram tokens N = (T/P) * (F/P).
    pub fn num_patches(&self) -> usize {
        let (t, f) = self.grid();
        t * f
    }

    /// Token sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }
}

/// Linear projection of flattened patches into token space.
#[derive(Clone, Debug)]
pub struct PatchEmbed<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

/// Class token and learned positional table for the reference grid.
#[derive(Clone, Debug)]
pub struct PositionalState<S> {
    pub cls_token: Param<S>,
    /// Row 0 belongs to the class position; rows 1.. cover the patch grid.
    pub pos_embed: Param<S>,
}

/// One pre-norm block, with optional adapters.
#[derive(Clone, Debug)]
pub struct TransformerBlock<S> {
    pub ln1_gamma: Param<S>,
    pub ln1_beta: Param<S>,
    pub qkv_weight: Param<S>,
    pub qkv_bias: Param<S>,
    pub proj_weight: Param<S>,
    pub proj_bias: Param<S>,
    pub ln2_gamma: Param<S>,
    pub ln2_beta: Param<S>,
    pub mlp_w1: Param<S>,
    pub mlp_b1: Param<S>,
    pub mlp_w2: Param<S>,
    pub mlp_b2: Param<S>,
    pub mlp_adapter: Option<Adapter<S>>,
    pub spatial_adapter: Option<Adapter<S>>,
}

/// LayerNorm plus linear classifier over the class token.
#[derive(Clone, Debug)]
pub struct TaskHead<S> {
    pub ln_gamma: Param<S>,
    pub ln_beta: Param<S>,
    pub weight: Param<S>,
    pub bias: Param<S>,
}

/// The assembled model.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub patch_embed: PatchEmbed<S>,
    pub positional: PositionalState<S>,
    pub blocks: Vec<TransformerBlock<S>>,
    pub head: TaskHead<S>,
    /// Present when `config.prompt_len > 0`.
    pub prompts: Option<PromptBank<S>>,
}

impl<S: Scalar> TransformerBlock<S> {
    fn init(prefix: &str, config: &ModelConfig, seed: u64) -> Result<Self> {
        let d = config.embed_dim;
        let hidden = config.mlp_ratio * d;
        let name = |field: &str| format!("{prefix}.{field}");
        let xavier = |field: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize| {
            let full = name(field);
            let mut stream = rng::stream(seed, &full);
            Param::new(full, rng::xavier_tensor(&mut stream, shape, fan_in, fan_out))
        };
        let ones = |field: &str, len: usize| Param::new(name(field), Tensor::full(vec![len], S::one()));
        let zeros = |field: &str, len: usize| Param::new(name(field), Tensor::zeros(vec![len]));

        let mlp_adapter = if config.variant.needs_mlp_adapter() {
            Some(Adapter::init(
                &name("mlp_adapter"),
                d,
                config.adapter_dim,
                false,
                seed,
            )?)
        } else {
            None
        };
        let spatial_adapter = if config.variant.needs_spatial_adapter() {
            Some(Adapter::init(
                &name("spatial_adapter"),
                d,
                config.adapter_dim,
                true,
                seed,
            )?)
        } else {
            None
        };
        Ok(TransformerBlock {
            ln1_gamma: ones("ln1.gamma", d),
            ln1_beta: zeros("ln1.beta", d),
            qkv_weight: xavier("qkv.weight", vec![d, 3 * d], d, 3 * d),
            qkv_bias: zeros("qkv.bias", 3 * d),
            proj_weight: xavier("proj.weight", vec![d, d], d, d),
            proj_bias: zeros("proj.bias", d),
            ln2_gamma: ones("ln2.gamma", d),
            ln2_beta: zeros("ln2.beta", d),
            mlp_w1: xavier("mlp.w1", vec![d, hidden], d, hidden),
            mlp_b1: zeros("mlp.b1", hidden),
            mlp_w2: xavier("mlp.w2", vec![hidden, d], hidden, d),
            mlp_b2: zeros("mlp.b2", d),
            mlp_adapter,
            spatial_adapter,
        })
    }

    pub fn bind(&self, tape: &mut Tape<S>, reg: &mut Bindings, heads: usize, eps: S) -> BoundBlock<S> {
        BoundBlock {
            ln1_gamma: tape.bind(&self.ln1_gamma, reg),
            ln1_beta: tape.bind(&self.ln1_beta, reg),
            qkv_weight: tape.bind(&self.qkv_weight, reg),
            qkv_bias: tape.bind(&self.qkv_bias, reg),
            proj_weight: tape.bind(&self.proj_weight, reg),
            proj_bias: tape.bind(&self.proj_bias, reg),
            ln2_gamma: tape.bind(&self.ln2_gamma, reg),
            ln2_beta: tape.bind(&self.ln2_beta, reg),
            mlp_w1: tape.bind(&self.mlp_w1, reg),
            mlp_b1: tape.bind(&self.mlp_b1, reg),
            mlp_w2: tape.bind(&self.mlp_w2, reg),
            mlp_b2: tape.bind(&self.mlp_b2, reg),
            mlp_adapter: self.mlp_adapter.as_ref().map(|a| a.bind(tape, reg)),
            spatial_adapter: self.spatial_adapter.as_ref().map(|a| a.bind(tape, reg)),
            heads,
            eps,
        }
    }

    /// One-off forward for a standalone block.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        heads: usize,
        eps: S,
        variant: Variant,
    ) -> Result<Var> {
        let mut reg = Bindings::new();
        let bound = self.bind(tape, &mut reg, heads, eps);
        bound.forward(tape, x, variant)
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Param<S>)) {
        for p in [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.qkv_weight,
            &self.qkv_bias,
            &self.proj_weight,
            &self.proj_bias,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ] {
            f(p);
        }
        if let Some(a) = &self.mlp_adapter {
            for p in a.params() {
                f(p);
            }
        }
        if let Some(a) = &self.spatial_adapter {
            for p in a.params() {
                f(p);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Param<S>)) {
        for p in [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ] {
            f(p);
        }
        if let Some(a) = &mut self.mlp_adapter {
            for p in a.params_mut() {
                f(p);
            }
        }
        if let Some(a) = &mut self.spatial_adapter {
            for p in a.params_mut() {
                f(p);
            }
        }
    }
}

/// Tape handles for one block within a forward pass.
pub struct BoundBlock<S> {
    ln1_gamma: Var,
    ln1_beta: Var,
    qkv_weight: Var,
    qkv_bias: Var,
    proj_weight: Var,
    proj_bias: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
    pub mlp_adapter: Option<BoundAdapter>,
    pub spatial_adapter: Option<BoundAdapter>,
    heads: usize,
    eps: S,
}

impl<S: Scalar> BoundBlock<S> {
    /// `MHSA(LN1(x))` without the residual; residual composition differs
    /// between the vanilla and adapted paths.
    pub fn mhsa(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        self.mhsa_attn(tape, x).map(|(out, _)| out)
    }

    /// As [`Self::mhsa`], also returning the per-head attention matrices.
    pub fn mhsa_attn(&self, tape: &mut Tape<S>, x: Var) -> Result<(Var, Vec<Var>)> {
        let seq = tape.shape(x)[0];
        if seq == 0 {
            return Err(Error::dim("mhsa: empty sequence".to_string()));
        }
        let d = tape.shape(self.qkv_weight)[0];
        let dh = d / self.heads;
        let scale = cast::<S>(1.0 / (dh as f64).sqrt());

        let normed = tape.layernorm(x, self.ln1_gamma, self.ln1_beta, self.eps)?;
        let qkv = tape.matmul(normed, self.qkv_weight)?;
        let qkv = tape.add_row(qkv, self.qkv_bias)?;
        let q = tape.slice(qkv, 1, 0, d)?;
        let k = tape.slice(qkv, 1, d, d)?;
        let v = tape.slice(qkv, 1, 2 * d, d)?;

        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut attn_maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            attn_maps.push(attn);
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(&head_outputs, 1)?;
        let out = tape.matmul(merged, self.proj_weight)?;
        let out = tape.add_row(out, self.proj_bias)?;
        Ok((out, attn_maps))
    }

    /// `MLP(ln2)` where `ln2` is the already-normalized block input.
    pub fn mlp_core(&self, tape: &mut Tape<S>, ln2: Var) -> Result<Var> {
        let h = tape.matmul(ln2, self.mlp_w1)?;
        let h = tape.add_row(h, self.mlp_b1)?;
        let h = tape.gelu(h);
        let out = tape.matmul(h, self.mlp_w2)?;
        tape.add_row(out, self.mlp_b2)
    }

    /// LayerNorm ahead of the MLP branch.
    pub fn ln2(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        tape.layernorm(x, self.ln2_gamma, self.ln2_beta, self.eps)
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var, variant: Variant) -> Result<Var> {
        self.forward_attn(tape, x, variant).map(|(out, _)| out)
    }

    /// Block forward that also returns the attention matrices.
    pub fn forward_attn(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        variant: Variant,
    ) -> Result<(Var, Vec<Var>)> {
        if variant.needs_mlp_adapter() && self.mlp_adapter.is_none() {
            return Err(Error::config(format!("variant {variant} needs an MLP adapter")));
        }
        if variant.needs_spatial_adapter() && self.spatial_adapter.is_none() {
            return Err(Error::config(format!(
                "variant {variant} needs a spatial adapter"
            )));
        }
        let (attn_out, attn_maps) = self.mhsa_attn(tape, x)?;
        let attn_res = match variant {
            Variant::AatMs => {
                let adapter = self.spatial_adapter.as_ref().unwrap();
                adapter.forward(tape, attn_out)?
            }
            _ => attn_out,
        };
        let xs = tape.add(x, attn_res)?;
        let ln2 = self.ln2(tape, xs)?;
        let mlp = self.mlp_core(tape, ln2)?;
        let out = match variant {
            Variant::Vanilla => tape.add(xs, mlp)?,
            Variant::AatM | Variant::AatMs => {
                let adapter = self.mlp_adapter.as_ref().unwrap();
                let task = adapter.forward(tape, ln2)?;
                let partial = tape.add(xs, task)?;
                tape.add(partial, mlp)?
            }
        };
        Ok((out, attn_maps))
    }
}

/// Tape handles for a whole model within one forward pass.
pub struct BoundModel<S> {
    pub config: ModelConfig,
    patch_weight: Var,
    patch_bias: Var,
    cls_token: Var,
    pos_embed: Var,
    pub blocks: Vec<BoundBlock<S>>,
    head_ln_gamma: Var,
    head_ln_beta: Var,
    head_weight: Var,
    head_bias: Var,
    prompts: Option<Vec<Var>>,
}

/// Shape bookkeeping collected by an instrumented forward pass.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    /// Sequence rows at each block boundary (before prompt injection).
    pub boundary_lens: Vec<usize>,
    /// Sequence rows inside each block (after prompt injection).
    pub in_block_lens: Vec<usize>,
    /// Activation at each block boundary, before prompt injection.
    pub boundary_vars: Vec<Var>,
    /// Attention matrices of every head of every block, in forward order.
    pub attn_vars: Vec<Var>,
}

impl<S: Scalar> Model<S> {
    /// Builds and initializes a model from its configuration.
    ///
    /// All backbone weights are Xavier-uniform, biases zero, LayerNorm
    /// affine at identity; every parameter's stream is keyed by `(seed,
    /// name)`, so the backbone is identical across variants built from the
    /// same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let pp = config.patch_size * config.patch_size;
        let xavier = |name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize| {
            let mut stream = rng::stream(seed, name);
            Param::new(name, rng::xavier_tensor(&mut stream, shape, fan_in, fan_out))
        };
        // Positional rows and the class token start at a scale comparable to
        // projected patch content; a frozen random encoder only sees token
        // positions through these rows, so they cannot start near zero.
        let embedding = |name: &str, shape: Vec<usize>| {
            let mut stream = rng::stream(seed, name);
            Param::new(name, rng::uniform_tensor(&mut stream, shape, 2.0))
        };
        let patch_embed = PatchEmbed {
            weight: xavier("patch_embed.weight", vec![pp, d], pp, d),
            bias: Param::new("patch_embed.bias", Tensor::zeros(vec![d])),
        };
        let positional = PositionalState {
            cls_token: embedding("cls_token", vec![1, d]),
            pos_embed: embedding("pos_embed", vec![config.seq_len(), d]),
        };
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::init(&format!("blocks.{i}"), &config, seed))
            .collect::<Result<Vec<_>>>()?;
        let head = TaskHead {
            ln_gamma: Param::new("head.ln.gamma", Tensor::full(vec![d], S::one())),
            ln_beta: Param::new("head.ln.beta", Tensor::zeros(vec![d])),
            weight: xavier("head.weight", vec![d, config.num_classes], d, config.num_classes),
            bias: Param::new("head.bias", Tensor::zeros(vec![config.num_classes])),
        };
        let prompts = if config.prompt_len > 0 {
            Some(PromptBank::init(config.depth, config.prompt_len, d, seed))
        } else {
            None
        };
        Ok(Model {
            config,
            patch_embed,
            positional,
            blocks,
            head,
            prompts,
        })
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Param<S>)) {
        f(&self.patch_embed.weight);
        f(&self.patch_embed.bias);
        f(&self.positional.cls_token);
        f(&self.positional.pos_embed);
        for block in &self.blocks {
            block.visit(f);
        }
        f(&self.head.ln_gamma);
        f(&self.head.ln_beta);
        f(&self.head.weight);
        f(&self.head.bias);
        if let Some(bank) = &self.prompts {
            for p in &bank.tokens {
                f(p);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Param<S>)) {
        f(&mut self.patch_embed.weight);
        f(&mut self.patch_embed.bias);
        f(&mut self.positional.cls_token);
        f(&mut self.positional.pos_embed);
        for block in &mut self.blocks {
            block.visit_mut(f);
        }
        f(&mut self.head.ln_gamma);
        f(&mut self.head.ln_beta);
        f(&mut self.head.weight);
        f(&mut self.head.bias);
        if let Some(bank) = &mut self.prompts {
            for p in &mut bank.tokens {
                f(p);
            }
        }
    }

    /// All parameters in canonical order.
    pub fn params(&self) -> Vec<&Param<S>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> u64 {
        let mut n = 0u64;
        self.visit_params(&mut |p| n += p.numel() as u64);
        n
    }

    /// Clones every parameter tensor, keyed by name.
    pub fn state(&self) -> BTreeMap<String, Tensor<S>> {
        let mut map = BTreeMap::new();
        self.visit_params(&mut |p| {
            map.insert(p.name.clone(), p.value.clone());
        });
        map
    }

    /// Replaces parameter values from a name-keyed map.
    ///
    /// Every model parameter must be present with a matching shape; extra
    /// names are rejected.
    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        let mut seen = 0usize;
        let mut err = None;
        self.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match state.get(&p.name) {
                None => err = Some(Error::config(format!("missing parameter '{}'", p.name))),
                Some(t) if t.shape() != p.value.shape() => {
                    err = Some(Error::dim(format!(
                        "parameter '{}': stored {:?} vs model {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(t) => {
                    p.value = t.clone();
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != state.len() {
            return Err(Error::config(format!(
                "state holds {} tensors, model uses {seen}",
                state.len()
            )));
        }
        Ok(())
    }

    /// Registers every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<S>) -> (BoundModel<S>, Bindings) {
        let mut reg = Bindings::new();
        let eps = cast::<S>(self.config.layernorm_eps);
        let bound = BoundModel {
            config: self.config.clone(),
            patch_weight: tape.bind(&self.patch_embed.weight, &mut reg),
            patch_bias: tape.bind(&self.patch_embed.bias, &mut reg),
            cls_token: tape.bind(&self.positional.cls_token, &mut reg),
            pos_embed: tape.bind(&self.positional.pos_embed, &mut reg),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.bind(tape, &mut reg, self.config.heads, eps))
                .collect(),
            head_ln_gamma: tape.bind(&self.head.ln_gamma, &mut reg),
            head_ln_beta: tape.bind(&self.head.ln_beta, &mut reg),
            head_weight: tape.bind(&self.head.weight, &mut reg),
            head_bias: tape.bind(&self.head.bias, &mut reg),
            prompts: self.prompts.as_ref().map(|bank| bank.bind(tape, &mut reg)),
        };
        (bound, reg)
    }

    /// Full forward pass to class logits, using the model's own prompts.
    pub fn forward(&self, tape: &mut Tape<S>, spectrogram: &Tensor<S>) -> Result<Var> {
        let (bound, _) = self.bind(tape);
        bound.forward(tape, spectrogram)
    }

    /// Forward pass with explicit (or suppressed) prompt tokens.
    pub fn forward_with(
        &self,
        tape: &mut Tape<S>,
        spectrogram: &Tensor<S>,
        prompts: Option<&PromptBank<S>>,
    ) -> Result<Var> {
        let (mut bound, _) = self.bind(tape);
        bound.prompts = prompts.map(|bank| {
            let mut reg = Bindings::new();
            bank.bind(tape, &mut reg)
        });
        bound.forward(tape, spectrogram)
    }

    /// Instrumented forward pass.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<S>,
        spectrogram: &Tensor<S>,
    ) -> Result<(Var, ForwardTrace)> {
        let (bound, _) = self.bind(tape);
        let mut trace = ForwardTrace::default();
        let logits = bound.forward_inner(tape, spectrogram, Some(&mut trace))?;
        Ok((logits, trace))
    }

    /// Writes every parameter to a tensor container file.
    pub fn save_weights(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::data::save_tensors(path, &self.state())
    }

    /// Loads parameters saved by [`Model::save_weights`].
    pub fn load_weights(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let state = crate::data::load_tensors(path)?;
        self.load_state(&state)
    }
}

impl<S: Scalar> BoundModel<S> {
    /// Patchify, project, prepend the class token, add (possibly
    /// resampled) positional rows.
    pub fn embed(&self, tape: &mut Tape<S>, spectrogram: &Tensor<S>) -> Result<Var> {
        let patches = patchify(spectrogram, self.config.patch_size)?;
        let grid_t = spectrogram.shape()[0] / self.config.patch_size;
        let grid_f = spectrogram.shape()[1] / self.config.patch_size;
        let patches = tape.constant(patches);
        let projected = tape.matmul(patches, self.patch_weight)?;
        let projected = tape.add_row(projected, self.patch_bias)?;
        let tokens = tape.concat(&[self.cls_token, projected], 0)?;
        let base_grid = self.config.grid();
        let pos = if (grid_t, grid_f) == base_grid {
            self.pos_embed
        } else {
            let weights = bilinear_row_weights::<S>(base_grid, (grid_t, grid_f));
            tape.row_mix(self.pos_embed, weights)?
        };
        tape.add(tokens, pos)
    }

    pub fn forward(&self, tape: &mut Tape<S>, spectrogram: &Tensor<S>) -> Result<Var> {
        self.forward_inner(tape, spectrogram, None)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<S>,
        spectrogram: &Tensor<S>,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let variant = self.config.variant;
        let mut x = self.embed(tape, spectrogram)?;
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(t) = trace.as_deref_mut() {
                t.boundary_lens.push(tape.shape(x)[0]);
                t.boundary_vars.push(x);
            }
            let injected = match &self.prompts {
                Some(tokens) => prompt_inject(tape, x, tokens[i])?,
                None => x,
            };
            if let Some(t) = trace.as_deref_mut() {
                t.in_block_lens.push(tape.shape(injected)[0]);
            }
            let (out, attn) = block.forward_attn(tape, injected, variant)?;
            if let Some(t) = trace.as_deref_mut() {
                t.attn_vars.extend(attn);
            }
            x = match &self.prompts {
                Some(_) => prompt_strip(tape, out, self.config.prompt_len)?,
                None => out,
            };
        }
        if let Some(t) = trace.as_deref_mut() {
            t.boundary_lens.push(tape.shape(x)[0]);
            t.boundary_vars.push(x);
        }
        let cls = tape.slice(x, 0, 0, 1)?;
        let eps = cast::<S>(self.config.layernorm_eps);
        let normed = tape.layernorm(cls, self.head_ln_gamma, self.head_ln_beta, eps)?;
        let logits = tape.matmul(normed, self.head_weight)?;
        let logits = tape.add_row(logits, self.head_bias)?;
        tape.reshape(logits, vec![self.config.num_classes])
    }
}

/// Splits a `[T, F]` spectrogram into flattened non-overlapping `P x P`
/// patches, time-major then frequency.
pub fn patchify<S: Scalar>(spectrogram: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    if spectrogram.rank() != 2 {
        return Err(Error::dim(format!(
            "patchify: rank-2 input required, got {:?}",
            spectrogram.shape()
        )));
    }
    let (t, f) = (spectrogram.shape()[0], spectrogram.shape()[1]);
    if patch == 0 || t % patch != 0 || f % patch != 0 {
        return Err(Error::dim(format!(
            "patchify: {t}x{f} not divisible into {patch}x{patch} patches"
        )));
    }
    let (gt, gf) = (t / patch, f / patch);
    let mut data = vec![S::zero(); t * f];
    let mut row = 0;
    for ti in 0..gt {
        for fi in 0..gf {
            for pt in 0..patch {
                for pf in 0..patch {
                    data[row * patch * patch + pt * patch + pf] =
                        spectrogram.at2(ti * patch + pt, fi * patch + pf);
                }
            }
            row += 1;
        }
    }
    Tensor::new(vec![gt * gf, patch * patch], data)
}

/// Bilinear row-resampling weights from one patch grid to another, with the
/// class row passed through unchanged. Row indices are offset by one for the
/// class position.
pub fn bilinear_row_weights<S: Scalar>(
    from: (usize, usize),
    to: (usize, usize),
) -> RowMixWeights<S> {
    // Align-corners source coordinate: i * (from-1)/(to-1); a singleton
    // target axis samples the source center.
    fn coord(i: usize, from: usize, to: usize) -> (usize, usize, f64) {
        let src = if to == 1 {
            (from - 1) as f64 / 2.0
        } else {
            i as f64 * (from - 1) as f64 / (to - 1) as f64
        };
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, src - lo as f64)
    }
    let mut weights: RowMixWeights<S> = Vec::with_capacity(to.0 * to.1 + 1);
    weights.push(vec![(0, S::one())]);
    for i in 0..to.0 {
        let (t_lo, t_hi, t_frac) = coord(i, from.0, to.0);
        for j in 0..to.1 {
            let (f_lo, f_hi, f_frac) = coord(j, from.1, to.1);
            let src_row = |ti: usize, fi: usize| 1 + ti * from.1 + fi;
            let mut row: Vec<(usize, S)> = Vec::with_capacity(4);
            let mut push = |r: usize, w: f64| {
                if w != 0.0 {
                    row.push((r, cast::<S>(w)));
                }
            };
            push(src_row(t_lo, f_lo), (1.0 - t_frac) * (1.0 - f_frac));
            if f_hi != f_lo {
                push(src_row(t_lo, f_hi), (1.0 - t_frac) * f_frac);
            }
            if t_hi != t_lo {
                push(src_row(t_hi, f_lo), t_frac * (1.0 - f_frac));
                if f_hi != f_lo {
                    push(src_row(t_hi, f_hi), t_frac * f_frac);
                }
            }
            weights.push(row);
        }
    }
    weights
}

/// Resamples a positional table from one patch grid to another.
///
/// The class row is copied unchanged; patch rows are treated as a
/// `from.0 x from.1` grid of `d`-vectors and bilinearly resampled.
pub fn interpolate_pos_embed<S: Scalar>(
    pos: &Tensor<S>,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Tensor<S>> {
    if pos.rank() != 2 || pos.rows() != from.0 * from.1 + 1 {
        return Err(Error::dim(format!(
            "interpolate_pos_embed: table {:?} does not match grid {}x{} (+1 class row)",
            pos.shape(),
            from.0,
            from.1
        )));
    }
    if from.0 == 0 || from.1 == 0 || to.0 == 0 || to.1 == 0 {
        return Err(Error::dim("interpolate_pos_embed: empty grid".to_string()));
    }
    if from == to {
        return Ok(pos.clone());
    }
    let weights = bilinear_row_weights::<S>(from, to);
    let d = pos.cols();
    let mut data = vec![S::zero(); weights.len() * d];
    for (r, srcs) in weights.iter().enumerate() {
        for &(src, w) in srcs {
            for j in 0..d {
                data[r * d + j] += w * pos.at2(src, j);
            }
        }
    }
    Tensor::new(vec![weights.len(), d], data)
}
