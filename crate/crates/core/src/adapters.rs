//! Bottleneck adapters and per-layer prompt tokens.
//!
//! An [`Adapter`] is a linear down-projection to a narrow dimension, a GELU,
//! and a linear up-projection back. The up-projection and all biases start
//! at zero, so a freshly initialized adapter computes the zero function
//! (no internal shortcut; the MLP-parallel placement) or the identity (with
//! internal shortcut; the post-attention placement).

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{Bindings, Tape, Var};
use crate::tensor::{Param, Tensor};

/// Bottleneck adapter: `up(gelu(down(x)))`, optionally plus `x`.
#[derive(Clone, Debug)]
pub struct Adapter<S> {
    pub w_down: Param<S>,
    pub b_down: Param<S>,
    pub w_up: Param<S>,
    pub b_up: Param<S>,
    /// True for the post-attention placement, which keeps its own residual.
    pub shortcut: bool,
}

/// Tape handles for one adapter within a forward pass.
#[derive(Clone, Copy)]
pub struct BoundAdapter {
    w_down: Var,
    b_down: Var,
    w_up: Var,
    b_up: Var,
    shortcut: bool,
}

impl<S: Scalar> Adapter<S> {
    /// Initializes an adapter under `prefix` (parameter names are
    /// `{prefix}.w_down` and so on).
    ///
    /// The down weights are Xavier-uniform in `(-a, a)` with
    /// `a = sqrt(6/(d + bottleneck))`; up weights and all biases are zero,
    /// making the fresh adapter exactly inert.
    pub fn init(
        prefix: &str,
        d: usize,
        bottleneck: usize,
        shortcut: bool,
        seed: u64,
    ) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= d {
            return Err(Error::config(format!(
                "adapter bottleneck must satisfy 0 < {bottleneck} < {d}"
            )));
        }
        let name = |field: &str| format!("{prefix}.{field}");
        let mut stream = rng::stream(seed, &name("w_down"));
        let w_down = rng::xavier_tensor(&mut stream, vec![d, bottleneck], d, bottleneck);
        Ok(Adapter {
            w_down: Param::new(name("w_down"), w_down),
            b_down: Param::new(name("b_down"), Tensor::zeros(vec![bottleneck])),
            w_up: Param::new(name("w_up"), Tensor::zeros(vec![bottleneck, d])),
            b_up: Param::new(name("b_up"), Tensor::zeros(vec![d])),
            shortcut,
        })
    }

    pub fn params(&self) -> [&Param<S>; 4] {
        [&self.w_down, &self.b_down, &self.w_up, &self.b_up]
    }

    pub fn params_mut(&mut self) -> [&mut Param<S>; 4] {
        [
            &mut self.w_down,
            &mut self.b_down,
            &mut self.w_up,
            &mut self.b_up,
        ]
    }

    pub fn bind(&self, tape: &mut Tape<S>, reg: &mut Bindings) -> BoundAdapter {
        BoundAdapter {
            w_down: tape.bind(&self.w_down, reg),
            b_down: tape.bind(&self.b_down, reg),
            w_up: tape.bind(&self.w_up, reg),
            b_up: tape.bind(&self.b_up, reg),
            shortcut: self.shortcut,
        }
    }

    /// One-off forward for a standalone adapter (binds onto the tape first).
    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let mut reg = Bindings::new();
        let bound = self.bind(tape, &mut reg);
        bound.forward(tape, x)
    }
}

impl BoundAdapter {
    /// Assembles a bound adapter from existing tape nodes.
    pub fn from_vars(w_down: Var, b_down: Var, w_up: Var, b_up: Var, shortcut: bool) -> Self {
        BoundAdapter {
            w_down,
            b_down,
            w_up,
            b_up,
            shortcut,
        }
    }

    /// `up(gelu(down(x)))`, plus `x` when the adapter carries a shortcut.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let d = tape.shape(self.w_down)[0];
        if tape.shape(x).last() != Some(&d) {
            return Err(Error::dim(format!(
                "adapter expects last dim {d}, got input {:?}",
                tape.shape(x)
            )));
        }
        let h = tape.matmul(x, self.w_down)?;
        let h = tape.add_row(h, self.b_down)?;
        let h = tape.gelu(h);
        let core = tape.matmul(h, self.w_up)?;
        let core = tape.add_row(core, self.b_up)?;
        if self.shortcut {
            tape.add(x, core)
        } else {
            Ok(core)
        }
    }
}

/// Initializes a standalone adapter (parameter names under `"adapter"`).
pub fn init_adapter<S: Scalar>(
    d: usize,
    bottleneck: usize,
    shortcut: bool,
    seed: u64,
) -> Result<Adapter<S>> {
    Adapter::init("adapter", d, bottleneck, shortcut, seed)
}

/// Trainable prompt tokens, one fresh bank per transformer block.
#[derive(Clone, Debug)]
pub struct PromptBank<S> {
    /// One `[prompt_len, d]` parameter per block.
    pub tokens: Vec<Param<S>>,
}

impl<S: Scalar> PromptBank<S> {
    /// Initializes per-layer tokens uniform in `(-0.1, 0.1)`.
    pub fn init(depth: usize, prompt_len: usize, d: usize, seed: u64) -> Self {
        let tokens = (0..depth)
            .map(|i| {
                let name = format!("prompts.{i}");
                let mut stream = rng::stream(seed, &name);
                Param::new(
                    name,
                    rng::uniform_tensor(&mut stream, vec![prompt_len, d], 0.1),
                )
            })
            .collect();
        PromptBank { tokens }
    }

    pub fn depth(&self) -> usize {
        self.tokens.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.tokens.first().map_or(0, |p| p.value.shape()[0])
    }

    pub fn bind(&self, tape: &mut Tape<S>, reg: &mut Bindings) -> Vec<Var> {
        self.tokens.iter().map(|p| tape.bind(p, reg)).collect()
    }
}

/// Prepends prompt rows to the token sequence: `[P..][CLS][E..]`.
pub fn prompt_inject<S: Scalar>(tape: &mut Tape<S>, x: Var, tokens: Var) -> Result<Var> {
    let (xs, ts) = (tape.shape(x), tape.shape(tokens));
    if xs.len() != 2 || ts.len() != 2 || xs[1] != ts[1] {
        return Err(Error::dim(format!(
            "prompt_inject: tokens {ts:?} against sequence {xs:?}"
        )));
    }
    tape.concat(&[tokens, x], 0)
}

/// Drops the first `prompt_len` rows added by [`prompt_inject`].
pub fn prompt_strip<S: Scalar>(tape: &mut Tape<S>, x: Var, prompt_len: usize) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if rows <= prompt_len {
        return Err(Error::contract(format!(
            "prompt_strip: {rows} rows cannot drop {prompt_len} prompts"
        )));
    }
    tape.slice(x, 0, prompt_len, rows - prompt_len)
}
