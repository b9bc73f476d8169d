//! Verification routines: finite-difference gradient checking and the
//! zero-init identity comparison. Both run in double precision.

use crate::error::Result;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transformer::{Model, ModelConfig, Variant};

/// Outcome of a whole-model finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub params_checked: u64,
}

fn model_loss(model: &Model<f64>, spec: &Tensor<f64>, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, spec)?;
    let c = model.config.num_classes;
    let logits = tape.reshape(logits, vec![1, c])?;
    let loss = tape.cross_entropy(logits, &[label])?;
    Ok(tape.value(loss).data()[0])
}

/// Central finite differences over every parameter entry of `model`,
/// against the tape gradients of a cross-entropy loss on `spec`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1)`. With
/// `corrupt_first_gradient` one analytic gradient entry is deliberately
/// shifted before comparison; this is the negative control proving the
/// check can fail.
pub fn model_gradient_check(
    model: &Model<f64>,
    spec: &Tensor<f64>,
    label: usize,
    h: f64,
    corrupt_first_gradient: bool,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let (bound, bindings) = model.bind(&mut tape);
    let logits = bound.forward(&mut tape, spec)?;
    let c = model.config.num_classes;
    let logits = tape.reshape(logits, vec![1, c])?;
    let loss = tape.cross_entropy(logits, &[label])?;
    let grads = tape.backward(loss)?;

    let mut worst = (0.0f64, String::from("-"));
    let mut checked = 0u64;
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut corrupt_pending = corrupt_first_gradient;
    for name in names {
        let mut analytic = grads
            .get(bindings[&name])
            .expect("bound parameter has a gradient entry")
            .clone();
        if corrupt_pending {
            analytic.data_mut()[0] += 0.5;
            corrupt_pending = false;
        }
        let mut bumped = model.clone();
        for j in 0..analytic.numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                bumped.visit_params_mut(&mut |p| {
                    if p.name == name {
                        p.value.data_mut()[j] += delta;
                    }
                });
                let v = model_loss(&bumped, spec, label);
                bumped.visit_params_mut(&mut |p| {
                    if p.name == name {
                        p.value.data_mut()[j] -= delta;
                    }
                });
                v
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > worst.0 {
                worst = (err, format!("{name}[{j}]"));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        worst_rel_err: worst.0,
        worst_param: worst.1,
        params_checked: checked,
    })
}

/// Builds a gradient-check fixture: an aat-ms model with randomized
/// adapter tails, so no gradient path is dead at initialization.
pub fn gradcheck_model(base: &ModelConfig, seed: u64) -> Result<Model<f64>> {
    let mut config = base.clone();
    config.variant = Variant::AatMs;
    config.prompt_len = 0;
    let mut model = Model::new(config, seed)?;
    model.visit_params_mut(&mut |p| {
        if p.name.contains("_adapter.") && p.value.data().iter().all(|&v| v == 0.0) {
            p.value =
                rng::uniform_tensor(&mut rng::stream(seed ^ 0xAD, &p.name), p.value.shape().to_vec(), 0.5);
        }
    });
    Ok(model)
}

/// Largest absolute logit difference between the vanilla and aat-ms models
/// built from the same backbone seed, over `inputs` random spectrograms.
pub fn identity_check(base: &ModelConfig, seed: u64, inputs: usize) -> Result<f64> {
    let mut vanilla_config = base.clone();
    vanilla_config.variant = Variant::Vanilla;
    vanilla_config.prompt_len = 0;
    let mut adapted_config = vanilla_config.clone();
    adapted_config.variant = Variant::AatMs;
    let vanilla = Model::<f64>::new(vanilla_config, seed)?;
    let adapted = Model::<f64>::new(adapted_config, seed)?;

    let mut worst = 0.0f64;
    for i in 0..inputs {
        let spec = rng::uniform_tensor(
            &mut rng::indexed_stream(seed, "identity-check-input", i as u64),
            vec![base.input_time, base.input_freq],
            1.0,
        );
        let mut tape = Tape::new();
        let a = vanilla.forward(&mut tape, &spec)?;
        let b = adapted.forward(&mut tape, &spec)?;
        let diff = tape.value(a).max_abs_diff(tape.value(b))?;
        worst = worst.max(diff);
    }
    Ok(worst)
}
