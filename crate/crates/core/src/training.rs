//! Optimizer, losses, metrics, and the freeze-aware fine-tuning loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{Label, SpectrogramSample};
use crate::error::{Error, Result};
use crate::peft::{apply_freeze, trainable_mask, PeftStrategy};
use crate::rng;
use crate::scalar::{cast, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::Model;

/// Mean negative log-softmax loss over a batch of logits rows.
pub fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean stabilized sigmoid binary cross-entropy over a logits matrix.
pub fn bce_multilabel<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    targets: &Tensor<S>,
) -> Result<Var> {
    tape.bce_logits(logits, targets)
}

/// Fraction of rows whose argmax equals the label; ties break toward the
/// lowest class index.
pub fn accuracy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() == 0 {
        return Err(Error::contract(format!(
            "accuracy: non-empty rank-2 logits required, got {:?}",
            logits.shape()
        )));
    }
    if labels.len() != logits.rows() {
        return Err(Error::contract(format!(
            "accuracy: {} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    let c = logits.cols();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let mut best = 0usize;
        for j in 1..c {
            if logits.at2(i, j) > logits.at2(i, best) {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Macro-averaged average precision over classes with at least one
/// positive; classes without positives are skipped, and a target matrix
/// with no positives at all is a contract violation.
///
/// Per class, samples are ranked by descending score (ties keep sample
/// order), and AP averages precision at each positive rank.
pub fn mean_average_precision<S: Scalar>(scores: &Tensor<S>, targets: &Tensor<S>) -> Result<f64> {
    if scores.rank() != 2 || scores.shape() != targets.shape() {
        return Err(Error::dim(format!(
            "mean_average_precision: scores {:?} vs targets {:?}",
            scores.shape(),
            targets.shape()
        )));
    }
    if targets
        .data()
        .iter()
        .any(|&t| t != S::zero() && t != S::one())
    {
        return Err(Error::contract(
            "mean_average_precision: targets must be 0 or 1",
        ));
    }
    let (b, c) = (scores.rows(), scores.cols());
    let mut ap_sum = 0.0;
    let mut classes = 0usize;
    for class in 0..c {
        let positives = (0..b).filter(|&i| targets.at2(i, class) == S::one()).count();
        if positives == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&x, &y| {
            scores
                .at2(y, class)
                .partial_cmp(&scores.at2(x, class))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.cmp(&y))
        });
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if targets.at2(i, class) == S::one() {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / positives as f64;
        classes += 1;
    }
    if classes == 0 {
        return Err(Error::contract(
            "mean_average_precision: no class has a positive target",
        ));
    }
    Ok(ap_sum / classes as f64)
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over the trainable subset of a model's parameters.
///
/// Moment tensors are allocated lazily, only for trainable parameters.
pub struct AdamState<S> {
    config: AdamConfig,
    step_count: u64,
    first: BTreeMap<String, Tensor<S>>,
    second: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every trainable parameter; frozen parameters
    /// are left untouched and never acquire optimizer state.
    pub fn step(
        &mut self,
        model: &mut Model<S>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let b1 = cast::<S>(self.config.beta1);
        let b2 = cast::<S>(self.config.beta2);
        let lr = cast::<S>(self.config.lr);
        let eps = cast::<S>(self.config.eps);
        let bias1 = S::one() - cast::<S>(self.config.beta1.powi(t as i32));
        let bias2 = S::one() - cast::<S>(self.config.beta2.powi(t as i32));
        let mut err = None;
        model.visit_params_mut(&mut |p| {
            if err.is_some() || !p.trainable {
                return;
            }
            let Some(grad) = grads.get(&p.name) else {
                err = Some(Error::contract(format!(
                    "missing gradient for trainable parameter '{}'",
                    p.name
                )));
                return;
            };
            if grad.shape() != p.value.shape() {
                err = Some(Error::contract(format!(
                    "gradient shape {:?} vs parameter '{}' {:?}",
                    grad.shape(),
                    p.name,
                    p.value.shape()
                )));
                return;
            }
            let m = self
                .first
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            let v = self
                .second
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            for ((x, &g), (m, v)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Settings of one fine-tuning run.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// One epoch of a training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
    pub seconds: f64,
    pub trainable_params: u64,
}

/// Per-epoch records of a fine-tuning run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,eval_metric,seconds,trainable_params";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.eval_metric, r.seconds, r.trainable_params
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::contract("empty history CSV"))?;
        if header != Self::CSV_HEADER {
            return Err(Error::contract(format!("unexpected header '{header}'")));
        }
        let mut records = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::contract(format!("bad history row '{line}'")));
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::contract(format!("bad number '{s}'")))
            };
            records.push(EpochRecord {
                epoch: fields[0]
                    .parse()
                    .map_err(|_| Error::contract(format!("bad epoch '{}'", fields[0])))?,
                train_loss: parse_f(fields[1])?,
                eval_metric: parse_f(fields[2])?,
                seconds: parse_f(fields[3])?,
                trainable_params: fields[4]
                    .parse()
                    .map_err(|_| Error::contract(format!("bad count '{}'", fields[4])))?,
            });
        }
        Ok(TrainHistory { records })
    }
}

fn batch_loss<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    samples: &[&SpectrogramSample<S>],
) -> Result<(Var, crate::tape::Bindings)> {
    let (bound, bindings) = model.bind(tape);
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        let logits = bound.forward(tape, &sample.spectrogram)?;
        rows.push(tape.reshape(logits, vec![1, model.config.num_classes])?);
    }
    let logits = tape.concat(&rows, 0)?;
    let loss = match &samples[0].label {
        Label::Class(_) => {
            let labels = samples
                .iter()
                .map(|s| match &s.label {
                    Label::Class(c) => Ok(*c),
                    Label::Multi(_) => Err(Error::contract("mixed label kinds in batch")),
                })
                .collect::<Result<Vec<_>>>()?;
            tape.cross_entropy(logits, &labels)?
        }
        Label::Multi(_) => {
            let targets = multi_targets(samples, model.config.num_classes)?;
            tape.bce_logits(logits, &targets)?
        }
    };
    Ok((loss, bindings))
}

fn multi_targets<S: Scalar>(
    samples: &[&SpectrogramSample<S>],
    num_classes: usize,
) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(samples.len() * num_classes);
    for s in samples {
        match &s.label {
            Label::Multi(active) if active.len() == num_classes => {
                data.extend(active.iter().map(|&a| if a { S::one() } else { S::zero() }));
            }
            Label::Multi(active) => {
                return Err(Error::contract(format!(
                    "label width {} vs {num_classes} classes",
                    active.len()
                )))
            }
            Label::Class(_) => return Err(Error::contract("mixed label kinds in batch")),
        }
    }
    Tensor::new(vec![samples.len(), num_classes], data)
}

/// Forwards every sample (no gradients) and scores the task metric:
/// accuracy for single-label data, mean average precision for multi-label.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[SpectrogramSample<S>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("evaluate: empty sample list"));
    }
    let c = model.config.num_classes;
    let mut logits = Vec::with_capacity(samples.len() * c);
    for sample in samples {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &sample.spectrogram)?;
        logits.extend_from_slice(tape.value(out).data());
    }
    let logits = Tensor::new(vec![samples.len(), c], logits)?;
    match &samples[0].label {
        Label::Class(_) => {
            let labels = samples
                .iter()
                .map(|s| match &s.label {
                    Label::Class(cls) => Ok(*cls),
                    Label::Multi(_) => Err(Error::contract("mixed label kinds")),
                })
                .collect::<Result<Vec<_>>>()?;
            accuracy(&logits, &labels)
        }
        Label::Multi(_) => {
            let refs: Vec<&SpectrogramSample<S>> = samples.iter().collect();
            let targets = multi_targets(&refs, c)?;
            mean_average_precision(&logits, &targets)
        }
    }
}

/// Fine-tunes `model` under `strategy`: builds the freeze mask, then runs
/// shuffled mini-batch Adam epochs, evaluating on the held-out split after
/// each. Deterministic given identical settings.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    strategy: PeftStrategy,
    train_set: &[SpectrogramSample<S>],
    eval_set: &[SpectrogramSample<S>],
    settings: &TrainSettings,
) -> Result<TrainHistory> {
    if train_set.is_empty() {
        return Err(Error::contract("train: empty training set"));
    }
    if model.config.variant != strategy.required_variant() {
        return Err(Error::config(format!(
            "model variant {} does not match strategy {strategy}",
            model.config.variant
        )));
    }
    if strategy.uses_prompts() && model.prompts.is_none() {
        return Err(Error::config(format!(
            "strategy {strategy} needs a model with prompt tokens"
        )));
    }
    let mask = trainable_mask(&model.config, strategy)?;
    apply_freeze(model, &mask)?;
    let trainable_params: u64 = model
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.numel() as u64)
        .sum();
    let mut adam = AdamState::new(AdamConfig {
        lr: settings.lr,
        ..AdamConfig::default()
    });
    let mut history = TrainHistory::default();
    for epoch in 0..settings.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::indexed_stream(settings.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(settings.batch_size.max(1)) {
            let samples: Vec<&SpectrogramSample<S>> =
                batch.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let (loss, bindings) = batch_loss(model, &mut tape, &samples)?;
            let grads = tape.backward(loss)?;
            let mut by_name = BTreeMap::new();
            for (name, var) in &bindings {
                if mask.contains(name) {
                    if let Some(g) = grads.get(*var) {
                        by_name.insert(name.clone(), g.clone());
                    }
                }
            }
            adam.step(model, &by_name)?;
            loss_sum += tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN)
                * samples.len() as f64;
        }
        let eval_metric = evaluate(model, eval_set)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            eval_metric,
            seconds: start.elapsed().as_secs_f64(),
            trainable_params,
        });
    }
    Ok(history)
}
