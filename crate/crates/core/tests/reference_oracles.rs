//! Independent reference implementations pinned against the tape path:
//! a loop-based attention computation, a loop-based whole-model forward,
//! plain-evaluation loss oracles, and the exact block recomposition.

use std::collections::BTreeMap;

use aat_core::adapters::PromptBank;
use aat_core::rng;
use aat_core::tape::Tape;
use aat_core::tensor::Tensor;
use aat_core::transformer::{Model, ModelConfig, Variant};

fn rand_t(label: &str, shape: Vec<usize>) -> Tensor<f64> {
    rng::uniform_tensor(&mut rng::stream(137, label), shape, 1.0)
}

// ── loop-based numerics, independent of the tape ops ────────────────────

fn ref_layernorm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let sinv = 1.0 / (var + eps).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * sinv * gamma[j] + beta[j])
        .collect()
}

fn ref_gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn ref_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `rows x cols` matrix as nested Vec, from a name in the state map.
fn mat(state: &BTreeMap<String, Tensor<f64>>, name: &str) -> Vec<Vec<f64>> {
    let t = &state[name];
    assert_eq!(t.rank(), 2, "{name}");
    (0..t.rows())
        .map(|i| (0..t.cols()).map(|j| t.at2(i, j)).collect())
        .collect()
}

fn vec1(state: &BTreeMap<String, Tensor<f64>>, name: &str) -> Vec<f64> {
    state[name].data().to_vec()
}

fn ref_linear(x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Whole-model forward written as plain nested loops over the state map.
fn ref_model_forward(
    state: &BTreeMap<String, Tensor<f64>>,
    config: &ModelConfig,
    spec: &Tensor<f64>,
) -> Vec<f64> {
    let p = config.patch_size;
    let d = config.embed_dim;
    let (gt, gf) = (spec.shape()[0] / p, spec.shape()[1] / p);
    assert_eq!((gt, gf), config.grid(), "reference covers the base grid only");

    // patchify (time-major) and project
    let mut patches: Vec<Vec<f64>> = Vec::new();
    for ti in 0..gt {
        for fi in 0..gf {
            let mut flat = Vec::with_capacity(p * p);
            for pt in 0..p {
                for pf in 0..p {
                    flat.push(spec.at2(ti * p + pt, fi * p + pf));
                }
            }
            patches.push(flat);
        }
    }
    let w_patch = mat(state, "patch_embed.weight");
    let b_patch = vec1(state, "patch_embed.bias");
    let projected = ref_linear(&patches, &w_patch, &b_patch);

    let cls = vec1(state, "cls_token");
    let pos = mat(state, "pos_embed");
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(projected.len() + 1);
    x.push((0..d).map(|j| cls[j] + pos[0][j]).collect());
    for (i, row) in projected.iter().enumerate() {
        x.push((0..d).map(|j| row[j] + pos[i + 1][j]).collect());
    }

    let eps = config.layernorm_eps;
    let heads = config.heads;
    let dh = d / heads;
    for b in 0..config.depth {
        let name = |f: &str| format!("blocks.{b}.{f}");
        let ln1g = vec1(state, &name("ln1.gamma"));
        let ln1b = vec1(state, &name("ln1.beta"));
        let wqkv = mat(state, &name("qkv.weight"));
        let bqkv = vec1(state, &name("qkv.bias"));
        let wproj = mat(state, &name("proj.weight"));
        let bproj = vec1(state, &name("proj.bias"));
        let ln2g = vec1(state, &name("ln2.gamma"));
        let ln2b = vec1(state, &name("ln2.beta"));
        let w1 = mat(state, &name("mlp.w1"));
        let b1 = vec1(state, &name("mlp.b1"));
        let w2 = mat(state, &name("mlp.w2"));
        let b2 = vec1(state, &name("mlp.b2"));

        let normed: Vec<Vec<f64>> = x.iter().map(|r| ref_layernorm(r, &ln1g, &ln1b, eps)).collect();
        let qkv = ref_linear(&normed, &wqkv, &bqkv);
        let s = x.len();
        let mut attn_out = vec![vec![0.0; d]; s];
        for h in 0..heads {
            for i in 0..s {
                let mut scores = Vec::with_capacity(s);
                for j in 0..s {
                    let mut dot = 0.0;
                    for k in 0..dh {
                        let q = qkv[i][h * dh + k];
                        let key = qkv[j][d + h * dh + k];
                        dot += q * key;
                    }
                    scores.push(dot / (dh as f64).sqrt());
                }
                let weights = ref_softmax(&scores);
                for k in 0..dh {
                    let mut acc = 0.0;
                    for (j, w) in weights.iter().enumerate() {
                        acc += w * qkv[j][2 * d + h * dh + k];
                    }
                    attn_out[i][h * dh + k] = acc;
                }
            }
        }
        let attn_proj = ref_linear(&attn_out, &wproj, &bproj);
        let xs: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn_proj)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
        let normed2: Vec<Vec<f64>> = xs.iter().map(|r| ref_layernorm(r, &ln2g, &ln2b, eps)).collect();
        let hidden = ref_linear(&normed2, &w1, &b1);
        let activated: Vec<Vec<f64>> = hidden
            .iter()
            .map(|r| r.iter().map(|&v| ref_gelu(v)).collect())
            .collect();
        let mlp = ref_linear(&activated, &w2, &b2);
        x = xs
            .iter()
            .zip(&mlp)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
    }

    let lng = vec1(state, "head.ln.gamma");
    let lnb = vec1(state, "head.ln.beta");
    let normed = ref_layernorm(&x[0], &lng, &lnb, eps);
    let w_head = mat(state, "head.weight");
    let b_head = vec1(state, "head.bias");
    ref_linear(&[normed], &w_head, &b_head)[0].clone()
}

#[test]
fn model_forward_matches_loop_reference() {
    let mut config = ModelConfig::tiny();
    config.prompt_len = 0;
    let model = Model::<f64>::new(config.clone(), 31).unwrap();
    let spec = rand_t("model-ref-input", vec![8, 8]);

    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &spec).unwrap();
    let got = tape.value(logits).data();
    let expect = ref_model_forward(&model.state(), &config, &spec);
    assert_eq!(got.len(), expect.len());
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-10, "{g} vs {e}");
    }
}

#[test]
fn mhsa_matches_bruteforce_two_tokens() {
    // S=2, d=2, h=1, random weights, explicit scalar attention arithmetic
    let config = ModelConfig {
        depth: 1,
        embed_dim: 2,
        heads: 1,
        mlp_ratio: 2,
        patch_size: 2,
        input_time: 2,
        input_freq: 4,
        num_classes: 2,
        adapter_dim: 1,
        prompt_len: 0,
        variant: Variant::Vanilla,
        layernorm_eps: 1e-6,
        tune_backbone_ln: false,
    };
    let model = Model::<f64>::new(config.clone(), 77).unwrap();
    let x = rand_t("brute-x", vec![2, 2]);

    let mut tape = Tape::new();
    let (bound, _) = model.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = bound.blocks[0].mhsa(&mut tape, xv).unwrap();
    let got = tape.value(out);

    let state = model.state();
    let ln1g = vec1(&state, "blocks.0.ln1.gamma");
    let ln1b = vec1(&state, "blocks.0.ln1.beta");
    let wqkv = mat(&state, "blocks.0.qkv.weight");
    let bqkv = vec1(&state, "blocks.0.qkv.bias");
    let wproj = mat(&state, "blocks.0.proj.weight");
    let bproj = vec1(&state, "blocks.0.proj.bias");

    let rows: Vec<Vec<f64>> = (0..2).map(|i| vec![x.at2(i, 0), x.at2(i, 1)]).collect();
    let normed: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| ref_layernorm(r, &ln1g, &ln1b, 1e-6))
        .collect();
    let qkv = ref_linear(&normed, &wqkv, &bqkv);
    let q: Vec<Vec<f64>> = qkv.iter().map(|r| r[0..2].to_vec()).collect();
    let k: Vec<Vec<f64>> = qkv.iter().map(|r| r[2..4].to_vec()).collect();
    let v: Vec<Vec<f64>> = qkv.iter().map(|r| r[4..6].to_vec()).collect();
    let scale = 1.0 / 2.0f64.sqrt();
    for i in 0..2 {
        let scores: Vec<f64> = (0..2)
            .map(|j| scale * (q[i][0] * k[j][0] + q[i][1] * k[j][1]))
            .collect();
        let w = ref_softmax(&scores);
        let merged = [
            w[0] * v[0][0] + w[1] * v[1][0],
            w[0] * v[0][1] + w[1] * v[1][1],
        ];
        for col in 0..2 {
            let expect =
                bproj[col] + merged[0] * wproj[0][col] + merged[1] * wproj[1][col];
            assert!(
                (got.at2(i, col) - expect).abs() < 1e-12,
                "row {i} col {col}: {} vs {expect}",
                got.at2(i, col)
            );
        }
    }
}

#[test]
fn cross_entropy_matches_plain_evaluation() {
    let logits = rand_t("ce-ref", vec![3, 5]);
    let labels = [4usize, 0, 2];
    let mut tape = Tape::new();
    let lv = tape.constant(logits.clone());
    let loss = tape.cross_entropy(lv, &labels).unwrap();

    // plain route: softmax without max subtraction, then -ln p
    let mut expect = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = (0..5).map(|j| logits.at2(i, j)).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expect += -(row[label].exp() / z).ln();
    }
    expect /= 3.0;
    assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn bce_matches_plain_evaluation() {
    let logits = rand_t("bce-ref", vec![2, 3]);
    let targets = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let lv = tape.constant(logits.clone());
    let loss = tape.bce_logits(lv, &targets).unwrap();

    let mut expect = 0.0;
    for i in 0..2 {
        for j in 0..3 {
            let z = logits.at2(i, j);
            let t = targets.at2(i, j);
            let s = 1.0 / (1.0 + (-z).exp());
            expect += -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
        }
    }
    expect /= 6.0;
    assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
}

#[test]
fn adapted_block_recomposes_exactly() {
    // out must equal (xs + mlp_adapter(ln2(xs))) + mlp(ln2(xs)) bitwise,
    // with xs = x + spatial_adapter(mhsa(x)); both sides evaluated
    // from the same bound parameters.
    let mut config = ModelConfig::tiny();
    config.variant = Variant::AatMs;
    let mut model = Model::<f64>::new(config.clone(), 55).unwrap();
    // Randomize adapter tails so no term is trivially zero.
    model.visit_params_mut(&mut |p| {
        if p.name.contains("_adapter.") && p.value.data().iter().all(|&v| v == 0.0) {
            p.value =
                rng::uniform_tensor(&mut rng::stream(3, &p.name), p.value.shape().to_vec(), 0.4);
        }
    });

    let mut tape = Tape::new();
    let (bound, _) = model.bind(&mut tape);
    let block = &bound.blocks[0];
    let x = tape.constant(rand_t("recompose-x", vec![5, 8]));

    let out = block.forward(&mut tape, x, Variant::AatMs).unwrap();

    let attn = block.mhsa(&mut tape, x).unwrap();
    let adapted = block
        .spatial_adapter
        .as_ref()
        .unwrap()
        .forward(&mut tape, attn)
        .unwrap();
    let xs = tape.add(x, adapted).unwrap();
    let ln2 = block.ln2(&mut tape, xs).unwrap();
    let task = block
        .mlp_adapter
        .as_ref()
        .unwrap()
        .forward(&mut tape, ln2)
        .unwrap();
    let mlp = block.mlp_core(&mut tape, ln2).unwrap();
    let partial = tape.add(xs, task).unwrap();
    let recomposed = tape.add(partial, mlp).unwrap();

    assert_eq!(tape.value(out).data(), tape.value(recomposed).data());
    // the adapter term itself is the difference of the two paths
    let residual: Vec<f64> = tape
        .value(out)
        .data()
        .iter()
        .zip(tape.value(xs).data())
        .zip(tape.value(mlp).data())
        .map(|((o, s), m)| o - s - m)
        .collect();
    for (r, t) in residual.iter().zip(tape.value(task).data()) {
        assert!((r - t).abs() < 1e-12);
    }
}

#[test]
fn frozen_backbone_still_feeds_every_adapter_gradient() {
    let mut config = ModelConfig::tiny();
    config.variant = Variant::AatMs;
    config.prompt_len = 0;
    let model = Model::<f64>::new(config.clone(), 21).unwrap();
    let spec = rand_t("gradflow-x", vec![8, 8]);

    let mut tape = Tape::new();
    let (bound, bindings) = model.bind(&mut tape);
    let logits = bound.forward(&mut tape, &spec).unwrap();
    let logits = tape.reshape(logits, vec![1, 3]).unwrap();
    let loss = tape.cross_entropy(logits, &[2]).unwrap();
    let grads = tape.backward(loss).unwrap();

    for b in 0..config.depth {
        for kind in ["mlp_adapter", "spatial_adapter"] {
            let live = ["w_down", "b_down", "w_up", "b_up"].iter().any(|field| {
                let name = format!("blocks.{b}.{kind}.{field}");
                grads.get(bindings[&name]).unwrap().data().iter().any(|&g| g != 0.0)
            });
            assert!(live, "blocks.{b}.{kind} received no gradient");
        }
    }
}

#[test]
fn identity_breaks_after_one_adapter_training_step() {
    // negative control: the zero-init identity must be a live check
    use aat_core::data::{generate_dataset, SyntheticTaskSpec, TaskKind};
    use aat_core::peft::{specialize_config, PeftStrategy};
    use aat_core::training::{train, TrainSettings};

    let base = ModelConfig::tiny();
    let mut vanilla_config = base.clone();
    vanilla_config.prompt_len = 0;
    let vanilla = Model::<f64>::new(vanilla_config, 5).unwrap();

    let mut adapted_config = specialize_config(&base, PeftStrategy::AatMs).unwrap();
    adapted_config.prompt_len = 0;
    let mut adapted = Model::<f64>::new(adapted_config, 5).unwrap();
    let task = SyntheticTaskSpec::new(3, (8, 8), TaskKind::SingleLabel, 5);
    let (train_set, eval_set) = generate_dataset::<f64>(&task, 4, 2).unwrap();
    train(
        &mut adapted,
        PeftStrategy::AatMs,
        &train_set,
        &eval_set,
        &TrainSettings {
            epochs: 1,
            lr: 1e-3,
            batch_size: 4,
            seed: 5,
        },
    )
    .unwrap();

    let spec = rand_t("identity-negative", vec![8, 8]);
    let mut tape = Tape::new();
    let a = vanilla.forward(&mut tape, &spec).unwrap();
    let b = adapted.forward(&mut tape, &spec).unwrap();
    let diff = tape.value(a).max_abs_diff(tape.value(b)).unwrap();
    assert!(diff > 0.0, "adapters trained for one step must move the logits");
}

#[test]
fn every_attention_matrix_is_row_stochastic() {
    let mut config = ModelConfig::tiny();
    config.variant = Variant::AatMs;
    let model = Model::<f64>::new(config.clone(), 47).unwrap();
    let spec = rand_t("row-stochastic", vec![8, 8]);
    let mut tape = Tape::new();
    let (_, trace) = model.forward_traced(&mut tape, &spec).unwrap();
    assert_eq!(trace.attn_vars.len(), config.depth * config.heads);
    for &attn in &trace.attn_vars {
        let m = tape.value(attn);
        for i in 0..m.rows() {
            let mut sum = 0.0;
            for j in 0..m.cols() {
                let w = m.at2(i, j);
                assert!((0.0..=1.0).contains(&w));
                sum += w;
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn perturbing_layer_prompts_leaves_earlier_activations_bitwise() {
    let config = ModelConfig::tiny(); // prompt_len = 2
    let model = Model::<f64>::new(config.clone(), 41).unwrap();
    let spec = rand_t("prompt-indep", vec![8, 8]);

    let mut tape_a = Tape::new();
    let (_, trace_a) = model.forward_traced(&mut tape_a, &spec).unwrap();

    let mut perturbed = model.clone();
    let bank: &mut PromptBank<f64> = perturbed.prompts.as_mut().unwrap();
    bank.tokens[1].value.data_mut()[0] += 10.0;
    let mut tape_b = Tape::new();
    let (_, trace_b) = perturbed.forward_traced(&mut tape_b, &spec).unwrap();

    // boundaries 0 and 1 precede block 1's injection: bitwise equal
    for i in 0..=1 {
        let a = tape_a.value(trace_a.boundary_vars[i]);
        let b = tape_b.value(trace_b.boundary_vars[i]);
        assert_eq!(a.data(), b.data(), "boundary {i}");
    }
    // the final boundary must differ (the check is live)
    let a = tape_a.value(*trace_a.boundary_vars.last().unwrap());
    let b = tape_b.value(*trace_b.boundary_vars.last().unwrap());
    assert_ne!(a.data(), b.data());
}
