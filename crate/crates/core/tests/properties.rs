//! Property tests for the numeric invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;

use aat_core::adapters::{prompt_inject, prompt_strip};
use aat_core::data::{load_tensors, save_tensors};
use aat_core::tape::Tape;
use aat_core::tensor::Tensor;
use aat_core::training::{accuracy, mean_average_precision};
use aat_core::transformer::{interpolate_pos_embed, Model, ModelConfig, Variant};

fn finite_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |data| Tensor::matrix(rows, cols, data).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(x in (1usize..5, 1usize..6).prop_flat_map(|(r, c)| finite_matrix(r, c))) {
        let mut tape = Tape::new();
        let rows = x.rows();
        let cols = x.cols();
        let v = tape.constant(x);
        let y = tape.softmax(v, 1).unwrap();
        let out = tape.value(y);
        for i in 0..rows {
            let mut sum = 0.0;
            for j in 0..cols {
                let p = out.at2(i, j);
                prop_assert!((0.0..=1.0).contains(&p));
                sum += p;
            }
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_rows_are_standardized(x in (1usize..5, 2usize..8).prop_flat_map(|(r, c)| finite_matrix(r, c))) {
        let cols = x.cols();
        let rows = x.rows();
        // skip near-constant rows; standardization is undefined there
        for i in 0..rows {
            let row: Vec<f64> = (0..cols).map(|j| x.at2(i, j)).collect();
            let spread = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - row.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
        }
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let gamma = tape.constant(Tensor::full(vec![cols], 1.0));
        let beta = tape.constant(Tensor::zeros(vec![cols]));
        let y = tape.layernorm(v, gamma, beta, 1e-12).unwrap();
        let out = tape.value(y);
        for i in 0..rows {
            let mean: f64 = (0..cols).map(|j| out.at2(i, j)).sum::<f64>() / cols as f64;
            let var: f64 =
                (0..cols).map(|j| (out.at2(i, j) - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_then_slice_is_identity(
        a in (1usize..4, 1usize..4).prop_flat_map(|(r, c)| finite_matrix(r, c)),
        extra_rows in 1usize..4,
    ) {
        let cols = a.cols();
        let rows = a.rows();
        let b = Tensor::full(vec![extra_rows, cols], 0.5);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b);
        let joined = tape.concat(&[va, vb], 0).unwrap();
        let back = tape.slice(joined, 0, 0, rows).unwrap();
        prop_assert_eq!(tape.value(back).data(), a.data());
    }

    #[test]
    fn prompt_inject_strip_roundtrips(
        x in (2usize..6, 1usize..5).prop_flat_map(|(r, c)| finite_matrix(r, c)),
        prompt_rows in 0usize..4,
    ) {
        let cols = x.cols();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let tokens = tape.constant(Tensor::full(vec![prompt_rows, cols], -0.25));
        let injected = prompt_inject(&mut tape, v, tokens).unwrap();
        let stripped = prompt_strip(&mut tape, injected, prompt_rows).unwrap();
        prop_assert_eq!(tape.value(stripped).data(), x.data());
    }

    #[test]
    fn tensor_container_roundtrips(
        entries in proptest::collection::btree_map(
            "[a-z]{1,8}(/[0-9]{1,3})?",
            (proptest::collection::vec(0usize..4, 0..3), any::<u64>()),
            0..5,
        )
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.aat");
        let mut map = BTreeMap::new();
        for (name, (shape, seed)) in entries {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 250.0)
                .collect();
            map.insert(name, Tensor::new(shape, data).unwrap());
        }
        save_tensors(&path, &map).unwrap();
        let loaded = load_tensors::<f64>(&path).unwrap();
        prop_assert_eq!(loaded, map);
    }

    #[test]
    fn metric_outputs_stay_in_unit_interval(
        logits in (2usize..6, 2usize..5).prop_flat_map(|(r, c)| finite_matrix(r, c)),
        label_seed in any::<u64>(),
    ) {
        let rows = logits.rows();
        let cols = logits.cols();
        let labels: Vec<usize> = (0..rows)
            .map(|i| ((label_seed.wrapping_add(i as u64)) % cols as u64) as usize)
            .collect();
        let acc = accuracy(&logits, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));

        let targets = Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| if (label_seed >> (i % 48)) & 1 == 1 { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        if targets.data().iter().any(|&t| t == 1.0) {
            let map = mean_average_precision(&logits, &targets).unwrap();
            prop_assert!((0.0..=1.0).contains(&map));
        }
    }

    #[test]
    fn interpolation_of_constants_is_constant(
        value in -2.0f64..2.0,
        from_t in 1usize..4,
        from_f in 1usize..4,
        to_t in 1usize..5,
        to_f in 1usize..5,
    ) {
        let pos = Tensor::full(vec![from_t * from_f + 1, 3], value);
        let out = interpolate_pos_embed(&pos, (from_t, from_f), (to_t, to_f)).unwrap();
        prop_assert_eq!(out.shape(), &[to_t * to_f + 1, 3]);
        for &v in out.data() {
            prop_assert!((v - value).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn zero_init_adapters_never_change_the_function(seed in 0u64..500) {
        let mut vanilla_config = ModelConfig::tiny();
        vanilla_config.prompt_len = 0;
        let vanilla = Model::<f64>::new(vanilla_config.clone(), seed).unwrap();
        let spec = aat_core::rng::uniform_tensor(
            &mut aat_core::rng::stream(seed, "identity-input"),
            vec![8, 8],
            1.0,
        );
        let mut tape = Tape::new();
        let base = vanilla.forward(&mut tape, &spec).unwrap();
        for variant in [Variant::AatM, Variant::AatMs] {
            let mut config = vanilla_config.clone();
            config.variant = variant;
            let adapted = Model::<f64>::new(config, seed).unwrap();
            let out = adapted.forward(&mut tape, &spec).unwrap();
            let diff = tape.value(out).max_abs_diff(tape.value(base)).unwrap();
            prop_assert!(diff < 1e-10, "variant {variant}: diff {diff}");
        }
    }
}
