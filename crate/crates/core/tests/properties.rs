use proptest::prelude::*;

use talos::data::{generate_suite, read_suite, write_suite, Placement};
use talos::fisher::{self, ScoreMode, ScoreOptions, SensitivityScores};
use talos::mask::{load_mask, save_mask, select, SelectionMode, SparseMask};
use talos::models::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use talos::task_vector::{self, decode_vector, encode_vector, posthoc_breadcrumbs, TaskVector};
use talos::{exec, FlatParams, SuiteConfig};

fn mlp(seed: u64) -> (Model, FlatParams) {
    Model::build(
        ModelConfig::mlp(3, 5, 3)
            .with_hidden_layers(2)
            .with_seed(seed),
    )
    .unwrap()
}

fn inputs(seed: u64, rows: usize, dim: usize) -> Vec<f64> {
    (0..rows * dim)
        .map(|i| ((seed as f64 + 1.0) * (i as f64 + 0.5) * 0.7311).sin())
        .collect()
}

fn tiny_suite(seed: u64, samples_per_class: usize) -> SuiteConfig {
    SuiteConfig {
        input_dim: 3,
        classes_per_task: 3,
        samples_per_class,
        num_tasks: 1,
        region_separation: 6.0,
        noise_sigma: 0.3,
        cluster_spread: 0.6,
        placement: Placement::Axis,
        seed,
        ..SuiteConfig::default()
    }
}

fn sparse_vector(theta0: &FlatParams, entries: Vec<(usize, f64)>) -> TaskVector {
    let mut dense = vec![0.0; theta0.len()];
    for (j, v) in entries {
        dense[j % theta0.len()] = v;
    }
    let star = theta0
        .with_values(
            theta0
                .values
                .iter()
                .zip(&dense)
                .map(|(a, d)| a + d)
                .collect(),
        )
        .unwrap();
    task_vector::make(&star, theta0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_matches_finite_differences(seed in 0u64..1000, coord in 0usize..1000) {
        let (model, params) = mlp(seed);
        let x = inputs(seed, 4, 3);
        let y = vec![0, 1, 2, 1];
        let (_, g) = model.loss_and_grad(&params, &x, &y, 0).unwrap();
        let j = coord % params.len();
        let h = 1e-5;
        let mut plus = params.values.clone();
        plus[j] += h;
        let mut minus = params.values.clone();
        minus[j] -= h;
        let lp = model.loss_and_grad(&params.with_values(plus).unwrap(), &x, &y, 0).unwrap().0;
        let lm = model.loss_and_grad(&params.with_values(minus).unwrap(), &x, &y, 0).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        prop_assert!((fd - g[j]).abs() <= 1e-6 + 1e-4 * g[j].abs(), "fd {fd} vs {}", g[j]);
    }

    #[test]
    fn jvp_is_linear_in_tangent(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (model, params) = mlp(seed);
        let x = inputs(seed, 3, 3);
        let u: Vec<f64> = (0..params.len()).map(|i| ((i * 7 + seed as usize) % 11) as f64 / 11.0 - 0.5).collect();
        let v: Vec<f64> = (0..params.len()).map(|i| ((i * 3 + 1) % 5) as f64 / 5.0 - 0.4).collect();
        let w: Vec<f64> = u.iter().zip(&v).map(|(p, q)| a * p + b * q).collect();
        let ju = model.jvp(&params, &u, &x, 0).unwrap();
        let jv = model.jvp(&params, &v, &x, 0).unwrap();
        let jw = model.jvp(&params, &w, &x, 0).unwrap();
        for ((p, q), r) in ju.data().iter().zip(jv.data()).zip(jw.data()) {
            prop_assert!((a * p + b * q - r).abs() <= 1e-9 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn apply_is_linear_in_coefficients(
        seed in 0u64..100,
        e1 in prop::collection::vec((0usize..500, -1.0f64..1.0), 1..20),
        e2 in prop::collection::vec((0usize..500, -1.0f64..1.0), 1..20),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let (_, theta0) = mlp(seed);
        let t1 = sparse_vector(&theta0, e1);
        let t2 = sparse_vector(&theta0, e2);
        let both = task_vector::apply(&theta0, &[(a, &t1), (b, &t2)]).unwrap();
        let d1 = t1.to_dense();
        let d2 = t2.to_dense();
        for j in 0..theta0.len() {
            let want = theta0.values[j] + a * d1[j] + b * d2[j];
            prop_assert!((both.values[j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        let zero = task_vector::apply(&theta0, &[(0.0, &t1)]).unwrap();
        prop_assert_eq!(&zero.values, &theta0.values);
    }

    #[test]
    fn vector_round_trip(seed in 0u64..100, e in prop::collection::vec((0usize..500, -1e3f64..1e3), 0..30)) {
        let (_, theta0) = mlp(seed);
        let tv = sparse_vector(&theta0, e);
        let back = decode_vector(&encode_vector(&tv).unwrap()).unwrap();
        prop_assert_eq!(back, tv);
    }

    #[test]
    fn select_keeps_exact_count_and_refines(
        p1 in 0.2f64..1.0,
        shrink in 0.1f64..1.0,
        seed in 0u64..100,
        mode in prop::sample::select(vec![SelectionMode::BottomK, SelectionMode::TopK, SelectionMode::Random]),
    ) {
        let (model, theta0) = mlp(seed);
        let layout = model.layout();
        let scores = SensitivityScores {
            values: (0..theta0.len()).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64).collect(),
            mode: ScoreMode::ExactExpectation,
            n_examples: 1,
            n_label_samples: 0,
        };
        let full = SparseMask::full(layout);
        let m = full.maskable_count();
        let first = select(Some(&scores), p1, &full, mode, seed).unwrap();
        prop_assert_eq!(first.kept_count(), (p1 * m as f64).floor() as usize);
        let p2 = p1 * shrink;
        let second = select(Some(&scores), p2, &first, mode, seed).unwrap();
        prop_assert_eq!(second.kept_count(), (p2 * m as f64).floor() as usize);
        let maskable = layout.maskable();
        for j in 0..theta0.len() {
            prop_assert!(!second.bits[j] || first.bits[j], "refinement added coordinate {j}");
            prop_assert!(!first.bits[j] || maskable[j]);
        }
        if mode == SelectionMode::BottomK && second.kept_count() > 0 {
            let kept_max = second.kept_indices().iter().map(|&j| scores.values[j]).fold(f64::MIN, f64::max);
            let dropped_min = first.kept_indices().iter().filter(|&&j| !second.bits[j]).map(|&j| scores.values[j]).fold(f64::MAX, f64::min);
            prop_assert!(kept_max <= dropped_min);
        }
    }

    #[test]
    fn breadcrumbs_keeps_middle_band(
        seed in 0u64..50,
        e in prop::collection::vec((0usize..500, -5.0f64..5.0), 5..40),
        keep in 0.0f64..0.6,
        outlier in 0.0f64..0.3,
    ) {
        let (_, theta0) = mlp(seed);
        let tv = sparse_vector(&theta0, e);
        let out = posthoc_breadcrumbs(&tv, keep, outlier).unwrap();
        prop_assert!(out.nnz() <= tv.nnz());
        let dense = tv.to_dense();
        for (j, v) in &out.entries {
            prop_assert_eq!(*v, dense[*j]);
        }
    }

    #[test]
    fn parallel_and_sequential_scores_agree(seed in 0u64..200) {
        let (model, params) = mlp(seed);
        let suite = generate_suite(&tiny_suite(seed, 8)).unwrap();
        let t = &suite.tasks[0];
        for mode in [ScoreMode::ExactExpectation, ScoreMode::Sampled, ScoreMode::AbsGrad] {
            let opts = ScoreOptions { mode, n_label_samples: 4, seed };
            exec::set_parallel(true);
            let a = fisher::score(&model, &params, None, &t.train, t.head, &opts).unwrap();
            exec::set_parallel(false);
            let b = fisher::score(&model, &params, None, &t.train, t.head, &opts).unwrap();
            exec::set_parallel(true);
            prop_assert_eq!(a.values, b.values);
        }
    }
}

#[test]
fn sampled_fisher_approaches_exact() {
    let (model, params) = mlp(4);
    let suite = generate_suite(&tiny_suite(0, 10)).unwrap();
    let t = &suite.tasks[0];
    let exact = fisher::score(
        &model,
        &params,
        None,
        &t.train,
        t.head,
        &ScoreOptions {
            mode: ScoreMode::ExactExpectation,
            n_label_samples: 1,
            seed: 0,
        },
    )
    .unwrap();
    let sampled = fisher::score(
        &model,
        &params,
        None,
        &t.train,
        t.head,
        &ScoreOptions {
            mode: ScoreMode::Sampled,
            n_label_samples: 4000,
            seed: 9,
        },
    )
    .unwrap();
    let scale = exact.values.iter().cloned().fold(0.0, f64::max);
    for (e, s) in exact.values.iter().zip(&sampled.values) {
        assert!((e - s).abs() <= 0.05 * scale, "exact {e} sampled {s}");
    }
}

#[test]
fn file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (model, params) = mlp(2);

    let ck = dir.path().join("m.tlsp");
    save_checkpoint(&ck, &model, &params).unwrap();
    let (m2, p2) = load_checkpoint(&ck).unwrap();
    assert_eq!(m2.config(), model.config());
    assert_eq!(p2.values, params.values);
    assert_eq!(p2.content_hash(), params.content_hash());

    let mut bits = vec![false; params.len()];
    let maskable = model.layout().maskable();
    for (j, b) in bits.iter_mut().enumerate() {
        *b = maskable[j] && j % 3 == 0;
    }
    let mask = SparseMask::from_bits(model.layout(), bits).unwrap();
    let mp = dir.path().join("m.tmsk");
    save_mask(&mp, &mask, &params.content_hash(), None).unwrap();
    let (back, hash) = load_mask(&mp).unwrap();
    assert_eq!(back.bits, mask.bits);
    assert_eq!(hash, params.content_hash());

    let cfg = SuiteConfig {
        samples_per_class: 12,
        num_tasks: 2,
        ..SuiteConfig::default()
    };
    let suite = generate_suite(&cfg).unwrap();
    let sd = dir.path().join("suite");
    write_suite(&sd, &suite).unwrap();
    assert_eq!(read_suite(&sd).unwrap(), suite);
}

#[test]
fn truncated_files_are_rejected() {
    let (_, theta0) = mlp(1);
    let tv = sparse_vector(&theta0, vec![(3, 1.0), (9, -2.0)]);
    let bytes = encode_vector(&tv).unwrap();
    for cut in [0, 4, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_vector(&bytes[..cut]).is_err());
    }
}
