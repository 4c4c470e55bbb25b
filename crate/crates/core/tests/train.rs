use muchgcn::graphio::{batchify, generate_synthetic, Dataset, SyntheticFamily};
use muchgcn::tape::Fault;
use muchgcn::train::{
    clip_gradients, global_norm, run_cv, train_step, Adam, AdamConfig, TrainConfig, DEFAULT_CLIP_NORM,
};
use muchgcn::verify::{gradcheck_model, tiny_config, GradCheckOptions};
use muchgcn::{Model, ModelConfig, Tensor, Variant};
use proptest::prelude::*;

fn tensors(parts: &[Vec<f64>]) -> Vec<Tensor> {
    parts.iter().map(|p| Tensor::vector(p.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn clipped_norm_never_exceeds_the_bound(
        parts in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..20), 1..6),
    ) {
        let mut g = tensors(&parts);
        let before = clip_gradients(&mut g, DEFAULT_CLIP_NORM);
        let after = global_norm(&g);
        prop_assert!(after <= DEFAULT_CLIP_NORM + 1e-12);
        if before <= DEFAULT_CLIP_NORM {
            prop_assert_eq!(g, tensors(&parts));
        }
    }

    #[test]
    fn first_adam_step_moves_each_entry_by_at_most_lr(
        grad in prop::collection::vec(-10.0f64..10.0, 1..30),
    ) {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg);
        let mut p = vec![0.5; grad.len()];
        adam.begin_step();
        adam.update(0, &mut p, &grad);
        for (x, g) in p.iter().zip(&grad) {
            let step = (x - 0.5).abs();
            prop_assert!(step <= cfg.lr * (1.0 + 1e-12));
            if g.abs() > 1e-3 {
                prop_assert!((step - cfg.lr).abs() <= cfg.lr * 1e-4);
            }
        }
    }
}

#[test]
fn clip_examples() {
    let mut g = tensors(&[vec![3.0, 4.0]]);
    assert_eq!(clip_gradients(&mut g, 2.0), 5.0);
    assert!(g[0].max_abs_diff(&Tensor::vector(vec![1.2, 1.6])) <= 1e-15);
    let mut g = tensors(&[vec![0.6], vec![0.8]]);
    clip_gradients(&mut g, 2.0);
    assert_eq!(g, tensors(&[vec![0.6], vec![0.8]]));
}

fn small_config(ds: &Dataset, variant: Variant) -> ModelConfig {
    let mut cfg = tiny_config(variant);
    cfg.hidden = 8;
    cfg.d_in = ds.d_in;
    cfg.num_classes = ds.num_classes;
    cfg.max_nodes = ds.max_nodes;
    cfg
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let ds = generate_synthetic(SyntheticFamily::CyclesVsChords, 20, 1).unwrap();
    let cfg = small_config(&ds, Variant::MuchgcnMh);
    let mut model = Model::new(cfg, 1).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let batch = &batchify(&ds, &idx, 8, ds.max_nodes).unwrap()[0];
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    });
    let first = train_step(&mut model, &mut adam, batch, DEFAULT_CLIP_NORM).unwrap();
    let mut last = first;
    for _ in 0..40 {
        last = train_step(&mut model, &mut adam, batch, DEFAULT_CLIP_NORM).unwrap();
    }
    assert!(last.loss < 0.5 * first.loss, "{} -> {}", first.loss, last.loss);
}

#[test]
fn cross_validation_is_deterministic_and_well_formed() {
    let ds = generate_synthetic(SyntheticFamily::KCommunities, 24, 5).unwrap();
    let cfg = small_config(&ds, Variant::MuchgcnMh);
    let train = TrainConfig {
        epochs: 3,
        batch_size: 6,
        folds: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = run_cv(&ds, &cfg, &train, None).unwrap();
    let b = run_cv(&ds, &cfg, &train, None).unwrap();
    let c = run_cv(
        &ds,
        &cfg,
        &TrainConfig {
            parallel_folds: 3,
            ..train.clone()
        },
        None,
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(a.fold_accuracies.len(), 3);
    assert_eq!(a.epochs.len(), 9);
    assert!(a.fold_accuracies.iter().all(|x| (0.0..=1.0).contains(x)));
    let mean = a.fold_accuracies.iter().sum::<f64>() / 3.0;
    let var = a.fold_accuracies.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    assert!((a.mean_accuracy - mean).abs() < 1e-15);
    assert!((a.std_accuracy - var.sqrt()).abs() < 1e-15);

    let other = run_cv(&ds, &cfg, &TrainConfig { seed: 10, ..train }, None).unwrap();
    assert_ne!(a.epochs, other.epochs);
}

#[test]
fn mismatched_model_and_dataset_are_rejected() {
    let ds = generate_synthetic(SyntheticFamily::CyclesVsChords, 20, 0).unwrap();
    let mut cfg = small_config(&ds, Variant::FlatGcn);
    cfg.d_in += 1;
    let train = TrainConfig {
        epochs: 1,
        folds: 2,
        ..TrainConfig::default()
    };
    assert!(run_cv(&ds, &cfg, &train, None).is_err());
}

#[test]
fn gradcheck_passes_for_flat_and_full_models() {
    for variant in [Variant::FlatGcn, Variant::MuchgcnMh] {
        let r = gradcheck_model(&tiny_config(variant), 0, &GradCheckOptions::default()).unwrap();
        assert!(r.passed, "{variant:?}: {:?}", r.failures);
        assert!(r.max_rel_error <= 1e-5);
        assert!(r.loss_gap <= 1e-12);
    }
}

#[test]
fn gradcheck_catches_a_broken_relu_rule() {
    let opts = GradCheckOptions {
        fault: Some(Fault::ReluGradScale(1.01)),
        ..GradCheckOptions::default()
    };
    let r = gradcheck_model(&tiny_config(Variant::MuchgcnMh), 0, &opts).unwrap();
    assert!(!r.passed);
    assert!(!r.failures.is_empty());
}
