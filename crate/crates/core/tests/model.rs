use muchgcn::graphio::{Batch, Graph};
use muchgcn::layers::ChannelFilter;
use muchgcn::model::{next_node_count, Body, ModelParams};
use muchgcn::nn::Mlp;
use muchgcn::train::{train_step, Adam, AdamConfig};
use muchgcn::verify::{jitter, random_graph, reference_forward, tiny_config};
use muchgcn::{Model, ModelConfig, Tape, Tensor, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EQUIV_TOL: f64 = 1e-9;

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn logits(model: &Model, graphs: &[&Graph], train: bool) -> Vec<Vec<f64>> {
    let batch = Batch::from_graphs(graphs, model.config.max_nodes).unwrap();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, train).unwrap();
    let v = tape.value(out.logits);
    v.data().chunks(v.row_len()).map(<[f64]>::to_vec).collect()
}

fn randomized(config: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    jitter(&mut model, 0.3, &mut rng);
    model.params.visit_norms_mut(&mut |_, bn| {
        for v in &mut bn.running_mean {
            *v = rng.random_range(-0.2..0.2);
        }
        for v in &mut bn.running_var {
            *v = rng.random_range(0.5..1.5);
        }
    });
    model
}

fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

fn variant_strategy() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn logits_are_invariant_to_node_order(variant in variant_strategy(), seed in any::<u64>(), train in any::<bool>()) {
        let mut config = tiny_config(variant);
        config.max_nodes = 8;
        let model = randomized(config.clone(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graphs: Vec<Graph> = (0..2)
            .map(|i| random_graph(rng.random_range(2..=8), config.d_in, i, &mut rng))
            .collect();
        let moved: Vec<Graph> = graphs
            .iter()
            .map(|g| g.permuted(&permutation(g.num_nodes(), &mut rng)))
            .collect();
        let a = logits(&model, &graphs.iter().collect::<Vec<_>>(), train);
        let b = logits(&model, &moved.iter().collect::<Vec<_>>(), train);
        prop_assert!(max_diff(&a, &b) <= EQUIV_TOL, "{variant:?}: {a:?} vs {b:?}");
    }
}

/// θ one-hot on the last multiset entry and no bias, so the filter passes
/// `H_K` (or its image under `phi`) straight through.
fn select_last(len: usize, phi: Mlp<Tensor>) -> ChannelFilter<Tensor> {
    let mut theta = Tensor::zeros(&[len]);
    theta.data_mut()[len - 1] = 1.0;
    ChannelFilter {
        theta,
        bias: Tensor::scalar(0.0),
        phi,
    }
}

fn graphs_for(config: &ModelConfig, seed: u64) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|i| random_graph(rng.random_range(3..=config.max_nodes), config.d_in, i % 2, &mut rng))
        .collect()
}

#[test]
fn flat_baseline_is_a_pinned_single_layer_multi_channel_model() {
    for seed in 0..5 {
        let flat_cfg = ModelConfig {
            variant: Variant::FlatGcn,
            layers: 1,
            steps: 3,
            hidden: 5,
            assign_ratio: vec![],
            channel_expansion: vec![1],
            max_nodes: 9,
            num_classes: 3,
            d_in: 4,
            entropy_weight: 0.1,
        };
        let flat = randomized(flat_cfg.clone(), seed);
        let mc_cfg = ModelConfig {
            variant: Variant::MuchgcnM,
            ..flat_cfg.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init_multi_channel(&mc_cfg, &mut rng).unwrap();
        let (Body::Flat(conv), Body::MultiChannel(layers)) = (&flat.params.body, &mut params.body) else {
            unreachable!()
        };
        layers[0].conv = conv.clone();
        layers[0].embed = vec![select_last(1 + flat_cfg.steps, Mlp::identity())];
        params.classifier = flat.params.classifier.clone();
        let pinned = Model::from_params(mc_cfg, params);

        let graphs = graphs_for(&flat_cfg, seed);
        let refs: Vec<&Graph> = graphs.iter().collect();
        for train in [false, true] {
            let d = max_diff(&logits(&flat, &refs, train), &logits(&pinned, &refs, train));
            assert!(d <= EQUIV_TOL, "seed {seed}, train {train}: {d:e}");
        }
    }
}

#[test]
fn diffpool_baseline_is_a_pinned_single_channel_hierarchy() {
    for seed in 0..5 {
        let dp_cfg = ModelConfig {
            variant: Variant::DiffpoolGcn,
            layers: 3,
            steps: 2,
            hidden: 4,
            assign_ratio: vec![0.5, 0.5],
            channel_expansion: vec![1, 1, 1],
            max_nodes: 8,
            num_classes: 2,
            d_in: 3,
            entropy_weight: 0.1,
        };
        let dp = randomized(dp_cfg.clone(), seed);
        let h_cfg = ModelConfig {
            variant: Variant::MuchgcnH,
            ..dp_cfg.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&h_cfg, &mut rng).unwrap();
        let (Body::DiffPool(dp_layers), Body::MultiChannel(layers)) = (&dp.params.body, &mut params.body) else {
            unreachable!()
        };
        let len = 1 + dp_cfg.steps;
        for (layer, src) in layers.iter_mut().zip(dp_layers) {
            layer.conv = src.conv.clone();
            layer.embed = vec![select_last(len, Mlp::identity())];
            layer.pool = src.pool_head.iter().map(|head| select_last(len, head.clone())).collect();
        }
        params.classifier = dp.params.classifier.clone();
        let pinned = Model::from_params(h_cfg, params);

        let graphs = graphs_for(&dp_cfg, seed);
        let refs: Vec<&Graph> = graphs.iter().collect();
        for train in [false, true] {
            let d = max_diff(&logits(&dp, &refs, train), &logits(&pinned, &refs, train));
            assert!(d <= EQUIV_TOL, "seed {seed}, train {train}: {d:e}");
        }
    }
}

#[test]
fn node_and_channel_schedule() {
    let mut cfg = ModelConfig::preset(Variant::MuchgcnMh, 3, 5, 2, 100);
    cfg.assign_ratio = vec![0.25, 0.25];
    let plans = cfg.plan_shapes().unwrap();
    assert_eq!(plans.iter().map(|p| p.nodes).collect::<Vec<_>>(), [100, 25, 7]);

    let cfg = ModelConfig::preset(Variant::MuchgcnMh, 2, 5, 2, 50);
    let plans = cfg.plan_shapes().unwrap();
    assert_eq!(plans.iter().map(|p| p.channels).collect::<Vec<_>>(), [1, 4]);
    assert_eq!(plans[1].multiset_len, 13);

    let mut cfg = tiny_config(Variant::MuchgcnMh);
    cfg.channel_expansion = vec![2, 2];
    let plans = cfg.plan_shapes().unwrap();
    assert_eq!((plans[1].channels, plans[1].embed_filters), (2, 4));

    assert_eq!(next_node_count(0.1, 30), 3);
    assert_eq!(next_node_count(0.25, 3), 1);
}

#[test]
fn readout_width_is_hidden_times_layers() {
    for variant in Variant::ALL {
        let cfg = tiny_config(variant);
        let model = Model::new(cfg.clone(), 1).unwrap();
        let g = graphs_for(&cfg, 1);
        let batch = Batch::from_graphs(&[&g[0], &g[1]], cfg.max_nodes).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, false).unwrap();
        assert_eq!(tape.shape(out.readout), [2, cfg.hidden * cfg.layers], "{variant:?}");
        assert_eq!(tape.shape(out.logits), [2, cfg.num_classes]);
    }
}

#[test]
fn variant_rules_and_ranges_are_enforced() {
    let ok = tiny_config(Variant::MuchgcnMh);
    let mut bad = ok.clone();
    bad.assign_ratio = vec![0.0];
    assert!(Model::new(bad.clone(), 0).is_err());
    bad.assign_ratio = vec![1.5];
    assert!(Model::new(bad, 0).is_err());
    let mut bad = ok.clone();
    bad.channel_expansion = vec![0, 2];
    assert!(Model::new(bad, 0).is_err());
    let mut bad = ok.clone();
    bad.steps = 0;
    assert!(Model::new(bad, 0).is_err());
    let mut bad = ok.clone();
    bad.assign_ratio = vec![1.0];
    assert!(Model::new(bad, 0).is_ok());

    let mut m = tiny_config(Variant::MuchgcnM);
    m.layers = 2;
    m.assign_ratio = vec![0.5];
    m.channel_expansion = vec![2, 2];
    assert!(Model::new(m, 0).is_err());
    let mut h = tiny_config(Variant::MuchgcnH);
    h.channel_expansion = vec![2, 1];
    assert!(Model::new(h, 0).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_predictions_after_training() {
    let cfg = tiny_config(Variant::MuchgcnMh);
    let mut model = Model::new(cfg.clone(), 3).unwrap();
    let graphs = graphs_for(&cfg, 3);
    let refs: Vec<&Graph> = graphs.iter().collect();
    let batch = Batch::from_graphs(&refs, cfg.max_nodes).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..3 {
        train_step(&mut model, &mut adam, &batch, 2.0).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let loaded = Model::load(cfg.clone(), &path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.predict(&batch).unwrap(), model.predict(&batch).unwrap());

    let mut other = cfg;
    other.hidden = 5;
    let err = Model::load(other, &path).unwrap_err();
    assert!(matches!(err, muchgcn::Error::Checkpoint(_)), "{err}");
}

#[test]
fn reference_agrees_on_featureless_and_permuted_graphs() {
    for variant in Variant::ALL {
        let cfg = tiny_config(variant);
        let model = randomized(cfg.clone(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = random_graph(5, cfg.d_in, 0, &mut rng);
        g.features = Tensor::zeros(&[5, cfg.d_in]);
        let engine = model.predict(&Batch::single(&g, cfg.max_nodes).unwrap()).unwrap();
        let reference = reference_forward(&model, &g).unwrap();
        assert!(max_diff(&engine, &[reference]) <= 1e-10, "{variant:?}");

        let g = random_graph(6, cfg.d_in, 0, &mut rng);
        let p = g.permuted(&permutation(6, &mut rng));
        let e0 = model.predict(&Batch::single(&g, cfg.max_nodes).unwrap()).unwrap();
        let e1 = model.predict(&Batch::single(&p, cfg.max_nodes).unwrap()).unwrap();
        let r0 = reference_forward(&model, &g).unwrap();
        let r1 = reference_forward(&model, &p).unwrap();
        let shift_engine: Vec<f64> = e1[0].iter().zip(&e0[0]).map(|(a, b)| a - b).collect();
        let shift_reference: Vec<f64> = r1.iter().zip(&r0).map(|(a, b)| a - b).collect();
        assert!(max_diff(&[shift_engine], &[shift_reference]) <= 1e-10, "{variant:?}");
    }
}
