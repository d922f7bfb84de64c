use factornas_core::activations::ActivationKind;
use factornas_core::data::{cutout, split_dataset, synth_generate, AugmentPolicy, Difficulty, SynthSpec};
use factornas_core::evaluator::{drop_path, evaluate, retrain, DiscreteNetwork, TrainConfig, Trainer, AUX_PREFIX};
use factornas_core::genotype::{random_genotype, Genotype};
use factornas_core::rng::{stream, Stream};
use factornas_core::space::{RegularOpKind, SpaceConfig};
use factornas_core::supernet::reduction_layers;
use factornas_core::{Error, Graph, Mode, Tensor};
use proptest::prelude::*;

const FIXED: &str = "\
normal 2 <- 0 sep_conv_3x3 @selu
normal 2 <- 1 skip_connect
normal 3 <- 0 dil_conv_5x5 @prelu
normal 3 <- 2 max_pool_3x3
normal 4 <- 1 sep_conv_5x5 @swish
normal 4 <- 3 avg_pool_3x3
normal 5 <- 2 dil_conv_3x3 @relu
normal 5 <- 4 skip_connect
reduce 2 <- 0 skip_connect
reduce 2 <- 1 sep_conv_3x3 @elu
reduce 3 <- 1 max_pool_3x3
reduce 3 <- 2 dil_conv_3x3 @rrelu
reduce 4 <- 0 sep_conv_5x5 @prelu
reduce 4 <- 3 skip_connect
reduce 5 <- 0 dil_conv_5x5 @selu
reduce 5 <- 4 avg_pool_3x3
";

fn all_skip() -> Genotype {
    let text: String = ["normal", "reduce"]
        .iter()
        .flat_map(|c| (2..6).flat_map(move |to| [0, 1].map(|from| format!("{c} {to} <- {from} skip_connect\n"))))
        .collect();
    Genotype::parse(&text).unwrap()
}

fn bn(c: usize) -> usize {
    2 * c
}

/// Trainable parameters of one selected edge.
fn edge_params(op: RegularOpKind, act: Option<ActivationKind>, c: usize, stride: usize) -> usize {
    let conv = |k: usize| c * k * k + c * c + bn(c);
    let own = match op {
        RegularOpKind::SepConv3x3 => 2 * conv(3),
        RegularOpKind::SepConv5x5 => 2 * conv(5),
        RegularOpKind::DilConv3x3 => conv(3),
        RegularOpKind::DilConv5x5 => conv(5),
        RegularOpKind::MaxPool3x3 | RegularOpKind::AvgPool3x3 => bn(c),
        RegularOpKind::SkipConnect if stride == 1 => 0,
        RegularOpKind::SkipConnect => 2 * (c * c / 2) + bn(c),
        RegularOpKind::None => unreachable!(),
    };
    let learnable = matches!(act, Some(ActivationKind::PRelu) | Some(ActivationKind::Swish));
    own + usize::from(learnable)
}

/// Independent count of the trainable parameters outside the auxiliary head.
fn hand_count(g: &Genotype, in_c: usize, classes: usize, layers: usize, c: usize, stem_mult: usize) -> usize {
    let c_stem = stem_mult * c;
    let mut total = 9 * in_c * c_stem + bn(c_stem);
    let (mut c_pp, mut c_p, mut cur) = (c_stem, c_stem, c);
    let mut reduction_prev = false;
    for i in 0..layers {
        let reduction = reduction_layers(layers).contains(&i);
        if reduction {
            cur *= 2;
        }
        total += if reduction_prev { 2 * (c_pp * cur / 2) + bn(cur) } else { c_pp * cur + bn(cur) };
        total += c_p * cur + bn(cur);
        let cell = &g.cells[usize::from(reduction && g.cells.len() > 1)];
        for s in cell {
            let stride = if reduction && s.from < 2 { 2 } else { 1 };
            total += edge_params(s.op, s.activation, cur, stride);
        }
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = g.nodes * cur;
    }
    total + c_p * classes + classes
}

fn cfg(layers: usize, channels: usize) -> TrainConfig {
    TrainConfig { layers, channels, ..TrainConfig::default() }
}

#[test]
fn parameter_count_matches_hand_count() {
    let g = Genotype::parse(FIXED).unwrap();
    let net = DiscreteNetwork::new(&g, 3, 10, &cfg(8, 16)).unwrap();
    assert_eq!(net.param_count(), hand_count(&g, 3, 10, 8, 16, 3));
    for (layers, channels, classes) in [(3, 4, 2), (5, 8, 4), (20, 6, 10)] {
        let net = DiscreteNetwork::new(&g, 1, classes, &cfg(layers, channels)).unwrap();
        assert_eq!(net.param_count(), hand_count(&g, 1, classes, layers, channels, 3));
    }
    let mut r = stream(0, Stream::Baseline);
    for _ in 0..10 {
        let g = random_genotype(&SpaceConfig::default(), &mut r).unwrap();
        let net = DiscreteNetwork::new(&g, 3, 4, &cfg(8, 8)).unwrap();
        assert_eq!(net.param_count(), hand_count(&g, 3, 4, 8, 8, 3));
    }
}

#[test]
fn all_skip_normal_cells_have_no_edge_parameters() {
    let net = DiscreteNetwork::new(&all_skip(), 3, 10, &cfg(8, 16)).unwrap();
    let reductions = reduction_layers(8);
    let edge_params: Vec<_> = net.weights.entries().iter().filter(|e| e.trainable && e.name.contains(".edge")).collect();
    assert!(!edge_params.is_empty());
    for e in edge_params {
        let layer: usize = e.name.split('.').nth(1).unwrap().parse().unwrap();
        assert!(reductions.contains(&layer), "{}", e.name);
    }
}

#[test]
fn parameter_count_grows_with_channels() {
    let g = Genotype::parse(FIXED).unwrap();
    let counts: Vec<usize> =
        [2, 4, 6, 8, 12, 16].iter().map(|&c| DiscreteNetwork::new(&g, 3, 10, &cfg(5, c)).unwrap().param_count()).collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
}

#[test]
fn no_architecture_parameters_and_activation_free_cost() {
    let g = Genotype::parse(FIXED).unwrap();
    let mut net = DiscreteNetwork::new(&g, 3, 10, &cfg(5, 8)).unwrap();
    assert!(net.weights.entries().iter().all(|e| !e.name.starts_with("alpha") && !e.name.starts_with("beta")));
    let macs = net.macs(16, 16).unwrap();
    for kind in [ActivationKind::Relu, ActivationKind::Selu, ActivationKind::Swish] {
        let mut other = DiscreteNetwork::new(&g.with_activation(kind), 3, 10, &cfg(5, 8)).unwrap();
        assert_eq!(other.macs(16, 16).unwrap(), macs);
    }
}

#[test]
fn mismatched_inputs_are_configuration_errors() {
    let g = Genotype::parse(FIXED).unwrap();
    let mut three = g.clone();
    three.cells.push(g.cells[0].clone());
    assert!(matches!(DiscreteNetwork::new(&three, 3, 10, &cfg(5, 8)), Err(Error::Config(_))));
    assert!(matches!(DiscreteNetwork::new(&g, 0, 10, &cfg(5, 8)), Err(Error::Config(_))));
    let bad = TrainConfig { drop_path: 1.0, ..cfg(5, 8) };
    assert!(matches!(DiscreteNetwork::new(&g, 3, 10, &bad), Err(Error::Config(_))));
}

#[test]
fn drop_path_identities() {
    let x = Tensor::full(&[5, 2, 3, 3], 1.5);
    let mut r = stream(0, Stream::DropPath);
    assert_eq!(drop_path(&x, 0.0, Mode::Train, &mut r).unwrap(), x);
    assert_eq!(drop_path(&x, 0.7, Mode::Eval, &mut r).unwrap(), x);
    assert!(matches!(drop_path(&x, 1.0, Mode::Train, &mut r), Err(Error::Config(_))));
}

#[test]
fn drop_path_monte_carlo() {
    let n = 20_000;
    let x = Tensor::full(&[n, 1, 1, 2], 1.0);
    let y = drop_path(&x, 0.4, Mode::Train, &mut stream(1, Stream::DropPath)).unwrap();
    let per: Vec<&[f64]> = y.data().chunks(2).collect();
    assert!(per.iter().all(|s| s[0] == s[1] && (s[0] == 0.0 || (s[0] - 1.0 / 0.6).abs() < 1e-12)));
    let survivors = per.iter().filter(|s| s[0] > 0.0).count() as f64 / n as f64;
    assert!((survivors - 0.6).abs() <= 0.05, "{survivors}");
    let mean = y.data().iter().sum::<f64>() / y.len() as f64;
    assert!((mean - 1.0).abs() <= 0.02, "{mean}");
}

#[test]
fn cutout_geometry() {
    let img = Tensor::full(&[3, 32, 32], 1.0);
    let mut r = stream(2, Stream::Augment);
    assert_eq!(cutout(&img, 0, &mut r).unwrap(), img);
    assert!(cutout(&img, 64, &mut r).unwrap().data().iter().all(|&v| v == 0.0));
    for _ in 0..500 {
        let out = cutout(&img, 16, &mut r).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros % 3, 0);
        let area = zeros / 3;
        assert!((64..=256).contains(&area), "{area}");
    }
}

#[test]
fn smoothing_leaves_uniform_loss_at_log_k() {
    for k in [2usize, 4, 10] {
        for eps in [0.0, 0.1, 0.5] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::zeros(&[3, k]));
            let l = g.cross_entropy(z, &[0, 1, k - 1], eps).unwrap();
            assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);
        }
    }
}

fn tiny(samples: usize) -> (factornas_core::data::Dataset, factornas_core::data::Dataset) {
    let spec = SynthSpec { classes: 4, samples, size: 8, channels: 3, seed: 0, difficulty: Difficulty::Easy };
    split_dataset(&synth_generate(&spec).unwrap(), (0.8, 0.2), 0).unwrap()
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        layers: 3,
        channels: 4,
        epochs,
        batch_size: 16,
        augment: AugmentPolicy { pad_crop: 1, flip: true, cutout: 4 },
        ..TrainConfig::default()
    }
}

#[test]
fn total_loss_is_main_plus_weighted_aux() {
    let (train, _) = tiny(40);
    let g = Genotype::parse(FIXED).unwrap().with_activation(ActivationKind::Selu);
    let cfg = TrainConfig { drop_path: 0.0, label_smoothing: 0.1, ..small_train(1) };
    let mut t = Trainer::new(&g, &train, cfg).unwrap();
    let (x, y) = train.batch(&[0, 1, 2, 3, 4, 5]);
    let mut net = t.net.clone();
    let mut gr = Graph::new();
    let mut r = stream(0, Stream::RRelu);
    let (logits, aux) = net.forward(&mut gr, &x, Mode::Train, 0.0, &mut r, false).unwrap();
    let main = gr.cross_entropy(logits, &y, 0.1).unwrap();
    let aux = gr.cross_entropy(aux.expect("aux head in train mode"), &y, 0.1).unwrap();
    let expected = gr.value(main).item() + 0.4 * gr.value(aux).item();
    let (loss, _) = t.train_batch(&x, &y).unwrap();
    assert!((loss - expected).abs() < 1e-12);
    let aux_grad: f64 =
        t.net.weights.entries().iter().filter(|e| e.name.starts_with(AUX_PREFIX)).flat_map(|e| e.grad.iter()).map(|v| v.abs()).sum();
    assert!(aux_grad > 0.0);

    let mut gr = Graph::new();
    let (_, aux) = net.forward(&mut gr, &x, Mode::Eval, 0.4, &mut r, false).unwrap();
    assert!(aux.is_none());
}

#[test]
fn eval_is_deterministic() {
    let (train, test) = tiny(60);
    let mut t = Trainer::new(&Genotype::parse(FIXED).unwrap(), &train, small_train(1)).unwrap();
    let a = evaluate(&mut t.net, &test, 5).unwrap();
    let b = evaluate(&mut t.net, &test, 7).unwrap();
    assert!((a.0 - b.0).abs() < 1e-12);
    assert_eq!(a.1, b.1);
}

#[test]
fn one_epoch_smoke_on_two_hundred_samples() {
    let (train, test) = tiny(200);
    let mut seen = Vec::new();
    let (t, m) = retrain(&Genotype::parse(FIXED).unwrap(), &train, &test, small_train(1), |e| {
        seen.push(*e);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(m.epochs, seen);
    assert_eq!(t.epoch, 1);
    let e = m.epochs[0];
    assert!((0.0..=100.0).contains(&e.train_err) && (0.0..=100.0).contains(&e.test_err));
    assert!(e.train_loss.is_finite() && e.test_loss.is_finite());
    assert_eq!(m.final_test_error, e.test_err);
    assert!(m.params > 0 && m.macs > 0);
}

#[test]
fn retraining_is_deterministic_under_seed() {
    let (train, test) = tiny(60);
    let g = Genotype::parse(FIXED).unwrap();
    let run = |seed| retrain(&g, &train, &test, TrainConfig { seed, ..small_train(2) }, |_| Ok(())).unwrap();
    let (a, ma) = run(3);
    let (b, mb) = run(3);
    assert_eq!(ma, mb);
    assert_eq!(a.net.weights, b.net.weights);
    let (_, mc) = run(4);
    assert_ne!(ma.epochs, mc.epochs);
}

#[test]
fn drop_path_ramps_linearly() {
    let (train, test) = tiny(40);
    let mut t = Trainer::new(&all_skip(), &train, TrainConfig { drop_path: 0.3, ..small_train(3) }).unwrap();
    let mut probs = Vec::new();
    for _ in 0..3 {
        probs.push(t.drop_prob());
        t.run_epoch(&train, &test).unwrap();
    }
    for (p, want) in probs.iter().zip([0.0, 0.1, 0.2]) {
        assert!((p - want).abs() < 1e-15);
    }
}

#[test]
fn divergence_reports_the_epoch() {
    let (train, _) = tiny(40);
    let mut t = Trainer::new(&Genotype::parse(FIXED).unwrap(), &train, small_train(1)).unwrap();
    let mut x = train.batch(&[0, 1, 2, 3]).0;
    x.data_mut()[5] = f64::NAN;
    match t.train_batch(&x, &[0, 1, 2, 3]) {
        Err(Error::Numerical { context }) => assert!(context.contains("epoch 1"), "{context}"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_genotypes_match_hand_count(seed in 0u64..1000, layers in 3usize..=9, half in 1usize..=6) {
        let g = random_genotype(&SpaceConfig::default(), &mut stream(seed, Stream::Baseline)).unwrap();
        let net = DiscreteNetwork::new(&g, 3, 5, &cfg(layers, 2 * half)).unwrap();
        prop_assert_eq!(net.param_count(), hand_count(&g, 3, 5, layers, 2 * half, 3));
    }
}
