mod common;

use common::toy::{plain_sgd, Toy};
use factornas_core::activations::{ActivationInstance, ActivationKind};
use factornas_core::data::{split_dataset, synth_generate, Dataset, Difficulty, SynthSpec};
use factornas_core::optim::{AdamConfig, OptimizerKind, SgdConfig};
use factornas_core::search::{
    mean_row_entropy, run_search, search_step, SearchConfig, SearchMode, SearchProblem, SearchRun, SearchState, Split,
};
use factornas_core::space::SpaceConfig;
use factornas_core::supernet::SuperNetConfig;
use factornas_core::{Error, Group, ParamStore, Result, Tensor};
use proptest::prelude::*;

#[test]
fn toy_step_matches_hand_computation() {
    let cfg = plain_sgd(SearchMode::Factorized, 0.05);
    let mut toy = Toy::new(0.5, 0.2, 0.1);
    let mut state = SearchState::new(&cfg, &toy);
    let losses = search_step(&mut toy, &mut state, &cfg, 0.1, &(), &(), &(), true).unwrap();

    let (w0, a0, b0) = (0.5, 0.2, 0.1);
    let w1 = w0 - 0.1 * (2.0 * (w0 - a0 - b0));
    let a1 = a0 - 0.05 * (2.0 * (a0 - b0));
    let b1 = b0 - 0.05 * (-2.0 * (a1 - b0));
    assert_eq!(toy.values(), [w1, a1, b1]);
    assert!((w1 - 0.46).abs() < 1e-15 && (a1 - 0.19).abs() < 1e-15 && (b1 - 0.109).abs() < 1e-15);
    assert_eq!(losses.train, (w0 - a0 - b0) * (w0 - a0 - b0));
    assert_eq!(losses.alpha, Some((w1 - 1.0) * (w1 - 1.0) + (a0 - b0) * (a0 - b0)));
    assert_eq!(losses.beta, Some((w1 - 1.0) * (w1 - 1.0) + (a1 - b0) * (a1 - b0)));
    assert_eq!(state.step, 1);
}

#[test]
fn evaluations_follow_the_update_order() {
    let cfg = SearchConfig { mode: SearchMode::Factorized, ..SearchConfig::default() };
    let mut toy = Toy::new(0.5, 0.2, 0.1);
    let mut state = SearchState::new(&cfg, &toy);
    let mut versions = vec![toy.values()];
    for _ in 0..3 {
        let before = toy.log.len();
        search_step(&mut toy, &mut state, &cfg, 0.1, &(), &(), &(), true).unwrap();
        let step = &toy.log[before..];
        let order: Vec<_> = step.iter().map(|e| (e.0, e.1)).collect();
        assert_eq!(order, [(Split::Train, Group::Weights), (Split::Val, Group::Alpha), (Split::Val, Group::Beta)]);
        let [w0, a0, b0] = *versions.last().unwrap();
        let [w1, a1, b1] = toy.values();
        assert_eq!(step[0].2, [w0, a0, b0]);
        assert_eq!(step[1].2, [w1, a0, b0]);
        assert_eq!(step[2].2, [w1, a1, b0]);
        assert_ne!(b1, b0);
        versions.push(toy.values());
    }
}

#[test]
fn modes_without_beta_skip_its_update() {
    for mode in [
        SearchMode::FixedActivation(ActivationInstance::new(ActivationKind::Relu)),
        SearchMode::NonFactorized,
        SearchMode::FrozenBeta(ParamStore::new()),
    ] {
        let cfg = SearchConfig { mode, ..SearchConfig::default() };
        let mut toy = Toy::new(0.5, 0.2, 0.1);
        let mut state = SearchState::new(&cfg, &toy);
        let l = search_step(&mut toy, &mut state, &cfg, 0.1, &(), &(), &(), true).unwrap();
        assert!(l.beta.is_none());
        assert_eq!(toy.log.len(), 2);
        assert_eq!(toy.values()[2], 0.1);
    }
    let cfg = SearchConfig::default();
    let mut toy = Toy::new(0.5, 0.2, 0.1);
    let mut state = SearchState::new(&cfg, &toy);
    let l = search_step(&mut toy, &mut state, &cfg, 0.1, &(), &(), &(), false).unwrap();
    assert_eq!((l.alpha, l.beta), (None, None));
    assert_eq!(&toy.values()[1..], &[0.2, 0.1]);
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let adam = OptimizerKind::Adam(AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 });
    let cfg =
        SearchConfig { weights_optimizer: SgdConfig { momentum: 0.9, weight_decay: 0.0 }, arch_optimizer: adam, ..SearchConfig::default() };
    let mut toy = Toy::new(0.5, 0.2, 0.1);
    toy.constant = true;
    let mut state = SearchState::new(&cfg, &toy);
    for _ in 0..5 {
        search_step(&mut toy, &mut state, &cfg, 0.1, &(), &(), &(), true).unwrap();
    }
    assert_eq!(toy.values(), [0.5, 0.2, 0.1]);
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    struct Nan;
    impl SearchProblem for Nan {
        type Batch = ();
        fn store(&self, _: Group) -> &ParamStore {
            unreachable!()
        }
        fn store_mut(&mut self, _: Group) -> &mut ParamStore {
            unreachable!()
        }
        fn loss_and_grad(&mut self, _: Split, _: &(), _: Group) -> Result<f64> {
            Ok(f64::NAN)
        }
    }
    let cfg = SearchConfig::default();
    let toy = Toy::new(0.0, 0.0, 0.0);
    let mut state = SearchState::new(&cfg, &toy);
    state.step = 7;
    match search_step(&mut Nan, &mut state, &cfg, 0.1, &(), &(), &(), true) {
        Err(Error::Numerical { context }) => assert!(context.contains("step 7"), "{context}"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn toy_validation_loss_never_increases(
        sum in 1.1f64..2.0,
        diff in -1.0f64..1.0,
        lead in 0.0f64..1.0,
        lr in 1e-4f64..1e-2,
    ) {
        let (a, b) = ((sum + diff) / 2.0, (sum - diff) / 2.0);
        let cfg = plain_sgd(SearchMode::Factorized, lr);
        let mut toy = Toy::new(sum + lead, a, b);
        let mut state = SearchState::new(&cfg, &toy);
        let mut last = toy.val_loss();
        for _ in 0..100 {
            search_step(&mut toy, &mut state, &cfg, lr, &(), &(), &(), true).unwrap();
            let now = toy.val_loss();
            prop_assert!(now <= last + 1e-15, "{now} > {last}");
            last = now;
        }
    }
}

fn tiny_data(seed: u64) -> (Dataset, Dataset) {
    let spec = SynthSpec { classes: 3, samples: 48, size: 8, channels: 3, seed, difficulty: Difficulty::Easy };
    let data = synth_generate(&spec).unwrap();
    split_dataset(&data, (0.5, 0.5), seed).unwrap()
}

fn tiny_space(acts: &[ActivationKind]) -> SpaceConfig {
    SpaceConfig {
        num_intermediate_nodes: 2,
        activation_ops: acts.iter().map(|&k| ActivationInstance::new(k)).collect(),
        ..SpaceConfig::default()
    }
}

fn tiny_run(space: SpaceConfig, mode: SearchMode, epochs: usize, seed: u64) -> SearchRun {
    let net = SuperNetConfig { in_channels: 3, num_classes: 3, channels: 4, layers: 3, stem_multiplier: 2 };
    let cfg = SearchConfig { epochs, batch_size: 8, mode, seed, ..SearchConfig::default() };
    SearchRun::new(space, net, cfg).unwrap()
}

#[test]
fn single_epoch_search_emits_one_row() {
    let (train, val) = tiny_data(0);
    let mut run = tiny_run(tiny_space(&ActivationKind::ALL), SearchMode::Factorized, 1, 0);
    let mut calls = 0;
    let out = run_search(&mut run, &train, &val, |_| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 1);
    assert_eq!(out.history.len(), 1);
    let row = &out.history[0];
    assert_eq!(row.epoch, 1);
    assert!(row.train_loss.is_finite() && row.val_loss.is_finite());
    assert!(row.alpha_entropy_mean > 0.0 && row.alpha_entropy_mean <= (8f64).ln() + 1e-12);
    assert!(row.beta_entropy_mean > 0.0 && row.beta_entropy_mean <= (9f64).ln() + 1e-12);
    out.genotype.validate().unwrap();
    assert_eq!(out.genotype, row.genotype);
    assert!(matches!(run.run_epoch(&train, &val), Err(Error::Usage(_))));
}

#[test]
fn entropy_of_uniform_rows_is_log_width() {
    let mut s = ParamStore::new();
    s.add("a", Tensor::zeros(&[3, 8]));
    assert!((mean_row_entropy(&s) - (8f64).ln()).abs() < 1e-12);
    assert_eq!(mean_row_entropy(&ParamStore::new()), 0.0);
}

#[test]
fn same_seed_gives_bitwise_identical_search() {
    let (train, val) = tiny_data(1);
    let mut a = tiny_run(tiny_space(&ActivationKind::ALL), SearchMode::Factorized, 2, 5);
    let mut b = tiny_run(tiny_space(&ActivationKind::ALL), SearchMode::Factorized, 2, 5);
    let oa = run_search(&mut a, &train, &val, |_| Ok(())).unwrap();
    let ob = run_search(&mut b, &train, &val, |_| Ok(())).unwrap();
    assert_eq!(oa.arch, ob.arch);
    assert_eq!(oa.history, ob.history);
    assert_eq!(a.problem.net.weights, b.problem.net.weights);
    let mut c = tiny_run(tiny_space(&ActivationKind::ALL), SearchMode::Factorized, 2, 6);
    let oc = run_search(&mut c, &train, &val, |_| Ok(())).unwrap();
    assert_ne!(oa.arch, oc.arch);
}

#[test]
fn frozen_beta_is_reproduced_exactly() {
    let (train, val) = tiny_data(2);
    let space = tiny_space(&ActivationKind::ALL);
    let mut source = tiny_run(space.clone(), SearchMode::Factorized, 1, 3);
    run_search(&mut source, &train, &val, |_| Ok(())).unwrap();
    let beta = source.arch().beta.clone();
    let mut run = tiny_run(space, SearchMode::FrozenBeta(beta.clone()), 2, 4);
    let alpha0 = run.arch().alpha.clone();
    let out = run_search(&mut run, &train, &val, |_| Ok(())).unwrap();
    assert_eq!(out.arch.beta, beta);
    assert_ne!(out.arch.alpha, alpha0);
    out.genotype.validate().unwrap();
}

#[test]
fn frozen_beta_of_the_wrong_shape_is_rejected() {
    let mut wrong = ParamStore::new();
    wrong.add("beta.normal", Tensor::zeros(&[2, 2]));
    let net = SuperNetConfig { in_channels: 3, num_classes: 3, channels: 4, layers: 3, stem_multiplier: 2 };
    let cfg = SearchConfig { mode: SearchMode::FrozenBeta(wrong), ..SearchConfig::default() };
    assert!(matches!(SearchRun::new(tiny_space(&ActivationKind::ALL), net, cfg), Err(Error::Config(_))));
}

#[test]
fn single_relu_factorized_search_is_plain_darts() {
    let (train, val) = tiny_data(3);
    let space = tiny_space(&[ActivationKind::Relu]);
    let mut fact = tiny_run(space.clone(), SearchMode::Factorized, 2, 7);
    let mut plain = tiny_run(space, SearchMode::FixedActivation(ActivationInstance::new(ActivationKind::Relu)), 2, 7);
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    let oa = run_search(&mut fact, &train, &val, |r| {
        ta.push(r.arch().alpha.clone());
        Ok(())
    })
    .unwrap();
    let ob = run_search(&mut plain, &train, &val, |r| {
        tb.push(r.arch().alpha.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(ta, tb);
    assert_eq!(oa.genotype, ob.genotype);
    let trainable = |s: &ParamStore| -> Vec<Tensor> { s.entries().iter().filter(|e| e.trainable).map(|e| e.value.clone()).collect() };
    assert_eq!(trainable(&fact.problem.net.weights), trainable(&plain.problem.net.weights));
    let rows = |o: &factornas_core::search::SearchOutcome| -> Vec<(f64, f64, f64)> {
        o.history.iter().map(|h| (h.train_loss, h.val_loss, h.alpha_entropy_mean)).collect()
    };
    assert_eq!(rows(&oa), rows(&ob));
}

#[test]
fn mismatched_dataset_fails_before_compute() {
    let spec = SynthSpec { classes: 5, samples: 40, size: 8, channels: 3, seed: 0, difficulty: Difficulty::Easy };
    let (train, val) = split_dataset(&synth_generate(&spec).unwrap(), (0.5, 0.5), 0).unwrap();
    let mut run = tiny_run(tiny_space(&ActivationKind::ALL), SearchMode::Factorized, 1, 0);
    assert!(matches!(run_search(&mut run, &train, &val, |_| Ok(())), Err(Error::Config(_))));
    assert_eq!(run.epoch, 0);
}
