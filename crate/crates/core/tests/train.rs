use std::collections::{BTreeSet, HashMap};

use fracvit::data::{synth_generate, FractureLabel};
use fracvit::train::*;
use fracvit::train::Strategy;
use fracvit::vit::{ViTConfig, ViTModel};
use fracvit::Error;
use fracvit_oracles::optim::radam64;
use proptest::prelude::*;

#[test]
fn radam_quadratic_trajectory_matches_oracle() {
    let reference = radam64(&[1.0], 0.01, 200, &|t| vec![2.0 * t[0]]);
    let mut opt = RAdam::new(0.01);
    let mut theta = [1.0f32];
    for (t, want) in reference.iter().enumerate() {
        let g = 2.0 * theta[0];
        opt.step_slices(&mut [&mut theta], &[&[g]]).unwrap();
        assert!((theta[0] as f64 - want[0]).abs() < 1e-5, "step {}: {} vs {}", t + 1, theta[0], want[0]);
    }
    assert_eq!(opt.step_count(), 200);
    let path: Vec<f64> = reference.iter().map(|v| v[0]).collect();
    assert!(path.windows(2).all(|w| w[1] < w[0]));
    assert!(theta[0] < 1.0 && theta[0] > 0.0);
}

#[test]
fn radam_matches_oracle_on_a_vector_problem() {
    let target = [0.5, -1.5, 3.0];
    let grad = |t: &[f64]| t.iter().zip(&target).map(|(a, b)| 2.0 * (a - b) * (1.0 + a * a)).collect::<Vec<_>>();
    let reference = radam64(&[0.0, 0.0, 0.0], 0.05, 60, &grad);
    let mut opt = RAdam::new(0.05);
    let mut theta = [0.0f32; 3];
    for want in &reference {
        let g: Vec<f32> = grad(&theta.map(|v| v as f64)).iter().map(|&v| v as f32).collect();
        opt.step_slices(&mut [&mut theta], &[&g]).unwrap();
        for k in 0..3 {
            assert!((theta[k] as f64 - want[k]).abs() < 1e-4);
        }
    }
}

#[test]
fn plateau_fixture_from_the_training_recipe() {
    let mut s = PlateauScheduler::new(1e-4);
    s.observe(0.7);
    let lrs: Vec<f64> = (1..=12).map(|_| s.observe(0.7)).collect();
    for (epoch, want) in [(4, 2e-5), (8, 4e-6), (12, 1e-6)] {
        assert!((lrs[epoch - 1] - want).abs() < 1e-15 * want.max(1.0), "epoch {epoch}: {}", lrs[epoch - 1]);
    }
}

#[test]
fn early_stopping_best_epoch_has_lowest_loss() {
    let history = [3.0, 2.0, 2.5, 1.5, 1.6, 1.7, 1.55, 1.8, 1.9, 2.0, 1.5, 1.6, 1.7, 1.8, 1.9];
    match early_stopping(&history, 10, 40) {
        StopDecision::Stop { best_epoch } => {
            assert_eq!(best_epoch, 4);
            assert!(history[..14].iter().all(|&l| l >= history[best_epoch - 1]));
        }
        StopDecision::Continue => panic!("ten epochs without improvement must stop"),
    }
}

fn names() -> Vec<String> {
    FractureLabel::names()
}

#[test]
fn split_of_a_class_of_two_hundred() {
    let labels = vec![0usize; 200];
    let plan = make_splits(&labels, &names(), 3).unwrap();
    assert_eq!((plan.test[0].len(), plan.val[0].len(), plan.train[0].len()), (30, 26, 144));
}

#[test]
fn classes_of_twenty_keep_three_for_testing() {
    let labels: Vec<usize> = (0..140).map(|i| i % 7).collect();
    let plan = make_splits(&labels, &names(), 0).unwrap();
    assert!(plan.test.iter().all(|t| t.len() == 3));
}

#[test]
fn seeds_permute_but_keep_counts() {
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let a = make_splits(&labels, &names(), 1).unwrap();
    let b = make_splits(&labels, &names(), 2).unwrap();
    assert_ne!(a.test, b.test);
    for c in 0..3 {
        assert_eq!(a.test[c].len(), b.test[c].len());
        assert_eq!(a.val[c].len(), b.val[c].len());
    }
    assert_eq!(a, make_splits(&labels, &names(), 1).unwrap());
}

#[test]
fn tiny_class_is_named_in_the_error() {
    let mut labels = vec![0usize; 10];
    labels.extend([4, 4]);
    match make_splits(&labels, &names(), 0) {
        Err(Error::Config(msg)) => assert!(msg.contains("B1"), "{msg}"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn paper_class_sizes_split_by_the_fifteen_percent_rule() {
    let hist = [2003usize, 631, 329, 174, 625, 339, 106];
    let labels: Vec<usize> = hist.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    let plan = make_splits(&labels, &names(), 0).unwrap();
    for (c, &n) in hist.iter().enumerate() {
        // round-half-up of 15%, then 15% of what remains
        let test = (n as f64 * 0.15 + 0.5).floor() as usize;
        let val = ((n - test) as f64 * 0.15 + 0.5).floor() as usize;
        assert_eq!(plan.test[c].len(), test, "class {c}");
        assert_eq!(plan.val[c].len(), val, "class {c}");
        assert_eq!(plan.train[c].len(), n - test - val);
    }
}

fn counts(items: &[TrainItem], labels: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for it in items {
        c[labels[it.index]] += 1;
    }
    c
}

#[test]
fn oversampling_a_five_two_split() {
    let labels = vec![0, 0, 0, 0, 0, 1, 1];
    let idx: Vec<usize> = (0..7).collect();
    let out = balance(Strategy::Oversample, &idx, &labels, 2, 4).unwrap();
    assert_eq!(counts(&out, &labels, 2), vec![5, 5]);
    let added = &out[7..];
    assert_eq!(added.len(), 3);
    assert!(added.iter().all(|it| labels[it.index] == 1 && it.augmentation.is_none()));
}

#[test]
fn weights_for_four_and_one() {
    let w = class_weights(&[0, 0, 0, 0, 1], 2);
    assert_eq!(w, vec![0.625, 2.5]);
}

#[test]
fn balanced_input_is_left_alone() {
    let labels = vec![0, 1, 2, 0, 1, 2];
    let idx: Vec<usize> = (0..6).collect();
    for s in [Strategy::Weights, Strategy::Oversample, Strategy::Augment] {
        let out = balance(s, &idx, &labels, 3, 0).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|it| it.weight == 1.0 && it.augmentation.is_none()));
    }
}

#[test]
fn paper_histogram_oversamples_to_the_majority() {
    let hist = [2003usize, 631, 329, 174, 625, 339, 106];
    let labels: Vec<usize> = hist.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    let idx: Vec<usize> = (0..labels.len()).collect();
    let out = balance(Strategy::Oversample, &idx, &labels, 7, 0).unwrap();
    assert_eq!(counts(&out, &labels, 7), vec![2003; 7]);
}

#[test]
fn augmented_extras_stay_in_range() {
    let labels = vec![0, 0, 0, 0, 0, 0, 1];
    let idx: Vec<usize> = (0..7).collect();
    let out = balance(Strategy::Augment, &idx, &labels, 2, 1).unwrap();
    let extras: Vec<_> = out.iter().filter_map(|it| it.augmentation).collect();
    assert_eq!(extras.len(), 5);
    assert!(extras.iter().all(|a| a.rotation_deg.abs() <= 5.0 && a.brightness.abs() <= 0.1));
}

#[test]
fn unknown_strategy_is_a_config_error() {
    assert!(matches!("smote".parse::<Strategy>(), Err(Error::Config(_))));
    assert_eq!("Oversample".parse::<Strategy>().unwrap(), Strategy::Oversample);
}

fn small_setup() -> (Vec<fracvit::tensor::Tensor>, Vec<usize>, SplitPlan, ViTConfig) {
    let d = synth_generate(5, 3).unwrap();
    let cfg = ViTConfig { image_size: 16, patch_size: 8, hidden_size: 16, num_heads: 2, num_layers: 1, mlp_units: 32, head_units: 16, ..ViTConfig::tiny() };
    let x = d.tensors(16).unwrap();
    let y = d.manifest.labels();
    let plan = make_splits(&y, &names(), 3).unwrap();
    (x, y, plan, cfg)
}

#[test]
fn fixed_seed_gives_bit_identical_weights() {
    let (x, y, plan, cfg) = small_setup();
    let tc = TrainConfig { max_epochs: 3, batch_size: 8, seed: 5, ..TrainConfig::default() };
    let run = || {
        let model = ViTModel::new(cfg.clone(), 1).unwrap();
        train(model, &x, &y, &plan.train_indices(), &plan.val_indices(), &tc, &mut |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
}

#[test]
fn log_has_one_line_per_epoch_and_lr_never_rises() {
    let (x, y, plan, cfg) = small_setup();
    let tc = TrainConfig { max_epochs: 12, batch_size: 8, lr: 1e-3, seed: 2, ..TrainConfig::default() };
    let mut lines = Vec::new();
    let out = train(ViTModel::new(cfg, 2).unwrap(), &x, &y, &plan.train_indices(), &plan.val_indices(), &tc, &mut |e| {
        lines.push(serde_json::to_string(e).unwrap())
    })
    .unwrap();
    assert_eq!(lines.len(), out.log.len());
    let v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    for key in ["epoch", "lr", "train_loss", "val_loss", "val_acc"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(out.log.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert!(out.log.iter().all(|e| e.lr >= 1e-6));
    let best = out.log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_loss, best);
    assert_eq!(out.log[out.best_epoch - 1].val_loss, best);
}

#[test]
fn weighted_and_augmented_runs_complete() {
    let (x, y, plan, cfg) = small_setup();
    for strategy in [Strategy::Weights, Strategy::Augment] {
        let tc = TrainConfig { max_epochs: 2, batch_size: 8, strategy, ..TrainConfig::default() };
        let out = train(ViTModel::new(cfg.clone(), 4).unwrap(), &x, &y, &plan.train_indices(), &plan.val_indices(), &tc, &mut |_| {}).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.diverged.is_none());
    }
}

#[test]
fn divergence_returns_the_last_good_weights() {
    let (x, y, plan, cfg) = small_setup();
    let mut model = ViTModel::new(cfg, 6).unwrap();
    model.head.out.weight.data_mut()[0] = f32::NAN;
    let initial = model.clone();
    let tc = TrainConfig { max_epochs: 2, batch_size: 8, ..TrainConfig::default() };
    match train(model, &x, &y, &plan.train_indices(), &plan.val_indices(), &tc, &mut |_| {}) {
        Ok(out) => {
            assert!(out.diverged.is_some());
            assert_eq!(out.best_epoch, 0);
            assert!(out.log.is_empty());
            assert_eq!(format!("{:?}", out.model.head.out.weight), format!("{:?}", initial.head.out.weight));
        }
        Err(Error::Numeric(_)) => {}
        Err(e) => panic!("unexpected error {e}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_partition_every_class(
        sizes in prop::collection::vec(prop_oneof![Just(0usize), 3usize..60], 7),
        seed in any::<u64>(),
    ) {
        prop_assume!(sizes.iter().any(|&n| n > 0));
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let plan = make_splits(&labels, &names(), seed).unwrap();
        let all: Vec<usize> = [plan.train_indices(), plan.val_indices(), plan.test_indices()].concat();
        let uniq: BTreeSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), labels.len());
        prop_assert_eq!(uniq.len(), labels.len());
        for (c, &n) in sizes.iter().enumerate() {
            if n == 0 { continue; }
            let test = ((15 * n + 50) / 100).max(1);
            prop_assert_eq!(plan.test[c].len(), test);
            prop_assert_eq!(plan.val[c].len(), ((15 * (n - test) + 50) / 100).max(1));
            prop_assert!(plan.test[c].iter().chain(&plan.val[c]).chain(&plan.train[c]).all(|&i| labels[i] == c));
        }
    }

    #[test]
    fn oversampling_equalises_counts_from_existing_ids(
        sizes in prop::collection::vec(0usize..25, 2..7),
        seed in any::<u64>(),
    ) {
        prop_assume!(sizes.iter().any(|&n| n > 0));
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let idx: Vec<usize> = (0..labels.len()).collect();
        let out = balance(Strategy::Oversample, &idx, &labels, sizes.len(), seed).unwrap();
        let max = *sizes.iter().max().unwrap();
        let c = counts(&out, &labels, sizes.len());
        for (k, &n) in sizes.iter().enumerate() {
            prop_assert_eq!(c[k], if n == 0 { 0 } else { max });
        }
        prop_assert!(out.iter().all(|it| it.index < labels.len()));
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for it in &out[..labels.len()] {
            *seen.entry(it.index).or_default() += 1;
        }
        prop_assert!(seen.values().all(|&v| v == 1));
    }

    #[test]
    fn schedule_never_rises_and_respects_the_floor(metrics in prop::collection::vec(0.0f64..3.0, 1..80)) {
        let mut s = PlateauScheduler::new(1e-4);
        let mut last = s.lr;
        for m in metrics {
            let lr = s.observe(m);
            prop_assert!(lr <= last && lr >= 1e-6);
            last = lr;
        }
    }

    #[test]
    fn reported_best_epoch_is_a_minimum(losses in prop::collection::vec(0.0f64..5.0, 1..40)) {
        if let StopDecision::Stop { best_epoch } = early_stopping(&losses, 10, 40) {
            let seen = &losses[..losses.len().min(best_epoch + 10).min(40)];
            prop_assert!(seen.iter().all(|&l| l >= losses[best_epoch - 1]));
        }
    }

    #[test]
    fn momentum_branch_ignores_second_moment(g in -10.0f32..10.0, lr in 1e-4f64..1.0) {
        let mut opt = RAdam::new(lr);
        let mut theta = [0.0f32];
        opt.step_slices(&mut [&mut theta], &[&[g]]).unwrap();
        let want = -(lr * g as f64);
        prop_assert!((theta[0] as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
    }
}
