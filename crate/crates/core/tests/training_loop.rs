//! Training-loop behaviour: early stopping against a simulator oracle,
//! best-weight restoration, budget accounting, and evaluate() against hand
//! confusion counting.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowsentry::bench::{FakeClock, RealClock};
use flowsentry::dataset::BinaryLabel;
use flowsentry::model::{
    BlockType, FeatureLayout, HeadKind, InputEncodingKind, Model, ModelConfig,
};
use flowsentry::preprocess::EncodedWindow;
use flowsentry::training::{
    epoch_log_jsonl, evaluate, train, EarlyStopping, TrainConfig, TrainingError,
};

fn dense_layout(width: usize) -> FeatureLayout {
    FeatureLayout {
        feature_width: width,
        categorical_cardinalities: vec![],
        integer_mode: false,
    }
}

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        block_type: BlockType::Encoder,
        layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        input_encoding: InputEncodingKind::RecordProjection,
        head: HeadKind::LastToken,
        window: 2,
        embed_dim: 4,
        mlp_hidden: 8,
        seed,
    }
}

/// A two-feature task where the final flow's first feature decides the
/// label with a wide margin.
fn separable_windows(n: usize, seed: u64) -> Vec<EncodedWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let attack = rng.random_range(0..2) == 1;
            let signal = if attack { 0.9 } else { 0.1 };
            let noise = rng.random_range(0.0..1.0);
            let context = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            EncodedWindow {
                window: 2,
                width: 2,
                features: vec![context[0], context[1], signal, noise],
                label: if attack { BinaryLabel::Attack } else { BinaryLabel::Benign },
                pad_count: 0,
            }
        })
        .collect()
}

/// Replays a monitor sequence through the patience rule the slow way:
/// scan for the stopping point by brute force.
fn simulate(values: &[f64], patience: usize) -> (Option<usize>, usize) {
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < best {
            best = v;
            best_epoch = i + 1;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= patience {
            return (Some(i + 1), best_epoch);
        }
    }
    (None, best_epoch)
}

#[test]
fn early_stopping_matches_the_simulator_on_random_sequences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xE5E5_0000 + seed);
        let len = rng.random_range(3..30);
        let patience = rng.random_range(1..6);
        let values: Vec<f64> = (0..len)
            // A coarse grid of values makes ties common, exercising the
            // strict-improvement rule.
            .map(|_| f64::from(rng.random_range(0..8)) / 8.0)
            .collect();

        let (want_stop, want_best) = simulate(&values, patience);
        let mut stopper = EarlyStopping::new(patience);
        let mut got_stop = None;
        for (i, &v) in values.iter().enumerate() {
            if stopper.observe(i + 1, v).stop {
                got_stop = Some(i + 1);
                break;
            }
        }
        assert_eq!(got_stop, want_stop, "seed {seed}, values {values:?}");
        assert_eq!(stopper.best_epoch(), want_best, "seed {seed}");
    }
}

#[test]
fn training_learns_a_separable_task_and_restores_best_weights() {
    let train_windows = separable_windows(400, 1);
    let eval_windows = separable_windows(120, 2);
    let model = Model::build(tiny_config(3), dense_layout(2)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        max_epochs: 12,
        steps_per_epoch: 12,
        patience: 4,
        repeats: 1,
        seed: 7,
        ..TrainConfig::default()
    };
    let clock = RealClock::new();
    let outcome = train(model, &train_windows, &eval_windows, &cfg, &clock).unwrap();

    assert!(!outcome.epochs.is_empty());
    let first = &outcome.epochs[0];
    let best = outcome
        .epochs
        .iter()
        .find(|l| l.epoch == outcome.best_epoch)
        .unwrap();
    assert!(
        best.eval_loss < first.eval_loss,
        "loss should fall: first {} vs best {}",
        first.eval_loss,
        best.eval_loss
    );
    assert!(best.eval_metrics.f1 > 0.9, "f1 was {}", best.eval_metrics.f1);

    // The restored weights must reproduce the best epoch's evaluation
    // exactly — that is what "bit-exact restore" buys.
    let re_eval = evaluate(&outcome.model, &eval_windows, 0.5).unwrap();
    assert_eq!(re_eval, best.eval_metrics);

    // Epoch indices are 1-based and contiguous.
    for (i, log) in outcome.epochs.iter().enumerate() {
        assert_eq!(log.epoch, i + 1);
    }

    let jsonl = epoch_log_jsonl(&outcome.epochs);
    assert_eq!(jsonl.lines().count(), outcome.epochs.len());
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let train_windows = separable_windows(200, 4);
    let eval_windows = separable_windows(60, 5);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        max_epochs: 3,
        steps_per_epoch: 6,
        patience: 3,
        repeats: 1,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let model = Model::build(tiny_config(9), dense_layout(2)).unwrap();
        train(model, &train_windows, &eval_windows, &cfg, &FakeClock::new(0.001)).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.model.params(), b.model.params());
    for (la, lb) in a.epochs.iter().zip(&b.epochs) {
        assert_eq!(la.train_loss, lb.train_loss);
        assert_eq!(la.eval_loss, lb.eval_loss);
        assert_eq!(la.wall_secs, lb.wall_secs);
    }
}

#[test]
fn empty_splits_are_rejected() {
    let windows = separable_windows(20, 6);
    let cfg = TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() };
    let clock = RealClock::new();
    let model = Model::build(tiny_config(2), dense_layout(2)).unwrap();
    assert!(matches!(
        train(model.clone(), &[], &windows, &cfg, &clock),
        Err(TrainingError::EmptySplit { which: "train" })
    ));
    assert!(matches!(
        train(model, &windows, &[], &cfg, &clock),
        Err(TrainingError::EmptySplit { which: "eval" })
    ));
}

#[test]
fn evaluate_agrees_with_hand_confusion_counting() {
    let windows = separable_windows(20, 8);
    let model = Model::build(tiny_config(5), dense_layout(2)).unwrap();
    let report = evaluate(&model, &windows, 0.5).unwrap();

    let mut tp = 0;
    let mut tn = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for w in &windows {
        let p = model.forward(w).unwrap();
        let predicted_attack = p >= 0.5;
        match (predicted_attack, w.label.is_attack()) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    assert_eq!(report.counts.true_positives, tp);
    assert_eq!(report.counts.true_negatives, tn);
    assert_eq!(report.counts.false_positives, fp);
    assert_eq!(report.counts.false_negatives, fn_);
}

#[test]
fn tie_at_the_threshold_counts_as_attack() {
    // An all-zero model emits exactly 0.5 for every window.
    let mut model = Model::build(tiny_config(6), dense_layout(2)).unwrap();
    let names: Vec<String> = model.params().names().cloned().collect();
    for name in names {
        let shape = model.params().get(&name).unwrap().shape().to_vec();
        model
            .params_mut()
            .set(&name, flowsentry::autograd::Tensor::zeros(shape));
    }
    let windows = separable_windows(10, 9);
    let report = evaluate(&model, &windows, 0.5).unwrap();
    let attacks = windows.iter().filter(|w| w.label.is_attack()).count() as u64;
    assert_eq!(report.counts.true_positives, attacks);
    assert_eq!(report.counts.false_positives, windows.len() as u64 - attacks);
    assert_eq!(report.counts.true_negatives, 0);
    assert_eq!(report.counts.false_negatives, 0);
}
