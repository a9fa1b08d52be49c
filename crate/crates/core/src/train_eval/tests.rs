use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::{BackboneKind, BackboneSpec, ModelSpec, TransferHeadSpec};

/// Mann-Whitney U / (P·N), ties counted as one half.
fn rank_sum_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut u = 0.0;
    let (mut p, mut n) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            n += 1.0;
            continue;
        }
        p += 1.0;
        for (j, &lj) in labels.iter().enumerate() {
            if !lj {
                u += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    u / (p * n)
}

#[test]
fn hand_case_auc_equals_rank_statistic() {
    let s = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
    let l = [true, true, false, true, false, false];
    let a = auc(&roc_curve(&s, &l).unwrap());
    assert!((a - rank_sum_auc(&s, &l)).abs() < 1e-15);
}

#[test]
fn random_500_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels: Vec<usize> = (0..500).map(|_| rng.gen_range(0..5)).collect();
    let probs: Vec<f32> = (0..2500).map(|_| rng.gen_range(0u32..20) as f32 / 20.0).collect();
    let t = Tensor::new(vec![500, 5], probs);
    let r = report_from_scores(&t, &labels).unwrap();
    let preds: Vec<usize> = (0..500).map(|i| argmax(t.item(i))).collect();
    for a in 0..5 {
        for b in 0..5 {
            let n = labels.iter().zip(&preds).filter(|(&x, &y)| x == a && y == b).count();
            assert_eq!(r.confusion.get(a, b), n);
        }
        let tp = labels.iter().zip(&preds).filter(|(&x, &y)| x == a && y == a).count();
        let fp = labels.iter().zip(&preds).filter(|(&x, &y)| x != a && y == a).count();
        let fn_ = labels.iter().zip(&preds).filter(|(&x, &y)| x == a && y != a).count();
        assert_eq!((r.per_class[a].tp, r.per_class[a].fp, r.per_class[a].fn_), (tp, fp, fn_));
        let scores: Vec<f64> = (0..500).map(|i| t.item(i)[a] as f64).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == a).collect();
        assert!((r.per_class_auc[a].unwrap() - rank_sum_auc(&scores, &bin)).abs() < 1e-12);
    }
    assert_eq!(r.accuracy, r.confusion.trace() as f64 / 500.0);
}

#[test]
fn uniform_random_predictions_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let labels: Vec<usize> = (0..10_000).map(|i| i % 5).collect();
    let preds: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..5)).collect();
    let m = metrics(&confusion(&labels, &preds, 5).unwrap()).unwrap();
    assert!((m.accuracy - 0.2).abs() < 0.03);
}

#[test]
fn constant_scores_predict_class_zero() {
    // class 0 is the majority, so lowest-index tie-breaking yields its share
    let labels = [0, 0, 0, 1, 2, 3, 4, 0];
    let t = Tensor::filled(vec![8, 5], 0.2);
    let r = report_from_scores(&t, &labels).unwrap();
    assert_eq!(r.accuracy, 4.0 / 8.0);
    assert_eq!(r.auc, 0.5);
}

proptest! {
    #[test]
    fn roc_is_monotone_and_auc_rank_invariant(
        data in prop::collection::vec((0u32..50, any::<bool>()), 2..80)
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 50.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let c = roc_curve(&scores, &labels).unwrap();
        prop_assert_eq!(c[0], (0.0, 0.0));
        prop_assert_eq!(*c.last().unwrap(), (1.0, 1.0));
        for w in c.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        let a = auc(&c);
        prop_assert!((0.0..=1.0).contains(&a));
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 7.0).collect();
        prop_assert!((auc(&roc_curve(&warped, &labels).unwrap()) - a).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_lies_between_class_extremes(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)
    ) {
        let (l, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = metrics(&confusion(&l, &p, 5).unwrap()).unwrap();
        let f: Vec<f64> = m.per_class.iter().map(|c| c.f1).collect();
        let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m.macro_avg.f1 >= lo - 1e-12 && m.macro_avg.f1 <= hi + 1e-12);
        prop_assert!((m.micro_avg.f1 - m.accuracy).abs() < 1e-12);
        let correct = l.iter().zip(&p).filter(|(a, b)| a == b).count();
        prop_assert_eq!(m.accuracy, correct as f64 / l.len() as f64);
    }
}

/// Class 0: dark left half; class 1: dark right half.
fn two_class_set(n: usize, size: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = LabeledSet::new(size);
    for i in 0..n {
        let label = i % 2;
        let mut data = vec![0f32; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let bright = (x < size / 2) == (label == 1);
                let base = if bright { 0.8 } else { 0.2 };
                for c in 0..3 {
                    data[(y * size + x) * 3 + c] = (base + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0);
                }
            }
        }
        set.push(&EnhancedTensor { size, data }, label, format!("toy{i}")).unwrap();
    }
    set
}

fn toy_model(seed: u64) -> TrainedModel {
    let head = TransferHeadSpec {
        dense_widths: (64, 32),
        dropout_rates: (0.1, 0.1),
        ..TransferHeadSpec::default()
    };
    TrainedModel::build(
        ModelSpec::transfer(BackboneSpec::new(BackboneKind::Vgg16).with_divisor(16), head)
            .with_input_size(32)
            .with_seed(seed),
    )
    .unwrap()
}

fn toy_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        learning_rate: 1e-3,
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_reaches_high_train_accuracy() {
    let train_set = two_class_set(96, 32, 1);
    let val_set = two_class_set(32, 32, 2);
    let (model, h) = train(toy_model(1), &train_set, &val_set, &toy_cfg(5), None).unwrap();
    assert_eq!(h.len(), 5);
    assert!(h.epochs.last().unwrap().train_accuracy > 0.95, "{h:?}");
    let r = evaluate(&model, &val_set, 32).unwrap();
    assert_eq!(r.accuracy, r.confusion.trace() as f64 / r.n as f64);
    assert_eq!(r.confusion.row_sum(0), 16);
}

#[test]
fn training_is_seeded() {
    let train_set = two_class_set(32, 32, 4);
    let val_set = two_class_set(8, 32, 5);
    let (_, a) = train(toy_model(2), &train_set, &val_set, &toy_cfg(1), None).unwrap();
    let (_, b) = train(toy_model(2), &train_set, &val_set, &toy_cfg(1), None).unwrap();
    assert_eq!(a.len(), 1);
    assert!((a.epochs[0].train_loss - b.epochs[0].train_loss).abs() < 1e-6);
}

#[test]
fn empty_splits_and_bad_config_are_errors() {
    let set = two_class_set(4, 32, 6);
    let empty = LabeledSet::new(32);
    assert!(train(toy_model(0), &empty, &set, &toy_cfg(1), None).is_err());
    assert!(train(toy_model(0), &set, &empty, &toy_cfg(1), None).is_err());
    let mut bad = toy_cfg(1);
    bad.learning_rate = 0.0;
    assert!(train(toy_model(0), &set, &set, &bad, None).is_err());
    bad = toy_cfg(0);
    assert!(bad.validate().is_err());
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let labels = [0, 1, 2, 3, 4, 0, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = softmax_rows(&Tensor::new(vec![7, 5], (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let r = report_from_scores(&t, &labels).unwrap();
    let files = r.write(dir.path()).unwrap();
    assert!(files.iter().all(|f| f.exists()));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n") && csv.contains("auc_macro"));
    let h = History {
        epochs: vec![EpochStats {
            epoch: 1,
            train_loss: 1.0,
            train_accuracy: 0.5,
            val_loss: 1.1,
            val_accuracy: 0.4,
            seconds: 0.1,
        }],
        best_epoch: 1,
    };
    for f in write_history(&h, dir.path()).unwrap() {
        assert!(f.exists());
    }
}
