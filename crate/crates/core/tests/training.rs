use std::collections::BTreeSet;

use daefusion_core::training::metrics::boundary;
use daefusion_core::training::optim::sgd_update;
use daefusion_core::training::train::{write_eval_report, write_train_log, EVAL_HEADER, TRAIN_LOG_HEADER};
use daefusion_core::training::{
    ce_loss, compute_metrics, dice_loss, synth_task, total_loss, train_with, LogRow, TrainConfig,
};
use daefusion_core::{ModelConfig, Tape, Tensor};
use proptest::prelude::*;

fn loss_of(f: for<'t> fn(daefusion_core::Var<'t, f64>, daefusion_core::Var<'t, f64>) -> daefusion_core::Result<daefusion_core::Var<'t, f64>>, y: &[f64], p: &[f64]) -> f64 {
    let tape = Tape::new();
    let y = tape.constant(Tensor::new(vec![y.len()], y.to_vec()).unwrap());
    let p = tape.constant(Tensor::new(vec![p.len()], p.to_vec()).unwrap());
    f(y, p).unwrap().item()
}

fn total(y: &[f64], p: &[f64]) -> f64 {
    let tape = Tape::new();
    let y = tape.constant(Tensor::new(vec![y.len()], y.to_vec()).unwrap());
    let p = tape.constant(Tensor::new(vec![p.len()], p.to_vec()).unwrap());
    total_loss(y, p).unwrap().total.item()
}

#[test]
fn dice_fixtures() {
    assert!(loss_of(dice_loss, &[1.0; 5], &[1.0; 5]).abs() <= 1e-9);
    assert!(loss_of(dice_loss, &[0.0; 3], &[0.0; 3]).abs() <= 1e-9);
    assert!((loss_of(dice_loss, &[1.0], &[0.0]) - 0.5).abs() <= 1e-9);
}

#[test]
fn ce_fixtures() {
    assert!(loss_of(ce_loss, &[1.0], &[1.0]).abs() <= 1e-9);
    assert!((loss_of(ce_loss, &[1.0], &[0.5]) - std::f64::consts::LN_2).abs() <= 1e-9);
    assert!((loss_of(ce_loss, &[1.0], &[0.0]) - 7.0 * std::f64::consts::LN_10).abs() <= 1e-9);
}

#[test]
fn total_loss_fixtures() {
    assert!(total(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).abs() <= 1e-9);
    // one positive among four pixels at p = 0.5: dice = 1 - 2/4, ce = ln 2
    let y = [1.0, 0.0, 0.0, 0.0];
    let p = [0.5; 4];
    assert!((loss_of(dice_loss, &y, &p) - 0.5).abs() <= 1e-12);
    assert!((total(&y, &p) - (0.3 + 0.4 * std::f64::consts::LN_2)).abs() <= 1e-9);
    assert!((total(&y, &p) - 0.577259).abs() <= 5e-7);
}

#[test]
fn mismatched_loss_shapes_are_rejected() {
    let tape = Tape::<f64>::new();
    let y = tape.constant(Tensor::zeros(vec![4]));
    let p = tape.constant(Tensor::zeros(vec![3]));
    assert!(dice_loss(y, p).is_err());
    assert!(ce_loss(y, p).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let mut w = vec![0.3, -1.2, 4.0];
    let before = w.clone();
    let mut v = vec![0.5, 0.0, -2.0];
    sgd_update(&mut w, &[1.0, 2.0, 3.0], &mut v, 0.0, 0.9, 1e-4).unwrap();
    assert_eq!(w, before);
}

#[test]
fn momentum_recurrence() {
    let (mut w, mut v) = (vec![1.0f64], vec![0.0f64]);
    sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
    assert!((v[0] - 1.0).abs() < 1e-15 && (w[0] - 0.9).abs() < 1e-15);
    sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
    assert!((v[0] - 1.9).abs() < 1e-15 && (w[0] - 0.71).abs() < 1e-15);
}

#[test]
fn synthetic_labels_cover_every_class() {
    let batch = synth_task::<f64>(17, 1000, 16, 2, 3).unwrap();
    let seen: BTreeSet<u32> = batch.masks.iter().copied().collect();
    assert_eq!(seen, BTreeSet::from([0, 1, 2]));
    assert_eq!(batch.images.shape(), &[1000, 16, 16, 1]);
}

#[test]
fn synthetic_batches_are_reproducible() {
    let a = synth_task::<f32>(5, 4, 32, 3, 2).unwrap();
    assert_eq!(a, synth_task::<f32>(5, 4, 32, 3, 2).unwrap());
    assert_ne!(a, synth_task::<f32>(6, 4, 32, 3, 2).unwrap());
    let empty = synth_task::<f32>(5, 2, 16, 0, 2).unwrap();
    assert!(empty.masks.iter().all(|&l| l == 0));
    assert!(synth_task::<f32>(5, 2, 15, 1, 2).is_err());
}

#[test]
fn perfect_prediction_scores_one() {
    let truth: Vec<u32> = (0..16).map(|i| u32::from(i % 4 >= 2)).collect();
    let r = compute_metrics(&truth, &truth, 4, 4, 2).unwrap();
    assert_eq!(r.mean.dsc, 1.0);
    assert_eq!(r.mean.sensitivity, 1.0);
    assert_eq!(r.mean.specificity, 1.0);
    assert_eq!(r.mean.accuracy, 1.0);
    assert_eq!(r.mean.hausdorff, Some(0.0));
}

#[test]
fn complement_prediction_scores_zero() {
    let truth: Vec<u32> = (0..16).map(|i| u32::from(i < 6)).collect();
    let pred: Vec<u32> = truth.iter().map(|&l| 1 - l).collect();
    let r = compute_metrics(&pred, &truth, 4, 4, 2).unwrap();
    assert_eq!(r.mean.dsc, 0.0);
    assert_eq!(r.mean.accuracy, 0.0);
}

#[test]
fn half_overlap_strip_matches_set_arithmetic() {
    // 4x1 column: truth covers rows 0..2, prediction rows 1..3
    let truth = [1, 1, 0, 0];
    let pred = [0, 1, 1, 0];
    let report = compute_metrics(&pred, &truth, 4, 1, 2).unwrap();
    for class in 0..2u32 {
        let t: BTreeSet<usize> = (0..4).filter(|&i| truth[i] == class).collect();
        let p: BTreeSet<usize> = (0..4).filter(|&i| pred[i] == class).collect();
        let inter = t.intersection(&p).count() as f64;
        let want = 2.0 * inter / (t.len() + p.len()) as f64;
        let got = report.per_class[class as usize].unwrap();
        assert!((got.dsc - want).abs() < 1e-15, "class {class}");
        assert!((got.dsc - 0.5).abs() < 1e-15);
        let all: BTreeSet<usize> = (0..4).collect();
        let tn = all.difference(&t).filter(|i| !p.contains(i)).count() as f64;
        assert!((got.accuracy - (inter + tn) / 4.0).abs() < 1e-15);
        assert_eq!(got.hausdorff, Some(column_hausdorff(&t, &p)));
    }
    assert_eq!(report.per_class[0].unwrap().hausdorff, Some(2.0));
}

/// Hausdorff distance between the boundaries of two subsets of a 4x1 column.
fn column_hausdorff(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let edge = |s: &BTreeSet<usize>| -> Vec<usize> {
        let outside = |i: usize| !s.contains(&i);
        let e: Vec<usize> = s.iter().copied().filter(|&i| (i > 0 && outside(i - 1)) || (i < 3 && outside(i + 1))).collect();
        if e.is_empty() { s.iter().copied().collect() } else { e }
    };
    let (ea, eb) = (edge(a), edge(b));
    let directed = |x: &[usize], y: &[usize]| {
        x.iter().map(|&i| y.iter().map(|&j| i.abs_diff(j)).min().unwrap()).max().unwrap() as f64
    };
    directed(&ea, &eb).max(directed(&eb, &ea))
}

#[test]
fn absent_class_is_excluded() {
    let truth = [0, 0, 1, 1];
    let r = compute_metrics(&truth, &truth, 2, 2, 3).unwrap();
    assert!(r.per_class[2].is_none());
    assert_eq!(r.mean.dsc, 1.0);
}

#[test]
fn boundary_of_a_filled_square_is_its_ring() {
    let mut set = vec![false; 25];
    for r in 1..4 {
        for c in 1..4 {
            set[r * 5 + c] = true;
        }
    }
    let b: BTreeSet<(usize, usize)> = boundary(&set, 5, 5).into_iter().collect();
    assert_eq!(b.len(), 8);
    assert!(!b.contains(&(2, 2)));
}

#[test]
fn csv_outputs_have_documented_headers() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.csv");
    let rows = [LogRow { step: 0, loss_total: 1.0, loss_dice: 0.5, loss_ce: 1.75, lr: 0.05 }];
    write_train_log(&log, &rows).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), TRAIN_LOG_HEADER.join(","));
    assert_eq!(lines.next().unwrap(), "0,1.0,0.5,1.75,0.05");
    assert_eq!(TRAIN_LOG_HEADER, ["step", "loss_total", "loss_dice", "loss_ce", "lr"]);

    let eval = dir.path().join("eval.csv");
    let truth = [0, 0, 1, 1];
    write_eval_report(&eval, &compute_metrics(&truth, &truth, 2, 2, 3).unwrap()).unwrap();
    let text = std::fs::read_to_string(&eval).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], EVAL_HEADER.join(","));
    assert_eq!(EVAL_HEADER, ["class", "dsc", "se", "sp", "acc", "hd"]);
    assert!(lines[3].starts_with("2,"), "{text}");
    assert!(lines.last().unwrap().starts_with("macro,"));
}

#[test]
fn short_training_run_logs_every_step() {
    let model = ModelConfig { image_size: 16, blocks_per_stage: 1, ..ModelConfig::toy() };
    let train = TrainConfig { steps: 3, batch_size: 2, eval_images: 2, ..TrainConfig::default() };
    let mut seen = vec![];
    let outcome = train_with::<f32>(&model, &train, |row| seen.push(row.step)).unwrap();
    assert_eq!(seen, [0, 1, 2]);
    assert_eq!(outcome.log.len(), 3);
    for row in &outcome.log {
        assert!(row.loss_total.is_finite() && row.lr == 0.05);
        assert!((row.loss_total - (0.6 * row.loss_dice + 0.4 * row.loss_ce)).abs() < 1e-5);
    }
    assert_eq!(outcome.report.per_class.len(), 2);
}

fn probabilities(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, n)
}

fn label_pair() -> impl Strategy<Value = (Vec<u32>, Vec<u32>, Vec<u32>)> {
    let perms: Vec<Vec<u32>> = vec![vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]];
    (prop::collection::vec(0u32..3, 36), prop::collection::vec(0u32..3, 36), prop::sample::select(perms))
}

proptest! {
    #[test]
    fn dice_is_symmetric(y in probabilities(12), p in probabilities(12)) {
        let a = loss_of(dice_loss, &y, &p);
        let b = loss_of(dice_loss, &p, &y);
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..1.0).contains(&a));
    }

    #[test]
    fn total_loss_is_non_negative(y in prop::collection::vec(0u8..2, 10), p in probabilities(10)) {
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        prop_assert!(total(&y, &p) >= 0.0);
    }

    #[test]
    fn metrics_are_invariant_under_relabeling((pred, truth, perm) in label_pair()) {
        let relabel = |v: &[u32]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<_>>();
        let a = compute_metrics(&pred, &truth, 6, 6, 3).unwrap();
        let b = compute_metrics(&relabel(&pred), &relabel(&truth), 6, 6, 3).unwrap();
        for class in 0..3 {
            prop_assert_eq!(a.per_class[class], b.per_class[perm[class] as usize]);
        }
        prop_assert!((a.mean.dsc - b.mean.dsc).abs() < 1e-12);
        prop_assert!((a.mean.accuracy - b.mean.accuracy).abs() < 1e-12);
    }
}
