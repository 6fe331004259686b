mod common;

use common::{benchmark, mirror_forward, rng};
use maskopt::classifier::{
    accuracy, build_default, from_bytes, mean_loss, normalize, predict, to_bytes, train, train_with_log, TrainConfig,
};
use maskopt::image::Image;
use rand::Rng;
use std::path::Path;

/// Bright disk on noise (label 1) versus the same noise alone (label 0).
fn separable_set(n: usize, side: usize, seed: u64) -> Vec<(Image, u8)> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let (cx, cy) = (r.random_range(5.0..side as f32 - 5.0), r.random_range(5.0..side as f32 - 5.0));
            let data = (0..side * side)
                .map(|k| {
                    let (x, y) = ((k % side) as f32, (k / side) as f32);
                    let disk = label == 1 && (x - cx).powi(2) + (y - cy).powi(2) <= 9.0;
                    let base = if disk { 0.8 } else { 0.2 };
                    (base + r.random_range(-0.05f32..0.05)).clamp(0.0, 1.0)
                })
                .collect();
            (Image::new(side, side, data, 1.0).unwrap(), label)
        })
        .collect()
}

fn refs(set: &[(Image, u8)]) -> impl Iterator<Item = (&Image, u8)> {
    set.iter().map(|(i, l)| (i, *l))
}

#[test]
fn separable_set_is_learned() {
    let set = separable_set(200, 32, 1);
    let model = train(refs(&set), &TrainConfig::default()).unwrap();
    let acc = accuracy(&model, refs(&set)).unwrap();
    eprintln!("training accuracy on the separable set: {acc}");
    assert!(acc >= 0.99, "{acc}");

    let held_out = separable_set(100, 32, 2);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (img, l) in &held_out {
        let s = predict(&model, img).unwrap().0 as f64;
        if *l == 1 { pos.push(s) } else { neg.push(s) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&pos) > mean(&neg));
}

#[test]
fn training_is_deterministic() {
    let set = separable_set(40, 16, 3);
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let a = train(refs(&set), &cfg).unwrap();
    let b = train(refs(&set), &cfg).unwrap();
    assert_eq!(to_bytes(&a), to_bytes(&b));
    let c = train(refs(&set), &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(to_bytes(&a), to_bytes(&c));
}

#[test]
fn full_batch_loss_is_non_increasing() {
    let set = separable_set(10, 16, 4);
    let cfg = TrainConfig { epochs: 11, learning_rate: 0.005, momentum: 0.0, batch_size: 10, seed: 0 };
    // each logged loss is measured before that epoch's single update
    let (model, log) = train_with_log(refs(&set), &cfg).unwrap();
    let mut losses: Vec<f64> = log.iter().map(|e| e.mean_loss).collect();
    let inputs: Vec<_> = set.iter().map(|(i, l)| (normalize(i, model.norm), *l)).collect();
    losses.push(mean_loss(&model, &inputs).unwrap());
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss rose: {losses:?}");
    }
    assert!(losses.last() < losses.first());
}

#[test]
fn duplicated_samples_give_the_same_full_batch_model() {
    // the mean gradient over a duplicated set equals the original one, so the
    // same number of full-batch steps lands on the same parameters
    let set = separable_set(12, 16, 5);
    let doubled: Vec<(Image, u8)> = set.iter().chain(&set).cloned().collect();
    let cfg = TrainConfig { epochs: 4, momentum: 0.0, batch_size: 12, ..TrainConfig::default() };
    let a = train(refs(&set), &cfg).unwrap();
    let b = train(refs(&doubled), &TrainConfig { batch_size: 24, ..cfg }).unwrap();
    assert!((a.norm.mean - b.norm.mean).abs() <= 1e-6 && (a.norm.std - b.norm.std).abs() <= 1e-6);
    for (la, lb) in a.net.layers().iter().zip(b.net.layers()) {
        let (Some((wa, ba)), Some((wb, bb))) = (la.params(), lb.params()) else { continue };
        for (x, y) in wa.iter().chain(ba).zip(wb.iter().chain(bb)) {
            // only the summation order of the batch differs
            assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn zero_epochs_keep_initial_parameters() {
    let set = separable_set(10, 16, 6);
    let model = train(refs(&set), &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
    assert_eq!(model.net, build_default(16, 0).unwrap().net);
    assert_ne!(model.norm, Default::default());
}

#[test]
fn weight_round_trip_is_bit_exact() {
    let (_, model) = benchmark();
    let bytes = to_bytes(model);
    let back = from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(&back, model);
    assert_eq!(to_bytes(&back), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    maskopt::classifier::save_weights(model, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(&maskopt::classifier::load_weights(&path).unwrap(), model);
}

#[test]
fn benchmark_classifier_separates_classes() {
    let (data, model) = benchmark();
    let val = accuracy(model, data.val.iter().map(|s| (&s.image, s.label()))).unwrap();
    eprintln!("validation accuracy: {val}");
    assert!(val >= 0.95);
    let mean_score = |label: u8| {
        let v: Vec<f64> =
            data.test.iter().filter(|s| s.label() == label).map(|s| predict(model, &s.image).unwrap().0 as f64).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean_score(1) > mean_score(0));
}

#[test]
fn predict_equals_explicit_normalize_then_forward() {
    let (data, model) = benchmark();
    for s in data.test.iter().take(10) {
        let (score, logit) = predict(model, &s.image).unwrap();
        let x = normalize(&s.image, model.norm);
        let (l2, _) = model.forward(&x).unwrap();
        assert_eq!(logit.to_bits(), l2.to_bits());
        assert_eq!(logit.to_bits(), mirror_forward(&model.net, x.data()).to_bits());
        assert!((score as f64 - 1.0 / (1.0 + (-(logit as f64)).exp())).abs() <= 1e-7);
    }
}
