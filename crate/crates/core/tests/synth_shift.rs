//! Baseline behaviour on generated corpora as the domain shift varies.
//! Corpora are smaller than the defaults to keep the runs short.

use adner::corpus::{split_dataset, LabeledDataset, TagIndex, Vocab};
use adner::eval::score;
use adner::model::{predict_batch, ModelConfig};
use adner::synth::{generate, SynthConfig};
use adner::train::{train, TrainConfig, TrainData};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Trains a baseline on domain A and returns span F1 on (test_in_domain, test_shifted).
fn baseline_f1(shift: f64, shared_entity_frac: f64, seed: u64) -> (f64, f64) {
    let corpora = generate(&SynthConfig {
        n_source_labeled: 600,
        n_target_unlabeled: 600,
        n_test_shifted: 200,
        shift,
        shared_entity_frac,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train_set, val, _) = split_dataset(&corpora.source, seed).unwrap();
    let vocab = Vocab::build(train_set.sentences().iter().chain(corpora.target.sentences()), 2);
    let tags = TagIndex::from_classes(corpora.source.classes());
    let model = ModelConfig::desk(vocab.len(), tags.len());
    let config = TrainConfig {
        lr: 5e-4,
        seed,
        ..TrainConfig::default()
    };
    let data = TrainData {
        train: &train_set,
        val: &val,
        target: None,
        vocab: &vocab,
        tag_index: &tags,
    };
    let trained = train(&model, &config, &data).unwrap();
    let f1 = |test: &LabeledDataset| {
        let pred = predict_batch(&trained.params, test.sentences(), &vocab, &tags, 64).unwrap();
        score(test, &pred).unwrap().f1
    };
    (f1(&corpora.test_in_domain), f1(&corpora.test_shifted))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn without_shift_both_test_sets_score_alike() {
    let runs: Vec<(f64, f64)> = SEEDS.iter().map(|&s| baseline_f1(0.0, 1.0, s)).collect();
    let (a, b) = (mean(runs.iter().map(|r| r.0)), mean(runs.iter().map(|r| r.1)));
    assert!((a - b).abs() <= 0.02, "in-domain {a:.4} vs shifted {b:.4}: {runs:?}");
}

#[test]
fn shifted_f1_does_not_rise_with_shift() {
    let means: Vec<f64> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&shift| mean(SEEDS.iter().map(|&s| baseline_f1(shift, 0.5, s).1)))
        .collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}
