use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, LabeledDataset};

/// Minimum dataset size accepted by [`split_dataset`].
pub const MIN_SPLIT_SIZE: usize = 10;

/// Seeded shuffle into `(train, val, test)`.
///
/// Test takes 20% (floor) of the sentences, validation 10% (floor) of the
/// rest, train the remainder. Each split gets at least one sentence; an empty
/// validation split borrows from train. Every split keeps the parent's class set.
pub fn split_dataset(
    dataset: &LabeledDataset,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), CorpusError> {
    let n = dataset.len();
    if n < MIN_SPLIT_SIZE {
        return Err(CorpusError::TooSmall { n });
    }
    let (train_n, val_n, test_n) = split_sizes(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| {
        let sentences = order[range].iter().map(|&i| dataset.sentences()[i].clone()).collect();
        LabeledDataset::with_classes(sentences, dataset.classes().clone())
    };
    let test = take(0..test_n)?;
    let val = take(test_n..test_n + val_n)?;
    let train = take(test_n + val_n..test_n + val_n + train_n)?;
    Ok((train, val, test))
}

fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = (n / 5).max(1);
    let rest = n - test;
    let val = (rest / 10).max(1);
    (rest - val, val, test)
}
