use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sentence indices for one optimizer step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepBatch {
    pub source: Vec<usize>,
    pub target: Option<Vec<usize>>,
}

/// Number of optimizer steps in one epoch over `n_source` sentences.
pub fn steps_per_epoch(n_source: usize, batch_size: usize) -> usize {
    n_source.div_ceil(batch_size.max(1))
}

/// Batch plan for one epoch.
///
/// The source order is a shuffle seeded with `seed ^ epoch`; every source
/// sentence appears exactly once. With a target corpus each step also gets
/// `batch_size` target indices from an independently seeded stream that
/// reshuffles and wraps whenever it runs out.
pub fn make_batches(
    n_source: usize,
    n_target: Option<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<StepBatch> {
    let batch_size = batch_size.max(1);
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
    let mut order: Vec<usize> = (0..n_source).collect();
    order.shuffle(&mut src_rng);

    let mut target = n_target.filter(|&n| n > 0).map(|n| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
        rng.set_stream(1);
        TargetStream {
            rng,
            order: Vec::new(),
            pos: 0,
            n,
        }
    });

    order
        .chunks(batch_size)
        .map(|chunk| StepBatch {
            source: chunk.to_vec(),
            target: target.as_mut().map(|t| t.take(batch_size)),
        })
        .collect()
}

struct TargetStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    n: usize,
}

impl TargetStream {
    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
