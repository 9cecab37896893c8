use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ParallelExample;
use crate::error::{Error, Result};

/// A training mix split into shards. Virtual epoch `e` is one pass over
/// shard `e mod num_shards`.
#[derive(Clone, Debug)]
pub struct ShardedMix {
    examples: Vec<ParallelExample>,
    shards: Vec<Vec<usize>>,
}

impl ShardedMix {
    /// Shuffles the mix with `seed` and packs it greedily into shards holding
    /// at most `shard_target_tokens` target tokens each. `None` keeps the whole
    /// mix as a single shard.
    pub fn new(examples: Vec<ParallelExample>, shard_target_tokens: Option<usize>, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("training mix has no examples".into()));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let shards = match shard_target_tokens {
            None => vec![order],
            Some(budget) => {
                let mut shards = Vec::new();
                let mut current = Vec::new();
                let mut tokens = 0;
                for i in order {
                    let n = examples[i].target.len();
                    if n > budget {
                        return Err(Error::Config(format!(
                            "example with {n} target tokens exceeds shard budget {budget}"
                        )));
                    }
                    if tokens + n > budget {
                        shards.push(std::mem::take(&mut current));
                        tokens = 0;
                    }
                    current.push(i);
                    tokens += n;
                }
                if !current.is_empty() {
                    shards.push(current);
                }
                shards
            }
        };
        Ok(ShardedMix { examples, shards })
    }

    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, i: usize) -> &[usize] {
        &self.shards[i]
    }

    pub fn examples(&self) -> &[ParallelExample] {
        &self.examples
    }

    pub fn shard_target_tokens(&self, i: usize) -> usize {
        self.shards[i].iter().map(|&j| self.examples[j].target.len()).sum()
    }

    /// Batches of example indices for virtual epoch `epoch`: the epoch's shard
    /// in a seeded shuffled order, cut into runs of `batch_size`.
    pub fn epoch_batches(&self, epoch: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        assert!(batch_size > 0, "batch size must be positive");
        let mut order = self.shards[epoch % self.shards.len()].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mix(n: usize, tgt_len: usize) -> Vec<ParallelExample> {
        (0..n)
            .map(|i| {
                let src = format!("s{i}");
                let tgt = vec!["t"; tgt_len].join(" ");
                ParallelExample::from_text(&src, &tgt, None).unwrap()
            })
            .collect()
    }

    #[test]
    fn ten_examples_batch_three() {
        let m = ShardedMix::new(mix(10, 2), None, 0).unwrap();
        let batches = m.epoch_batches(0, 3, 9);
        let sizes: Vec<_> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut all: Vec<_> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_order() {
        let m = ShardedMix::new(mix(50, 1), None, 0).unwrap();
        assert_eq!(m.epoch_batches(3, 4, 1), m.epoch_batches(3, 4, 1));
        assert_ne!(m.epoch_batches(3, 4, 1), m.epoch_batches(3, 4, 2));
    }

    #[test]
    fn shards_respect_token_budget() {
        let m = ShardedMix::new(mix(100, 3), Some(20), 5).unwrap();
        assert_eq!(m.num_shards(), 17);
        for s in 0..m.num_shards() {
            assert!(m.shard_target_tokens(s) <= 20);
        }
        let mut all: Vec<_> = (0..m.num_shards()).flat_map(|s| m.shard(s).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn empty_mix_is_an_error() {
        assert!(ShardedMix::new(Vec::new(), None, 0).is_err());
    }
}
