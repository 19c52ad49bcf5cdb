use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{valid_centers, ClipSource};
use crate::error::{Error, Result};

/// A clip position: sequence index and center frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClipKey {
    pub sequence: usize,
    pub center: usize,
}

/// One crop of one clip, with the seed of its augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub key: ClipKey,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub epoch: usize,
    pub index: usize,
    /// `crops_per_example` consecutive entries per clip.
    pub entries: Vec<BatchEntry>,
}

impl Batch {
    /// Distinct clips in draw order.
    pub fn clips(&self) -> Vec<ClipKey> {
        let mut out: Vec<ClipKey> = Vec::new();
        for e in &self.entries {
            if out.last() != Some(&e.key) {
                out.push(e.key);
            }
        }
        out
    }
}

/// Every clip position with a full window of `seq_len` frames.
pub fn epoch_keys(source: &dyn ClipSource, seq_len: usize) -> Vec<ClipKey> {
    source
        .sequences()
        .iter()
        .enumerate()
        .flat_map(|(sequence, (_, frames))| {
            valid_centers(*frames, seq_len).map(move |center| ClipKey { sequence, center })
        })
        .collect()
}

/// Plans the batches of one epoch.
///
/// Clip order and per-crop augmentation seeds are fixed by `(seed, epoch)`
/// alone, so materialization may happen on any thread.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    keys: Vec<ClipKey>,
    pos: usize,
    index: usize,
    epoch: usize,
    clips_per_batch: usize,
    crops_per_example: usize,
    rng: ChaCha8Rng,
    warned: bool,
}

impl BatchIterator {
    pub fn new(mut keys: Vec<ClipKey>, batch_size: usize, crops_per_example: usize, seed: u64, epoch: usize) -> Result<Self> {
        if crops_per_example == 0 || batch_size == 0 || batch_size % crops_per_example != 0 {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} is not a positive multiple of {crops_per_example} crops per example"
            )));
        }
        if keys.is_empty() {
            return Err(Error::Dataset("no clip has a complete temporal window".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        keys.shuffle(&mut rng);
        Ok(Self {
            keys,
            pos: 0,
            index: 0,
            epoch,
            clips_per_batch: batch_size / crops_per_example,
            crops_per_example,
            rng,
            warned: false,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.keys.len().div_ceil(self.clips_per_batch)
    }

    pub fn clips_per_batch(&self) -> usize {
        self.clips_per_batch
    }
}

impl Iterator for BatchIterator {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.keys.len() {
            return None;
        }
        let end = (self.pos + self.clips_per_batch).min(self.keys.len());
        let mut clips = self.keys[self.pos..end].to_vec();
        self.pos = end;
        if clips.len() < self.clips_per_batch {
            if !self.warned {
                log::warn!(
                    "epoch {}: {} clips left for a batch of {}; filling by sampling with replacement",
                    self.epoch,
                    clips.len(),
                    self.clips_per_batch
                );
                self.warned = true;
            }
            let mut pool: Vec<ClipKey> = self.keys.iter().copied().filter(|k| !clips.contains(k)).collect();
            while clips.len() < self.clips_per_batch {
                if pool.is_empty() {
                    pool = self.keys.clone();
                }
                let i = self.rng.gen_range(0..pool.len());
                clips.push(pool.swap_remove(i));
            }
        }
        let mut entries = Vec::with_capacity(clips.len() * self.crops_per_example);
        for key in clips {
            for _ in 0..self.crops_per_example {
                entries.push(BatchEntry {
                    key,
                    seed: self.rng.gen(),
                });
            }
        }
        let batch = Batch {
            epoch: self.epoch,
            index: self.index,
            entries,
        };
        self.index += 1;
        Some(batch)
    }
}

/// Batches for one epoch over all valid clips of `source`.
pub fn batch_iterator(
    source: &dyn ClipSource,
    seq_len: usize,
    batch_size: usize,
    crops_per_example: usize,
    seed: u64,
    epoch: usize,
) -> Result<BatchIterator> {
    BatchIterator::new(epoch_keys(source, seq_len), batch_size, crops_per_example, seed, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn keys(n: usize) -> Vec<ClipKey> {
        (0..n).map(|c| ClipKey { sequence: c % 3, center: c }).collect()
    }

    #[test]
    fn clips_per_batch_follows_crop_count() {
        let it = BatchIterator::new(keys(100), 64, 8, 0, 0).unwrap();
        assert_eq!(it.clips_per_batch(), 8);
        for b in it {
            assert_eq!(b.entries.len(), 64);
            let clips = b.clips();
            assert_eq!(clips.len(), 8);
            assert_eq!(clips.iter().collect::<HashSet<_>>().len(), 8);
        }
        assert!(BatchIterator::new(keys(10), 6, 4, 0, 0).is_err());
    }

    #[test]
    fn epoch_visits_every_clip_once_before_padding() {
        let it = BatchIterator::new(keys(21), 4, 1, 5, 2).unwrap();
        assert_eq!(it.batches_per_epoch(), 6);
        let batches: Vec<_> = it.collect();
        let seen: Vec<ClipKey> = batches.iter().flat_map(|b| b.clips()).take(21).collect();
        assert_eq!(seen.iter().collect::<HashSet<_>>().len(), 21);
        assert_eq!(batches.last().unwrap().entries.len(), 4);
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        let a: Vec<_> = BatchIterator::new(keys(30), 8, 2, 7, 3).unwrap().collect();
        let b: Vec<_> = BatchIterator::new(keys(30), 8, 2, 7, 3).unwrap().collect();
        let c: Vec<_> = BatchIterator::new(keys(30), 8, 2, 7, 4).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_dataset_samples_with_replacement() {
        let batches: Vec<_> = BatchIterator::new(keys(2), 4, 1, 0, 0).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].entries.len(), 4);
    }
}
