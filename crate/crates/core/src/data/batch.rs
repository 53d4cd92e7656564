use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{generate_scene, LayoutPyramid, Scene};
use crate::config::DatasetConfig;
use crate::{Error, Result};

/// A finite set of scenes identified by `0..len`, where scene `id` is
/// rendered from seed `base_seed + id`.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub config: DatasetConfig,
    pub base_seed: u64,
    pub len: u64,
}

impl DatasetSpec {
    pub fn train(config: &DatasetConfig) -> Self {
        Self { config: config.clone(), base_seed: 0, len: config.train_scenes }
    }

    pub fn heldout(config: &DatasetConfig, len: u64) -> Self {
        Self { config: config.clone(), base_seed: config.heldout_offset, len }
    }

    pub fn scene(&self, id: u64) -> Result<Scene> {
        if id >= self.len {
            return Err(Error::Invalid(format!("scene {id} out of range for {} scenes", self.len)));
        }
        generate_scene(self.base_seed.wrapping_add(id), &self.config)
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<u64>,
    pub scenes: Vec<Scene>,
    pub pyramids: Vec<LayoutPyramid>,
}

impl Batch {
    pub fn from_scenes(ids: Vec<u64>, scenes: Vec<Scene>) -> Result<Self> {
        let pyramids = scenes.iter().map(|s| LayoutPyramid::build(&s.layout)).collect::<Result<_>>()?;
        Ok(Self { ids, scenes, pyramids })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Endless stream of batches. Every epoch visits the dataset in a fresh
/// permutation derived from `(seed, epoch)`; the final batch of an epoch may
/// be short.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    spec: DatasetSpec,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<u64>,
}

impl BatchIterator {
    pub fn new(spec: DatasetSpec, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if spec.len == 0 {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        let order = permutation(spec.len, seed, 0);
        Ok(Self { spec, batch_size, seed, epoch: 0, cursor: 0, order })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Scene ids of the next batch, without rendering.
    pub fn next_ids(&mut self) -> Vec<u64> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order = permutation(self.spec.len, self.seed, self.epoch);
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let ids = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        ids
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let ids = self.next_ids();
        let scenes = ids.iter().map(|&id| self.spec.scene(id)).collect::<Result<_>>()?;
        Batch::from_scenes(ids, scenes)
    }
}

impl Iterator for BatchIterator {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

fn permutation(len: u64, seed: u64, epoch: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<u64> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(len: u64) -> DatasetSpec {
        DatasetSpec { len, ..DatasetSpec::train(&DatasetConfig::default()) }
    }

    #[test]
    fn batches_have_requested_size() {
        let mut it = BatchIterator::new(spec(20), 8, 0).unwrap();
        let sizes: Vec<usize> = (0..3).map(|_| it.next_ids().len()).collect();
        assert_eq!(sizes, vec![8, 8, 4]);
        assert_eq!(it.next_ids().len(), 8);
        assert_eq!(it.epoch(), 1);
        let b = BatchIterator::new(spec(20), 8, 0).unwrap().next_batch().unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(b.pyramids.len(), 8);
    }

    #[test]
    fn epoch_is_a_permutation() {
        let mut it = BatchIterator::new(spec(13), 4, 5).unwrap();
        let mut seen: Vec<u64> = (0..4).flat_map(|_| it.next_ids()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..13).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_order() {
        let ids = |seed| {
            let mut it = BatchIterator::new(spec(64), 8, seed).unwrap();
            (0..10).map(|_| it.next_ids()).collect::<Vec<_>>()
        };
        assert_eq!(ids(1), ids(1));
        assert_ne!(ids(1)[0], ids(2)[0]);
    }

    #[test]
    fn rejects_empty_and_zero_batch() {
        assert!(BatchIterator::new(spec(0), 8, 0).is_err());
        assert!(BatchIterator::new(spec(4), 0, 0).is_err());
    }
}
