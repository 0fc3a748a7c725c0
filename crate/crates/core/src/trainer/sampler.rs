//! PK batch sampling: `P` distinct entities with `K` images each.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, EntityId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PkSampler {
    entities: Vec<(EntityId, Vec<usize>)>,
    p: usize,
    k: usize,
}

/// One batch: `p * k` record indices, grouped entity by entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    /// Index into the sampler's sorted entity list, parallel to `indices`.
    pub entity_slots: Vec<usize>,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Config("P and K must be positive".into()));
        }
        let entities: Vec<(EntityId, Vec<usize>)> = dataset.indices_by_entity().into_iter().collect();
        if entities.len() < p {
            return Err(Error::Validation(format!(
                "PK sampling needs at least P = {p} entities, dataset has {}",
                entities.len()
            )));
        }
        Ok(PkSampler { entities, p, k })
    }

    pub fn entities(&self) -> impl Iterator<Item = &EntityId> {
        self.entities.iter().map(|(e, _)| e)
    }

    /// `K` images of one entity, drawing with replacement once its images
    /// are used up.
    fn chunks(&self, images: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut shuffled = images.to_vec();
        shuffled.shuffle(rng);
        shuffled
            .chunks(self.k)
            .map(|c| {
                let mut chunk = c.to_vec();
                while chunk.len() < self.k {
                    chunk.push(*images.choose(rng).expect("entity has images"));
                }
                chunk
            })
            .collect()
    }

    /// Batches of one epoch. Every entity appears at least once; the
    /// sequence depends only on `(seed, epoch)`.
    pub fn epoch(&self, seed: u64, epoch: u64) -> Vec<PkBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut queues: Vec<Vec<Vec<usize>>> = self
            .entities
            .iter()
            .map(|(_, imgs)| self.chunks(imgs, &mut rng))
            .collect();
        let mut batches = Vec::new();
        loop {
            let open: Vec<usize> = (0..queues.len()).filter(|&e| !queues[e].is_empty()).collect();
            if open.is_empty() {
                break;
            }
            let mut chosen: Vec<usize> = open.choose_multiple(&mut rng, self.p.min(open.len())).copied().collect();
            if chosen.len() < self.p {
                // top up with entities that already finished this epoch
                let mut rest: Vec<usize> = (0..queues.len()).filter(|e| !chosen.contains(e)).collect();
                rest.shuffle(&mut rng);
                chosen.extend(rest.into_iter().take(self.p - chosen.len()));
            }
            let mut batch = PkBatch {
                indices: Vec::with_capacity(self.p * self.k),
                entity_slots: Vec::with_capacity(self.p * self.k),
            };
            for e in chosen {
                let chunk = match queues[e].pop() {
                    Some(c) => c,
                    None => {
                        let imgs = &self.entities[e].1;
                        let mut fresh = self.chunks(imgs, &mut rng);
                        fresh.swap_remove(rng.random_range(0..fresh.len()))
                    }
                };
                batch.entity_slots.extend(std::iter::repeat_n(e, chunk.len()));
                batch.indices.extend(chunk);
            }
            batches.push(batch);
        }
        batches
    }
}

/// One epoch of PK batches as record indices.
pub fn pk_sample(dataset: &Dataset, p: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    Ok(PkSampler::new(dataset, p, k)?
        .epoch(seed, 0)
        .into_iter()
        .map(|b| b.indices)
        .collect())
}
