//! Composite-epoch scheduling across datasets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, str_tag};
use crate::sample::{DatasetId, Modality};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dataset_id: DatasetId,
    pub modality: Modality,
    pub size: usize,
    pub classes: usize,
    /// Passes over the dataset per composite epoch; may be fractional.
    pub replication_weight: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::contract(format!("dataset `{}` has size 0", self.dataset_id)));
        }
        if !self.replication_weight.is_finite() || self.replication_weight < 0.0 {
            return Err(Error::contract(format!(
                "dataset `{}` replication weight {} must be finite and >= 0",
                self.dataset_id, self.replication_weight
            )));
        }
        Ok(())
    }

    /// `round(weight × size)`.
    pub fn draws(&self) -> usize {
        (self.replication_weight * self.size as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Each batch comes from one dataset.
    #[default]
    Separate,
    /// Each batch mixes datasets in proportion to what remains.
    Mixed,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(Strategy::Separate),
            "mixed" => Ok(Strategy::Mixed),
            _ => Err(Error::Config {
                field: "strategy".into(),
                msg: format!("unknown strategy `{s}` (expected separate|mixed)"),
            }),
        }
    }
}

/// One sample reference: `dataset` indexes `EpochSchedule::datasets`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Draw {
    pub dataset: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub datasets: Vec<DatasetId>,
    pub strategy: Strategy,
    pub seed: u64,
    pub batches: Vec<Vec<Draw>>,
}

impl EpochSchedule {
    pub fn total_draws(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// Draw counts per dataset, aligned with `datasets`.
    pub fn draws_per_dataset(&self) -> Vec<usize> {
        let mut n = vec![0; self.datasets.len()];
        for d in self.batches.iter().flatten() {
            n[d.dataset] += 1;
        }
        n
    }
}

/// Sample order for one dataset: full passes are fresh permutations; the
/// fractional remainder is a seeded subsample.
fn dataset_draws(spec: &DatasetSpec, seed: u64) -> Vec<usize> {
    let total = spec.draws();
    let (passes, rem) = (total / spec.size, total % spec.size);
    let tag = str_tag(spec.dataset_id.as_str());
    let mut out = Vec::with_capacity(total);
    for pass in 0..passes + usize::from(rem > 0) {
        let mut perm: Vec<usize> = (0..spec.size).collect();
        perm.shuffle(&mut rng_for(seed, &[tag, pass as u64]));
        let take = if pass < passes { spec.size } else { rem };
        out.extend_from_slice(&perm[..take]);
    }
    out
}

pub fn build_epoch_schedule(
    specs: &[DatasetSpec],
    batch_size: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<EpochSchedule> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be >= 1"));
    }
    for s in specs {
        s.validate()?;
    }
    let queues: Vec<Vec<usize>> = specs.iter().map(|s| dataset_draws(s, seed)).collect();
    if queues.iter().all(Vec::is_empty) {
        return Err(Error::EmptySchedule);
    }
    let batches = match strategy {
        Strategy::Separate => separate(&queues, batch_size),
        Strategy::Mixed => mixed(&queues, batch_size),
    };
    Ok(EpochSchedule {
        datasets: specs.iter().map(|s| s.dataset_id.clone()).collect(),
        strategy,
        seed,
        batches,
    })
}

/// Chunks each dataset into batches, then repeatedly emits the next batch of
/// the dataset furthest behind its proportional share (ties: lowest index).
fn separate(queues: &[Vec<usize>], batch_size: usize) -> Vec<Vec<Draw>> {
    let chunks: Vec<Vec<Vec<Draw>>> = queues
        .iter()
        .enumerate()
        .map(|(d, q)| {
            q.chunks(batch_size)
                .map(|c| c.iter().map(|&index| Draw { dataset: d, index }).collect())
                .collect()
        })
        .collect();
    let mut next = vec![0usize; chunks.len()];
    let mut out = Vec::new();
    loop {
        // progress next[d]/len[d], compared by cross-multiplication
        let mut best: Option<usize> = None;
        for d in 0..chunks.len() {
            if next[d] == chunks[d].len() {
                continue;
            }
            best = match best {
                Some(b) if next[b] * chunks[d].len() <= next[d] * chunks[b].len() => Some(b),
                _ => Some(d),
            };
        }
        let Some(d) = best else { break };
        out.push(chunks[d][next[d]].clone());
        next[d] += 1;
    }
    out
}

/// Largest-remainder apportionment of each batch over remaining draws.
fn mixed(queues: &[Vec<usize>], batch_size: usize) -> Vec<Vec<Draw>> {
    let mut pos = vec![0usize; queues.len()];
    let mut out = Vec::new();
    loop {
        let remaining: Vec<usize> = queues.iter().zip(&pos).map(|(q, &p)| q.len() - p).collect();
        let total: usize = remaining.iter().sum();
        if total == 0 {
            break;
        }
        let b = batch_size.min(total);
        let mut quota: Vec<usize> = remaining.iter().map(|&r| b * r / total).collect();
        let mut order: Vec<usize> = (0..queues.len()).collect();
        order.sort_by_key(|&d| std::cmp::Reverse(b * remaining[d] % total));
        let short = b - quota.iter().sum::<usize>();
        for &d in order.iter().take(short) {
            quota[d] += 1;
        }
        let mut batch = Vec::with_capacity(b);
        for (d, q) in quota.into_iter().enumerate() {
            batch.extend(queues[d][pos[d]..pos[d] + q].iter().map(|&index| Draw { dataset: d, index }));
            pos[d] += q;
        }
        out.push(batch);
    }
    out
}
