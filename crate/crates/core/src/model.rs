use omnivore_tensor::{softmax_in_place, ParamStore, Real, Tape};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadSet, HeadSpec};
use crate::nn::Mode;
use crate::patch_embed::{PatchEmbed, PatchSpec, RgbdEmbed};
use crate::rng::rng_for;
use crate::sample::{DatasetId, VisualSample};
use crate::trunk::{Trunk, TrunkConfig, TrunkOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: PatchSpec,
    pub trunk: TrunkConfig,
    #[serde(default)]
    pub rgbd_embed: RgbdEmbed,
}

impl ModelConfig {
    /// Patch (2,4,4), d=16, depths [2,2], heads [2,4], window (2,2,2).
    pub fn desk() -> Self {
        ModelConfig {
            patch: PatchSpec {
                t: 2,
                h: 4,
                w: 4,
                dim: 16,
            },
            trunk: TrunkConfig::desk(),
            rgbd_embed: RgbdEmbed::Additive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.trunk.validate()?;
        if self.patch.dim != self.trunk.stage_dims[0] {
            return Err(Error::Config {
                field: "model.patch.dim".into(),
                msg: format!(
                    "token dim {} must equal the first stage dim {}",
                    self.patch.dim, self.trunk.stage_dims[0]
                ),
            });
        }
        Ok(())
    }
}

/// Embedder, shared trunk, and per-dataset heads over one parameter store.
#[derive(Clone, Debug)]
pub struct Omnivore<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embed: PatchEmbed,
    pub trunk: Trunk,
    pub heads: HeadSet,
}

/// Indices of `samples` grouped by (modality, shape), in first-seen order.
pub fn group_by_shape(samples: &[&VisualSample]) -> Vec<Vec<usize>> {
    let mut groups: Vec<(crate::sample::Modality, [usize; 4], Vec<usize>)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match groups
            .iter_mut()
            .find(|(m, sh, _)| *m == s.modality && *sh == s.shape())
        {
            Some(g) => g.2.push(i),
            None => groups.push((s.modality, s.shape(), vec![i])),
        }
    }
    groups.into_iter().map(|g| g.2).collect()
}

impl<T: Real> Omnivore<T> {
    pub fn new(config: ModelConfig, heads: &[HeadSpec], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, &[0x1417]);
        let embed = PatchEmbed::new(&mut store, config.patch, config.rgbd_embed, &mut rng)?;
        let trunk = Trunk::new(&mut store, config.trunk.clone(), &mut rng)?;
        let heads = HeadSet::new(&mut store, heads, config.trunk.final_dim(), &mut rng)?;
        Ok(Omnivore {
            config,
            store,
            embed,
            trunk,
            heads,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Omnivore<U> {
        Omnivore {
            config: self.config.clone(),
            store: self.store.cast(),
            embed: self.embed.clone(),
            trunk: self.trunk.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Same architecture evaluated with another parameter set (e.g. EMA).
    pub fn with_store(&self, store: ParamStore<T>) -> Self {
        Omnivore {
            config: self.config.clone(),
            store,
            embed: self.embed.clone(),
            trunk: self.trunk.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Trunk forward for samples sharing modality and shape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        samples: &[&VisualSample],
        mode: &mut Mode<'_>,
    ) -> Result<TrunkOutput> {
        let grid = self.embed.embed_batch(tape, &self.store, samples)?;
        self.trunk.forward(tape, &self.store, grid, mode)
    }

    /// Φ for each sample, in eval mode.
    pub fn representations(&self, samples: &[&VisualSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); samples.len()];
        for group in group_by_shape(samples) {
            let batch: Vec<&VisualSample> = group.iter().map(|&i| samples[i]).collect();
            let mut tape = Tape::new();
            let o = self.forward(&mut tape, &batch, &mut Mode::Eval)?;
            let d = self.config.trunk.final_dim();
            for (row, &i) in tape.value(o.phi).chunks(d).zip(&group) {
                out[i] = row.iter().map(|v| v.as_f64()).collect();
            }
        }
        Ok(out)
    }

    /// Softmax class probabilities from `dataset`'s head, in eval mode.
    pub fn predict_proba(&self, samples: &[&VisualSample], dataset: &DatasetId) -> Result<Vec<Vec<f64>>> {
        let classes = self.heads.get(dataset)?.classes;
        let mut out = vec![Vec::new(); samples.len()];
        for group in group_by_shape(samples) {
            let batch: Vec<&VisualSample> = group.iter().map(|&i| samples[i]).collect();
            let mut tape = Tape::new();
            let o = self.forward(&mut tape, &batch, &mut Mode::Eval)?;
            let logits = self
                .heads
                .head_forward(&mut tape, &self.store, o.phi, dataset, &mut Mode::Eval)?;
            for (row, &i) in tape.value(logits).chunks(classes).zip(&group) {
                let mut p: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                softmax_in_place(&mut p);
                out[i] = p;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
