//! Dataset-specific classifier heads, per-sample loss routing, and
//! verb/noun marginalization over paired action labels.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use omnivore_tensor::{softmax_in_place, ParamStore, Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mode};
use crate::rng::SeedRng;
use crate::sample::DatasetId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dataset_id: DatasetId,
    pub classes: usize,
    /// Dropout applied to Φ before this head, training only.
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub linear: Linear,
    pub classes: usize,
    pub dropout: f64,
}

/// One linear classifier per dataset; heads share no parameters.
#[derive(Clone, Debug, Default)]
pub struct HeadSet {
    heads: BTreeMap<DatasetId, Head>,
}

impl HeadSet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        specs: &[HeadSpec],
        in_dim: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let mut heads = BTreeMap::new();
        for s in specs {
            if s.classes == 0 {
                return Err(Error::contract(format!("head `{}` has zero classes", s.dataset_id)));
            }
            if !(0.0..1.0).contains(&s.dropout) {
                return Err(Error::contract(format!("head `{}` dropout outside [0, 1)", s.dataset_id)));
            }
            let linear = Linear::new(store, &format!("heads.{}", s.dataset_id), in_dim, s.classes, true, rng)?;
            if heads
                .insert(
                    s.dataset_id.clone(),
                    Head {
                        linear,
                        classes: s.classes,
                        dropout: s.dropout,
                    },
                )
                .is_some()
            {
                return Err(Error::contract(format!("duplicate head `{}`", s.dataset_id)));
            }
        }
        Ok(HeadSet { heads })
    }

    pub fn get(&self, id: &DatasetId) -> Result<&Head> {
        self.heads.get(id).ok_or_else(|| Error::Routing(id.clone()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &DatasetId> {
        self.heads.keys()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Logits `[B, C_id]` for `phi: [B, D]`. An empty batch yields `[0, C_id]`.
    pub fn head_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        phi: Var,
        dataset: &DatasetId,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let head = self.get(dataset)?;
        let x = match mode {
            Mode::Train(rng) => tape.dropout(phi, head.dropout, *rng)?,
            Mode::Eval => phi,
        };
        head.linear.forward(tape, store, x)
    }

    /// Mean cross entropy where each sample is scored only by the head of its
    /// own dataset. `phi` is `[B, D]`, aligned with `labels` and `datasets`.
    #[allow(clippy::too_many_arguments)]
    pub fn route_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        phi: Var,
        labels: &[usize],
        datasets: &[DatasetId],
        smoothing: f64,
        mode: &mut Mode<'_>,
    ) -> Result<RoutedLoss> {
        let b = labels.len();
        if datasets.len() != b || tape.shape(phi).first() != Some(&b) {
            return Err(Error::contract("route_loss: phi, labels and datasets disagree in length"));
        }
        if b == 0 {
            return Err(Error::contract("route_loss: empty batch"));
        }
        let mut groups: BTreeMap<&DatasetId, Vec<usize>> = BTreeMap::new();
        for (i, d) in datasets.iter().enumerate() {
            self.get(d)?;
            groups.entry(d).or_default().push(i);
        }
        let mut total: Option<Var> = None;
        let mut logits = Vec::new();
        for (d, rows) in groups {
            let sub = tape.gather_rows(phi, rows.iter().map(|&r| Some(r)).collect())?;
            let lg = self.head_forward(tape, store, sub, d, mode)?;
            let targets: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let ce = tape.cross_entropy(lg, &targets, smoothing)?;
            let weighted = tape.scale(ce, T::from_f64_lossy(rows.len() as f64 / b as f64));
            total = Some(match total {
                Some(t) => tape.add(t, weighted)?,
                None => weighted,
            });
            logits.push((d.clone(), rows, lg));
        }
        Ok(RoutedLoss {
            loss: total.expect("non-empty batch"),
            logits,
        })
    }
}

/// Loss plus the per-dataset logits it was computed from.
#[derive(Clone, Debug)]
pub struct RoutedLoss {
    pub loss: Var,
    /// `(dataset, batch rows, logits var)` per dataset present in the batch.
    pub logits: Vec<(DatasetId, Vec<usize>, Var)>,
}

/// A verb × noun label space whose valid pairs form the action classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLabelSpace {
    pub verbs: usize,
    pub nouns: usize,
    /// `actions[a] = (verb, noun)`.
    pub actions: Vec<(usize, usize)>,
}

impl PairLabelSpace {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (a, &(v, n)) in self.actions.iter().enumerate() {
            if v >= self.verbs || n >= self.nouns {
                return Err(Error::contract(format!(
                    "action {a} maps to ({v}, {n}) outside {}×{}",
                    self.verbs, self.nouns
                )));
            }
            if !seen.insert((v, n)) {
                return Err(Error::contract(format!("pair ({v}, {n}) listed twice")));
            }
        }
        if self.actions.is_empty() {
            return Err(Error::contract("pair label space has no actions"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let space: PairLabelSpace = serde_json::from_str(&text)?;
        space.validate()?;
        Ok(space)
    }
}

/// Softmax over actions, then sums probabilities sharing a verb (resp. noun).
/// `action_logits` is `[B, A]` row-major.
pub fn marginalize(action_logits: &[f64], space: &PairLabelSpace) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    space.validate()?;
    let a = space.actions.len();
    if action_logits.len() % a != 0 {
        return Err(Error::contract(format!(
            "{} logits are not a multiple of {a} actions",
            action_logits.len()
        )));
    }
    let mut verbs = Vec::new();
    let mut nouns = Vec::new();
    for row in action_logits.chunks(a) {
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        let mut vp = vec![0.0; space.verbs];
        let mut np = vec![0.0; space.nouns];
        for (&pa, &(v, n)) in p.iter().zip(&space.actions) {
            vp[v] += pa;
            np[n] += pa;
        }
        verbs.push(vp);
        nouns.push(np);
    }
    Ok((verbs, nouns))
}
