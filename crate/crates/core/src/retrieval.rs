//! Pooled, L2-normalized trunk features, temperature-weighted k-NN
//! classification, and nearest-neighbour retrieval across modalities.

use std::path::Path;

use omnivore_tensor::{Real, Tape};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{group_by_shape, Omnivore};
use crate::nn::Mode;
use crate::sample::{DatasetId, Modality, VisualSample};

pub const INDEX_KIND: &str = "omnivore-feature-index";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    /// Unit L2 norm.
    pub vector: Vec<f64>,
    pub label: usize,
    pub modality: Modality,
    pub dataset_id: DatasetId,
    /// Position of the source sample in the featurized list.
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub tau: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 20, tau: 0.07 }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::contract(format!("k-NN needs k >= 1 and tau > 0, got {self:?}")));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit norm. A zero vector is a degenerate input.
pub fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Degenerate("cannot normalize a zero or non-finite feature".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Feature-stage grid of each sample, pooled over all tokens and
/// L2-normalized, in eval mode.
pub fn extract_features<T: Real>(
    model: &Omnivore<T>,
    samples: &[VisualSample],
    pooling: Pooling,
    chunk: usize,
) -> Result<Vec<FeatureRecord>> {
    let stage = model.config.trunk.feature_stage();
    let mut out: Vec<Option<FeatureRecord>> = vec![None; samples.len()];
    for (c, part) in samples.chunks(chunk.max(1)).enumerate() {
        let base = c * chunk.max(1);
        let refs: Vec<&VisualSample> = part.iter().collect();
        for group in group_by_shape(&refs) {
            let batch: Vec<&VisualSample> = group.iter().map(|&i| refs[i]).collect();
            let mut tape = Tape::new();
            let o = model.forward(&mut tape, &batch, &mut Mode::Eval)?;
            let grid = &o.stages[stage];
            let (n, d) = (grid.tokens_per_sample(), grid.dim);
            for (b, &i) in group.iter().enumerate() {
                let tokens = &tape.value(grid.tokens)[b * n * d..(b + 1) * n * d];
                let mut v = pool(tokens, d, pooling);
                l2_normalize(&mut v)?;
                let s = refs[i];
                out[base + i] = Some(FeatureRecord {
                    vector: v,
                    label: s.label,
                    modality: s.modality,
                    dataset_id: s.dataset_id.clone(),
                    index: base + i,
                });
            }
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every sample featurized")).collect())
}

fn pool<T: Real>(tokens: &[T], d: usize, pooling: Pooling) -> Vec<f64> {
    let n = tokens.len() / d;
    let mut v = match pooling {
        Pooling::Mean => vec![0.0; d],
        Pooling::Max => vec![f64::NEG_INFINITY; d],
    };
    for row in tokens.chunks(d) {
        for (acc, x) in v.iter_mut().zip(row) {
            let x = x.as_f64();
            match pooling {
                Pooling::Mean => *acc += x,
                Pooling::Max => *acc = acc.max(x),
            }
        }
    }
    if pooling == Pooling::Mean {
        v.iter_mut().for_each(|x| *x /= n as f64);
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    /// `Σ e^{s/τ}` over the top-k neighbours carrying each class.
    pub scores: Vec<f64>,
    pub prediction: usize,
}

/// Indices of the `k` most similar records, most similar first; equal
/// similarities keep index order.
fn top_k(query: &[f64], index: &[FeatureRecord], k: usize) -> Result<Vec<(usize, f64)>> {
    if index.is_empty() {
        return Err(Error::Retrieval("empty index".into()));
    }
    let mut sims = Vec::with_capacity(index.len());
    for (i, r) in index.iter().enumerate() {
        if r.vector.len() != query.len() {
            return Err(Error::Retrieval(format!(
                "feature dim {} does not match query dim {}",
                r.vector.len(),
                query.len()
            )));
        }
        sims.push((i, dot(query, &r.vector)));
    }
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(k);
    Ok(sims)
}

pub fn knn_classify(query: &[f64], index: &[FeatureRecord], classes: usize, cfg: KnnConfig) -> Result<KnnResult> {
    cfg.validate()?;
    let mut scores = vec![0.0; classes];
    for (i, s) in top_k(query, index, cfg.k)? {
        let label = index[i].label;
        if label >= classes {
            return Err(Error::Retrieval(format!("index label {label} >= {classes} classes")));
        }
        scores[label] += (s / cfg.tau).exp();
    }
    let prediction = crate::model::argmax(&scores);
    Ok(KnnResult { scores, prediction })
}

/// Fraction of `queries` whose k-NN prediction over `index` equals their label.
pub fn knn_accuracy(queries: &[FeatureRecord], index: &[FeatureRecord], classes: usize, cfg: KnnConfig) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Retrieval("no queries".into()));
    }
    let mut correct = 0;
    for q in queries {
        correct += usize::from(knn_classify(&q.vector, index, classes, cfg)?.prediction == q.label);
    }
    Ok(correct as f64 / queries.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    /// Position in the database.
    pub index: usize,
    pub score: f64,
    pub label: usize,
}

/// Top `top_n` database records per query, by descending dot product.
pub fn cross_modal_retrieve(queries: &[FeatureRecord], database: &[FeatureRecord], top_n: usize) -> Result<Vec<Vec<Match>>> {
    queries
        .iter()
        .map(|q| {
            Ok(top_k(&q.vector, database, top_n)?
                .into_iter()
                .map(|(i, score)| Match {
                    index: i,
                    score,
                    label: database[i].label,
                })
                .collect())
        })
        .collect()
}

/// Featurizes both sides with `model`, then retrieves.
pub fn retrieve_samples<T: Real>(
    model: &Omnivore<T>,
    queries: &[VisualSample],
    database: &[VisualSample],
    top_n: usize,
    pooling: Pooling,
) -> Result<Vec<Vec<Match>>> {
    if database.is_empty() {
        return Err(Error::Retrieval("empty database".into()));
    }
    let q = extract_features(model, queries, pooling, 64)?;
    let db = extract_features(model, database, pooling, 64)?;
    cross_modal_retrieve(&q, &db, top_n)
}

/// Ranked matches as CSV: `query,rank,db_index,score,query_label,db_label`.
pub fn matches_csv(queries: &[FeatureRecord], matches: &[Vec<Match>]) -> String {
    let mut out = String::from("query,rank,db_index,score,query_label,db_label\n");
    for (q, ms) in queries.iter().zip(matches) {
        for (r, m) in ms.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{},{}\n", q.index, r + 1, m.index, m.score, q.label, m.label));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    records: Vec<RecordMeta>,
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    label: usize,
    modality: Modality,
    dataset_id: DatasetId,
    index: usize,
}

pub fn index_to_container(records: &[FeatureRecord]) -> Result<Container> {
    let d = records.first().map_or(0, |r| r.vector.len());
    if records.iter().any(|r| r.vector.len() != d) {
        return Err(Error::Retrieval("records disagree in feature dim".into()));
    }
    let meta = IndexMeta {
        records: records
            .iter()
            .map(|r| RecordMeta {
                label: r.label,
                modality: r.modality,
                dataset_id: r.dataset_id.clone(),
                index: r.index,
            })
            .collect(),
    };
    let mut c = Container::new(INDEX_KIND, serde_json::to_value(meta)?);
    let flat: Vec<f64> = records.iter().flat_map(|r| r.vector.iter().copied()).collect();
    c.push("features", &[records.len(), d], &flat)?;
    Ok(c)
}

pub fn index_from_container(c: &Container) -> Result<Vec<FeatureRecord>> {
    c.expect_kind(INDEX_KIND)?;
    let meta: IndexMeta = serde_json::from_value(c.meta.clone())?;
    let (shape, flat) = c.get::<f64>("features")?;
    if shape.len() != 2 || shape[0] != meta.records.len() {
        return Err(Error::Format(format!("feature block {shape:?} does not match {} records", meta.records.len())));
    }
    let d = shape[1];
    Ok(meta
        .records
        .into_iter()
        .enumerate()
        .map(|(i, m)| FeatureRecord {
            vector: flat[i * d..(i + 1) * d].to_vec(),
            label: m.label,
            modality: m.modality,
            dataset_id: m.dataset_id,
            index: m.index,
        })
        .collect())
}

pub fn save_index(records: &[FeatureRecord], dir: &Path) -> Result<()> {
    index_to_container(records)?.write(dir)
}

pub fn load_index(dir: &Path) -> Result<Vec<FeatureRecord>> {
    index_from_container(&Container::read(dir)?)
}
