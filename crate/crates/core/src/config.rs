//! Serializable run configuration, presets, and the config hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::store::read_dataset;
use crate::data::{gen_synthetic, DatasetSpec, SyntheticWorld};
use crate::error::{Error, Result};
use crate::heads::HeadSpec;
use crate::model::ModelConfig;
use crate::patch_embed::PatchSpec;
use crate::retrieval::{KnnConfig, Pooling};
use crate::sample::{DatasetId, Modality};
use crate::train::{DatasetSplit, TrainConfig};
use crate::trunk::TrunkConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub dataset_id: DatasetId,
    pub modality: Modality,
    pub train_size: usize,
    pub eval_size: usize,
    #[serde(default = "one")]
    pub replication_weight: f64,
    #[serde(default)]
    pub head_dropout: f64,
    /// Dataset directory to import instead of rendering synthetic samples.
    /// Its first `train_size` samples train, the next `eval_size` evaluate.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub world: SyntheticWorld,
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub clip_lens: Vec<usize>,
    pub clip_stride: usize,
    pub knn: KnnConfig,
    pub pooling: Pooling,
    pub top_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            clip_lens: vec![1, 2, 4, 8],
            clip_stride: 1,
            knn: KnnConfig::default(),
            pooling: Pooling::Mean,
            top_n: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub preset: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Not part of the config hash.
    pub out_dir: PathBuf,
}

/// Model configs by preset name. Full-size Swin variants are recorded for
/// completeness; only `desk` is practical on a CPU.
pub fn model_preset(name: &str) -> Result<ModelConfig> {
    let swin = |dim: usize, depths: Vec<usize>, heads: Vec<usize>, window: [usize; 3], drop_path: f64| ModelConfig {
        patch: PatchSpec { t: 2, h: 4, w: 4, dim },
        trunk: TrunkConfig {
            stage_dims: (0..depths.len()).map(|i| dim << i).collect(),
            stage_depths: depths,
            heads_per_stage: heads,
            window,
            drop_path_rate: drop_path,
            mlp_ratio: 4.0,
            feature_stage: None,
        },
        rgbd_embed: Default::default(),
    };
    Ok(match name {
        "desk" => ModelConfig::desk(),
        "swin_t" => swin(96, vec![2, 2, 6, 2], vec![3, 6, 12, 24], [8, 7, 7], 0.1),
        "swin_s" => swin(96, vec![2, 2, 18, 2], vec![3, 6, 12, 24], [8, 7, 7], 0.2),
        "swin_b" => swin(128, vec![2, 2, 18, 2], vec![4, 8, 16, 32], [16, 7, 7], 0.3),
        "swin_l" => swin(192, vec![2, 2, 18, 2], vec![6, 12, 24, 48], [8, 7, 7], 0.3),
        other => {
            return Err(Error::Config {
                field: "preset".into(),
                msg: format!("unknown preset `{other}` (desk|swin_t|swin_s|swin_b|swin_l)"),
            })
        }
    })
}

impl RunConfig {
    /// Joint training on the three synthetic modalities.
    pub fn desk() -> Self {
        let entry = |id: &str, modality, train_size, eval_size| DatasetEntry {
            dataset_id: id.into(),
            modality,
            train_size,
            eval_size,
            replication_weight: 1.0,
            head_dropout: 0.0,
            path: None,
        };
        RunConfig {
            schema_version: SCHEMA_VERSION,
            preset: "desk".into(),
            model: ModelConfig::desk(),
            data: DataConfig {
                world: SyntheticWorld::default(),
                datasets: vec![
                    entry("images", Modality::Image, 512, 256),
                    entry("videos", Modality::Video, 256, 128),
                    entry("rgbd", Modality::Rgbd, 512, 256),
                ],
            },
            train: TrainConfig {
                epochs: 40,
                lr_peak: 3e-3,
                ..Default::default()
            },
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/desk"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                field: "schema_version".into(),
                msg: format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            });
        }
        self.model.validate()?;
        self.data.world.validate()?;
        if self.data.datasets.is_empty() {
            return Err(Error::Config {
                field: "data.datasets".into(),
                msg: "at least one dataset is required".into(),
            });
        }
        for (i, d) in self.data.datasets.iter().enumerate() {
            if d.train_size == 0 {
                return Err(Error::Config {
                    field: format!("data.datasets[{i}].train_size"),
                    msg: "must be >= 1".into(),
                });
            }
            if self.data.datasets[..i].iter().any(|e| e.dataset_id == d.dataset_id) {
                return Err(Error::Config {
                    field: format!("data.datasets[{i}].dataset_id"),
                    msg: format!("duplicate id `{}`", d.dataset_id),
                });
            }
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config {
                field: "train".into(),
                msg: "epochs and batch_size must be >= 1".into(),
            });
        }
        self.eval.knn.validate().map_err(|e| Error::Config {
            field: "eval.knn".into(),
            msg: e.to_string(),
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
            field: format!("{} (line {}, column {})", path.display(), e.line(), e.column()),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the canonical JSON of every field except `out_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn head_specs(&self) -> Vec<HeadSpec> {
        self.data
            .datasets
            .iter()
            .map(|d| HeadSpec {
                dataset_id: d.dataset_id.clone(),
                classes: self.data.world.classes,
                dropout: d.head_dropout,
            })
            .collect()
    }

    /// Renders (or imports) every dataset into train/eval splits.
    pub fn build_data(&self) -> Result<Vec<DatasetSplit>> {
        self.data
            .datasets
            .iter()
            .map(|d| {
                let mut all = match &d.path {
                    Some(p) => {
                        let (m, samples) = read_dataset(p)?;
                        if m.modality != d.modality || m.dataset_id != d.dataset_id {
                            return Err(Error::Config {
                                field: format!("data.datasets.{}.path", d.dataset_id),
                                msg: format!("{} holds `{}` ({:?})", p.display(), m.dataset_id, m.modality),
                            });
                        }
                        samples
                    }
                    None => gen_synthetic(&self.data.world, &d.dataset_id, d.modality, d.train_size + d.eval_size)?,
                };
                if all.len() < d.train_size + d.eval_size {
                    return Err(Error::Config {
                        field: format!("data.datasets.{}", d.dataset_id),
                        msg: format!("needs {} samples, found {}", d.train_size + d.eval_size, all.len()),
                    });
                }
                let eval = all.split_off(d.train_size);
                Ok(DatasetSplit {
                    spec: DatasetSpec {
                        dataset_id: d.dataset_id.clone(),
                        modality: d.modality,
                        size: d.train_size,
                        classes: self.data.world.classes,
                        replication_weight: d.replication_weight,
                    },
                    train: all,
                    eval: eval.into_iter().take(d.eval_size).collect(),
                })
            })
            .collect()
    }
}
