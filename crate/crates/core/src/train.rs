//! Joint multi-dataset training, checkpoints, and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use omnivore_tensor::{ParamStore, Real, Tape};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::data::{build_epoch_schedule, rgb_channel_drop, DatasetSpec, EpochSchedule, Strategy};
use crate::error::{Error, Result};
use crate::heads::HeadSpec;
use crate::model::{argmax, group_by_shape, ModelConfig, Omnivore};
use crate::nn::Mode;
use crate::optim::{AdamW, AdamWConfig, Ema, LrSchedule};
use crate::rng::{derive_seed, rng_for};
use crate::sample::{DatasetId, Modality, VisualSample};

const SCHEDULE_TAG: u64 = 0x5c4e;
const STEP_TAG: u64 = 0x57e9;
pub const CHECKPOINT_KIND: &str = "omnivore-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub lr_peak: f64,
    pub warmup_frac: f64,
    pub cooldown_frac: f64,
    pub lr_floor_frac: f64,
    pub adamw: AdamWConfig,
    pub ema_alpha: f64,
    pub label_smoothing: f64,
    /// Probability of zeroing RGB on RGBD training samples.
    pub rgb_drop: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (and after the last); 0 disables.
    pub checkpoint_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            strategy: Strategy::Separate,
            lr_peak: 2e-3,
            warmup_frac: 0.1,
            cooldown_frac: 0.1,
            lr_floor_frac: 0.1,
            adamw: AdamWConfig::default(),
            ema_alpha: 1e-4,
            label_smoothing: 0.1,
            rgb_drop: 0.5,
            seed: 0,
            eval_every: 1,
            checkpoint_every: 0,
            eval_batch: 64,
        }
    }
}

/// One dataset's training samples plus an optional evaluation split.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub spec: DatasetSpec,
    pub train: Vec<VisualSample>,
    pub eval: Vec<VisualSample>,
}

impl DatasetSplit {
    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.train.len() != self.spec.size {
            return Err(Error::contract(format!(
                "dataset `{}` declares size {} but holds {} samples",
                self.spec.dataset_id,
                self.spec.size,
                self.train.len()
            )));
        }
        for s in self.train.iter().chain(&self.eval) {
            if s.dataset_id != self.spec.dataset_id || s.modality != self.spec.modality {
                return Err(Error::contract(format!(
                    "sample of `{}` ({:?}) inside dataset `{}`",
                    s.dataset_id, s.modality, self.spec.dataset_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Top-1 with raw and EMA weights, per dataset, after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    pub top1: BTreeMap<DatasetId, f64>,
    pub top1_ema: BTreeMap<DatasetId, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub datasets: Vec<DatasetId>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl MetricsLog {
    /// One row per step; accuracy columns are filled on the step that closes
    /// an evaluated epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss");
        for d in &self.datasets {
            let _ = write!(out, ",{d}_top1,{d}_top1_ema");
        }
        out.push('\n');
        let by_step: BTreeMap<u64, &EvalRecord> = self.evals.iter().map(|e| (e.step, e)).collect();
        for s in &self.steps {
            let _ = write!(out, "{},{},{},{}", s.step, s.epoch, s.lr, s.loss);
            for d in &self.datasets {
                match by_step.get(&s.step) {
                    Some(e) => {
                        let cell = |m: &BTreeMap<DatasetId, f64>| m.get(d).map(|v| v.to_string()).unwrap_or_default();
                        let _ = write!(out, ",{},{}", cell(&e.top1), cell(&e.top1_ema));
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Mean loss over each epoch's steps.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &self.steps {
            let e = sums.entry(s.epoch).or_default();
            e.0 += s.loss;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Omnivore<T>,
    pub head_specs: Vec<HeadSpec>,
    pub opt: AdamW<T>,
    pub ema: Ema<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub log: MetricsLog,
}

impl<T: Real> TrainState<T> {
    pub fn new(model_config: ModelConfig, head_specs: Vec<HeadSpec>, cfg: &TrainConfig) -> Result<Self> {
        let model = Omnivore::new(model_config, &head_specs, derive_seed(cfg.seed, &[0x0de1]))?;
        let opt = AdamW::new(cfg.adamw, &model.store);
        let ema = Ema::new(&model.store, cfg.ema_alpha)?;
        Ok(TrainState {
            model,
            head_specs,
            opt,
            ema,
            epoch: 0,
            step: 0,
            log: MetricsLog::default(),
        })
    }

    pub fn ema_model(&self) -> Omnivore<T> {
        self.model.with_store(self.ema.shadow.clone())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "model": self.model.config,
            "heads": self.head_specs,
            "epoch": self.epoch,
            "step": self.step,
            "adamw": self.opt.config,
            "adam_step": self.opt.step,
            "ema_alpha": self.ema.alpha,
            "log": self.log,
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        push_store(&mut c, "param", &self.model.store)?;
        push_store(&mut c, "ema", &self.ema.shadow)?;
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            c.push(format!("adam_m/{}", p.name), p.tensor.shape(), &self.opt.m[i])?;
            c.push(format!("adam_v/{}", p.name), p.tensor.shape(), &self.opt.v[i])?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let field = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{k}`")))
        };
        let config: ModelConfig = serde_json::from_value(field("model")?)?;
        let head_specs: Vec<HeadSpec> = serde_json::from_value(field("heads")?)?;
        let mut model = Omnivore::<T>::new(config, &head_specs, 0)?;
        load_store(c, "param", &mut model.store)?;
        let mut shadow = model.store.clone();
        load_store(c, "ema", &mut shadow)?;
        let mut opt = AdamW::new(serde_json::from_value(field("adamw")?)?, &model.store);
        opt.step = serde_json::from_value(field("adam_step")?)?;
        for (i, (_, p)) in model.store.iter().enumerate() {
            opt.m[i] = c.get::<T>(&format!("adam_m/{}", p.name))?.1;
            opt.v[i] = c.get::<T>(&format!("adam_v/{}", p.name))?.1;
        }
        Ok(TrainState {
            model,
            head_specs,
            opt,
            ema: Ema {
                alpha: serde_json::from_value(field("ema_alpha")?)?,
                shadow,
            },
            epoch: serde_json::from_value(field("epoch")?)?,
            step: serde_json::from_value(field("step")?)?,
            log: serde_json::from_value(field("log")?)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_container()?.write(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_container(&Container::read(dir)?)
    }
}

fn push_store<T: Real>(c: &mut Container, prefix: &str, store: &ParamStore<T>) -> Result<()> {
    for (_, p) in store.iter() {
        c.push(format!("{prefix}/{}", p.name), p.tensor.shape(), p.tensor.data())?;
    }
    Ok(())
}

/// Copies `prefix/<name>` entries into `store`. Missing entries and shape
/// disagreements are collected and reported together.
pub fn load_store<T: Real>(c: &Container, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
    let mut problems = Vec::new();
    for (_, p) in store.iter() {
        match c.entry(&format!("{prefix}/{}", p.name)) {
            Ok(e) if e.shape != p.tensor.shape() => problems.push(format!(
                "{}: checkpoint {:?} vs model {:?}",
                p.name,
                e.shape,
                p.tensor.shape()
            )),
            Ok(_) => {}
            Err(_) => problems.push(format!("{}: missing from checkpoint (model {:?})", p.name, p.tensor.shape())),
        }
    }
    let names: std::collections::HashSet<String> = store.iter().map(|(_, p)| format!("{prefix}/{}", p.name)).collect();
    for e in c.entries() {
        if e.name.starts_with(&format!("{prefix}/")) && !names.contains(&e.name) {
            problems.push(format!("{}: not in model (checkpoint {:?})", &e.name[prefix.len() + 1..], e.shape));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Compatibility(problems));
    }
    for (_, p) in store.iter_mut() {
        let (_, data) = c.get::<T>(&format!("{prefix}/{}", p.name))?;
        p.tensor.data_mut().copy_from_slice(&data);
    }
    Ok(())
}

/// Builds the model described by `config` and `heads`, then loads raw (or
/// EMA) weights from a checkpoint. Any name or shape disagreement is a
/// compatibility error listing every mismatch.
pub fn load_weights<T: Real>(config: ModelConfig, heads: &[HeadSpec], checkpoint: &Path, ema: bool) -> Result<Omnivore<T>> {
    let c = Container::read(checkpoint)?;
    c.expect_kind(CHECKPOINT_KIND)?;
    let mut model = Omnivore::new(config, heads, 0)?;
    load_store(&c, if ema { "ema" } else { "param" }, &mut model.store)?;
    Ok(model)
}

pub fn epoch_schedule(specs: &[DatasetSpec], cfg: &TrainConfig, epoch: usize) -> Result<EpochSchedule> {
    build_epoch_schedule(
        specs,
        cfg.batch_size,
        cfg.strategy,
        derive_seed(cfg.seed, &[SCHEDULE_TAG, epoch as u64]),
    )
}

fn lr_schedule(cfg: &TrainConfig, total_steps: u64) -> LrSchedule {
    LrSchedule {
        total_steps,
        lr_peak: cfg.lr_peak,
        warmup_frac: cfg.warmup_frac,
        cooldown_frac: cfg.cooldown_frac,
        floor_frac: cfg.lr_floor_frac,
    }
}

/// Runs epochs `state.epoch..cfg.epochs`. Each step's randomness derives
/// from `(seed, step)` and each schedule from `(seed, epoch)`, so resuming
/// from a checkpoint reproduces the uninterrupted run.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    data: &[DatasetSplit],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&TrainState<T>),
) -> Result<()> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config {
            field: "train".into(),
            msg: "epochs and batch_size must be >= 1".into(),
        });
    }
    for d in data {
        d.validate()?;
        state.model.heads.get(&d.spec.dataset_id)?;
    }
    let specs: Vec<DatasetSpec> = data.iter().map(|d| d.spec.clone()).collect();
    let steps_per_epoch = epoch_schedule(&specs, cfg, 0)?.batches.len() as u64;
    let sched = lr_schedule(cfg, steps_per_epoch * cfg.epochs as u64);
    sched.validate()?;
    if state.log.datasets.is_empty() {
        state.log.datasets = specs.iter().map(|s| s.dataset_id.clone()).collect();
    }

    for epoch in state.epoch..cfg.epochs {
        let schedule = epoch_schedule(&specs, cfg, epoch)?;
        for batch in &schedule.batches {
            let mut rng = rng_for(cfg.seed, &[STEP_TAG, state.step]);
            let mut samples = Vec::with_capacity(batch.len());
            for d in batch {
                let s = &data[d.dataset].train[d.index];
                samples.push(if s.modality == Modality::Rgbd && cfg.rgb_drop > 0.0 {
                    rgb_channel_drop(s, cfg.rgb_drop, &mut rng)?
                } else {
                    s.clone()
                });
            }
            // midpoint keeps both the first and last step off lr = 0
            let lr = sched.lr_at(state.step as f64 + 0.5)?;
            let loss = train_step(state, &samples, cfg.label_smoothing, lr, &mut rng)?;
            state.log.steps.push(StepRecord {
                step: state.step,
                epoch,
                lr,
                loss,
            });
            state.step += 1;
        }
        state.epoch = epoch + 1;
        let last = state.epoch == cfg.epochs;
        if cfg.eval_every > 0 && (state.epoch % cfg.eval_every == 0 || last) {
            let ema_model = state.ema_model();
            let mut top1 = BTreeMap::new();
            let mut top1_ema = BTreeMap::new();
            for d in data {
                let split = if d.eval.is_empty() { &d.train } else { &d.eval };
                let id = &d.spec.dataset_id;
                top1.insert(id.clone(), evaluate(&state.model, split, id, cfg.eval_batch)?);
                top1_ema.insert(id.clone(), evaluate(&ema_model, split, id, cfg.eval_batch)?);
            }
            state.log.evals.push(EvalRecord {
                step: state.step - 1,
                epoch,
                top1,
                top1_ema,
            });
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (state.epoch % cfg.checkpoint_every == 0 || last) {
                state.save(&checkpoint_dir(dir, state.epoch))?;
            }
        }
        progress(state);
    }
    Ok(())
}

pub fn checkpoint_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint-epoch{epoch:04}"))
}

/// Forward, routed loss, backward, AdamW and EMA updates for one batch.
/// Returns the loss; a non-finite loss aborts before any update.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    samples: &[VisualSample],
    smoothing: f64,
    lr: f64,
    rng: &mut crate::rng::SeedRng,
) -> Result<f64> {
    let refs: Vec<&VisualSample> = samples.iter().collect();
    let mut tape = Tape::new();
    let mut mode = Mode::Train(rng);
    let mut phis = Vec::new();
    let mut order = Vec::with_capacity(samples.len());
    for group in group_by_shape(&refs) {
        let batch: Vec<&VisualSample> = group.iter().map(|&i| refs[i]).collect();
        phis.push(state.model.forward(&mut tape, &batch, &mut mode)?.phi);
        order.extend(group);
    }
    let phi = if phis.len() == 1 { phis[0] } else { tape.concat(&phis)? };
    let labels: Vec<usize> = order.iter().map(|&i| samples[i].label).collect();
    let datasets: Vec<DatasetId> = order.iter().map(|&i| samples[i].dataset_id.clone()).collect();
    let routed = state
        .model
        .heads
        .route_loss(&mut tape, &state.model.store, phi, &labels, &datasets, smoothing, &mut mode)?;
    let loss = tape.value(routed.loss)[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            loss,
        });
    }
    state.model.store.zero_grad();
    tape.backward(routed.loss, &mut state.model.store)?;
    state.opt.step(&mut state.model.store, lr)?;
    state.ema.update(&state.model.store)?;
    Ok(loss)
}

/// Top-1 accuracy of `dataset`'s head over `samples`, evaluated in chunks.
pub fn evaluate<T: Real>(model: &Omnivore<T>, samples: &[VisualSample], dataset: &DatasetId, chunk: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("evaluate: no samples"));
    }
    let mut correct = 0usize;
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&VisualSample> = part.iter().collect();
        for (p, s) in model.predict_proba(&refs, dataset)?.iter().zip(part) {
            correct += usize::from(argmax(p) == s.label);
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Number of clips `evaluate_clips` uses for a `frames`-long video.
pub fn clip_count(frames: usize, clip_len: usize, stride: usize, cover_full: bool) -> usize {
    let span = clip_len * stride;
    if cover_full {
        frames.div_ceil(span)
    } else {
        (frames / span).max(1)
    }
}

/// Splits a video into consecutive clips of `clip_len` frames taken every
/// `stride` frames, and averages the clips' softmax probabilities. Frames
/// past the end of the video are zero; clips are zero-padded in time to a
/// multiple of the temporal patch size.
pub fn evaluate_clips<T: Real>(
    model: &Omnivore<T>,
    video: &VisualSample,
    dataset: &DatasetId,
    clip_len: usize,
    stride: usize,
    cover_full: bool,
) -> Result<ClipPrediction> {
    let clips = video_clips(video, clip_len, stride, cover_full, model.config.patch.t)?;
    let refs: Vec<&VisualSample> = clips.iter().collect();
    let probs = model.predict_proba(&refs, dataset)?;
    let mut mean = vec![0.0; probs[0].len()];
    for p in &probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / probs.len() as f64;
        }
    }
    Ok(ClipPrediction {
        clips: clips.len(),
        probs: mean,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipPrediction {
    pub clips: usize,
    pub probs: Vec<f64>,
}

/// The clips `evaluate_clips` feeds to the model.
pub fn video_clips(
    video: &VisualSample,
    clip_len: usize,
    stride: usize,
    cover_full: bool,
    patch_t: usize,
) -> Result<Vec<VisualSample>> {
    video.require(Modality::Video, "evaluate_clips")?;
    if clip_len == 0 || stride == 0 {
        return Err(Error::contract("clip_len and stride must be >= 1"));
    }
    let [frames, h, w, c] = video.shape();
    let n = clip_count(frames, clip_len, stride, cover_full);
    let frame = h * w * c;
    let len = if clip_len == 1 { 1 } else { clip_len.div_ceil(patch_t) * patch_t };
    (0..n)
        .map(|k| {
            let mut data = vec![0.0f32; len * frame];
            for j in 0..clip_len {
                let src = k * clip_len * stride + j * stride;
                if src < frames {
                    data[j * frame..(j + 1) * frame].copy_from_slice(&video.data()[src * frame..(src + 1) * frame]);
                }
            }
            VisualSample::new(Modality::Video, [len, h, w, c], data, video.label, video.dataset_id.clone())
        })
        .collect()
}

/// Clip-averaged top-1 over a set of videos.
pub fn clip_accuracy<T: Real>(
    model: &Omnivore<T>,
    videos: &[VisualSample],
    dataset: &DatasetId,
    clip_len: usize,
    stride: usize,
    chunk: usize,
) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::contract("clip_accuracy: no samples"));
    }
    let mut correct = 0;
    for part in videos.chunks(chunk.max(1)) {
        let mut clips = Vec::new();
        let mut owner = Vec::new();
        for (i, v) in part.iter().enumerate() {
            let c = video_clips(v, clip_len, stride, true, model.config.patch.t)?;
            owner.extend(std::iter::repeat(i).take(c.len()));
            clips.extend(c);
        }
        let refs: Vec<&VisualSample> = clips.iter().collect();
        let probs = model.predict_proba(&refs, dataset)?;
        let mut mean = vec![vec![0.0; probs[0].len()]; part.len()];
        let mut count = vec![0usize; part.len()];
        for (p, &i) in probs.iter().zip(&owner) {
            count[i] += 1;
            for (m, v) in mean[i].iter_mut().zip(p) {
                *m += v;
            }
        }
        for (i, v) in part.iter().enumerate() {
            let avg: Vec<f64> = mean[i].iter().map(|m| m / count[i] as f64).collect();
            correct += usize::from(argmax(&avg) == v.label);
        }
    }
    Ok(correct as f64 / videos.len() as f64)
}
