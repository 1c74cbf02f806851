use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use omnivore_core::config::RunConfig;
use omnivore_core::data::store::write_dataset;
use omnivore_core::data::Strategy;
use omnivore_core::error::{Error, Result};
use omnivore_core::retrieval::{self, extract_features, knn_accuracy, FeatureRecord};
use omnivore_core::train::{self, DatasetSplit, TrainState};
use omnivore_core::{DatasetId, Modality, Omnivore, VisualSample};

mod plot;

#[derive(Parser)]
#[command(name = "omnivore", version, about = "Train and probe a modality-agnostic vision model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON). Defaults to the built-in desk config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the batching strategy.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Separate,
    Mixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModalityArg {
    Rgb,
    D,
    Rgbd,
    Video,
}

impl ModalityArg {
    fn all() -> [ModalityArg; 4] {
        [ModalityArg::Rgb, ModalityArg::D, ModalityArg::Rgbd, ModalityArg::Video]
    }

    fn name(self) -> &'static str {
        match self {
            ModalityArg::Rgb => "rgb",
            ModalityArg::D => "d",
            ModalityArg::Rgbd => "rgbd",
            ModalityArg::Video => "video",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the resolved config to <out>/config.json as a starting point.
    Config(Common),
    /// Render the configured datasets to disk.
    Gen(Common),
    /// Train jointly on all configured datasets.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Top-1 per dataset, optionally sweeping video clip lengths.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated clip lengths for the video sweep.
        #[arg(long, value_delimiter = ',')]
        clip_len: Vec<usize>,
        /// Use EMA weights.
        #[arg(long)]
        ema: bool,
    },
    /// k-NN accuracy of each query modality against each database modality.
    Knn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict queries to one modality.
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
        #[arg(long)]
        ema: bool,
    },
    /// Ranked nearest neighbours of query samples in another modality.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Query modality.
        #[arg(long, value_enum, default_value = "rgb")]
        modality: ModalityArg,
        /// Database modality.
        #[arg(long, value_enum, default_value = "d")]
        db_modality: ModalityArg,
        #[arg(long)]
        ema: bool,
    },
    /// SVG plots from a metrics or clip-sweep CSV.
    Plot {
        /// CSV written by `train` (metrics.csv) or `eval` (clip_sweep.csv).
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = common.strategy {
        cfg.train.strategy = match s {
            StrategyArg::Separate => Strategy::Separate,
            StrategyArg::Mixed => Strategy::Mixed,
        };
    }
    cfg.validate()?;
    println!("config hash: {}", cfg.hash());
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>, ema: bool) -> Result<Omnivore<f32>> {
    match checkpoint {
        Some(c) => train::load_weights(cfg.model.clone(), &cfg.head_specs(), c, ema),
        None => Ok(TrainState::<f32>::new(cfg.model.clone(), cfg.head_specs(), &cfg.train)?.model),
    }
}

/// Query side uses eval splits, database side uses train splits.
fn samples_of(data: &[DatasetSplit], m: ModalityArg, query: bool) -> Result<Vec<VisualSample>> {
    let want = match m {
        ModalityArg::Rgb => Modality::Image,
        ModalityArg::D | ModalityArg::Rgbd => Modality::Rgbd,
        ModalityArg::Video => Modality::Video,
    };
    let mut out = Vec::new();
    for d in data.iter().filter(|d| d.spec.modality == want) {
        for s in if query { &d.eval } else { &d.train } {
            out.push(if m == ModalityArg::D { s.depth_only()? } else { s.clone() });
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config(common) => {
            let cfg = resolve(&common)?;
            let path = cfg.out_dir.join("config.json");
            write(&path, "")?;
            cfg.save(&path)?;
            println!("config -> {}", path.display());
        }
        Command::Gen(common) => {
            let cfg = resolve(&common)?;
            for d in cfg.build_data()? {
                let mut all = d.train;
                all.extend(d.eval);
                let dir = cfg.out_dir.join("data").join(d.spec.dataset_id.as_str());
                let m = write_dataset(&dir, &all, d.spec.classes)?;
                println!("{}: {} samples -> {}", m.dataset_id, m.size, dir.display());
            }
        }
        Command::Train { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let data = cfg.build_data()?;
            let mut state: TrainState<f32> = match &checkpoint {
                Some(c) => {
                    train::load_weights::<f32>(cfg.model.clone(), &cfg.head_specs(), c, false)?;
                    TrainState::load(c)?
                }
                None => TrainState::new(cfg.model.clone(), cfg.head_specs(), &cfg.train)?,
            };
            cfg.save(&{
                fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
                    path: cfg.out_dir.clone(),
                    source: e,
                })?;
                cfg.out_dir.join("config.json")
            })?;
            let csv = cfg.out_dir.join("metrics.csv");
            let started = std::time::Instant::now();
            train::train(&mut state, &data, &cfg.train, Some(&cfg.out_dir), |s| {
                let loss = s.log.epoch_losses().last().copied().unwrap_or(f64::NAN);
                let mut line = format!("epoch {:>3}  loss {loss:.4}", s.epoch);
                if let Some(e) = s.log.last_eval().filter(|e| e.epoch + 1 == s.epoch) {
                    for (d, a) in &e.top1 {
                        line.push_str(&format!("  {d} {a:.3}/{:.3}", e.top1_ema[d]));
                    }
                }
                println!("{line}  ({:.0}s)", started.elapsed().as_secs_f64());
                // keep the CSV current so an interrupted run leaves a usable log
                let _ = fs::write(&csv, s.log.to_csv());
            })?;
            write(&csv, &state.log.to_csv())?;
            if cfg.train.checkpoint_every == 0 {
                state.save(&train::checkpoint_dir(&cfg.out_dir, state.epoch))?;
            }
            for d in &state.log.datasets {
                let best = |f: fn(&train::EvalRecord, &DatasetId) -> Option<f64>| {
                    state.log.evals.iter().filter_map(|r| f(r, d)).fold(f64::NAN, f64::max)
                };
                let raw = best(|r, d| r.top1.get(d).copied());
                let ema = best(|r, d| r.top1_ema.get(d).copied());
                println!("{d}: best top-1 raw {raw:.4}, ema {ema:.4}");
            }
            println!("metrics -> {}", csv.display());
        }
        Command::Eval {
            common,
            checkpoint,
            clip_len,
            ema,
        } => {
            let cfg = resolve(&common)?;
            let model = model_for(&cfg, Some(&checkpoint), ema)?;
            let data = cfg.build_data()?;
            println!("dataset,top1");
            for d in &data {
                let split = if d.eval.is_empty() { &d.train } else { &d.eval };
                let acc = train::evaluate(&model, split, &d.spec.dataset_id, cfg.train.eval_batch)?;
                println!("{},{acc}", d.spec.dataset_id);
            }
            if !clip_len.is_empty() {
                let mut csv = String::from("dataset,clip_len,clips,accuracy\n");
                for d in data.iter().filter(|d| d.spec.modality == Modality::Video) {
                    let split = if d.eval.is_empty() { &d.train } else { &d.eval };
                    for &cl in &clip_len {
                        let acc = train::clip_accuracy(&model, split, &d.spec.dataset_id, cl, cfg.eval.clip_stride, 16)?;
                        let clips = train::clip_count(split[0].frames(), cl, cfg.eval.clip_stride, true);
                        csv.push_str(&format!("{},{cl},{clips},{acc}\n", d.spec.dataset_id));
                    }
                }
                print!("{csv}");
                let path = cfg.out_dir.join("clip_sweep.csv");
                write(&path, &csv)?;
                println!("clip sweep -> {}", path.display());
            }
        }
        Command::Knn {
            common,
            checkpoint,
            modality,
            ema,
        } => {
            let cfg = resolve(&common)?;
            let model = model_for(&cfg, checkpoint.as_deref(), ema)?;
            let data = cfg.build_data()?;
            let classes = cfg.data.world.classes;
            let feats = |m: ModalityArg, query: bool| -> Result<Vec<FeatureRecord>> {
                let s = samples_of(&data, m, query)?;
                if s.is_empty() {
                    return Ok(Vec::new());
                }
                extract_features(&model, &s, cfg.eval.pooling, cfg.train.eval_batch)
            };
            let mut csv = String::from("query,database,accuracy\n");
            let queries: Vec<ModalityArg> = modality.map_or(ModalityArg::all().to_vec(), |m| vec![m]);
            let mut dbs = Vec::new();
            for m in ModalityArg::all() {
                let f = feats(m, false)?;
                if !f.is_empty() {
                    retrieval::save_index(&f, &cfg.out_dir.join("features").join(m.name()))?;
                    dbs.push((m, f));
                }
            }
            for q in queries {
                let qf = feats(q, true)?;
                if qf.is_empty() {
                    continue;
                }
                for (m, db) in &dbs {
                    let acc = knn_accuracy(&qf, db, classes, cfg.eval.knn)?;
                    csv.push_str(&format!("{},{},{acc}\n", q.name(), m.name()));
                }
            }
            print!("{csv}");
            write(&cfg.out_dir.join("knn.csv"), &csv)?;
        }
        Command::Retrieve {
            common,
            checkpoint,
            modality,
            db_modality,
            ema,
        } => {
            let cfg = resolve(&common)?;
            let model = model_for(&cfg, checkpoint.as_deref(), ema)?;
            let data = cfg.build_data()?;
            let qs = samples_of(&data, modality, true)?;
            let db = samples_of(&data, db_modality, false)?;
            if db.is_empty() {
                return Err(Error::Retrieval(format!("no {} samples configured", db_modality.name())));
            }
            let qf = extract_features(&model, &qs, cfg.eval.pooling, cfg.train.eval_batch)?;
            let dbf = extract_features(&model, &db, cfg.eval.pooling, cfg.train.eval_batch)?;
            let matches = retrieval::cross_modal_retrieve(&qf, &dbf, cfg.eval.top_n)?;
            let csv = retrieval::matches_csv(&qf, &matches);
            let path = cfg
                .out_dir
                .join(format!("retrieve_{}_to_{}.csv", modality.name(), db_modality.name()));
            write(&path, &csv)?;
            let hits = matches.iter().zip(&qf).filter(|(m, q)| m[0].label == q.label).count();
            println!(
                "{} queries, rank-1 class match {:.4} -> {}",
                qf.len(),
                hits as f64 / qf.len().max(1) as f64,
                path.display()
            );
        }
        Command::Plot { csv, out } => {
            let text = fs::read_to_string(&csv).map_err(|e| Error::Io {
                path: csv.clone(),
                source: e,
            })?;
            let out = out.unwrap_or_else(|| csv.with_extension("svg"));
            write(&out, &plot::from_csv(&text)?)?;
            println!("plot -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
