use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use fracvit::cascade::{save_cascade, train_cascade, CascadeMode};
use fracvit::data::manifest::{manifest_dir, resolve};
use fracvit::data::{load_manifest, load_sample, load_samples, synth_generate, write_dataset, FractureLabel, GrayImage, Manifest};
use fracvit::dec::{dec_train, kmeans_pp, write_assignments, Activation, Autoencoder};
use fracvit::io::Matrix;
use fracvit::metrics::classification_report;
use fracvit::tensor::{kernels, Mode, Tensor};
use fracvit::train::{evaluate, make_splits, Strategy, TrainConfig};
use fracvit::vit::{attention_rollout, checkpoint, ViTConfig, ViTModel};
use serde::{Deserialize, Serialize};

use crate::cli::{CascadeArgs, ClusterArgs, EvalArgs, RolloutArgs, ServeArgs, SynthArgs, TrainFlags};
use crate::config::Config;
use crate::service::{router, AppState, Case, ServiceConfig};
use crate::study::StudyStore;

fn required(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| file.clone()).ok_or_else(|| anyhow!("--{name} is required (or set it under [paths] in the config)"))
}

fn seed(flag: Option<u64>, config: &Config) -> u64 {
    flag.or(config.seed).unwrap_or(0)
}

struct Dataset {
    manifest: Manifest,
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

fn load_dataset(path: &Path, side: usize) -> Result<Dataset> {
    let manifest = load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    let images = load_samples(&manifest_dir(path), &manifest, side)?;
    let labels = manifest.labels();
    Ok(Dataset { manifest, images, labels })
}

/// Sample ids of each part of a split, so a plan survives manifest
/// reordering.
#[derive(Debug, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitFile {
    fn indices(manifest: &Manifest, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter().map(|id| manifest.position(id).ok_or_else(|| anyhow!("split names unknown sample {id}"))).collect()
    }
}

struct Resolved {
    manifest: PathBuf,
    out: PathBuf,
    model: ViTConfig,
    train: TrainConfig,
}

fn resolve_train(flags: &TrainFlags, config: &Config) -> Result<Resolved> {
    let manifest = required(flags.manifest.clone(), &config.paths.manifest, "manifest")?;
    let out = required(flags.out.clone(), &config.paths.out, "out")?;
    let model = ViTConfig::preset(flags.preset.as_deref().unwrap_or(&config.model.preset))?;
    let mut train = config.train.clone();
    if let Some(v) = flags.epochs {
        train.max_epochs = v;
    }
    if let Some(v) = flags.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = flags.lr {
        train.lr = v;
    }
    if let Some(s) = &flags.strategy {
        train.strategy = s.parse::<Strategy>()?;
    }
    train.seed = flags.seed.or(config.seed).unwrap_or(train.seed);
    train.validate()?;
    Ok(Resolved { manifest, out, model, train })
}

pub fn synth(args: &SynthArgs, config: &Config) -> Result<()> {
    let dataset = synth_generate(args.per_class, seed(args.seed, config))?;
    let path = write_dataset(&dataset, &args.out)?;
    println!("wrote {} samples to {}", dataset.manifest.samples.len(), path.display());
    Ok(())
}

pub fn train(flags: &TrainFlags, config: &Config) -> Result<()> {
    let r = resolve_train(flags, config)?;
    let data = load_dataset(&r.manifest, r.model.image_size)?;
    let plan = make_splits(&data.labels, &FractureLabel::names(), r.train.seed)?;
    fs::create_dir_all(&r.out)?;
    let ids = |idx: Vec<usize>| idx.into_iter().map(|i| data.manifest.samples[i].id.clone()).collect();
    let split = SplitFile { seed: plan.seed, train: ids(plan.train_indices()), val: ids(plan.val_indices()), test: ids(plan.test_indices()) };
    fs::write(r.out.join("split.json"), serde_json::to_string_pretty(&split)?)?;

    let mut log = BufWriter::new(File::create(r.out.join("train_log.jsonl"))?);
    let mut log_err = None;
    let model = ViTModel::new(r.model.clone(), r.train.seed)?;
    let outcome = fracvit::train::train(
        model,
        &data.images,
        &data.labels,
        &plan.train_indices(),
        &plan.val_indices(),
        &r.train,
        &mut |e| {
            let line = serde_json::to_string(e).expect("epoch log serializes");
            eprintln!("{line}");
            if let Err(err) = writeln!(log, "{line}") {
                log_err.get_or_insert(err);
            }
        },
    )?;
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    checkpoint::save(&outcome.model, &r.out.join("model.ckpt"))?;
    let (test_loss, test_accuracy) = evaluate(&outcome.model, &data.images, &data.labels, &plan.test_indices())?;
    let summary = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "epochs_run": outcome.log.len(),
        "stopped_early": outcome.stopped_early,
        "diverged": outcome.diverged,
        "test_loss": test_loss,
        "test_accuracy": test_accuracy,
    });
    fs::write(r.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{summary}");
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    truth: String,
    pred: String,
}

fn read_predictions(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (n, row) in reader.deserialize::<PredictionRow>().enumerate() {
        let row = row.with_context(|| format!("{} row {}", path.display(), n + 1))?;
        truth.push(row.truth.trim().parse::<FractureLabel>()?.index());
        pred.push(row.pred.trim().parse::<FractureLabel>()?.index());
    }
    Ok((truth, pred))
}

pub fn eval(args: &EvalArgs, config: &Config) -> Result<()> {
    let (truth, pred) = if let Some(path) = &args.predictions {
        read_predictions(path)?
    } else {
        let ckpt = required(args.checkpoint.clone(), &config.paths.checkpoint, "checkpoint")?;
        let model = checkpoint::load(&ckpt)?;
        let manifest = required(args.manifest.clone(), &config.paths.manifest, "manifest")?;
        let data = load_dataset(&manifest, model.config().image_size)?;
        let indices = match &args.split {
            Some(p) => {
                let split: SplitFile = serde_json::from_str(&fs::read_to_string(p)?)?;
                SplitFile::indices(&data.manifest, &split.test)?
            }
            None => (0..data.images.len()).collect(),
        };
        let refs: Vec<&Tensor> = indices.iter().map(|&i| &data.images[i]).collect();
        let pred = model.predict_proba(&refs)?.iter().map(|p| kernels::argmax(p)).collect();
        (indices.iter().map(|&i| data.labels[i]).collect(), pred)
    };
    let report = classification_report(&truth, &pred, &FractureLabel::names(), seed(args.seed, config))?;
    match &args.out {
        Some(path) => fs::write(path, report.to_json())?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

pub fn cluster(args: &ClusterArgs, config: &Config) -> Result<()> {
    let ckpt = required(args.checkpoint.clone(), &config.paths.checkpoint, "checkpoint")?;
    let model = checkpoint::load(&ckpt)?;
    let manifest = required(args.manifest.clone(), &config.paths.manifest, "manifest")?;
    let data = load_dataset(&manifest, model.config().image_size)?;
    let seed = seed(args.seed, config);

    let rows = data.images.iter().map(|img| Ok(model.extract_features(img)?.data().to_vec())).collect::<Result<Vec<_>>>()?;
    let x = Matrix::from_rows(&rows)?;
    let mut widths = vec![x.cols];
    widths.extend(args.widths.clone().unwrap_or_else(|| config.cluster.widths.clone()));
    let mut ae = Autoencoder::new(&widths, Activation::Relu, seed)?;
    let mut pre = config.pretrain.clone();
    pre.seed = seed;
    if let Some(e) = args.pretrain_epochs {
        pre.epochs = e;
    }
    let losses = ae.pretrain(&x, &pre)?;
    let mut dec = config.dec.clone();
    dec.seed = seed;
    if let Some(k) = args.clusters {
        dec.clusters = k;
    }
    let init = kmeans_pp(&ae.encode(&x)?, dec.clusters, config.cluster.restarts, seed)?;
    let out = dec_train(&mut ae, init.centroids, &x, Some(&data.labels), &dec)?;
    let ids: Vec<String> = data.manifest.samples.iter().map(|s| s.id.clone()).collect();
    write_assignments(&args.out, &ids, &out.q)?;
    let last = out.history.last().expect("history has the initial record");
    let summary = serde_json::json!({
        "samples": x.rows,
        "clusters": dec.clusters,
        "pretrain_final_loss": losses.last(),
        "accuracy": last.accuracy,
        "nmi": last.nmi,
        "ari": last.ari,
        "loss": last.loss,
        "iterations": last.iteration,
        "converged": out.converged,
        "reseeds": out.reseeds,
        "history": out.history,
    });
    fs::write(args.out.with_extension("json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "accuracy {:.4} nmi {:.4} ari {:.4} loss {:.6} converged {}",
        last.accuracy.unwrap_or(f64::NAN),
        last.nmi.unwrap_or(f64::NAN),
        last.ari.unwrap_or(f64::NAN),
        last.loss,
        out.converged
    );
    Ok(())
}

/// Nearest-neighbour upsampling of a `grid × grid` map to `side × side`.
fn upsample(values: &[f32], grid: usize, side: usize) -> Vec<f32> {
    (0..side * side).map(|p| values[(p / side * grid / side) * grid + (p % side) * grid / side]).collect()
}

pub fn rollout(args: &RolloutArgs, config: &Config) -> Result<()> {
    let ckpt = required(args.checkpoint.clone(), &config.paths.checkpoint, "checkpoint")?;
    let model = checkpoint::load(&ckpt)?;
    let manifest_path = required(args.manifest.clone(), &config.paths.manifest, "manifest")?;
    let manifest = load_manifest(&manifest_path)?;
    let base = manifest_dir(&manifest_path);
    let side = model.config().image_size;
    fs::create_dir_all(&args.out)?;
    for id in &args.ids {
        let sample = manifest.position(id).map(|i| &manifest.samples[i]).ok_or_else(|| anyhow!("unknown sample {id}"))?;
        let input = load_sample(&base, sample, side)?;
        let (_, trace) = model.forward(&input, Mode::Infer)?;
        let heat = attention_rollout(&trace)?.heatmap.normalized();
        let up = upsample(&heat.values, heat.grid, side);
        let overlay: Vec<f32> = input.data().iter().zip(&up).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        GrayImage::new(side, side, up)?.save_png(&args.out.join(format!("{id}_heatmap.png")))?;
        GrayImage::new(side, side, overlay)?.save_png(&args.out.join(format!("{id}_overlay.png")))?;
        fs::write(args.out.join(format!("{id}_heatmap.json")), serde_json::to_string(&heat)?)?;
    }
    println!("wrote {} heatmaps to {}", args.ids.len(), args.out.display());
    Ok(())
}

pub fn cascade(args: &CascadeArgs, config: &Config) -> Result<()> {
    let r = resolve_train(&args.flags, config)?;
    let mode: CascadeMode = args.mode.parse()?;
    let data = load_dataset(&r.manifest, r.model.image_size)?;
    let plan = make_splits(&data.labels, &FractureLabel::names(), r.train.seed)?;
    fs::create_dir_all(&r.out)?;
    let mut log = BufWriter::new(File::create(r.out.join("cascade_log.jsonl"))?);
    let mut log_err = None;
    let trained = train_cascade(&r.model, &data.images, &data.labels, &plan.train_indices(), &plan.val_indices(), &r.train, &mut |stage, e| {
        let mut v = serde_json::to_value(e).expect("epoch log serializes");
        v["stage"] = serde_json::Value::String(stage.to_string());
        if let Err(err) = writeln!(log, "{v}") {
            log_err.get_or_insert(err);
        }
    })?;
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e).context("writing cascade log");
    }
    let spec = save_cascade(&trained.cascade, &r.out)?;
    let report = trained.cascade.report(&data.images, &data.labels, &plan.test_indices(), mode, r.train.seed)?;
    fs::write(r.out.join("report.json"), report.to_json())?;
    println!("cascade {} accuracy {:.4} ({})", spec.display(), report.aggregates.accuracy.value, args.mode);
    Ok(())
}

fn study_cases(manifest_path: &Path, side: usize, seed: u64) -> Result<Vec<Case>> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_dir(manifest_path);
    let plan = make_splits(&manifest.labels(), &FractureLabel::names(), seed)?;
    plan.test_indices()
        .into_iter()
        .map(|i| {
            let s = &manifest.samples[i];
            Ok(Case { id: s.id.clone(), label: s.label, input: load_sample(&base, s, side)?, png: fs::read(resolve(&base, s))? })
        })
        .collect()
}

pub fn serve(args: &ServeArgs, config: &Config) -> Result<()> {
    let model = match args.checkpoint.clone().or_else(|| config.paths.checkpoint.clone()) {
        Some(p) => Some(Arc::new(checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?)),
        None => {
            log::warn!("no checkpoint given; /predict and phase 2 will answer 503");
            None
        }
    };
    let side = model.as_ref().map_or(ViTConfig::tiny().image_size, |m| m.config().image_size);
    let seed = seed(args.seed, config);
    let cases = match args.manifest.clone().or_else(|| config.paths.manifest.clone()) {
        Some(p) => study_cases(&p, side, seed)?,
        None => Vec::new(),
    };
    let store_dir = args.store.clone().or_else(|| config.paths.store.clone()).unwrap_or_else(|| PathBuf::from("study-store"));
    let store = StudyStore::open(&store_dir)?;
    let service = ServiceConfig {
        washout_ms: args.washout_secs.unwrap_or(config.serve.washout_secs) * 1000,
        default_cases: args.cases.unwrap_or(config.serve.cases),
        seed,
    };
    let addr = args.addr.clone().unwrap_or_else(|| config.serve.addr.clone());
    let state = Arc::new(AppState { model, cases, store, config: service });
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("listening on {addr} with {} study cases", state.cases.len());
        eprintln!("listening on {addr}");
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
