//! One function per CLI command. Each returns the stage directory it produced.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::info;
use protoguide_core::metrics::{compare_runs, EvalReport};
use protoguide_core::{train_prototypes, Codebook, ImageTensor};
use protoguide_data::{
    build_manifest, export_annotations, extract_embeddings, load_and_normalize, save_png, DatasetManifest, SampleEntry,
    SampleSet, Split,
};
use protoguide_model::trainer::latest_checkpoint;
use protoguide_model::{
    checkpoint, evaluate, init_from_prototypes, init_random, sample_class, train_classifier, DiffusionTrainer,
    TrainData,
};
use serde::{Deserialize, Serialize};

use crate::config::{fingerprint, stream, Mode, RunConfig, TrainSource};
use crate::error::{CliError, Result};
use crate::run::{plan, require, write_json, Layout, Plan, Stamp, Staging};

const MANIFEST: &str = "manifest.json";
const EMBEDDINGS: &str = "embeddings.json";
const CODEBOOK: &str = "codebook";

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub layout: Layout,
    pub force: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a RunConfig, force: bool) -> Self {
        Self { cfg, layout: Layout::new(cfg), force }
    }

    fn stamp(&self, stage: &str, fingerprint: String, artifacts: &[(&str, String)]) -> Stamp {
        Stamp {
            stage: stage.into(),
            fingerprint,
            seed: self.cfg.seed,
            complete: true,
            artifacts: artifacts.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }
}

fn up_to_date(stage: &str, dir: &Path) -> Result<PathBuf> {
    info!("{stage}: up to date in {}", dir.display());
    Ok(dir.to_path_buf())
}

/// Train-split embeddings written by `prepare`, rows as little-endian f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFile {
    encoder: String,
    version: String,
    dim: usize,
    blob: String,
    labels: Vec<usize>,
    paths: Vec<String>,
}

fn prepare_fingerprint(cfg: &RunConfig) -> String {
    fingerprint(&("prepare", &cfg.data, cfg.seed))
}

pub fn prepare(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.cfg;
    let dir = ctx.layout.prepare();
    let fp = prepare_fingerprint(cfg);
    if let Plan::UpToDate = plan(&dir, "prepare", &fp, ctx.force)? {
        return up_to_date("prepare", &dir);
    }
    let d = &cfg.data;
    let manifest = build_manifest(&d.root, d.per_class_n, d.holdout_per_class, cfg.seed, &d.source)?;
    info!(
        "prepare: {} classes, {} train / {} holdout images",
        manifest.num_classes(),
        manifest.split(Split::Train).count(),
        manifest.split(Split::Holdout).count()
    );
    let stage = Staging::begin(&dir)?;
    manifest.save(&stage.path().join(MANIFEST))?;
    // The cache lives beside the stage so it survives a forced re-run.
    let cache = ctx.layout.root().join("embedding_cache");
    let encoder = d.encoder.build(cfg.denoiser.in_channels);
    let emb = extract_embeddings(&manifest, Some(Split::Train), encoder.as_ref(), &cache, d.image_size)?;
    info!("prepare: {} embeddings ({} cached, {} encoded), D={}", emb.rows.len(), emb.cache_hits, emb.encoded, emb.dim);
    let blob: Vec<u8> = emb.rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    let blob_path = stage.path().join("embeddings.bin");
    protoguide_core::fsutil::write_atomic(&blob_path, &blob).map_err(|e| CliError::io(&blob_path, e))?;
    let file = EmbeddingFile {
        encoder: encoder.name().into(),
        version: encoder.version().into(),
        dim: emb.dim,
        blob: "embeddings.bin".into(),
        labels: emb.labels,
        paths: emb.paths,
    };
    write_json(&stage.path().join(EMBEDDINGS), &file)?;
    write_json(&stage.path().join("config.json"), cfg)?;
    let stamp = ctx.stamp("prepare", fp, &[("manifest", MANIFEST.into()), ("embeddings", EMBEDDINGS.into())]);
    stage.commit(&stamp)
}

fn load_manifest(ctx: &Ctx) -> Result<(DatasetManifest, String)> {
    let dir = ctx.layout.prepare();
    let stamp = require(&dir, "prepare")?;
    if stamp.fingerprint != prepare_fingerprint(ctx.cfg) {
        return Err(CliError::Config(format!(
            "{} was prepared with a different data configuration; rerun prepare with --force",
            dir.display()
        )));
    }
    Ok((DatasetManifest::load(&stamp.artifact(&dir, "manifest")?)?, stamp.fingerprint))
}

fn load_embeddings(dir: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let path = dir.join(EMBEDDINGS);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let file: EmbeddingFile =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let blob_path = dir.join(&file.blob);
    let blob = fs::read(&blob_path).map_err(|e| CliError::io(&blob_path, e))?;
    if file.dim == 0 || blob.len() != file.labels.len() * file.dim * 8 {
        return Err(CliError::Runtime(format!("{} does not match its index", blob_path.display())));
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Ok((values.chunks(file.dim).map(<[f64]>::to_vec).collect(), file.labels))
}

fn prototypes_fingerprint(cfg: &RunConfig, prepare_fp: &str) -> String {
    fingerprint(&("train-prototypes", prepare_fp, cfg.prototype_config()))
}

pub fn train_prototypes_stage(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.cfg;
    if cfg.mode == Mode::BaselineCfg {
        return Err(CliError::Config(
            "train-prototypes is not used in baseline_cfg mode; pass --mode prototype_guided".into(),
        ));
    }
    let (manifest, prepare_fp) = load_manifest(ctx)?;
    let dir = ctx.layout.prototypes();
    let fp = prototypes_fingerprint(cfg, &prepare_fp);
    if let Plan::UpToDate = plan(&dir, "train-prototypes", &fp, ctx.force)? {
        return up_to_date("train-prototypes", &dir);
    }
    let (rows, labels) = load_embeddings(&ctx.layout.prepare())?;
    let class_ids: Vec<usize> = (0..manifest.num_classes()).collect();
    let pcfg = cfg.prototype_config();
    let trained = train_prototypes(&rows, &labels, &class_ids, &pcfg)?;
    let last = trained.epoch_losses.last().copied().unwrap_or(f64::NAN);
    info!("train-prototypes: {} epochs, final loss {last:.6}", trained.epoch_losses.len());
    let stage = Staging::begin(&dir)?;
    let sidecar = trained
        .codebook
        .save(stage.path(), CODEBOOK, &manifest.class_names, Some(&pcfg))
        .map_err(|e| CliError::io(stage.path(), e))?;
    write_json(&stage.path().join("losses.json"), &trained.epoch_losses)?;
    write_json(&stage.path().join("config.json"), cfg)?;
    let name = sidecar.file_name().expect("file").to_string_lossy().into_owned();
    stage.commit(&ctx.stamp("train-prototypes", fp, &[("codebook", name)]))
}

fn load_images(manifest: &DatasetManifest, split: Split, size: usize) -> Result<(Vec<ImageTensor>, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for r in manifest.split(split) {
        images.push(load_and_normalize(&manifest.resolve(r), size)?);
        labels.push(r.class_id);
    }
    Ok((images, labels))
}

/// Everything that determines the trained weights. Both modes hash the same
/// fields apart from the conditioning source.
fn diffusion_fingerprint(ctx: &Ctx, prepare_fp: &str) -> Result<String> {
    let cfg = ctx.cfg;
    let source = match cfg.mode {
        Mode::PrototypeGuided => {
            let stamp = require(&ctx.layout.prototypes(), "train-prototypes")?;
            stamp.fingerprint
        }
        Mode::BaselineCfg => fingerprint(&("random", cfg.stage_seed(stream::RANDOM_TABLE))),
    };
    Ok(fingerprint(&("train-diffusion", cfg.mode, prepare_fp, source, &cfg.denoiser, cfg.stage_seed(stream::DIFFUSION))))
}

pub fn train_diffusion(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.cfg;
    let (manifest, prepare_fp) = load_manifest(ctx)?;
    let dir = ctx.layout.diffusion(cfg.mode);
    let fp = diffusion_fingerprint(ctx, &prepare_fp)?;
    if let Plan::UpToDate = plan(&dir, "train-diffusion", &fp, ctx.force)? {
        return up_to_date("train-diffusion", &dir);
    }
    let ckpt_dir = dir.join("checkpoints");
    let metrics_path = dir.join("metrics.jsonl");
    let previous = crate::run::Stamp::read(&dir)?;
    let resumable = !ctx.force && previous.as_ref().is_some_and(|s| !s.complete && s.fingerprint == fp);
    if previous.is_some() && !resumable {
        if previous.as_ref().is_some_and(|s| !s.complete) && !ctx.force {
            return Err(CliError::Config(format!(
                "{} holds an interrupted run with a different configuration; pass --force to discard it",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    let mut stamp = Stamp { complete: false, ..ctx.stamp("train-diffusion", fp, &[]) };
    stamp.write(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;

    let (images, labels) = load_images(&manifest, Split::Train, cfg.data.image_size)?;
    let data = TrainData::new(images, labels).map_err(CliError::from)?;
    let latest = if resumable { latest_checkpoint(&ckpt_dir).map_err(CliError::from)? } else { None };
    let mut trainer = match latest {
        Some(path) => {
            let t = DiffusionTrainer::resume(&path)?;
            info!("train-diffusion: resuming from {} (epoch {}, step {})", path.display(), t.epoch(), t.steps());
            truncate_metrics(&metrics_path, t.steps())?;
            t
        }
        None => {
            let _ = fs::remove_file(&metrics_path);
            let table = match cfg.mode {
                Mode::PrototypeGuided => {
                    let pdir = ctx.layout.prototypes();
                    let pstamp = require(&pdir, "train-prototypes")?;
                    let (codebook, sidecar) = Codebook::load(&pstamp.artifact(&pdir, "codebook")?)?;
                    if sidecar.class_names != manifest.class_names {
                        return Err(CliError::Data("codebook classes differ from the manifest".into()));
                    }
                    if codebook.dim() != cfg.denoiser.condition_dim {
                        return Err(CliError::Config(format!(
                            "codebook dimension {} differs from denoiser.condition_dim {}",
                            codebook.dim(),
                            cfg.denoiser.condition_dim
                        )));
                    }
                    init_from_prototypes(&codebook, cfg.denoiser.condition_dim)?
                }
                Mode::BaselineCfg => {
                    init_random(manifest.num_classes(), cfg.denoiser.condition_dim, cfg.stage_seed(stream::RANDOM_TABLE))?
                }
            };
            DiffusionTrainer::new(cfg.denoiser.clone(), table, cfg.stage_seed(stream::DIFFUSION))?
        }
    };

    let every = cfg.denoiser.checkpoint_every_epochs.max(1);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| CliError::io(&metrics_path, e))?;
    while !trainer.is_finished() {
        let metrics = trainer.train_epoch(&data)?;
        for m in &metrics {
            let line = serde_json::to_string(m).map_err(|e| CliError::Runtime(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| CliError::io(&metrics_path, e))?;
        }
        let epoch = trainer.epoch();
        if epoch % every == 0 || trainer.is_finished() {
            log.flush().map_err(|e| CliError::io(&metrics_path, e))?;
            let mean = metrics.iter().map(|m| m.loss).sum::<f64>() / metrics.len().max(1) as f64;
            trainer.save_checkpoint(&ckpt_dir)?;
            info!("train-diffusion: epoch {epoch} step {} loss {mean:.4} (checkpoint)", trainer.steps());
        }
    }
    log.sync_all().map_err(|e| CliError::io(&metrics_path, e))?;
    let final_ckpt = latest_checkpoint(&ckpt_dir)?.expect("a checkpoint was written on the last epoch");
    let rel = final_ckpt.strip_prefix(&dir).expect("inside stage dir").to_string_lossy().into_owned();
    stamp.complete = true;
    stamp.artifacts = BTreeMap::from([("checkpoint".to_string(), rel)]);
    stamp.write(&dir)?;
    Ok(dir)
}

/// Drops metric lines logged after the checkpoint being resumed, so the log
/// stays contiguous.
fn truncate_metrics(path: &Path, up_to_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let Ok(m) = serde_json::from_str::<protoguide_model::StepMetrics>(&line) else { break };
        if m.step > up_to_step {
            break;
        }
        kept.push_str(&line);
        kept.push('\n');
    }
    protoguide_core::fsutil::write_atomic(path, kept.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn sample(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.cfg;
    let mode = cfg.mode;
    let ddir = ctx.layout.diffusion(mode);
    let dstamp = require(&ddir, &format!("train-diffusion --mode {}", mode.as_str()))?;
    let dir = ctx.layout.samples(mode);
    let spec = cfg.sampler_spec();
    let fp = fingerprint(&("sample", &dstamp.fingerprint, &spec, cfg.sampler.per_class));
    if let Plan::UpToDate = plan(&dir, "sample", &fp, ctx.force)? {
        return up_to_date("sample", &dir);
    }
    let ckpt = dstamp.artifact(&ddir, "checkpoint")?;
    let restored = checkpoint::load(&ckpt)?;
    let model = restored.denoiser;
    let schedule = model.config().schedule.build()?;
    let (manifest, _) = load_manifest(ctx)?;
    if model.num_classes() != manifest.num_classes() {
        return Err(CliError::Data("checkpoint class count differs from the manifest".into()));
    }
    let stage = Staging::begin(&dir)?;
    let mut entries = Vec::new();
    for (class_id, name) in manifest.class_names.iter().enumerate() {
        let images = sample_class(&model, class_id, cfg.sampler.per_class, &spec, &schedule)?;
        let class_dir = stage.path().join(name);
        fs::create_dir_all(&class_dir).map_err(|e| CliError::io(&class_dir, e))?;
        for (index, img) in images.iter().enumerate() {
            let rel = format!("{name}/{index:04}.png");
            save_png(&stage.path().join(&rel), img)?;
            entries.push(SampleEntry { path: rel, class_id, class_name: name.clone(), index });
        }
        info!("sample: {} images for {name}", images.len());
    }
    let set = SampleSet {
        schema_version: protoguide_data::samples::SCHEMA_VERSION,
        run_id: cfg.run_id.clone(),
        mode: mode.as_str().into(),
        checkpoint: ckpt.strip_prefix(ctx.layout.root()).unwrap_or(&ckpt).to_string_lossy().into_owned(),
        seed: cfg.seed,
        sampler: spec,
        class_names: manifest.class_names.clone(),
        entries,
    };
    set.save(&stage.path().join("samples.json"))?;
    write_json(&stage.path().join("config.json"), cfg)?;
    stage.commit(&ctx.stamp("sample", fp, &[("samples", "samples.json".into())]))
}

pub fn export_annotations_stage(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.cfg;
    let sdir = ctx.layout.samples(cfg.mode);
    let sstamp = require(&sdir, &format!("sample --mode {}", cfg.mode.as_str()))?;
    let dir = ctx.layout.annotations(cfg.mode);
    let fp = fingerprint(&("export-annotations", &sstamp.fingerprint, &cfg.annotation));
    if let Plan::UpToDate = plan(&dir, "export-annotations", &fp, ctx.force)? {
        return up_to_date("export-annotations", &dir);
    }
    let set = SampleSet::load(&sstamp.artifact(&sdir, "samples")?)?;
    let export = export_annotations(&set, &sdir, &cfg.annotation.criteria)?;
    let stage = Staging::begin(&dir)?;
    export.save(&stage.path().join("tasks.json"))?;
    info!("export-annotations: {} tasks", export.tasks.len());
    stage.commit(&ctx.stamp("export-annotations", fp, &[("tasks", "tasks.json".into())]))
}

pub fn eval(ctx: &Ctx) -> Result<PathBuf> {
    let cfg = ctx.cfg;
    let (manifest, prepare_fp) = load_manifest(ctx)?;
    let size = cfg.data.image_size;
    let (label, upstream, train) = match cfg.eval.train_source {
        TrainSource::Real => ("real".to_string(), prepare_fp, None),
        TrainSource::Synthetic => {
            let sdir = ctx.layout.samples(cfg.mode);
            let sstamp = require(&sdir, &format!("sample --mode {}", cfg.mode.as_str()))?;
            (cfg.mode.as_str().to_string(), sstamp.fingerprint.clone(), Some((sdir, sstamp)))
        }
    };
    let dir = ctx.layout.eval(&label);
    let seed = cfg.stage_seed(stream::CLASSIFIER);
    let fp = fingerprint(&("eval", &upstream, &cfg.eval, seed));
    if let Plan::UpToDate = plan(&dir, "eval", &fp, ctx.force)? {
        return up_to_date("eval", &dir);
    }
    let (train_images, train_labels) = match train {
        None => load_images(&manifest, Split::Train, size)?,
        Some((sdir, sstamp)) => {
            let set = SampleSet::load(&sstamp.artifact(&sdir, "samples")?)?;
            if set.class_names != manifest.class_names {
                return Err(CliError::Data("sample classes differ from the manifest classes".into()));
            }
            let mut images = Vec::with_capacity(set.entries.len());
            for e in &set.entries {
                images.push(load_and_normalize(&set.resolve(&sdir, e), size)?);
            }
            (images, set.entries.iter().map(|e| e.class_id).collect())
        }
    };
    let holdout_paths: Vec<PathBuf> = manifest.split(Split::Holdout).map(|r| manifest.resolve(r)).collect();
    if cfg.eval.train_source == TrainSource::Real {
        let train_paths: Vec<PathBuf> = manifest.split(Split::Train).map(|r| manifest.resolve(r)).collect();
        if holdout_paths.iter().any(|p| train_paths.contains(p)) {
            return Err(CliError::Data("holdout images overlap the training images".into()));
        }
    }
    let (holdout, truth) = load_images(&manifest, Split::Holdout, size)?;
    if holdout.is_empty() {
        return Err(CliError::Data("the manifest has no holdout images".into()));
    }
    let (model, history) =
        train_classifier(&train_images, &train_labels, manifest.num_classes(), &cfg.eval.classifier, seed)?;
    let report = evaluate(&model, &holdout, &truth, &manifest.class_names, &label, cfg.seed)?;
    let table = report.render_table();
    println!("{table}");
    let stage = Staging::begin(&dir)?;
    model.save(stage.path(), "classifier")?;
    write_json(&stage.path().join("train_log.json"), &history)?;
    write_json(&stage.path().join("report.json"), &report)?;
    let txt = stage.path().join("report.txt");
    protoguide_core::fsutil::write_atomic(&txt, format!("{table}\n").as_bytes()).map_err(|e| CliError::io(&txt, e))?;
    write_json(&stage.path().join("config.json"), cfg)?;
    stage.commit(&ctx.stamp("eval", fp, &[("report", "report.json".into()), ("classifier", "classifier.json".into())]))
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let bytes = fs::read(path).map_err(|_| CliError::Data(format!("report {} not found; run eval first", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn compare(ctx: &Ctx, a: Option<&Path>, b: Option<&Path>) -> Result<PathBuf> {
    let default = |mode: Mode| ctx.layout.eval(mode.as_str()).join("report.json");
    let a = a.map(Path::to_path_buf).unwrap_or_else(|| default(Mode::BaselineCfg));
    let b = b.map(Path::to_path_buf).unwrap_or_else(|| default(Mode::PrototypeGuided));
    let (ra, rb) = (read_report(&a)?, read_report(&b)?);
    let cmp = compare_runs(&ra, &rb)?;
    let text = cmp.render();
    println!("{text}");
    let dir = ctx.layout.compare();
    let fp = fingerprint(&("compare", &ra, &rb));
    let stage = Staging::begin(&dir)?;
    write_json(&stage.path().join("comparison.json"), &cmp)?;
    let txt = stage.path().join("comparison.txt");
    protoguide_core::fsutil::write_atomic(&txt, format!("{text}\n").as_bytes()).map_err(|e| CliError::io(&txt, e))?;
    stage.commit(&ctx.stamp("compare", fp, &[("comparison", "comparison.json".into())]))
}
