//! Subcommand implementations. Each writes into one run directory:
//!
//! ```text
//! <run>/config.json            resolved configuration
//! <run>/loss.jsonl             training log (train, adapt)
//! <run>/checkpoints/           ckpt_<step>.bin and manifest.json
//! <run>/images/                translated or predicted images
//! <run>/report.json            metrics of the command
//! ```
//!
//! Ablations and sweeps nest one such directory per job.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use unitlab::adaptation::{adapt_train, DigitTask};
use unitlab::evaluation::{
    dataset_pixel_accuracy, evaluate_translation, identity_baseline, run_ablation, save_predictions, sweep as run_sweep,
    write_image_grid, Image8, SweepAxis, SweepGrid, TranslationTask, Variant,
};
use unitlab::trainer::{Checkpoint, CheckpointManifest, Trainer};
use unitlab::translator::{batch_translate, Direction, TranslationRequest};

use crate::config::RunConfig;
use crate::Common;

const GRID_ROWS: usize = 8;

/// Resolved config plus a prepared run directory.
struct Run {
    cfg: RunConfig,
    dir: PathBuf,
}

fn prepare(common: &Common, command: &str) -> Result<Run> {
    if common.device != "cpu" {
        bail!("device '{}' is not available; only 'cpu' is supported", common.device);
    }
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.trainer.seed = s;
    }
    if let Some(n) = common.iterations {
        cfg.trainer.iterations = n;
    }
    cfg.validate()?;
    let dir = match &common.output {
        Some(p) => p.clone(),
        None => match std::env::var_os("UNITLAB_OUTPUT") {
            Some(root) => PathBuf::from(root).join(command),
            None => PathBuf::from("runs").join(command),
        },
    };
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() && !common.overwrite {
        bail!("output directory {} is not empty (pass --overwrite to reuse it)", dir.display());
    }
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    Ok(Run { cfg, dir })
}

fn write_report<T: Serialize>(dir: &Path, report: &T) -> Result<()> {
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn task_spec(cfg: &RunConfig, task: &TranslationTask) -> Result<unitlab::model::ModelSpec> {
    cfg.model.translation_spec(task.domain1.channels, task.domain2.channels, task.domain1.resolution)
}

#[derive(Serialize)]
struct TrainReport {
    step: u64,
    checkpoint: String,
    sha256: String,
    params_digest: String,
    accuracy: Option<f64>,
    identity_baseline: Option<f64>,
}

pub fn train(common: &Common, resume: Option<&Path>, force: bool) -> Result<()> {
    let run = prepare(common, "train")?;
    let task = run.cfg.data.translation_task()?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::<f32>::load(p).with_context(|| format!("cannot resume from {}", p.display()))?;
            Trainer::resume(ckpt, Some(run.cfg.trainer.clone()), force)?
        }
        None => Trainer::<f32>::new(&task_spec(&run.cfg, &task)?, run.cfg.trainer.clone())?,
    };
    trainer.run(&task.domain1, &task.domain2, Some(&run.dir), |_, _| Ok(()))?;
    let ckpt_dir = run.dir.join("checkpoints");
    let manifest = CheckpointManifest::load(&ckpt_dir)?;
    let last = manifest.checkpoints.last().context("no checkpoint was written")?;
    let (mut accuracy, mut baseline) = (None, None);
    if !task.eval.is_empty() {
        let ev = evaluate_translation(&trainer.model, &task.eval, Direction::OneToTwo, &run.cfg.eval)?;
        save_predictions(&run.dir.join("images"), &task.eval, &ev.predictions)?;
        write_image_grid(&run.dir.join("grid.png"), &task.eval, &ev.predictions, GRID_ROWS)?;
        println!("accuracy {:.6}", ev.accuracy);
        accuracy = Some(ev.accuracy);
        baseline = Some(identity_baseline(&task.eval, &run.cfg.eval)?);
    }
    println!("checkpoint {} sha256 {}", ckpt_dir.join(&last.file).display(), last.sha256);
    write_report(
        &run.dir,
        &TrainReport {
            step: trainer.step,
            checkpoint: last.file.clone(),
            sha256: last.sha256.clone(),
            params_digest: trainer.model.store.digest(),
            accuracy,
            identity_baseline: baseline,
        },
    )
}

pub fn translate(common: &Common, checkpoint: &Path, input: &Path, direction: Direction, sample_seed: Option<u64>) -> Result<()> {
    let run = prepare(common, "translate")?;
    let ckpt = Checkpoint::<f32>::load(checkpoint).with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let model = ckpt.model()?;
    let req = match sample_seed {
        Some(s) => TranslationRequest::sampled(direction, s),
        None => TranslationRequest::new(direction),
    };
    let manifest = batch_translate(&model, &ckpt.params_digest(), input, &run.dir.join("images"), &req)?;
    println!("translated {} skipped {}", manifest.translated.len(), manifest.skipped.len());
    ensure!(manifest.skipped.is_empty(), "{} input files could not be translated", manifest.skipped.len());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    accuracy: f64,
    images: Vec<String>,
    per_image: Vec<f64>,
}

pub fn eval(
    common: &Common,
    dirs: Option<(PathBuf, PathBuf)>,
    channels: usize,
    checkpoint: Option<&Path>,
    threshold: Option<u8>,
) -> Result<()> {
    let mut run = prepare(common, "eval")?;
    if let Some(t) = threshold {
        run.cfg.eval.threshold = t;
    }
    let report = match (dirs, checkpoint) {
        (Some((pred, gt)), _) => {
            let mut names = Vec::new();
            let (mut p, mut g) = (Vec::new(), Vec::new());
            let mut files: Vec<PathBuf> = fs::read_dir(&gt)
                .with_context(|| format!("cannot read --gt {}", gt.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let name = f.file_name().context("file name")?.to_string_lossy().into_owned();
                let pf = pred.join(&name);
                ensure!(pf.exists(), "prediction {} is missing", pf.display());
                g.push(Image8::read(&f, channels)?);
                p.push(Image8::read(&pf, channels)?);
                names.push(name);
            }
            ensure!(!names.is_empty(), "no ground-truth images in {}", gt.display());
            let (accuracy, per_image) = dataset_pixel_accuracy(&p, &g, &run.cfg.eval)?;
            EvalReport { accuracy, images: names, per_image }
        }
        (None, Some(ck)) => {
            let ckpt = Checkpoint::<f32>::load(ck).with_context(|| format!("cannot load checkpoint {}", ck.display()))?;
            let task = run.cfg.data.translation_task()?;
            ensure!(!task.eval.is_empty(), "the configured data has no aligned evaluation pairs");
            let ev = evaluate_translation(&ckpt.model()?, &task.eval, Direction::OneToTwo, &run.cfg.eval)?;
            save_predictions(&run.dir.join("images"), &task.eval, &ev.predictions)?;
            EvalReport { accuracy: ev.accuracy, images: task.eval.names.clone(), per_image: ev.per_image }
        }
        (None, None) => bail!("eval needs --pred and --gt, or --checkpoint"),
    };
    println!("accuracy {:.6}", report.accuracy);
    write_report(&run.dir, &report)
}

pub fn ablate(common: &Common, variants: Option<Vec<String>>, seeds: Option<u64>) -> Result<()> {
    let run = prepare(common, "ablate")?;
    let variants: Vec<Variant> = match variants {
        Some(v) => v.iter().map(|s| s.trim().parse()).collect::<Result<_, _>>()?,
        None => run.cfg.ablation.variants.clone(),
    };
    let seeds: Vec<u64> = match seeds {
        Some(n) => (0..n).collect(),
        None => run.cfg.ablation.seeds.clone(),
    };
    ensure!(!seeds.is_empty() && !variants.is_empty(), "ablation needs at least one variant and one seed");
    let task = run.cfg.data.translation_task()?;
    ensure!(!task.eval.is_empty(), "the configured data has no aligned evaluation pairs");
    let spec = task_spec(&run.cfg, &task)?;
    let report = run_ablation(&spec, &run.cfg.trainer, &variants, &seeds, &task, &run.cfg.eval, Some(&run.dir))?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn sweep(common: &Common, grid: Option<(SweepAxis, Vec<f64>)>) -> Result<()> {
    let run = prepare(common, "sweep")?;
    let (arch, init) = run.cfg.model.arch()?;
    let grid = match (grid, &run.cfg.sweep) {
        (Some((axis, values)), _) => SweepGrid { axis, values, init },
        (None, Some(g)) => g.clone(),
        (None, None) => bail!("sweep needs --axis and --values, or a sweep section in the config"),
    };
    let task = run.cfg.data.translation_task()?;
    ensure!(!task.eval.is_empty(), "the configured data has no aligned evaluation pairs");
    let table = run_sweep(&grid, &arch, &run.cfg.trainer, &task, &run.cfg.eval, Some(&run.dir))?;
    print!("{}", table.to_csv());
    Ok(())
}

pub fn adapt(common: &Common, task: DigitTask, source_fraction: Option<f64>) -> Result<()> {
    let run = prepare(common, "adapt")?;
    let data = run.cfg.data.digits()?;
    let mut source = data.source;
    if let Some(f) = source_fraction {
        ensure!(f > 0.0 && f <= 1.0, "--source-fraction must be in (0, 1], got {f}");
        let keep = ((source.len() as f64 * f).ceil() as usize).max(1);
        source = source.take(keep);
    }
    let (s, t, e) = task.prepare(&source, &data.target, &data.test)?;
    let spec = run.cfg.model.adapt_spec(task)?;
    let out = adapt_train::<f32>(&spec, run.cfg.trainer.clone(), &run.cfg.adapt, &s, &t, Some(&e), Some(&run.dir))?;
    if let Some(a) = out.metrics.final_target_accuracy {
        println!("{} target accuracy {:.6}", task.as_str(), a);
    }
    write_report(&run.dir, &out.metrics)
}
