//! Metrics, the constraint ablation and hyper-parameter sweeps.
//!
//! Pixel accuracy compares 8-bit images: a pixel counts as correct when its
//! colour difference to the ground truth is within the threshold. The
//! difference is the largest per-channel absolute difference by default
//! (`L2` over channels is available). A dataset score is the mean of the
//! per-image scores unless pooling is requested.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{quantize, write_image, AlignedEvalSet, Dataset};
use crate::error::{dim_err, Result, UnitError};
use crate::model::{Init, ModelSpec, TranslationArch, UnitModel};
use crate::parallel;
use crate::tensor::{Real, Tensor};
use crate::trainer::{Trainer, TrainerConfig};
use crate::translator::{translate_all, Direction, TranslationRequest};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorNorm {
    #[default]
    LInf,
    L2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean of per-image accuracies.
    #[default]
    PerImage,
    /// Fraction over all pixels of all images.
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PixelAccuracyConfig {
    /// In 8-bit units.
    pub threshold: u8,
    pub norm: ColorNorm,
    pub pooling: Pooling,
}

impl Default for PixelAccuracyConfig {
    fn default() -> Self {
        Self { threshold: 16, norm: ColorNorm::LInf, pooling: Pooling::PerImage }
    }
}

/// Planar 8-bit image `[C, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(dim_err!("{} bytes for a {}x{}x{} image", data.len(), channels, height, width));
        }
        Ok(Self { channels, height, width, data })
    }

    /// Quantizes every image of an `[N, C, H, W]` tensor.
    pub fn from_batch<F: Real>(x: &Tensor<F>) -> Result<Vec<Self>> {
        let (n, c, h, w) = x.dims4()?;
        let q = quantize(x);
        let per = c * h * w;
        (0..n).map(|i| Self::new(c, h, w, q[i * per..(i + 1) * per].to_vec())).collect()
    }

    /// Reads a PNG as 8-bit planar data without any resampling.
    pub fn read(path: &Path, channels: usize) -> Result<Self> {
        let t = crate::data::read_image(path, channels, None)?;
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        Self::new(c, h, w, quantize(&t))
    }
}

/// Per-pixel correctness under `cfg`.
fn correct_pixels(pred: &Image8, gt: &Image8, cfg: &PixelAccuracyConfig) -> Result<(usize, usize)> {
    if (pred.channels, pred.height, pred.width) != (gt.channels, gt.height, gt.width) {
        return Err(dim_err!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.channels,
            pred.height,
            pred.width,
            gt.channels,
            gt.height,
            gt.width
        ));
    }
    let hw = pred.height * pred.width;
    let t = cfg.threshold as u32;
    let mut ok = 0;
    for p in 0..hw {
        let diffs = (0..pred.channels).map(|c| (pred.data[c * hw + p] as i32 - gt.data[c * hw + p] as i32).unsigned_abs());
        let pass = match cfg.norm {
            ColorNorm::LInf => diffs.max().unwrap_or(0) <= t,
            ColorNorm::L2 => diffs.map(|d| d * d).sum::<u32>() <= t * t,
        };
        ok += pass as usize;
    }
    Ok((ok, hw))
}

/// Fraction of pixels of one image within the threshold.
pub fn pixel_accuracy(pred: &Image8, gt: &Image8, cfg: &PixelAccuracyConfig) -> Result<f64> {
    let (ok, n) = correct_pixels(pred, gt, cfg)?;
    Ok(if n == 0 { 1.0 } else { ok as f64 / n as f64 })
}

/// Dataset score and the per-image accuracies.
pub fn dataset_pixel_accuracy(preds: &[Image8], gts: &[Image8], cfg: &PixelAccuracyConfig) -> Result<(f64, Vec<f64>)> {
    if preds.len() != gts.len() {
        return Err(dim_err!("{} predictions for {} ground-truth images", preds.len(), gts.len()));
    }
    let counts = parallel::map_range(preds.len(), |i| correct_pixels(&preds[i], &gts[i], cfg));
    let counts = counts.into_iter().collect::<Result<Vec<_>>>()?;
    let per: Vec<f64> = counts.iter().map(|&(ok, n)| if n == 0 { 1.0 } else { ok as f64 / n as f64 }).collect();
    if per.is_empty() {
        return Ok((0.0, per));
    }
    let score = match cfg.pooling {
        Pooling::PerImage => per.iter().sum::<f64>() / per.len() as f64,
        Pooling::Pooled => {
            let (ok, n) = counts.iter().fold((0, 0), |(a, b), &(o, t)| (a + o, b + t));
            ok as f64 / n.max(1) as f64
        }
    };
    Ok((score, per))
}

/// Fraction of exact matches.
pub fn classification_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(dim_err!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    Ok(predictions.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

/// Accuracy of copying the source image unchanged.
pub fn identity_baseline(eval: &AlignedEvalSet, cfg: &PixelAccuracyConfig) -> Result<f64> {
    Ok(dataset_pixel_accuracy(&Image8::from_batch(&eval.sources)?, &Image8::from_batch(&eval.targets)?, cfg)?.0)
}

/// Translations of an aligned set and their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationEval {
    pub accuracy: f64,
    pub per_image: Vec<f64>,
    pub predictions: Vec<Image8>,
}

/// Translates `eval.sources` deterministically along `direction` and scores
/// them against `eval.targets`.
pub fn evaluate_translation<F: Real>(
    model: &UnitModel<F>,
    eval: &AlignedEvalSet,
    direction: Direction,
    cfg: &PixelAccuracyConfig,
) -> Result<TranslationEval> {
    let out = translate_all(model, &TranslationRequest::new(direction), &eval.sources.cast::<F>())?;
    let predictions = Image8::from_batch(&out)?;
    let (accuracy, per_image) = dataset_pixel_accuracy(&predictions, &Image8::from_batch(&eval.targets)?, cfg)?;
    Ok(TranslationEval { accuracy, per_image, predictions })
}

/// Writes one PNG per prediction into `dir` (named after `eval.names`).
pub fn save_predictions(dir: &Path, eval: &AlignedEvalSet, preds: &[Image8]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, p) in eval.names.iter().zip(preds) {
        let t = Tensor::<f32>::from_vec(
            &[p.channels, p.height, p.width],
            p.data.iter().map(|&u| crate::data::to_unit(u)).collect(),
        )?;
        write_image(&dir.join(format!("{name}.png")), &t)?;
    }
    Ok(())
}

/// Rescores saved prediction PNGs against the aligned set.
pub fn rescore_saved(dir: &Path, eval: &AlignedEvalSet, cfg: &PixelAccuracyConfig) -> Result<(f64, Vec<f64>)> {
    let c = eval.targets.shape()[1];
    let preds = eval
        .names
        .iter()
        .map(|n| Image8::read(&dir.join(format!("{n}.png")), c.min(3)))
        .collect::<Result<Vec<_>>>()?;
    dataset_pixel_accuracy(&preds, &Image8::from_batch(&eval.targets)?, cfg)
}

/// Grid PNG: one row per pair showing source, prediction and ground truth.
pub fn write_image_grid(path: &Path, eval: &AlignedEvalSet, preds: &[Image8], rows: usize) -> Result<()> {
    let rows = rows.min(preds.len()).min(eval.len());
    if rows == 0 {
        return Err(UnitError::Config("image grid needs at least one row".into()));
    }
    let (c, h, w) = (preds[0].channels, preds[0].height, preds[0].width);
    let src = Image8::from_batch(&eval.sources)?;
    let gt = Image8::from_batch(&eval.targets)?;
    let (gh, gw) = (rows * h, 3 * w);
    let mut out = vec![0f32; c * gh * gw];
    for r in 0..rows {
        for (col, img) in [&src[r], &preds[r], &gt[r]].into_iter().enumerate() {
            for ch in 0..c.min(img.channels) {
                for y in 0..h {
                    for x in 0..w {
                        out[ch * gh * gw + (r * h + y) * gw + col * w + x] = crate::data::to_unit(img.data[ch * h * w + y * w + x]);
                    }
                }
            }
        }
    }
    write_image(path, &Tensor::from_vec(&[c, gh, gw], out)?)
}

/// Data of a translation experiment.
#[derive(Clone, Debug)]
pub struct TranslationTask {
    pub domain1: Dataset,
    pub domain2: Dataset,
    /// Domain-1 sources with domain-2 ground truth.
    pub eval: AlignedEvalSet,
}

/// One training run followed by evaluation of the 1-to-2 direction.
/// With `out`, the run directory receives logs, checkpoints and the
/// predicted images (`images/`).
pub fn train_and_evaluate(
    spec: &ModelSpec,
    config: &TrainerConfig,
    task: &TranslationTask,
    cfg: &PixelAccuracyConfig,
    out: Option<&Path>,
) -> Result<TranslationEval> {
    let mut trainer = Trainer::<f32>::new(spec, config.clone())?;
    trainer.run(&task.domain1, &task.domain2, out, |_, _| Ok(()))?;
    let ev = evaluate_translation(&trainer.model, &task.eval, Direction::OneToTwo, cfg)?;
    if let Some(dir) = out {
        save_predictions(&dir.join("images"), &task.eval, &ev.predictions)?;
    }
    Ok(ev)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "ws")]
    WeightSharingOnly,
    #[serde(rename = "cc")]
    CycleConsistencyOnly,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WeightSharingOnly => "ws",
            Self::CycleConsistencyOnly => "cc",
        }
    }

    pub fn configure(self, base: &TrainerConfig) -> TrainerConfig {
        let (ws, cc) = match self {
            Self::Full => (true, true),
            Self::WeightSharingOnly => (true, false),
            Self::CycleConsistencyOnly => (false, true),
        };
        TrainerConfig { use_weight_sharing: ws, use_cycle_consistency: cc, ..base.clone() }
    }
}

impl std::str::FromStr for Variant {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "ws" | "weight-sharing-only" => Ok(Self::WeightSharingOnly),
            "cc" | "cycle-consistency-only" => Ok(Self::CycleConsistencyOnly),
            other => Err(UnitError::Config(format!("unknown ablation variant '{}'", other))),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub seed_count: usize,
}

impl AblationRow {
    pub fn new(name: &str, seeds: Vec<u64>, accuracies: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            mean: mean(&accuracies),
            median: median(&accuracies),
            seed_count: accuracies.len(),
            seeds,
            accuracies,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,accuracy\n");
        for r in &self.rows {
            for (seed, a) in r.seeds.iter().zip(&r.accuracies) {
                s.push_str(&format!("{},{},{}\n", r.name, seed, a));
            }
        }
        s
    }

    /// Writes `ablation.csv` and `ablation.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), self.to_csv())?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Directory of one ablation job.
pub fn job_dir(root: &Path, variant: Variant, seed: u64) -> PathBuf {
    root.join(variant.name()).join(format!("seed{seed}"))
}

/// Trains every variant under every seed and evaluates each on the aligned
/// set. Jobs run one after another; each job's seed replaces `base.seed`.
pub fn run_ablation(
    spec: &ModelSpec,
    base: &TrainerConfig,
    variants: &[Variant],
    seeds: &[u64],
    task: &TranslationTask,
    cfg: &PixelAccuracyConfig,
    out: Option<&Path>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(UnitError::Config("ablation needs at least one seed".into()));
    }
    let mut report = AblationReport::default();
    for &v in variants {
        let mut acc = Vec::new();
        for &seed in seeds {
            let config = TrainerConfig { seed, ..v.configure(base) };
            let dir = out.map(|o| job_dir(o, v, seed));
            let ev = train_and_evaluate(spec, &config, task, cfg, dir.as_deref())?;
            log::info!("ablation {} seed {}: {:.4}", v.name(), seed, ev.accuracy);
            acc.push(ev.accuracy);
        }
        report.rows.push(AblationRow::new(v.name(), seeds.to_vec(), acc));
    }
    if let Some(o) = out {
        report.write(o)?;
    }
    Ok(report)
}

/// Quantity varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// `lambda0`
    GanWeight,
    /// `lambda1 = lambda3`
    KlWeight,
    /// `lambda2 = lambda4`
    ReconWeight,
    /// Shared residual blocks of the encoder/generator pair.
    SharingDepth,
    /// Stride-2 layers of the discriminators.
    DiscriminatorDepth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Initialization of every point's model.
    #[serde(default)]
    pub init: Init,
}

/// One fully specified grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub spec: ModelSpec,
    pub config: TrainerConfig,
}

impl SweepGrid {
    /// Expands the grid over a translation architecture.
    pub fn points(&self, arch: &TranslationArch, channels: usize, size: usize, base: &TrainerConfig) -> Result<Vec<SweepPoint>> {
        self.values
            .iter()
            .map(|&value| {
                let mut a = arch.clone();
                let mut c = base.clone();
                let count = || -> Result<usize> {
                    if value < 0.0 || value.fract() != 0.0 {
                        return Err(UnitError::Config(format!("{:?} values must be whole numbers, got {}", self.axis, value)));
                    }
                    Ok(value as usize)
                };
                match self.axis {
                    SweepAxis::GanWeight => c.weights.lambda0 = value,
                    SweepAxis::KlWeight => (c.weights.lambda1, c.weights.lambda3) = (value, value),
                    SweepAxis::ReconWeight => (c.weights.lambda2, c.weights.lambda4) = (value, value),
                    SweepAxis::SharingDepth => a.shared_blocks = count()?,
                    SweepAxis::DiscriminatorDepth => a.disc_layers = count()?,
                }
                let spec = ModelSpec::translation(&a, channels, channels, size).with_init(self.init);
                spec.validate()?;
                c.validate()?;
                Ok(SweepPoint { value, spec, config: c })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let axis = serde_json::to_value(self.axis).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let mut s = format!("{axis},seed,accuracy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.value, r.seed, r.accuracy));
        }
        s
    }

    /// Whether accuracy never decreases (`increasing`) or never increases
    /// along the grid order.
    pub fn is_monotone(&self, increasing: bool) -> bool {
        self.rows.windows(2).all(|w| if increasing { w[1].accuracy >= w[0].accuracy } else { w[1].accuracy <= w[0].accuracy })
    }

    /// Writes `sweep.csv` and `sweep.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), self.to_csv())?;
        fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One training and evaluation per grid point, each under the config's own
/// seed, so rows do not depend on grid order.
pub fn sweep(
    grid: &SweepGrid,
    arch: &TranslationArch,
    base: &TrainerConfig,
    task: &TranslationTask,
    cfg: &PixelAccuracyConfig,
    out: Option<&Path>,
) -> Result<SweepTable> {
    let channels = task.domain1.channels;
    let size = task.domain1.resolution;
    let mut rows = Vec::new();
    for (i, p) in grid.points(arch, channels, size, base)?.into_iter().enumerate() {
        let dir = out.map(|o| o.join(format!("point{i}")));
        let ev = train_and_evaluate(&p.spec, &p.config, task, cfg, dir.as_deref())?;
        log::info!("sweep {:?}={} accuracy {:.4}", grid.axis, p.value, ev.accuracy);
        rows.push(SweepRow { value: p.value, seed: p.config.seed, accuracy: ev.accuracy });
    }
    let table = SweepTable { axis: grid.axis, rows };
    if let Some(o) = out {
        table.write(o)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(c: usize, v: Vec<u8>) -> Image8 {
        let n = v.len() / c;
        Image8::new(c, 1, n, v).unwrap()
    }

    #[test]
    fn pixel_examples() {
        let cfg = PixelAccuracyConfig::default();
        let gt = img(3, vec![10, 20, 30, 40, 50, 60, 70, 80, 90]);
        assert_eq!(pixel_accuracy(&gt, &gt, &cfg).unwrap(), 1.0);
        let mut p = gt.clone();
        p.data[..3].iter_mut().for_each(|v| *v += 17);
        assert_eq!(pixel_accuracy(&p, &gt, &cfg).unwrap(), 0.0);
        let a = img(1, vec![0, 0, 0, 0]);
        let b = img(1, vec![20, 20, 0, 0]);
        assert_eq!(pixel_accuracy(&b, &a, &cfg).unwrap(), 0.5);
        assert!(pixel_accuracy(&a, &gt, &cfg).is_err());
    }

    #[test]
    fn l2_is_stricter_than_linf() {
        let a = img(3, vec![0, 0, 0]);
        let b = img(3, vec![12, 12, 0]);
        let linf = PixelAccuracyConfig::default();
        let l2 = PixelAccuracyConfig { norm: ColorNorm::L2, ..linf };
        assert_eq!(pixel_accuracy(&a, &b, &linf).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&a, &b, &l2).unwrap(), 0.0);
    }

    #[test]
    fn pooling_differs_from_image_mean() {
        let gts = vec![img(1, vec![0; 4]), img(1, vec![0; 2])];
        let preds = vec![img(1, vec![0, 0, 0, 99]), img(1, vec![99, 99])];
        let cfg = PixelAccuracyConfig::default();
        assert_eq!(dataset_pixel_accuracy(&preds, &gts, &cfg).unwrap().0, 0.375);
        let pooled = PixelAccuracyConfig { pooling: Pooling::Pooled, ..cfg };
        assert_eq!(dataset_pixel_accuracy(&preds, &gts, &pooled).unwrap().0, 0.5);
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classification_accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(classification_accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        let labels = vec![0usize; 10000];
        let preds: Vec<usize> = (0..10000).map(|i| usize::from(i >= 9053)).collect();
        assert_eq!(classification_accuracy(&preds, &labels).unwrap(), 0.9053);
        assert!(classification_accuracy(&[1], &[]).is_err());
    }

    #[test]
    fn report_statistics() {
        let r = AblationRow::new("full", vec![1, 2, 3], vec![0.5, 0.9, 0.7]);
        assert_eq!(r.seed_count, 3);
        assert!((r.mean - 0.7).abs() < 1e-12);
        assert_eq!(r.median, 0.7);
        assert_eq!(median(&[1.0, 4.0]), 2.5);
        let rep = AblationReport { rows: vec![r] };
        assert_eq!(rep.to_csv().lines().count(), 4);
    }

    #[test]
    fn grid_expansion() {
        let base = TrainerConfig::default();
        let arch = TranslationArch::desk();
        let g = SweepGrid { axis: SweepAxis::KlWeight, values: vec![0.01, 0.1, 1.0], init: Init::default() };
        let pts = g.points(&arch, 3, 32, &base).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!((pts[2].config.weights.lambda1, pts[2].config.weights.lambda3), (1.0, 1.0));
        let g = SweepGrid { axis: SweepAxis::SharingDepth, values: vec![1.0, 2.0], init: Init::default() };
        let pts = g.points(&arch, 3, 32, &base).unwrap();
        assert_eq!(pts[1].spec.sharing.encoder_shared_layers, 2);
        let g = SweepGrid { axis: SweepAxis::SharingDepth, values: vec![1.5], init: Init::default() };
        assert!(g.points(&arch, 3, 32, &base).is_err());
        assert!("both".parse::<Variant>().is_err());
    }
}
