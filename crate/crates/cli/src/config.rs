//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use unitlab::adaptation::{AdaptConfig, DigitTask};
use unitlab::data::{
    load_class_folders, load_idx, load_image_folder, make_synthetic_domains, split_aligned_pairs, AlignedEvalSet, Dataset,
    SplitAxis, SyntheticTransform,
};
use unitlab::evaluation::{PixelAccuracyConfig, SweepGrid, TranslationTask, Variant};
use unitlab::model::{Domain, Init, ModelSpec, TranslationArch};
use unitlab::trainer::TrainerConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
    pub eval: PixelAccuracyConfig,
    pub adapt: AdaptConfig,
    pub ablation: AblationConfig,
    pub sweep: Option<SweepGrid>,
}

/// Model family. Channels and image size come from the data section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Translation {
        #[serde(default = "TranslationArch::full")]
        arch: TranslationArch,
        #[serde(default)]
        init: Init,
    },
    /// Digit networks of an adaptation task; widths divided by `div`.
    Digits {
        #[serde(default = "one")]
        div: usize,
        #[serde(default)]
        init: Init,
    },
    /// A complete six-network spec.
    Spec { spec: Box<ModelSpec> },
}

fn one() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Translation { arch: TranslationArch::full(), init: Init::default() }
    }
}

impl ModelConfig {
    pub fn translation_spec(&self, channels1: usize, channels2: usize, size: usize) -> Result<ModelSpec> {
        let spec = match self {
            ModelConfig::Translation { arch, init } => ModelSpec::translation(arch, channels1, channels2, size).with_init(*init),
            ModelConfig::Spec { spec } => (**spec).clone(),
            ModelConfig::Digits { .. } => bail!("model.kind 'digits' is only valid for the adapt command"),
        };
        spec.validate().context("model")?;
        Ok(spec)
    }

    pub fn arch(&self) -> Result<(TranslationArch, Init)> {
        match self {
            ModelConfig::Translation { arch, init } => Ok((arch.clone(), *init)),
            _ => bail!("sweeps need model.kind 'translation'"),
        }
    }

    pub fn adapt_spec(&self, task: DigitTask) -> Result<ModelSpec> {
        let spec = match self {
            ModelConfig::Digits { div, init } => task.model_spec(*div)?.with_init(*init),
            ModelConfig::Spec { spec } => (**spec).clone(),
            ModelConfig::Translation { .. } => task.model_spec(1)?,
        };
        spec.validate().context("model")?;
        Ok(spec)
    }
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Rendered scenes and a pixel transform relating the two domains.
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default = "synthetic_count")]
        count: usize,
        #[serde(default = "synthetic_resolution")]
        resolution: usize,
        #[serde(default = "synthetic_transform")]
        transform: SyntheticTransform,
    },
    /// Two unpaired image folders and, optionally, a folder of side-by-side
    /// aligned pairs for evaluation.
    Folders {
        domain1: PathBuf,
        domain2: PathBuf,
        resolution: usize,
        #[serde(default = "three")]
        channels: usize,
        #[serde(default)]
        pairs: Option<PathBuf>,
        #[serde(default = "vertical")]
        pair_axis: SplitAxis,
    },
    /// Labeled source, unlabeled target and a labeled target test set.
    Digits { source: DigitSource, target: DigitSource, target_test: DigitSource },
}

fn synthetic_count() -> usize {
    1000
}
fn synthetic_resolution() -> usize {
    32
}
fn synthetic_transform() -> SyntheticTransform {
    SyntheticTransform::IntensityInvert
}
fn three() -> usize {
    3
}
fn vertical() -> SplitAxis {
    SplitAxis::Vertical
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            seed: 0,
            count: synthetic_count(),
            resolution: synthetic_resolution(),
            transform: synthetic_transform(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DigitSource {
    Idx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    /// `dir/<label>/<image>`
    ClassFolders { dir: PathBuf, resolution: usize, channels: usize },
    /// Image folder without labels.
    Folder { dir: PathBuf, resolution: usize, channels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Full, Variant::WeightSharingOnly, Variant::CycleConsistencyOnly],
            seeds: (0..5).collect(),
        }
    }
}

fn require(path: &Path, key: &str) -> Result<()> {
    if !path.exists() {
        bail!("{key}: {} does not exist", path.display());
    }
    Ok(())
}

impl DigitSource {
    fn load(&self, key: &str, domain: Domain) -> Result<Dataset> {
        let d = match self {
            DigitSource::Idx { images, labels } => {
                require(images, &format!("{key}.images"))?;
                if let Some(l) = labels {
                    require(l, &format!("{key}.labels"))?;
                }
                load_idx(images, labels.as_deref(), domain)?
            }
            DigitSource::ClassFolders { dir, resolution, channels } => {
                require(dir, &format!("{key}.dir"))?;
                load_class_folders(dir, domain, *resolution, *channels)?
            }
            DigitSource::Folder { dir, resolution, channels } => {
                require(dir, &format!("{key}.dir"))?;
                load_image_folder(dir, domain, *resolution, *channels)?
            }
        };
        Ok(d)
    }
}

/// Labeled source, unlabeled target and labeled target test set.
pub struct DigitData {
    pub source: Dataset,
    pub target: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn translation_task(&self) -> Result<TranslationTask> {
        match self {
            DataConfig::Synthetic { seed, count, resolution, transform } => {
                let (domain1, domain2, eval) = make_synthetic_domains(*seed, *count, *resolution, *transform)?;
                Ok(TranslationTask { domain1, domain2, eval })
            }
            DataConfig::Folders { domain1, domain2, resolution, channels, pairs, pair_axis } => {
                require(domain1, "data.domain1")?;
                require(domain2, "data.domain2")?;
                let d1 = load_image_folder(domain1, Domain::One, *resolution, *channels)?;
                let d2 = load_image_folder(domain2, Domain::Two, *resolution, *channels)?;
                let eval = match pairs {
                    Some(p) => {
                        require(p, "data.pairs")?;
                        split_aligned_pairs(p, *pair_axis, *channels, Some(*resolution))?
                    }
                    None => empty_eval(*channels, *resolution)?,
                };
                Ok(TranslationTask { domain1: d1, domain2: d2, eval })
            }
            DataConfig::Digits { .. } => bail!("data.kind 'digits' is only valid for the adapt command"),
        }
    }

    pub fn digits(&self) -> Result<DigitData> {
        match self {
            DataConfig::Digits { source, target, target_test } => {
                let source = source.load("data.source", Domain::One)?;
                if source.labels.is_none() {
                    bail!("data.source: the source set needs labels");
                }
                let target = target.load("data.target", Domain::Two)?.unlabeled();
                let test = target_test.load("data.target_test", Domain::Two)?;
                if test.labels.is_none() {
                    bail!("data.target_test: the target test set needs labels");
                }
                Ok(DigitData { source, target, test })
            }
            _ => bail!("the adapt command needs data.kind 'digits'"),
        }
    }
}

fn empty_eval(channels: usize, resolution: usize) -> Result<AlignedEvalSet> {
    let t = unitlab::Tensor::zeros(&[0, channels, resolution, resolution]);
    Ok(AlignedEvalSet::new(t.clone(), t, Vec::new())?)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Parses and validates; serde errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate().context("trainer")?;
        self.adapt.validate().context("adapt")?;
        if self.ablation.seeds.is_empty() {
            bail!("ablation.seeds must not be empty");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::parse("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.trainer.learning_rate, 1e-4);
        assert_eq!(c.trainer.weights.lambda0, 10.0);
        assert_eq!(c.eval.threshold, 16);
        assert_eq!(c.ablation.seeds.len(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let e = RunConfig::parse("{\n  \"trainer\": {\n    \"learning_rat\": 0.1\n  }\n}").unwrap_err();
        let msg = format!("{e:#}");
        assert!(msg.contains("learning_rat") && msg.contains("line 3"), "{msg}");
        assert!(RunConfig::parse(r#"{"modle": {}}"#).is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.model = ModelConfig::Translation { arch: TranslationArch::desk(), init: Init::FanIn { gain: 1.0 } };
        c.data = DataConfig::Folders {
            domain1: "a".into(),
            domain2: "b".into(),
            resolution: 64,
            channels: 3,
            pairs: None,
            pair_axis: SplitAxis::Horizontal,
        };
        let back = RunConfig::parse(&serde_json::to_string_pretty(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_folder_names_the_key() {
        let c = RunConfig::parse(r#"{"data": {"kind": "folders", "domain1": "/nonexistent/x", "domain2": "/tmp", "resolution": 8}}"#)
            .unwrap();
        let e = c.data.translation_task().err().unwrap().to_string();
        assert!(e.contains("data.domain1"), "{e}");
    }

    #[test]
    fn shipped_schema_lists_every_section() {
        let schema: serde_json::Value = serde_json::from_str(include_str!("../schema/run_config.schema.json")).unwrap();
        let mut keys: Vec<_> = schema["properties"].as_object().unwrap().keys().cloned().collect();
        let mut want: Vec<_> = serde_json::to_value(RunConfig::default()).unwrap().as_object().unwrap().keys().cloned().collect();
        keys.sort();
        want.sort();
        assert_eq!(keys, want);
        assert_eq!(schema["additionalProperties"], serde_json::Value::Bool(false));
    }
}
