//! Unsupervised domain adaptation: translation training plus a classifier
//! head on the discriminator trunk, trained on labeled domain-1 images and
//! applied to domain 2 through the tied discriminator layers.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{invert_augment, Dataset};
use crate::error::{dim_err, Result, UnitError};
use crate::evaluation::classification_accuracy;
use crate::model::{Activation, DigitArch, Domain, LayerSpec, Mode, ModelSpec, SharingPlan, UnitModel};
use crate::objectives::LOG_EPS;
use crate::parallel;
use crate::tensor::{Real, Tensor};
use crate::trainer::{AuxWeights, Checkpoint, LossRecord, Trainer, TrainerConfig};

const CLASSIFY_CHUNK: usize = 64;

fn default_head() -> Vec<LayerSpec> {
    vec![LayerSpec::fc(10).act(Activation::Softmax).shared(true)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub classifier_weight: f64,
    pub feature_l1_weight: f64,
    /// Tied discriminator rows counted from the back-end. `None` keeps the
    /// plan of the base spec.
    pub discriminator_shared_layers: Option<usize>,
    pub use_cycle_consistency: bool,
    pub classifier_head: Vec<LayerSpec>,
    /// Target accuracy is measured every this many steps (and at the end).
    pub eval_interval: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            classifier_weight: 1.0,
            feature_l1_weight: 1.0,
            discriminator_shared_layers: None,
            use_cycle_consistency: false,
            classifier_head: default_head(),
            eval_interval: 1000,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("classifier_weight", self.classifier_weight), ("feature_l1_weight", self.feature_l1_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(UnitError::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        match self.classifier_head.last() {
            Some(l) if l.activation == Activation::Softmax => {}
            _ => return Err(UnitError::Spec("the classifier head must end in a softmax layer".into())),
        }
        if self.eval_interval == 0 {
            return Err(UnitError::Config("eval_interval must be at least 1".into()));
        }
        Ok(())
    }

    fn aux(&self) -> AuxWeights {
        AuxWeights { classifier: self.classifier_weight, feature_l1: self.feature_l1_weight }
    }
}

/// The digit adaptation benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DigitTask {
    #[serde(rename = "mnist2usps")]
    MnistToUsps,
    #[serde(rename = "usps2mnist")]
    UspsToMnist,
    #[serde(rename = "svhn2mnist")]
    SvhnToMnist,
}

impl DigitTask {
    pub fn as_str(self) -> &'static str {
        match self {
            DigitTask::MnistToUsps => "mnist2usps",
            DigitTask::UspsToMnist => "usps2mnist",
            DigitTask::SvhnToMnist => "svhn2mnist",
        }
    }

    pub fn resolution(self) -> usize {
        match self {
            DigitTask::SvhnToMnist => 32,
            _ => 28,
        }
    }

    /// Channels seen by the networks after preprocessing.
    pub fn channels(self) -> usize {
        match self {
            DigitTask::SvhnToMnist => 5,
            _ => 1,
        }
    }

    /// Digit encoders and generators; LeNet discriminators for the gray
    /// tasks, the deeper dropout network for SVHN. Widths divided by `div`.
    pub fn model_spec(self, div: usize) -> Result<ModelSpec> {
        let arch = DigitArch::new(self.resolution())?.with_div(div);
        let c = self.channels();
        let mut spec = ModelSpec::digits(&arch, c, c);
        if self == DigitTask::SvhnToMnist {
            spec.discriminator1 = arch.dtn_discriminator(c, 0.5);
            spec.discriminator2 = arch.dtn_discriminator(c, 0.5);
            spec.sharing = SharingPlan::from_specs(&spec.encoder1, &spec.generator1, &spec.discriminator1);
        }
        Ok(spec)
    }

    /// Resizes and converts raw source, target and target-test sets. For
    /// SVHN the gray MNIST images become RGB, the target training set gains
    /// inverted copies and every set gets coordinate channels.
    pub fn prepare(self, source: &Dataset, target: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
        let r = self.resolution();
        let (mut s, mut t, mut e) = (source.resized(r)?, target.resized(r)?, test.resized(r)?);
        if self == DigitTask::SvhnToMnist {
            s = s.to_rgb()?.with_coordinates()?;
            t = invert_augment(&t.to_rgb()?).with_coordinates()?;
            e = e.to_rgb()?.with_coordinates()?;
        }
        for (d, want) in [(&s, "source"), (&t, "target"), (&e, "target test")] {
            if d.channels != self.channels() {
                return Err(dim_err!("{} set has {} channels, {} needs {}", want, d.channels, self.as_str(), self.channels()));
            }
        }
        Ok((s.in_domain(Domain::One), t.in_domain(Domain::Two), e.in_domain(Domain::Two)))
    }
}

impl FromStr for DigitTask {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist2usps" => Ok(DigitTask::MnistToUsps),
            "usps2mnist" => Ok(DigitTask::UspsToMnist),
            "svhn2mnist" => Ok(DigitTask::SvhnToMnist),
            _ => Err(UnitError::Config(format!("unknown task '{s}' (mnist2usps, usps2mnist, svhn2mnist)"))),
        }
    }
}

/// Puts the classifier head on both discriminators and applies the
/// discriminator sharing plan.
pub fn build_adapt_model(base: &ModelSpec, cfg: &AdaptConfig) -> Result<ModelSpec> {
    cfg.validate()?;
    let mut spec = base.clone();
    let mut plan = base.sharing;
    if let Some(n) = cfg.discriminator_shared_layers {
        plan.discriminator_shared_layers = n;
    }
    for d in [&mut spec.discriminator1, &mut spec.discriminator2] {
        d.classifier_head = cfg.classifier_head.clone();
    }
    let spec = spec.with_sharing(plan);
    spec.validate()?;
    let (a, b) = (&spec.discriminator1.layers, &spec.discriminator2.layers);
    let n = plan.discriminator_shared_layers;
    if n > a.len() || n > b.len() {
        return Err(UnitError::Sharing(format!("cannot tie {n} discriminator rows of {} and {}", a.len(), b.len())));
    }
    for k in 1..=n {
        let (la, lb) = (&a[a.len() - k], &b[b.len() - k]);
        if la != lb {
            return Err(UnitError::Sharing(format!("discriminator row {} differs between the two domains", a.len() - k + 1)));
        }
    }
    Ok(spec)
}

/// `-weight * mean log p[label]` over rows of `probs` (`[N, K]`).
pub fn classifier_loss<F: Real>(probs: &Tensor<F>, labels: &[usize], weight: f64) -> Result<f64> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(dim_err!("probabilities {:?} for {} labels", shape, labels.len()));
    }
    let k = shape[1];
    let mut sum = 0.0;
    for (row, &y) in probs.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(UnitError::Domain(format!("label {y} outside {k} classes")));
        }
        sum += row[y].to_f64().unwrap_or(0.0).clamp(LOG_EPS, 1.0).ln();
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    Ok(-weight * sum / labels.len() as f64)
}

/// Discriminator features of a generated cross-domain pair.
#[derive(Clone, Debug)]
pub struct FeaturePair<F> {
    pub f1: Tensor<F>,
    pub f2: Tensor<F>,
}

impl<F: Real> FeaturePair<F> {
    pub fn new(f1: Tensor<F>, f2: Tensor<F>) -> Result<Self> {
        if f1.shape() != f2.shape() {
            return Err(dim_err!("feature shapes {:?} and {:?} differ", f1.shape(), f2.shape()));
        }
        Ok(Self { f1, f2 })
    }
}

/// `weight * mean |f1 - f2|`
pub fn feature_l1<F: Real>(pair: &FeaturePair<F>, weight: f64) -> f64 {
    if pair.f1.is_empty() {
        return 0.0;
    }
    let s: f64 = pair
        .f1
        .data()
        .iter()
        .zip(pair.f2.data())
        .map(|(a, b)| (a.to_f64().unwrap_or(0.0) - b.to_f64().unwrap_or(0.0)).abs())
        .sum();
    weight * s / pair.f1.len() as f64
}

/// Labels for domain-2 images: D2 trunk, shared head, argmax. Inference mode.
pub fn classify_target<F: Real>(model: &UnitModel<F>, images: &Tensor<F>) -> Result<Vec<usize>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != model.d2.spec.input_channels {
        return Err(dim_err!("expected [N, {}, H, W] target images, got {:?}", model.d2.spec.input_channels, shape));
    }
    let idx: Vec<usize> = (0..shape[0]).collect();
    let chunks: Vec<&[usize]> = idx.chunks(CLASSIFY_CHUNK).collect();
    let parts = parallel::map(&chunks, |c| -> Result<Vec<usize>> {
        let mut tape = Tape::no_grad(&model.store);
        let x = tape.input(images.select(c));
        let out = model.d2.discriminate(&mut tape, x, &mut Mode::eval())?;
        let probs = model.d2.classify(&mut tape, out.features, &mut Mode::eval())?;
        let p = tape.value(probs);
        let k = p.shape()[1];
        Ok(p.data().chunks(k).map(argmax).collect())
    });
    Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub target_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptMetrics {
    pub iterations: u64,
    pub source_images: usize,
    pub target_images: usize,
    pub target_test_images: usize,
    pub final_target_accuracy: Option<f64>,
    pub best_target_accuracy: Option<f64>,
}

pub struct AdaptOutcome<F> {
    pub checkpoint: Checkpoint<F>,
    pub log: Vec<LossRecord>,
    pub curve: Vec<CurvePoint>,
    pub metrics: AdaptMetrics,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,target_accuracy\n");
    for p in curve {
        s.push_str(&format!("{},{:.6}\n", p.step, p.target_accuracy));
    }
    s
}

/// Trains on labeled `source` (domain 1) and unlabeled `target` (domain 2).
/// `target_test` carries the held-out labels used only for the accuracy
/// curve. With `out`, writes the trainer artifacts plus `accuracy.csv` and
/// `metrics.json`.
pub fn adapt_train<F: Real>(
    base: &ModelSpec,
    trainer: TrainerConfig,
    cfg: &AdaptConfig,
    source: &Dataset,
    target: &Dataset,
    target_test: Option<&Dataset>,
    out: Option<&Path>,
) -> Result<AdaptOutcome<F>> {
    if target.labels.is_some() {
        return Err(UnitError::Config("the target dataset carries labels; adaptation is unsupervised on the target side".into()));
    }
    if cfg.classifier_weight > 0.0 && source.labels.is_none() {
        return Err(UnitError::Config("the source dataset has no labels".into()));
    }
    let test = match target_test {
        Some(t) => {
            let labels = t
                .labels
                .as_ref()
                .ok_or_else(|| UnitError::Config("the target test set needs labels to score accuracy".into()))?;
            Some((t.images.cast::<F>(), labels))
        }
        None => None,
    };
    let spec = build_adapt_model(base, cfg)?;
    let mut config = trainer;
    config.use_cycle_consistency = cfg.use_cycle_consistency;
    let iterations = config.iterations;
    let mut t = Trainer::<F>::with_aux(&spec, config, cfg.aux())?;
    let mut curve = Vec::new();
    let log = t.run(source, target, out, |t, rec| {
        if let Some((x, y)) = &test {
            if rec.step % cfg.eval_interval == 0 || rec.step == iterations {
                let acc = classification_accuracy(&classify_target(&t.model, x)?, y)?;
                log::info!("step {} target accuracy {:.4}", rec.step, acc);
                curve.push(CurvePoint { step: rec.step, target_accuracy: acc });
            }
        }
        Ok(())
    })?;
    let metrics = AdaptMetrics {
        iterations,
        source_images: source.len(),
        target_images: target.len(),
        target_test_images: target_test.map_or(0, Dataset::len),
        final_target_accuracy: curve.last().map(|p| p.target_accuracy),
        best_target_accuracy: curve.iter().map(|p| p.target_accuracy).reduce(f64::max),
    };
    if let Some(dir) = out {
        fs::write(dir.join("accuracy.csv"), curve_csv(&curve))?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    }
    Ok(AdaptOutcome { checkpoint: t.checkpoint(), log, curve, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DigitArch, SharingPlan};

    fn digits() -> ModelSpec {
        ModelSpec::digits(&DigitArch::new(28).unwrap().with_div(16), 1, 1)
    }

    #[test]
    fn uniform_ten_way_costs_ln_ten() {
        let p = Tensor::<f64>::full(&[3, 10], 0.1);
        let l = classifier_loss(&p, &[0, 4, 9], 1.0).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert_eq!(classifier_loss(&p, &[0, 4, 9], 0.0).unwrap(), 0.0);
        assert!(matches!(classifier_loss(&p, &[10, 0, 0], 1.0), Err(UnitError::Domain(_))));
    }

    #[test]
    fn one_hot_costs_nothing() {
        let mut p = Tensor::<f64>::zeros(&[2, 10]);
        p.data_mut()[3] = 1.0;
        p.data_mut()[17] = 1.0;
        assert!(classifier_loss(&p, &[3, 7], 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn feature_l1_shift() {
        let f1 = Tensor::<f64>::from_f64(&[2, 3], &[0.1, -0.5, 2.0, 0.0, 1.0, 3.0]).unwrap();
        let f2 = f1.map(|v| v + 0.2);
        assert!((feature_l1(&FeaturePair::new(f1.clone(), f2).unwrap(), 3.0) - 0.6).abs() < 1e-12);
        assert_eq!(feature_l1(&FeaturePair::new(f1.clone(), f1.clone()).unwrap(), 3.0), 0.0);
        assert!(FeaturePair::new(f1, Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn lenet_plan_ties_all_but_the_first_stage() {
        let spec = build_adapt_model(&digits(), &AdaptConfig::default()).unwrap();
        assert_eq!(spec.sharing.discriminator_shared_layers, 4);
        let m = UnitModel::<f32>::build(&spec, 0).unwrap();
        assert_eq!(m.d1.layers[0].ids().iter().filter(|i| m.d2.layers[0].ids().contains(i)).count(), 0);
        assert_eq!(m.d1.layers[2].ids(), m.d2.layers[2].ids());
        assert_eq!(m.d1.head[0].ids(), m.d2.head[0].ids());
    }

    #[test]
    fn mismatched_shared_rows_are_rejected() {
        let mut base = digits();
        base.discriminator2.layers[2].neurons += 1;
        let cfg = AdaptConfig { discriminator_shared_layers: Some(4), ..Default::default() };
        assert!(build_adapt_model(&base, &cfg).is_err());
        let head = AdaptConfig { classifier_head: vec![LayerSpec::fc(10)], ..Default::default() };
        assert!(build_adapt_model(&digits(), &head).is_err());
    }

    #[test]
    fn svhn_preparation_adds_rgb_and_coordinates() {
        let gray = Dataset::new(Domain::One, Tensor::full(&[2, 1, 28, 28], 0.5), Some(vec![1, 2]), vec!["a".into(), "b".into()]).unwrap();
        let rgb = Dataset::new(Domain::Two, Tensor::full(&[3, 3, 32, 32], 0.1), Some(vec![0, 1, 2]), vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let (s, t, e) = DigitTask::SvhnToMnist.prepare(&rgb, &gray.unlabeled(), &gray).unwrap();
        assert_eq!((s.channels, s.resolution, s.domain), (5, 32, Domain::One));
        assert_eq!((t.len(), t.channels, t.domain), (4, 5, Domain::Two));
        assert_eq!(e.labels, Some(vec![1, 2]));
        assert!(DigitTask::MnistToUsps.prepare(&rgb, &gray, &gray).is_err());
        let spec = build_adapt_model(&DigitTask::SvhnToMnist.model_spec(16).unwrap(), &AdaptConfig::default()).unwrap();
        assert_eq!(spec.sharing.discriminator_shared_layers, 7);
        UnitModel::<f32>::build(&spec, 0).unwrap();
    }

    #[test]
    fn classify_is_batch_invariant() {
        let spec = build_adapt_model(&digits(), &AdaptConfig::default()).unwrap();
        let m = UnitModel::<f32>::build(&spec.with_sharing(SharingPlan { discriminator_shared_layers: 4, ..spec.sharing }), 3).unwrap();
        let x = Tensor::<f32>::from_vec(&[5, 1, 28, 28], (0..5 * 784).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect()).unwrap();
        let all = classify_target(&m, &x).unwrap();
        let one: Vec<usize> = (0..5).flat_map(|i| classify_target(&m, &x.select(&[i])).unwrap()).collect();
        assert_eq!(all, one);
        assert_eq!(all, classify_target(&m, &x).unwrap());
    }
}
