//! Minority-class rebalancing: train a class-specific generator on the
//! minority training rows, top the class up with synthetic images, and
//! compare a linear softmax classifier before and after.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diff::{MlpNetwork, RealMatrix};
use crate::error::{Error, Result};
use crate::metrics::{self, ClassReport, Domain};
use crate::schedule;
use crate::testbeds::{
    self, LabeledDataset, RingImageSpec, Split, SplitFractions, NUM_CELL_CLASSES, TOY_CLASS_COUNTS,
};
use crate::trainer::{self, ExperimentConfig, NetworkConfig, RealData, Testbed};
use crate::LabRng;

pub const CLASS_NAMES: [&str; NUM_CELL_CLASSES] = ["t2", "t3", "t4"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub counts: Vec<usize>,
    pub split: SplitFractions,
    pub seed: u64,
    #[serde(default)]
    pub image: RingImageSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            counts: TOY_CLASS_COUNTS.to_vec(),
            split: SplitFractions::default(),
            seed: 0,
            image: RingImageSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSettings {
    pub epochs: usize,
    pub lr: f64,
    /// Recorded for provenance; full-batch descent from zero weights draws
    /// no randomness.
    pub seed: u64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings {
            epochs: 1000,
            lr: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default = "default_preset")]
    pub gan_preset: String,
    /// Replaces the preset's image budget when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gan_budget_images: Option<u64>,
    #[serde(default)]
    pub gan_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gan_networks: Option<NetworkConfig>,
    #[serde(default = "default_synth_count")]
    pub synth_count: usize,
    #[serde(default = "default_minority")]
    pub minority_class: usize,
    #[serde(default)]
    pub classifier: ClassifierSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_preset() -> String {
    "exp017".into()
}
fn default_synth_count() -> usize {
    200
}
fn default_minority() -> usize {
    1
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        RebalanceConfig {
            dataset: DatasetSpec::default(),
            gan_preset: default_preset(),
            gan_budget_images: None,
            gan_seed: 0,
            gan_networks: None,
            synth_count: default_synth_count(),
            minority_class: default_minority(),
            classifier: ClassifierSettings::default(),
            output_dir: None,
        }
    }
}

impl RebalanceConfig {
    /// Sets every seed from one base so a single `--seed` pins the run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.gan_seed = seed.wrapping_add(1);
        self.classifier.seed = seed.wrapping_add(2);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::json("rebalance config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.minority_class >= NUM_CELL_CLASSES {
            return Err(Error::Config(format!(
                "minority class {} outside 0..{NUM_CELL_CLASSES}",
                self.minority_class
            )));
        }
        if !(self.classifier.lr > 0.0) {
            return Err(Error::Config("classifier lr must be positive".into()));
        }
        if self.gan_budget_images == Some(0) {
            return Err(Error::Config("gan_budget_images must be positive".into()));
        }
        self.dataset.split.validate()?;
        self.dataset.image.validate()?;
        schedule::load_preset(&self.gan_preset)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Classifier

/// Multinomial logistic regression on flattened pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    /// `classes x features`
    pub weights: RealMatrix,
    pub bias: Vec<f64>,
}

impl SoftmaxClassifier {
    pub fn zeros(classes: usize, features: usize) -> Self {
        SoftmaxClassifier {
            weights: RealMatrix::zeros(classes, features),
            bias: vec![0.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.bias[c] + dot(self.weights.row(c), x);
        }
    }

    /// Argmax class per row; ties go to the lowest class id.
    pub fn predict(&self, samples: &RealMatrix) -> Vec<usize> {
        let mut z = vec![0.0; self.num_classes()];
        samples
            .iter_rows()
            .map(|x| {
                self.logits(x, &mut z);
                let mut best = 0;
                for c in 1..z.len() {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Mean cross-entropy of the classifier on `(samples, labels)`.
pub fn cross_entropy(model: &SoftmaxClassifier, samples: &RealMatrix, labels: &[usize]) -> f64 {
    let mut z = vec![0.0; model.num_classes()];
    let mut total = 0.0;
    for (x, &y) in samples.iter_rows().zip(labels) {
        model.logits(x, &mut z);
        softmax_in_place(&mut z);
        total -= z[y].max(f64::MIN_POSITIVE).ln();
    }
    total / labels.len().max(1) as f64
}

/// Full-batch gradient descent on mean cross-entropy from zero weights.
pub fn train_classifier(
    train: &LabeledDataset,
    num_classes: usize,
    settings: &ClassifierSettings,
) -> Result<SoftmaxClassifier> {
    let mut counts = vec![0usize; num_classes];
    for &y in &train.labels {
        if y >= num_classes {
            return Err(Error::Data(format!("label {y} outside 0..{num_classes}")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no training rows")));
    }
    let features = train.samples.cols();
    let n = train.len() as f64;
    let mut model = SoftmaxClassifier::zeros(num_classes, features);
    let mut grad_w = vec![0.0; num_classes * features];
    let mut grad_b = vec![0.0; num_classes];
    let mut p = vec![0.0; num_classes];
    for _ in 0..settings.epochs {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        grad_b.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in train.samples.iter_rows().zip(&train.labels) {
            model.logits(x, &mut p);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for c in 0..num_classes {
                grad_b[c] += p[c];
                let row = &mut grad_w[c * features..(c + 1) * features];
                for (g, xv) in row.iter_mut().zip(x) {
                    *g += p[c] * xv;
                }
            }
        }
        let step = settings.lr / n;
        for (w, g) in model.weights.as_mut_slice().iter_mut().zip(&grad_w) {
            *w -= step * g;
        }
        for (b, g) in model.bias.iter_mut().zip(&grad_b) {
            *b -= step * g;
        }
    }
    Ok(model)
}

/// `count` generator outputs clamped to `[0, 1]`.
pub fn synthesize_minority(
    g_ema: &MlpNetwork,
    count: usize,
    rng: &mut LabRng,
) -> Result<RealMatrix> {
    if count == 0 {
        return Ok(RealMatrix::zeros(0, g_ema.output_width()));
    }
    let mut out = trainer::generate(g_ema, count, rng)?;
    trainer::clamp_unit(&mut out);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Experiment

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDeltas {
    pub classes: Vec<MetricDelta>,
    pub macro_avg: MetricDelta,
    pub accuracy: f64,
}

impl ReportDeltas {
    pub fn between(before: &ClassReport, after: &ClassReport) -> Self {
        ReportDeltas {
            classes: before
                .classes
                .iter()
                .zip(&after.classes)
                .map(|(b, a)| MetricDelta {
                    precision: a.precision - b.precision,
                    recall: a.recall - b.recall,
                    f1: a.f1 - b.f1,
                })
                .collect(),
            macro_avg: MetricDelta {
                precision: after.macro_precision - before.macro_precision,
                recall: after.macro_recall - before.macro_recall,
                f1: after.macro_f1 - before.macro_f1,
            },
            accuracy: after.accuracy - before.accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub dataset: u64,
    pub gan: u64,
    pub synthesis: u64,
    pub classifier: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceReport {
    pub before: ClassReport,
    pub after: ClassReport,
    pub deltas: ReportDeltas,
    pub config: RebalanceConfig,
    pub seeds: RunSeeds,
    pub train_counts_before: Vec<usize>,
    pub train_counts_after: Vec<usize>,
    /// Proxy FD of the synthetic rows against the real minority training rows.
    pub synthetic_proxy_fd: Option<f64>,
}

impl RebalanceReport {
    /// `section,class,precision,recall,f1,support` with `before` then `after`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,class,precision,recall,f1,support\n");
        for (name, report) in [("before", &self.before), ("after", &self.after)] {
            for line in report.to_csv_rows(&CLASS_NAMES).lines() {
                out.push_str(name);
                out.push(',');
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

const SYNTH_STREAM: u64 = 0x5359_4e54;

fn check_split_hygiene(ds: &LabeledDataset) -> Result<()> {
    if let Some(i) = (0..ds.len()).find(|&i| ds.synthetic[i] && ds.splits[i] != Split::Train) {
        return Err(Error::Contract(format!(
            "synthetic row {i} landed in the {} split",
            ds.splits[i].as_str()
        )));
    }
    Ok(())
}

/// Trains the minority-class generator and returns its EMA network.
pub fn train_minority_gan(
    config: &RebalanceConfig,
    minority_rows: RealMatrix,
) -> Result<MlpNetwork> {
    let mut schedule = schedule::load_preset(&config.gan_preset)?;
    if let Some(budget) = config.gan_budget_images {
        schedule.total_images = budget;
    }
    let mut exp = ExperimentConfig::new(&config.gan_preset, Testbed::RingImage, config.gan_seed);
    exp.schedule = Some(schedule.clone());
    exp.networks = config.gan_networks.clone();
    exp.image = config.dataset.image.clone();
    // Only the final network is needed; evaluate once at the end.
    exp.eval_interval_images = schedule.total_images;
    exp.eval_samples = minority_rows.rows().max(2);
    let outcome = trainer::train_on(&exp, schedule, RealData::Fixed(minority_rows))?;
    Ok(outcome.state.g_ema)
}

pub fn run_rebalance_experiment(config: &RebalanceConfig) -> Result<RebalanceReport> {
    config.validate().map_err(|e| e.at_stage("config"))?;
    let k = NUM_CELL_CLASSES;
    let minority = config.minority_class;
    let seeds = RunSeeds {
        dataset: config.dataset.seed,
        gan: config.gan_seed,
        synthesis: config.gan_seed ^ SYNTH_STREAM,
        classifier: config.classifier.seed,
    };

    let mut data = testbeds::build_imbalanced_dataset(
        &config.dataset.counts,
        config.dataset.split,
        seeds.dataset,
        &config.dataset.image,
    )
    .map_err(|e| e.at_stage("dataset"))?;
    let test = data.subset(Split::Test);
    let train_counts_before = data.class_counts(k, Split::Train);

    let before_model = train_classifier(&data.subset(Split::Train), k, &config.classifier)
        .map_err(|e| e.at_stage("classifier_before"))?;
    let before =
        metrics::classification_report(&test.labels, &before_model.predict(&test.samples), k)
            .map_err(|e| e.at_stage("classifier_before"))?;

    let minority_rows = data.class_rows(minority, Split::Train);
    let (synthetic, synthetic_proxy_fd) = if config.synth_count > 0 {
        let g_ema =
            train_minority_gan(config, minority_rows.clone()).map_err(|e| e.at_stage("gan"))?;
        let mut rng = LabRng::seed_from_u64(seeds.synthesis);
        let synth = synthesize_minority(&g_ema, config.synth_count, &mut rng)
            .map_err(|e| e.at_stage("synthesize"))?;
        let fd = if synth.rows() >= 2 {
            Some(
                metrics::proxy_fd(&minority_rows, &synth, Domain::Image16)
                    .map_err(|e| e.at_stage("synthesize"))?,
            )
        } else {
            None
        };
        (synth, fd)
    } else {
        (RealMatrix::zeros(0, testbeds::IMAGE_PIXELS), None)
    };

    data.append_synthetic(&synthetic, minority)
        .map_err(|e| e.at_stage("augment"))?;
    check_split_hygiene(&data).map_err(|e| e.at_stage("augment"))?;
    let test_after = data.subset(Split::Test);
    if test_after != test {
        return Err(
            Error::Contract("test split changed during augmentation".into()).at_stage("augment"),
        );
    }
    let train_counts_after = data.class_counts(k, Split::Train);

    let after_model = train_classifier(&data.subset(Split::Train), k, &config.classifier)
        .map_err(|e| e.at_stage("classifier_after"))?;
    let after =
        metrics::classification_report(&test.labels, &after_model.predict(&test.samples), k)
            .map_err(|e| e.at_stage("classifier_after"))?;

    let report = RebalanceReport {
        deltas: ReportDeltas::between(&before, &after),
        before,
        after,
        config: RebalanceConfig {
            output_dir: None,
            ..config.clone()
        },
        seeds,
        train_counts_before,
        train_counts_after,
        synthetic_proxy_fd,
    };
    if let Some(dir) = &config.output_dir {
        report.write(dir).map_err(|e| e.at_stage("persist"))?;
    }
    Ok(report)
}
