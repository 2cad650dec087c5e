//! Alternating discriminator/generator training driven by the schedule.
//!
//! Progress is counted in images processed, real and generated together:
//! each step consumes `B` real rows and `B` generated rows, so
//! `images_seen` advances by `2 B`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{self, Activation, GradientBundle, MlpNetwork, RealMatrix};
use crate::error::{Error, Result};
use crate::metrics::{self, Domain};
use crate::objective::{self, LossReport, PairedBatch};
use crate::schedule::{self, HyperparamSnapshot, TrainingSchedule};
use crate::testbeds::{self, DiracState, RingGmmSpec, RingImageSpec};
use crate::LabRng;

pub const ADAM_EPSILON: f64 = 1e-8;
pub const DEFAULT_BETA1: f64 = 0.5;
pub const POINT_JITTER: f64 = 0.01;

// ---------------------------------------------------------------------------
// Optimizer and EMA

/// Adam moments shaped like the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: GradientBundle,
    pub second_moment: GradientBundle,
    pub step_count: u64,
    pub beta1: f64,
}

impl OptimizerState {
    pub fn new(net: &MlpNetwork, beta1: f64) -> Self {
        OptimizerState {
            first_moment: GradientBundle::zeros_like(net),
            second_moment: GradientBundle::zeros_like(net),
            step_count: 0,
            beta1,
        }
    }
}

/// One Adam update with bias correction, using this step's `beta2`.
/// A zero learning rate leaves the parameters untouched but still advances
/// the moments.
pub fn adam_step(
    net: &mut MlpNetwork,
    grads: &GradientBundle,
    opt: &mut OptimizerState,
    lr: f64,
    beta2: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Domain(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if !(beta2 > 0.0 && beta2 < 1.0) {
        return Err(Error::Domain(format!(
            "beta2 must lie in (0, 1), got {beta2}"
        )));
    }
    if !grads.matches(net) || !opt.first_moment.matches(net) {
        return Err(Error::Shape(
            "gradient or optimizer layout does not match the network".into(),
        ));
    }
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let beta1 = opt.beta1;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let params = net.param_blocks_mut();
    let ms = opt.first_moment.blocks_mut();
    let vs = opt.second_moment.blocks_mut();
    for (((p, g), m), v) in params.into_iter().zip(grads.blocks()).zip(ms).zip(vs) {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}

/// Blend factor that halves the old weight every `halflife_kimg` thousand images.
pub fn ema_beta(images_this_step: u64, halflife_kimg: f64) -> Result<f64> {
    if !(halflife_kimg > 0.0) {
        return Err(Error::Config(format!(
            "EMA half-life must be positive, got {halflife_kimg}"
        )));
    }
    if images_this_step == 0 {
        return Err(Error::Contract(
            "EMA update needs a positive image count".into(),
        ));
    }
    Ok(0.5f64.powf(images_this_step as f64 / (halflife_kimg * 1000.0)))
}

/// `g_ema <- beta g_ema + (1 - beta) g`, computed as a step toward `g` so
/// that equal inputs stay bit-identical.
pub fn ema_update(
    g: &MlpNetwork,
    g_ema: &MlpNetwork,
    images_this_step: u64,
    halflife_kimg: f64,
) -> Result<MlpNetwork> {
    let mut out = g_ema.clone();
    ema_update_in_place(g, &mut out, images_this_step, halflife_kimg)?;
    Ok(out)
}

pub fn ema_update_in_place(
    g: &MlpNetwork,
    g_ema: &mut MlpNetwork,
    images_this_step: u64,
    halflife_kimg: f64,
) -> Result<()> {
    if !g.same_shape(g_ema) {
        return Err(Error::Shape(
            "EMA network does not match the generator".into(),
        ));
    }
    let beta = ema_beta(images_this_step, halflife_kimg)?;
    for (e, p) in g_ema.param_blocks_mut().into_iter().zip(g.param_blocks()) {
        for (ev, pv) in e.iter_mut().zip(p) {
            *ev += (1.0 - beta) * (pv - *ev);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub domain: Domain,
    pub probability: f64,
    /// Isotropic jitter added after a point rotation.
    pub point_jitter: f64,
}

impl AugmentationPolicy {
    pub fn new(domain: Domain, probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::Domain(format!(
                "augmentation probability must lie in [0, 1], got {probability}"
            )));
        }
        Ok(AugmentationPolicy {
            domain,
            probability,
            point_jitter: POINT_JITTER,
        })
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.point_jitter = jitter;
        self
    }
}

/// Geometric transforms available for 16x16 images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageTransform {
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    /// Shift by `(dx, dy)` pixels with zero fill.
    Translate(i32, i32),
}

pub fn transform_image(pixels: &[f64], side: usize, t: ImageTransform) -> Vec<f64> {
    let s = side as i32;
    let mut out = vec![0.0; pixels.len()];
    for row in 0..s {
        for col in 0..s {
            // Source pixel for destination (row, col).
            let (sr, sc) = match t {
                ImageTransform::FlipHorizontal => (row, s - 1 - col),
                ImageTransform::FlipVertical => (s - 1 - row, col),
                // Counter-clockwise quarter turn.
                ImageTransform::Rotate90 => (col, s - 1 - row),
                ImageTransform::Translate(dx, dy) => (row - dy, col - dx),
            };
            if (0..s).contains(&sr) && (0..s).contains(&sc) {
                out[(row * s + col) as usize] = pixels[(sr * s + sc) as usize];
            }
        }
    }
    out
}

fn draw_image_transform<R: Rng + ?Sized>(rng: &mut R) -> ImageTransform {
    match rng.gen_range(0..4) {
        0 => ImageTransform::FlipHorizontal,
        1 => ImageTransform::FlipVertical,
        2 => ImageTransform::Rotate90,
        _ => loop {
            let dx = rng.gen_range(-2..=2);
            let dy = rng.gen_range(-2..=2);
            if (dx, dy) != (0, 0) {
                break ImageTransform::Translate(dx, dy);
            }
        },
    }
}

/// Augments each row independently with the policy's probability.
pub fn apply_augmentation<R: Rng + ?Sized>(
    batch: &RealMatrix,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<RealMatrix> {
    if batch.cols() != policy.domain.width() {
        return Err(Error::Shape(format!(
            "{:?} augmentation needs {} columns, got {}",
            policy.domain,
            policy.domain.width(),
            batch.cols()
        )));
    }
    let mut out = batch.clone();
    if policy.probability == 0.0 {
        return Ok(out);
    }
    let side = testbeds::IMAGE_SIDE;
    for r in 0..out.rows() {
        if rng.gen::<f64>() >= policy.probability {
            continue;
        }
        match policy.domain {
            Domain::Points2d => {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let (s, c) = angle.sin_cos();
                let (x, y) = (batch.get(r, 0), batch.get(r, 1));
                let (jx, jy): (f64, f64) = if policy.point_jitter > 0.0 {
                    (StandardNormal.sample(rng), StandardNormal.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                out.set(r, 0, c * x - s * y + policy.point_jitter * jx);
                out.set(r, 1, s * x + c * y + policy.point_jitter * jy);
            }
            Domain::Image16 => {
                let t = draw_image_transform(rng);
                let img = transform_image(batch.row(r), side, t);
                out.row_mut(r).copy_from_slice(&img);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training state

/// Widths of the generator and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub g_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
}

impl NetworkConfig {
    pub fn for_testbed(testbed: Testbed) -> Self {
        match testbed {
            Testbed::RingImage => NetworkConfig {
                latent_dim: 16,
                g_hidden: vec![64],
                d_hidden: vec![64],
            },
            // The ring is a one-dimensional manifold; a 2-D latent suffices.
            Testbed::RingGmm | Testbed::Dirac => NetworkConfig {
                latent_dim: 2,
                g_hidden: vec![64, 64, 64],
                d_hidden: vec![64, 64],
            },
        }
    }
}

pub struct TrainState {
    pub g: MlpNetwork,
    pub d: MlpNetwork,
    pub g_ema: MlpNetwork,
    pub opt_g: OptimizerState,
    pub opt_d: OptimizerState,
    pub images_seen: u64,
    pub rng: LabRng,
    pub schedule: TrainingSchedule,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub domain: Domain,
}

impl TrainState {
    pub fn new(
        schedule: TrainingSchedule,
        networks: &NetworkConfig,
        domain: Domain,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut rng = LabRng::seed_from_u64(seed);
        let width = domain.width();
        let g_dims: Vec<usize> = std::iter::once(networks.latent_dim)
            .chain(networks.g_hidden.iter().copied())
            .chain(std::iter::once(width))
            .collect();
        let d_dims: Vec<usize> = std::iter::once(width)
            .chain(networks.d_hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let g = MlpNetwork::init(
            &g_dims,
            Activation::LeakyRelu,
            Activation::Identity,
            &mut rng,
        )?;
        let d = MlpNetwork::init(
            &d_dims,
            Activation::LeakyRelu,
            Activation::Identity,
            &mut rng,
        )?;
        Ok(TrainState {
            opt_g: OptimizerState::new(&g, DEFAULT_BETA1),
            opt_d: OptimizerState::new(&d, DEFAULT_BETA1),
            g_ema: g.clone(),
            g,
            d,
            images_seen: 0,
            rng,
            schedule,
            batch_size,
            latent_dim: networks.latent_dim,
            domain,
        })
    }

    pub fn images_per_step(&self) -> u64 {
        2 * self.batch_size as u64
    }

    pub fn is_complete(&self) -> bool {
        self.images_seen + self.images_per_step() > self.schedule.total_images
    }

    pub fn progress(&self) -> f64 {
        self.images_seen as f64 / self.schedule.total_images as f64
    }

    pub fn draw_noise(&mut self, rows: usize) -> RealMatrix {
        sample_noise(&mut self.rng, rows, self.latent_dim)
    }
}

pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, latent_dim: usize) -> RealMatrix {
    let entries = (0..rows * latent_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    RealMatrix::new(rows, latent_dim, entries).expect("finite noise")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Stepped {
        report: LossReport,
        snapshot: HyperparamSnapshot,
    },
    /// Another step would exceed the image budget.
    BudgetExhausted,
}

/// One alternating update: discriminator first, then generator on fresh
/// noise, then the EMA shadow.
pub fn train_step(state: &mut TrainState, real_batch: &RealMatrix) -> Result<StepOutcome> {
    if real_batch.rows() != state.batch_size {
        return Err(Error::Shape(format!(
            "real batch has {} rows, configured batch size is {}",
            real_batch.rows(),
            state.batch_size
        )));
    }
    if state.is_complete() {
        return Ok(StepOutcome::BudgetExhausted);
    }
    let snap = state.schedule.snapshot_at(state.images_seen)?;
    let b = state.batch_size;

    let noise = state.draw_noise(b);
    let fake = diff::forward(&state.g, &noise)?;
    let policy = AugmentationPolicy::new(state.domain, snap.aug_prob)?;
    let real_aug = apply_augmentation(real_batch, &policy, &mut state.rng)?;
    let fake_aug = apply_augmentation(&fake, &policy, &mut state.rng)?;
    let pair = PairedBatch::new(real_aug, fake_aug)?;
    let (mut report, d_grads) =
        objective::discriminator_step_gradients(&state.d, &pair, snap.gamma)?;
    adam_step(
        &mut state.d,
        &d_grads,
        &mut state.opt_d,
        snap.lr,
        snap.beta2,
    )?;

    let noise = state.draw_noise(b);
    let (g_loss, g_grads) =
        objective::generator_step_gradients(&state.g, &state.d, &noise, real_batch)?;
    adam_step(
        &mut state.g,
        &g_grads,
        &mut state.opt_g,
        snap.lr,
        snap.beta2,
    )?;
    report.g_loss = g_loss;

    let images = state.images_per_step();
    ema_update_in_place(&state.g, &mut state.g_ema, images, snap.ema_halflife_kimg)?;
    state.images_seen += images;
    Ok(StepOutcome::Stepped {
        report,
        snapshot: snap,
    })
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Testbed {
    Dirac,
    RingGmm,
    RingImage,
}

impl Testbed {
    pub fn domain(self) -> Domain {
        match self {
            Testbed::RingImage => Domain::Image16,
            Testbed::RingGmm | Testbed::Dirac => Domain::Points2d,
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Inline schedule; takes precedence over `preset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<TrainingSchedule>,
    pub testbed: Testbed,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval_images: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub networks: Option<NetworkConfig>,
    #[serde(default)]
    pub ring: RingGmmSpec,
    #[serde(default)]
    pub image: RingImageSpec,
    /// Image testbed: class whose rendered images form the training set.
    #[serde(default = "default_image_class")]
    pub image_class: usize,
    /// Image testbed: number of rendered training images.
    #[serde(default = "default_image_count")]
    pub image_count: usize,
}

fn default_batch_size() -> usize {
    16
}
fn default_eval_interval() -> u64 {
    2_000
}
fn default_eval_samples() -> usize {
    1_000
}
fn default_image_class() -> usize {
    1
}
fn default_image_count() -> usize {
    116
}

impl ExperimentConfig {
    pub fn new(preset: &str, testbed: Testbed, seed: u64) -> Self {
        ExperimentConfig {
            preset: Some(preset.to_string()),
            schedule: None,
            testbed,
            batch_size: default_batch_size(),
            eval_interval_images: default_eval_interval(),
            eval_samples: default_eval_samples(),
            seed,
            output_dir: None,
            networks: None,
            ring: RingGmmSpec::default(),
            image: RingImageSpec::default(),
            image_class: default_image_class(),
            image_count: default_image_count(),
        }
    }

    pub fn resolve_schedule(&self) -> Result<TrainingSchedule> {
        match (&self.schedule, &self.preset) {
            (Some(s), _) => {
                s.validate()?;
                Ok(s.clone())
            }
            (None, Some(name)) => schedule::load_preset(name),
            (None, None) => Err(Error::Config(
                "config names neither a preset nor a schedule".into(),
            )),
        }
    }

    pub fn networks(&self) -> NetworkConfig {
        self.networks
            .clone()
            .unwrap_or_else(|| NetworkConfig::for_testbed(self.testbed))
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve_schedule()?;
        if self.batch_size == 0 || self.eval_interval_images == 0 {
            return Err(Error::Config(
                "batch size and eval interval must be positive".into(),
            ));
        }
        if self.eval_samples < 2 {
            return Err(Error::Config("eval_samples must be at least 2".into()));
        }
        Ok(())
    }
}

/// One evaluation row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLogRecord {
    pub images_seen: u64,
    pub progress: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: f64,
    pub r2: f64,
    pub gamma: f64,
    pub lr: f64,
    pub beta2: f64,
    pub aug_prob: f64,
    pub ema_halflife_kimg: f64,
    pub proxy_fd: f64,
    pub modes_covered: Option<usize>,
    pub hq_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricLogRecord>,
}

impl MetricLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json("metric log line", e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricLog { records })
    }

    pub fn last(&self) -> Option<&MetricLogRecord> {
        self.records.last()
    }
}

/// Where real batches come from.
#[derive(Debug, Clone)]
pub enum RealData {
    /// Fresh draws from the ring mixture every step.
    Ring(RingGmmSpec),
    /// A fixed training set, visited in reshuffled epochs.
    Fixed(RealMatrix),
}

struct BatchSource {
    data: RealData,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSource {
    fn new(data: RealData) -> Self {
        BatchSource {
            data,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn next_batch(&mut self, rows: usize, rng: &mut LabRng) -> Result<RealMatrix> {
        use rand::seq::SliceRandom;
        match &self.data {
            RealData::Ring(spec) => testbeds::sample_ring_gmm(spec, rows, rng),
            RealData::Fixed(set) => {
                if set.is_empty() {
                    return Err(Error::Data("training set is empty".into()));
                }
                let mut idx = Vec::with_capacity(rows);
                while idx.len() < rows {
                    if self.cursor == self.order.len() {
                        self.order = (0..set.rows()).collect();
                        self.order.shuffle(rng);
                        self.cursor = 0;
                    }
                    idx.push(self.order[self.cursor]);
                    self.cursor += 1;
                }
                Ok(set.select_rows(&idx))
            }
        }
    }
}

/// Final networks and log of a run.
pub struct TrainingOutcome {
    pub log: MetricLog,
    pub state: TrainState,
    /// Generator samples drawn from `g_ema` at the end of training.
    pub final_samples: RealMatrix,
}

/// Offset that separates the evaluation stream from the training stream, so
/// evaluation cadence never perturbs the training trajectory.
const EVAL_STREAM: u64 = 0x4556_414c;

/// Generates `n` samples from a generator network.
pub fn generate(g: &MlpNetwork, n: usize, rng: &mut LabRng) -> Result<RealMatrix> {
    let noise = sample_noise(rng, n, g.input_width());
    diff::forward(g, &noise)
}

fn evaluate(
    state: &TrainState,
    last: &LossReport,
    snap: &HyperparamSnapshot,
    reference: &RealMatrix,
    testbed: Testbed,
    ring: &RingGmmSpec,
    eval_samples: usize,
    eval_seed: u64,
) -> Result<MetricLogRecord> {
    if !(state.g.params_finite() && state.d.params_finite() && state.g_ema.params_finite()) {
        return Err(Error::Domain(format!(
            "parameters diverged at {} images",
            state.images_seen
        )));
    }
    let mut rng = LabRng::seed_from_u64(eval_seed);
    let mut samples = generate(&state.g_ema, eval_samples, &mut rng)?;
    if testbed == Testbed::RingImage {
        clamp_unit(&mut samples);
    }
    let proxy_fd = metrics::proxy_fd(reference, &samples, testbed.domain())?;
    let (modes_covered, hq_fraction) = if testbed == Testbed::RingGmm {
        let (m, h) = metrics::mode_coverage(&samples, ring)?;
        (Some(m), Some(h))
    } else {
        (None, None)
    };
    Ok(MetricLogRecord {
        images_seen: state.images_seen,
        progress: state.progress(),
        d_loss: last.d_loss,
        g_loss: last.g_loss,
        r1: last.r1,
        r2: last.r2,
        gamma: last.gamma,
        lr: snap.lr,
        beta2: snap.beta2,
        aug_prob: snap.aug_prob,
        ema_halflife_kimg: snap.ema_halflife_kimg,
        proxy_fd,
        modes_covered,
        hq_fraction,
    })
}

pub fn clamp_unit(m: &mut RealMatrix) {
    for v in m.as_mut_slice() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Runs the adversarial loop on `data` until the budget is spent, logging
/// every `eval_interval_images` images and once more at the end.
pub fn train_on(
    config: &ExperimentConfig,
    schedule: TrainingSchedule,
    data: RealData,
) -> Result<TrainingOutcome> {
    config.validate()?;
    let testbed = config.testbed;
    let mut state = TrainState::new(
        schedule,
        &config.networks(),
        testbed.domain(),
        config.batch_size,
        config.seed,
    )?;
    let eval_base = config.seed ^ EVAL_STREAM;
    let reference = match &data {
        RealData::Ring(spec) => {
            let mut rng = LabRng::seed_from_u64(eval_base);
            testbeds::sample_ring_gmm(spec, config.eval_samples, &mut rng)?
        }
        RealData::Fixed(set) => set.clone(),
    };
    let mut source = BatchSource::new(data);
    let mut records = Vec::new();
    let mut next_eval = config.eval_interval_images;
    let mut last = None;
    loop {
        if state.is_complete() {
            break;
        }
        let batch = source.next_batch(state.batch_size, &mut state.rng)?;
        match train_step(&mut state, &batch)? {
            StepOutcome::Stepped { report, snapshot } => {
                last = Some((report, snapshot));
                if state.images_seen >= next_eval {
                    while next_eval <= state.images_seen {
                        next_eval += config.eval_interval_images;
                    }
                    records.push(evaluate(
                        &state,
                        &report,
                        &snapshot,
                        &reference,
                        testbed,
                        &config.ring,
                        config.eval_samples,
                        eval_base.wrapping_add(records.len() as u64 + 1),
                    )?);
                }
            }
            StepOutcome::BudgetExhausted => break,
        }
    }
    let (report, snapshot) =
        last.ok_or_else(|| Error::Config("budget is smaller than one training step".into()))?;
    if records.last().map(|r| r.images_seen) != Some(state.images_seen) {
        records.push(evaluate(
            &state,
            &report,
            &snapshot,
            &reference,
            testbed,
            &config.ring,
            config.eval_samples,
            eval_base.wrapping_add(records.len() as u64 + 1),
        )?);
    }
    let mut rng = LabRng::seed_from_u64(eval_base.wrapping_sub(1));
    let mut final_samples = generate(&state.g_ema, config.eval_samples, &mut rng)?;
    if testbed == Testbed::RingImage {
        clamp_unit(&mut final_samples);
    }
    Ok(TrainingOutcome {
        log: MetricLog { records },
        state,
        final_samples,
    })
}

/// Scheduled Dirac game: simultaneous steps using each step's lr and gamma.
pub fn train_dirac(
    config: &ExperimentConfig,
    schedule: &TrainingSchedule,
    start: DiracState,
) -> Result<(MetricLog, Vec<DiracState>)> {
    config.validate()?;
    let per_step = 2 * config.batch_size as u64;
    let mut images = 0u64;
    let mut s = start;
    let mut trajectory = vec![s];
    let mut records = Vec::new();
    let mut next_eval = config.eval_interval_images;
    while images + per_step <= schedule.total_images {
        let snap = schedule.snapshot_at(images)?;
        let (theta, psi) = (s.theta, s.psi);
        let d_loss = objective::softplus(psi * theta);
        let report = LossReport {
            d_loss,
            g_loss: objective::softplus(-psi * theta),
            r1: psi * psi,
            r2: psi * psi,
            gamma: snap.gamma,
            d_total: d_loss + snap.gamma * psi * psi,
        };
        s = testbeds::dirac_r3_step(s, snap.lr, snap.gamma);
        images += per_step;
        trajectory.push(s);
        let end = images + per_step > schedule.total_images;
        if images >= next_eval || end {
            while next_eval <= images {
                next_eval += config.eval_interval_images;
            }
            records.push(MetricLogRecord {
                images_seen: images,
                progress: images as f64 / schedule.total_images as f64,
                d_loss: report.d_loss,
                g_loss: report.g_loss,
                r1: report.r1,
                r2: report.r2,
                gamma: report.gamma,
                lr: snap.lr,
                beta2: snap.beta2,
                aug_prob: snap.aug_prob,
                ema_halflife_kimg: snap.ema_halflife_kimg,
                // Fréchet distance between point masses at theta and 0.
                proxy_fd: s.theta * s.theta,
                modes_covered: None,
                hq_fraction: None,
            });
        }
    }
    Ok((MetricLog { records }, trajectory))
}

/// Training data implied by a config's testbed.
pub fn testbed_data(config: &ExperimentConfig) -> Result<RealData> {
    match config.testbed {
        Testbed::RingGmm | Testbed::Dirac => Ok(RealData::Ring(config.ring)),
        Testbed::RingImage => {
            let mut rng = LabRng::seed_from_u64(config.seed ^ 0x494d_4147);
            let mut entries = Vec::with_capacity(config.image_count * testbeds::IMAGE_PIXELS);
            for _ in 0..config.image_count {
                entries.extend(testbeds::render_cell_image(
                    config.image_class,
                    &mut rng,
                    &config.image,
                )?);
            }
            Ok(RealData::Fixed(RealMatrix::new(
                config.image_count,
                testbeds::IMAGE_PIXELS,
                entries,
            )?))
        }
    }
}

/// Result of [`run_training`].
pub struct RunArtifacts {
    pub log: MetricLog,
    /// `None` for the Dirac testbed, which has no networks.
    pub outcome: Option<TrainingOutcome>,
    pub dirac_trajectory: Option<Vec<DiracState>>,
}

/// Runs a configured experiment and, when `output_dir` is set, writes
/// `metrics.jsonl`, the checkpoints and a final samples dump there.
pub fn run_training(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let schedule = config.resolve_schedule()?;
    let artifacts = if config.testbed == Testbed::Dirac {
        let (log, traj) = train_dirac(config, &schedule, DiracState::new(1.0, 1.0))?;
        RunArtifacts {
            log,
            outcome: None,
            dirac_trajectory: Some(traj),
        }
    } else {
        let outcome = train_on(config, schedule, testbed_data(config)?)?;
        RunArtifacts {
            log: outcome.log.clone(),
            outcome: Some(outcome),
            dirac_trajectory: None,
        }
    };
    if let Some(dir) = &config.output_dir {
        write_artifacts(config, &artifacts, dir)?;
    }
    Ok(artifacts)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_artifacts(config: &ExperimentConfig, run: &RunArtifacts, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("metrics.jsonl"), run.log.to_jsonl())?;
    // The echo omits the output path so reruns elsewhere stay byte-identical.
    let echo = ExperimentConfig {
        output_dir: None,
        ..config.clone()
    };
    let cfg = serde_json::to_string_pretty(&echo).expect("config serializes") + "\n";
    write_file(&dir.join("config.json"), cfg)?;
    if let Some(outcome) = &run.outcome {
        outcome.state.g.save(&dir.join("g.json"))?;
        outcome.state.g_ema.save(&dir.join("g_ema.json"))?;
        outcome.state.d.save(&dir.join("d.json"))?;
        match config.testbed {
            Testbed::RingImage => {
                write_file(
                    &dir.join("samples.pgm"),
                    image_grid_pgm(&outcome.final_samples, 8)?,
                )?;
            }
            _ => {
                let labels = vec![0; outcome.final_samples.rows()];
                write_file(
                    &dir.join("samples.csv"),
                    testbeds::points_csv(&outcome.final_samples, &labels)?,
                )?;
            }
        }
    }
    if let Some(traj) = &run.dirac_trajectory {
        write_file(&dir.join("trajectory.csv"), dirac_csv(traj))?;
    }
    Ok(())
}

pub fn dirac_csv(trajectory: &[DiracState]) -> String {
    let mut out = String::from("step,theta,psi\n");
    for (i, s) in trajectory.iter().enumerate() {
        writeln!(out, "{i},{},{}", s.theta, s.psi).expect("string write");
    }
    out
}

/// Tiles up to `per_row * per_row` images into one PGM with 1-pixel gutters.
pub fn image_grid_pgm(images: &RealMatrix, per_row: usize) -> Result<Vec<u8>> {
    let side = testbeds::IMAGE_SIDE;
    if images.cols() != side * side {
        return Err(Error::Shape("image grid needs 16x16 rows".into()));
    }
    let count = images.rows().min(per_row * per_row);
    let tiles_per_row = per_row.min(count.max(1));
    let tile_rows = count.div_ceil(tiles_per_row).max(1);
    let w = tiles_per_row * (side + 1) + 1;
    let h = tile_rows * (side + 1) + 1;
    let mut canvas = vec![0.0; w * h];
    for i in 0..count {
        let (tr, tc) = (i / tiles_per_row, i % tiles_per_row);
        for r in 0..side {
            for c in 0..side {
                let y = tr * (side + 1) + 1 + r;
                let x = tc * (side + 1) + 1 + c;
                canvas[y * w + x] = images.get(i, r * side + c);
            }
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        canvas
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Normal draws used by tests that need a fixed perturbation.
#[doc(hidden)]
pub fn gaussian_matrix(rng: &mut LabRng, rows: usize, cols: usize, std: f64) -> RealMatrix {
    let normal = Normal::new(0.0, std).expect("valid std");
    RealMatrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    )
    .expect("finite draws")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Layer;
    use crate::schedule::{load_preset, schedule_value, ScheduleSpec};

    fn small_schedule(total: u64) -> TrainingSchedule {
        let mut s = load_preset("exp017").unwrap();
        s.total_images = total;
        s
    }

    fn small_nets() -> NetworkConfig {
        NetworkConfig {
            latent_dim: 3,
            g_hidden: vec![8],
            d_hidden: vec![8],
        }
    }

    fn tiny_state(seed: u64, total: u64) -> TrainState {
        TrainState::new(
            small_schedule(total),
            &small_nets(),
            Domain::Points2d,
            16,
            seed,
        )
        .unwrap()
    }

    fn ring_batch(seed: u64, n: usize) -> RealMatrix {
        testbeds::sample_ring_gmm(&RingGmmSpec::default(), n, &mut LabRng::seed_from_u64(seed))
            .unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut rng = LabRng::seed_from_u64(1);
        let mut net =
            MlpNetwork::init(&[2, 4, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let before = net.clone();
        let mut opt = OptimizerState::new(&net, 0.5);
        let zero = GradientBundle::zeros_like(&net);
        adam_step(&mut net, &zero, &mut opt, 1e-2, 0.99).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step_count, 1);
    }

    fn single_param_net(w: f64) -> MlpNetwork {
        MlpNetwork::new(vec![Layer {
            weights: RealMatrix::new(1, 1, vec![w]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn grad_of(net: &MlpNetwork, w: f64, b: f64) -> GradientBundle {
        let mut g = GradientBundle::zeros_like(net);
        g.layers[0].weights.as_mut_slice()[0] = w;
        g.layers[0].bias[0] = b;
        g
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut net = single_param_net(1.0);
        let mut opt = OptimizerState::new(&net, 0.5);
        let g = grad_of(&net, 0.3, -2.0);
        adam_step(&mut net, &g, &mut opt, 0.1, 0.9).unwrap();
        let w = net.layers()[0].weights.as_slice()[0];
        let b = net.layers()[0].bias[0];
        assert!((w - (1.0 - 0.1 * 0.3 / (0.3 + ADAM_EPSILON))).abs() < 1e-15);
        assert!((b - (0.1 * 2.0 / (2.0 + ADAM_EPSILON))).abs() < 1e-15);
    }

    #[test]
    fn adam_two_step_trace() {
        // Hand trace, beta1 = 0.5, beta2 = 0.9 then 0.99, g = 0.2, lr = 0.01:
        // step 1: m = 0.1, v = 0.004, m_hat = 0.2, v_hat = 0.04 -> -0.01 * 0.2 / (0.2 + eps)
        // step 2: m = 0.15, v = 0.99 * 0.004 + 0.01 * 0.04 = 0.00436,
        //         m_hat = 0.15 / 0.75 = 0.2, v_hat = 0.00436 / (1 - 0.99^2) = 0.219095..., update -0.0042728071
        let mut net = single_param_net(0.0);
        let mut opt = OptimizerState::new(&net, 0.5);
        let g = grad_of(&net, 0.2, 0.0);
        adam_step(&mut net, &g, &mut opt, 0.01, 0.9).unwrap();
        adam_step(&mut net, &g, &mut opt, 0.01, 0.99).unwrap();
        let v_hat2: f64 = 0.00436 / (1.0 - 0.99f64 * 0.99);
        let expected =
            -0.01 * 0.2 / (0.2 + ADAM_EPSILON) - 0.01 * 0.2 / (v_hat2.sqrt() + ADAM_EPSILON);
        let w = net.layers()[0].weights.as_slice()[0];
        assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        assert!((expected - (-0.01 - 0.004_272_807_1)).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_bad_hyperparameters() {
        let mut net = single_param_net(0.0);
        let mut opt = OptimizerState::new(&net, 0.5);
        let g = grad_of(&net, 1.0, 1.0);
        assert!(adam_step(&mut net, &g, &mut opt, -1.0, 0.9).is_err());
        assert!(adam_step(&mut net, &g, &mut opt, 0.1, 1.0).is_err());
        let other = single_param_net(0.0);
        let mut wrong = MlpNetwork::init(
            &[2, 1],
            Activation::Tanh,
            Activation::Identity,
            &mut LabRng::seed_from_u64(0),
        )
        .unwrap();
        assert!(matches!(
            adam_step(&mut wrong, &grad_of(&other, 1.0, 1.0), &mut opt, 0.1, 0.9),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ema_half_life() {
        assert_eq!(ema_beta(2000, 2.0).unwrap(), 0.5);
        assert!(matches!(ema_beta(32, 0.0), Err(Error::Config(_))));
        assert!(ema_beta(0, 1.0).is_err());
        let g = single_param_net(1.0);
        let e = single_param_net(0.0);
        let out = ema_update(&g, &e, 500, 0.5).unwrap();
        assert_eq!(out.layers()[0].weights.as_slice()[0], 0.5);
    }

    #[test]
    fn ema_three_steps_closed_form() {
        let (a, b, c) = (0.3, -1.2, 2.5);
        let mut ema = single_param_net(0.7);
        for w in [a, b, c] {
            ema = ema_update(&single_param_net(w), &ema, 32, 0.05).unwrap();
        }
        let beta: f64 = 0.5f64.powf(32.0 / 50.0);
        let expected = beta.powi(3) * 0.7 + (1.0 - beta) * (beta * beta * a + beta * b + c);
        assert!((ema.layers()[0].weights.as_slice()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn ema_converges_to_constant_generator() {
        let g = single_param_net(2.0);
        let mut ema = single_param_net(-3.0);
        let mut gap = 5.0;
        for _ in 0..200 {
            ema = ema_update(&g, &ema, 32, 0.5).unwrap();
            let new_gap = (ema.layers()[0].weights.as_slice()[0] - 2.0).abs();
            assert!(new_gap < gap);
            gap = new_gap;
        }
        assert!(gap < 1e-3);
    }

    #[test]
    fn augmentation_probability_zero_is_identity() {
        let batch = ring_batch(1, 10);
        let policy = AugmentationPolicy::new(Domain::Points2d, 0.0).unwrap();
        let mut rng = LabRng::seed_from_u64(2);
        assert_eq!(
            apply_augmentation(&batch, &policy, &mut rng).unwrap(),
            batch
        );
        assert!(AugmentationPolicy::new(Domain::Points2d, 1.5).is_err());
    }

    #[test]
    fn point_rotation_preserves_norm() {
        let batch = ring_batch(3, 50);
        let policy = AugmentationPolicy::new(Domain::Points2d, 1.0)
            .unwrap()
            .with_jitter(0.0);
        let mut rng = LabRng::seed_from_u64(4);
        let out = apply_augmentation(&batch, &policy, &mut rng).unwrap();
        for (a, b) in batch.iter_rows().zip(out.iter_rows()) {
            assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-12);
            assert_ne!(a, b);
        }
        let jittered = AugmentationPolicy::new(Domain::Points2d, 1.0).unwrap();
        let out = apply_augmentation(&batch, &jittered, &mut rng).unwrap();
        for (a, b) in batch.iter_rows().zip(out.iter_rows()) {
            assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 0.1);
        }
    }

    #[test]
    fn image_augmentation_changes_asymmetric_images() {
        // A single bright pixel off every symmetry axis: no transform fixes it.
        let mut img = vec![0.0; 256];
        img[3 * 16 + 5] = 1.0;
        for t in [
            ImageTransform::FlipHorizontal,
            ImageTransform::FlipVertical,
            ImageTransform::Rotate90,
            ImageTransform::Translate(1, 0),
            ImageTransform::Translate(-2, 2),
        ] {
            assert_ne!(transform_image(&img, 16, t), img, "{t:?}");
        }
        let batch = RealMatrix::new(20, 256, img.repeat(20)).unwrap();
        let policy = AugmentationPolicy::new(Domain::Image16, 1.0).unwrap();
        let out = apply_augmentation(&batch, &policy, &mut LabRng::seed_from_u64(5)).unwrap();
        assert!(out.iter_rows().all(|r| r != img.as_slice()));
        assert!(
            apply_augmentation(&ring_batch(0, 3), &policy, &mut LabRng::seed_from_u64(5)).is_err()
        );
    }

    #[test]
    fn transforms_are_what_they_claim() {
        let img: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let h = transform_image(&img, 16, ImageTransform::FlipHorizontal);
        assert_eq!(h[0], 15.0);
        assert_eq!(transform_image(&h, 16, ImageTransform::FlipHorizontal), img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = transform_image(&r, 16, ImageTransform::Rotate90);
        }
        assert_eq!(r, img);
        let t = transform_image(&img, 16, ImageTransform::Translate(2, 1));
        assert_eq!(t[0], 0.0);
        assert_eq!(t[16 + 2], img[0]);
    }

    #[test]
    fn step_accounting_and_schedule_coupling() {
        let mut state = tiny_state(7, 32 * 40);
        for n in 0..10u64 {
            let batch = ring_batch(100 + n, 16);
            let StepOutcome::Stepped { report, snapshot } = train_step(&mut state, &batch).unwrap()
            else {
                panic!("budget should not be exhausted");
            };
            let expected =
                schedule_value(&state.schedule.gamma, (32 * n) as f64 / (32.0 * 40.0)).unwrap();
            assert!((report.gamma - expected).abs() < 1e-12);
            assert_eq!(snapshot.gamma, report.gamma);
            assert!(report.is_consistent());
            assert_eq!(state.images_seen, 32 * (n + 1));
        }
    }

    #[test]
    fn first_step_uses_initial_gamma() {
        let mut state = TrainState::new(
            load_preset("exp017").unwrap(),
            &small_nets(),
            Domain::Points2d,
            16,
            1,
        )
        .unwrap();
        let StepOutcome::Stepped { report, .. } =
            train_step(&mut state, &ring_batch(9, 16)).unwrap()
        else {
            panic!()
        };
        assert_eq!(report.gamma, 5.0);
        assert_eq!(state.images_seen, 32);
    }

    #[test]
    fn budget_exhaustion_is_a_signal() {
        let mut state = tiny_state(1, 64);
        assert!(matches!(
            train_step(&mut state, &ring_batch(1, 16)).unwrap(),
            StepOutcome::Stepped { .. }
        ));
        assert!(matches!(
            train_step(&mut state, &ring_batch(2, 16)).unwrap(),
            StepOutcome::Stepped { .. }
        ));
        assert_eq!(
            train_step(&mut state, &ring_batch(3, 16)).unwrap(),
            StepOutcome::BudgetExhausted
        );
        assert_eq!(state.images_seen, 64);
        assert!(train_step(&mut state, &ring_batch(3, 8)).is_err());
    }

    #[test]
    fn identical_seeds_give_identical_reports() {
        let run = |seed: u64| -> Vec<u64> {
            let mut state = tiny_state(seed, 32 * 20);
            (0..5)
                .flat_map(
                    |n| match train_step(&mut state, &ring_batch(n, 16)).unwrap() {
                        StepOutcome::Stepped { report, .. } => {
                            vec![
                                report.d_loss.to_bits(),
                                report.g_loss.to_bits(),
                                report.r1.to_bits(),
                            ]
                        }
                        StepOutcome::BudgetExhausted => vec![],
                    },
                )
                .collect()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn zero_learning_rate_keeps_ema_equal() {
        let mut schedule = small_schedule(32 * 30);
        schedule.lr = ScheduleSpec::constant(0.0);
        let mut state = TrainState::new(schedule, &small_nets(), Domain::Points2d, 16, 2).unwrap();
        for n in 0..20 {
            train_step(&mut state, &ring_batch(n, 16)).unwrap();
            assert_eq!(state.g_ema, state.g);
        }
    }

    #[test]
    fn image_grid_dimensions() {
        let imgs = RealMatrix::zeros(10, 256);
        let pgm = image_grid_pgm(&imgs, 4).unwrap();
        // 4 tiles across, 3 rows: 4 * 17 + 1 = 69 wide, 3 * 17 + 1 = 52 high.
        assert!(pgm.starts_with(b"P5\n69 52\n255\n"));
        assert_eq!(pgm.len(), "P5\n69 52\n255\n".len() + 69 * 52);
    }

    #[test]
    fn dirac_training_follows_schedule() {
        let mut config = ExperimentConfig::new("exp017", Testbed::Dirac, 0);
        config.eval_interval_images = 32 * 100;
        let mut schedule = load_preset("exp017").unwrap();
        schedule.total_images = 32 * 1000;
        let (log, traj) = train_dirac(&config, &schedule, DiracState::new(1.0, 1.0)).unwrap();
        assert_eq!(traj.len(), 1001);
        assert_eq!(log.records.len(), 10);
        assert_eq!(
            log.records[0].gamma,
            schedule.snapshot_at(32 * 99).unwrap().gamma
        );
        assert!(log
            .records
            .windows(2)
            .all(|w| w[0].progress < w[1].progress));
    }

    #[test]
    fn metric_log_round_trip() {
        let log = MetricLog {
            records: vec![MetricLogRecord {
                images_seen: 32,
                progress: 0.1,
                d_loss: 0.69,
                g_loss: 0.7,
                r1: 0.01,
                r2: 0.02,
                gamma: 5.0,
                lr: 2e-3,
                beta2: 0.9,
                aug_prob: 0.0,
                ema_halflife_kimg: 0.5,
                proxy_fd: 1.25,
                modes_covered: Some(8),
                hq_fraction: None,
            }],
        };
        let text = log.to_jsonl();
        assert!(text.contains("\"modes_covered\":8") && text.contains("\"hq_fraction\":null"));
        assert_eq!(MetricLog::from_jsonl(&text).unwrap(), log);
    }
}
