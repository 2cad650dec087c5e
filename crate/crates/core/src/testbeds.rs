//! Verification domains: the one-parameter Dirac game, a ring of Gaussians,
//! and synthetic 16x16 "cell" images with an imbalanced three-class split.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::RealMatrix;
use crate::error::{Error, Result};
use crate::objective::sigmoid;
use crate::LabRng;

// ---------------------------------------------------------------------------
// Dirac game

/// Generator at `theta` (fake data is a point mass there), linear
/// discriminator `D(x) = psi * x`, real data a point mass at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiracState {
    pub theta: f64,
    pub psi: f64,
}

impl DiracState {
    pub fn new(theta: f64, psi: f64) -> Self {
        DiracState { theta, psi }
    }

    pub fn norm(&self) -> f64 {
        self.theta.hypot(self.psi)
    }
}

/// One simultaneous gradient step of the pairing game with both penalties.
///
/// `d_total = softplus(psi theta) + gamma psi^2` (R1 and R2 each equal
/// `psi^2`), `g_loss = softplus(-psi theta)`.
pub fn dirac_r3_step(s: DiracState, lr: f64, gamma: f64) -> DiracState {
    let DiracState { theta, psi } = s;
    DiracState {
        psi: psi - lr * (theta * sigmoid(psi * theta) + 2.0 * gamma * psi),
        theta: theta + lr * psi * sigmoid(-psi * theta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiracSummary {
    pub final_norm: f64,
    pub min_norm: f64,
    pub max_norm: f64,
    pub steps: usize,
}

/// Every state from `start` through step `steps` (length `steps + 1`).
pub fn dirac_trajectory(start: DiracState, lr: f64, gamma: f64, steps: usize) -> Vec<DiracState> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut s = start;
    out.push(s);
    for _ in 0..steps {
        s = dirac_r3_step(s, lr, gamma);
        out.push(s);
    }
    out
}

/// Norm statistics over the whole trajectory, start included.
pub fn simulate_dirac(
    start: DiracState,
    lr: f64,
    gamma: f64,
    steps: usize,
) -> Result<DiracSummary> {
    if steps == 0 {
        return Err(Error::Contract(
            "simulate_dirac needs at least one step".into(),
        ));
    }
    Ok(summarize_dirac(&dirac_trajectory(start, lr, gamma, steps)))
}

pub fn summarize_dirac(trajectory: &[DiracState]) -> DiracSummary {
    let norms = trajectory.iter().map(DiracState::norm);
    let (min_norm, max_norm) = norms.fold((f64::INFINITY, 0.0f64), |(lo, hi), n| {
        (lo.min(n), hi.max(n))
    });
    DiracSummary {
        final_norm: trajectory.last().map_or(0.0, DiracState::norm),
        min_norm,
        max_norm,
        steps: trajectory.len().saturating_sub(1),
    }
}

// ---------------------------------------------------------------------------
// Ring of Gaussians

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingGmmSpec {
    pub k: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for RingGmmSpec {
    fn default() -> Self {
        RingGmmSpec {
            k: 8,
            radius: 1.0,
            sigma: 0.05,
        }
    }
}

impl RingGmmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.radius > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("invalid ring spec {self:?}")));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.k)
            .map(|j| {
                let angle = 2.0 * std::f64::consts::PI * j as f64 / self.k as f64;
                [self.radius * angle.cos(), self.radius * angle.sin()]
            })
            .collect()
    }
}

/// `n` points: uniform mode choice plus isotropic Gaussian noise.
pub fn sample_ring_gmm<R: Rng + ?Sized>(
    spec: &RingGmmSpec,
    n: usize,
    rng: &mut R,
) -> Result<RealMatrix> {
    Ok(sample_ring_gmm_labeled(spec, n, rng)?.0)
}

/// Like [`sample_ring_gmm`], also returning each row's mode index.
pub fn sample_ring_gmm_labeled<R: Rng + ?Sized>(
    spec: &RingGmmSpec,
    n: usize,
    rng: &mut R,
) -> Result<(RealMatrix, Vec<usize>)> {
    spec.validate()?;
    let centers = spec.centers();
    let mut entries = Vec::with_capacity(2 * n);
    let mut modes = Vec::with_capacity(n);
    for _ in 0..n {
        let j = rng.gen_range(0..spec.k);
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        entries.push(centers[j][0] + spec.sigma * nx);
        entries.push(centers[j][1] + spec.sigma * ny);
        modes.push(j);
    }
    Ok((RealMatrix::new(n, 2, entries)?, modes))
}

/// Rotates every 2-D row about the origin by `angle`.
pub fn rotate_points(points: &RealMatrix, angle: f64) -> RealMatrix {
    let (s, c) = angle.sin_cos();
    let mut out = points.clone();
    for r in 0..out.rows() {
        let (x, y) = (points.get(r, 0), points.get(r, 1));
        out.set(r, 0, c * x - s * y);
        out.set(r, 1, s * x + c * y);
    }
    out
}

// ---------------------------------------------------------------------------
// Cell images

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CELL_CLASSES: usize = 3;
const PLACEMENT_ATTEMPTS: usize = 1000;

/// Rendering parameters of the synthetic cell images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingImageSpec {
    pub side: usize,
    /// Radius of the boundary ring in pixels.
    pub outer_radius: f64,
    /// Blob count per class id; class `c` is the `(c + 2)`-cell stage.
    pub cells_per_class: [usize; NUM_CELL_CLASSES],
    pub blob_sigma: f64,
    pub noise_sigma: f64,
    /// Peak intensity of each blob is drawn uniformly from this range.
    pub blob_amplitude: (f64, f64),
    pub ring_intensity: f64,
    pub ring_width: f64,
}

impl Default for RingImageSpec {
    fn default() -> Self {
        RingImageSpec {
            side: IMAGE_SIDE,
            outer_radius: 7.0,
            cells_per_class: [2, 3, 4],
            blob_sigma: 1.2,
            noise_sigma: 0.05,
            blob_amplitude: (0.35, 1.0),
            ring_intensity: 0.5,
            ring_width: 0.6,
        }
    }
}

impl RingImageSpec {
    pub fn without_noise(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    fn center(&self) -> f64 {
        (self.side as f64 - 1.0) / 2.0
    }

    /// Blob centers stay this far from the image center.
    fn placement_radius(&self) -> f64 {
        self.outer_radius - 2.0 * self.blob_sigma
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.blob_amplitude;
        if self.side == 0
            || !(self.outer_radius > 0.0)
            || !(self.blob_sigma > 0.0)
            || !(self.noise_sigma >= 0.0)
            || !(0.0 <= lo && lo <= hi)
            || self.placement_radius() <= 0.0
        {
            return Err(Error::Config(format!("invalid image spec {self:?}")));
        }
        Ok(())
    }
}

/// A blob center in pixel coordinates `(x, y)` and its peak intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub amplitude: f64,
}

/// Rejection-samples `count` blob centers inside the boundary with pairwise
/// separation of at least `2 * blob_sigma`.
pub fn place_blobs<R: Rng + ?Sized>(
    spec: &RingImageSpec,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Blob>> {
    spec.validate()?;
    let c = spec.center();
    let r_max = spec.placement_radius();
    let min_sep = 2.0 * spec.blob_sigma;
    let (lo, hi) = spec.blob_amplitude;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    let mut attempts = 0;
    while blobs.len() < count {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {count} blobs with separation {min_sep} within radius {r_max}"
            )));
        }
        let x = c + rng.gen_range(-r_max..=r_max);
        let y = c + rng.gen_range(-r_max..=r_max);
        if (x - c).hypot(y - c) > r_max {
            continue;
        }
        if blobs.iter().any(|b| (b.x - x).hypot(b.y - y) < min_sep) {
            continue;
        }
        let amplitude = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        blobs.push(Blob { x, y, amplitude });
    }
    debug_assert!(blobs.iter().enumerate().all(|(i, a)| blobs[..i]
        .iter()
        .all(|b| (a.x - b.x).hypot(a.y - b.y) >= min_sep)));
    Ok(blobs)
}

/// Draws the boundary ring and the given blobs, adds pixel noise from
/// `rng` and clamps to `[0, 1]`.
pub fn render_blobs<R: Rng + ?Sized>(
    spec: &RingImageSpec,
    blobs: &[Blob],
    rng: &mut R,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let c = spec.center();
    let two_s2 = 2.0 * spec.blob_sigma * spec.blob_sigma;
    let two_w2 = 2.0 * spec.ring_width * spec.ring_width;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut pixels = Vec::with_capacity(spec.side * spec.side);
    for row in 0..spec.side {
        for col in 0..spec.side {
            let (x, y) = (col as f64, row as f64);
            let dr = (x - c).hypot(y - c) - spec.outer_radius;
            let mut v = spec.ring_intensity * (-dr * dr / two_w2).exp();
            for b in blobs {
                let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                v += b.amplitude * (-d2 / two_s2).exp();
            }
            if spec.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(pixels)
}

/// One image of class `class_id` (0, 1, 2 for two-, three-, four-cell).
pub fn render_cell_image<R: Rng + ?Sized>(
    class_id: usize,
    rng: &mut R,
    spec: &RingImageSpec,
) -> Result<Vec<f64>> {
    let count = *spec
        .cells_per_class
        .get(class_id)
        .ok_or_else(|| Error::Contract(format!("class id {class_id} is not in 0..3")))?;
    let blobs = place_blobs(spec, count, rng)?;
    render_blobs(spec, &blobs, rng)
}

// ---------------------------------------------------------------------------
// Labeled datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(*f >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` counts for `n` items: train and val are rounded,
    /// test takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Rows with labels, split tags and a synthetic flag.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: RealMatrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub synthetic: Vec<bool>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Rows of one split, in dataset order.
    pub fn subset(&self, split: Split) -> LabeledDataset {
        let idx = self.indices(split);
        LabeledDataset {
            samples: self.samples.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            synthetic: idx.iter().map(|&i| self.synthetic[i]).collect(),
        }
    }

    /// Rows with the given label and split.
    pub fn class_rows(&self, label: usize, split: Split) -> RealMatrix {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.labels[i] == label && self.splits[i] == split)
            .collect();
        self.samples.select_rows(&idx)
    }

    pub fn class_counts(&self, num_classes: usize, split: Split) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for i in self.indices(split) {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Appends synthetic training rows for `label`.
    pub fn append_synthetic(&mut self, rows: &RealMatrix, label: usize) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        self.samples = self.samples.vstack(rows)?;
        self.labels
            .extend(std::iter::repeat(label).take(rows.rows()));
        self.splits
            .extend(std::iter::repeat(Split::Train).take(rows.rows()));
        self.synthetic
            .extend(std::iter::repeat(true).take(rows.rows()));
        Ok(())
    }
}

/// Toy counts per class: the source training counts (3090, 1165, 3185)
/// divided by ten, grossed up so a 70% training split lands on (309, 116, 318).
pub const TOY_CLASS_COUNTS: [usize; NUM_CELL_CLASSES] = [442, 166, 454];

/// Renders `counts[c]` images per class and splits each class separately.
pub fn build_imbalanced_dataset(
    counts: &[usize],
    split: SplitFractions,
    seed: u64,
    spec: &RingImageSpec,
) -> Result<LabeledDataset> {
    use rand::SeedableRng;
    split.validate()?;
    if counts.len() != NUM_CELL_CLASSES || counts.iter().any(|&c| c == 0) {
        return Err(Error::Config(format!(
            "need {NUM_CELL_CLASSES} positive class counts, got {counts:?}"
        )));
    }
    let mut rng = LabRng::seed_from_u64(seed);
    let total: usize = counts.iter().sum();
    let mut entries = Vec::with_capacity(total * spec.side * spec.side);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for (class_id, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            entries.extend(render_cell_image(class_id, &mut rng, spec)?);
            labels.push(class_id);
        }
        let (n_train, n_val, _) = split.counts(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut tags = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            tags[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        splits.extend(tags);
    }
    Ok(LabeledDataset {
        samples: RealMatrix::new(total, spec.side * spec.side, entries)?,
        labels,
        splits,
        synthetic: vec![false; total],
    })
}

// ---------------------------------------------------------------------------
// Export

/// `x,y,label` CSV for 2-D points.
pub fn points_csv(points: &RealMatrix, labels: &[usize]) -> Result<String> {
    if points.cols() != 2 || labels.len() != points.rows() {
        return Err(Error::Shape(
            "points CSV needs 2 columns and one label per row".into(),
        ));
    }
    let mut out = String::from("x,y,label\n");
    for (row, label) in points.iter_rows().zip(labels) {
        writeln!(out, "{},{},{}", row[0], row[1], label).expect("string write");
    }
    Ok(out)
}

/// Binary PGM (P5, maxval 255) of a square image with intensities in [0, 1].
pub fn encode_pgm(pixels: &[f64], side: usize) -> Result<Vec<u8>> {
    if pixels.len() != side * side {
        return Err(Error::Shape(format!(
            "{} pixels do not form a {side}x{side} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Writes one PGM per row plus `index.csv` (filename,label,split).
pub fn export_image_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = (dataset.samples.cols() as f64).sqrt() as usize;
    let mut index = String::from("filename,label,split\n");
    for (i, row) in dataset.samples.iter_rows().enumerate() {
        let name = format!("img_{i:05}.pgm");
        let path = dir.join(&name);
        std::fs::write(&path, encode_pgm(row, side)?).map_err(|e| Error::io(&path, e))?;
        writeln!(
            index,
            "{},{},{}",
            name,
            dataset.labels[i],
            dataset.splits[i].as_str()
        )
        .expect("string write");
    }
    let path = dir.join("index.csv");
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dirac_step_examples() {
        assert_eq!(
            dirac_r3_step(DiracState::new(0.0, 0.0), 0.3, 2.0),
            DiracState::new(0.0, 0.0)
        );
        let s = dirac_r3_step(DiracState::new(1.0, 1.0), 0.1, 1.0);
        // sigma(1) = 0.7310586, sigma(-1) = 0.2689414
        assert!((s.theta - 1.0268941).abs() < 1e-7);
        assert!((s.psi - 0.7268941).abs() < 1e-7);
        let free = dirac_r3_step(DiracState::new(1.0, 1.0), 0.1, 0.0);
        assert!(free.psi < 1.0 && free.theta > 1.0);
    }

    #[test]
    fn dirac_regularization_dichotomy() {
        // Frozen from a direct run of the recurrence: final 3.4e-15 with
        // gamma = 1, minimum 0.3221 with gamma = 0.
        let start = DiracState::new(1.0, 1.0);
        let reg = simulate_dirac(start, 0.05, 1.0, 5000).unwrap();
        assert!(reg.final_norm < 0.05);
        assert!(reg.final_norm < 1e-12);
        let free = simulate_dirac(start, 0.05, 0.0, 5000).unwrap();
        assert!(free.min_norm > 0.2);
        assert!((free.min_norm - 0.32205418).abs() < 1e-6);
        let zero = simulate_dirac(DiracState::new(0.0, 0.0), 0.05, 1.0, 100).unwrap();
        assert_eq!(
            (zero.final_norm, zero.min_norm, zero.max_norm),
            (0.0, 0.0, 0.0)
        );
        assert!(simulate_dirac(start, 0.05, 1.0, 0).is_err());
    }

    #[test]
    fn ring_degenerate_sigma_hits_centers() {
        let spec = RingGmmSpec {
            sigma: 0.0,
            ..Default::default()
        };
        let mut rng = LabRng::seed_from_u64(1);
        let pts = sample_ring_gmm(&spec, 200, &mut rng).unwrap();
        let centers = spec.centers();
        for row in pts.iter_rows() {
            assert!(centers.iter().any(|c| c[0] == row[0] && c[1] == row[1]));
        }
    }

    #[test]
    fn ring_single_mode_mean() {
        let spec = RingGmmSpec {
            k: 1,
            radius: 2.0,
            sigma: 0.1,
        };
        let n = 4000;
        let mut rng = LabRng::seed_from_u64(2);
        let pts = sample_ring_gmm(&spec, n, &mut rng).unwrap();
        let bound = 4.0 * spec.sigma / (n as f64).sqrt();
        let mx = pts.iter_rows().map(|r| r[0]).sum::<f64>() / n as f64;
        let my = pts.iter_rows().map(|r| r[1]).sum::<f64>() / n as f64;
        assert!((mx - 2.0).abs() < bound && my.abs() < bound);
    }

    #[test]
    fn ring_modes_are_balanced() {
        // Binomial(8000, 1/8): mean 1000, sd 29.6, so [800, 1200] is +-6.7 sd.
        let mut rng = LabRng::seed_from_u64(3);
        let (_, modes) = sample_ring_gmm_labeled(&RingGmmSpec::default(), 8000, &mut rng).unwrap();
        let mut counts = [0usize; 8];
        for m in modes {
            counts[m] += 1;
        }
        assert!(
            counts.iter().all(|&c| (800..=1200).contains(&c)),
            "{counts:?}"
        );
    }

    #[test]
    fn cell_images_are_valid_and_deterministic() {
        let spec = RingImageSpec::default();
        for class_id in 0..3 {
            let mut a = LabRng::seed_from_u64(40 + class_id as u64);
            let mut b = LabRng::seed_from_u64(40 + class_id as u64);
            let img = render_cell_image(class_id, &mut a, &spec).unwrap();
            assert_eq!(img.len(), IMAGE_PIXELS);
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(img, render_cell_image(class_id, &mut b, &spec).unwrap());
        }
        let mut rng = LabRng::seed_from_u64(0);
        assert!(matches!(
            render_cell_image(3, &mut rng, &spec),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn noiseless_render_is_clamped() {
        let spec = RingImageSpec::default().without_noise();
        let mut rng = LabRng::seed_from_u64(5);
        let blobs = place_blobs(&spec, 4, &mut rng).unwrap();
        let a = render_blobs(&spec, &blobs, &mut rng).unwrap();
        let b = render_blobs(&spec, &blobs, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().cloned().fold(0.0, f64::max) <= 1.0);
    }

    #[test]
    fn more_cells_means_more_mass() {
        let mut spec = RingImageSpec::default().without_noise();
        spec.blob_amplitude = (0.5, 0.5);
        let mut rng = LabRng::seed_from_u64(6);
        let four = place_blobs(&spec, 4, &mut rng).unwrap();
        let two = &four[..2];
        let mass = |blobs: &[Blob]| -> f64 {
            render_blobs(&spec, blobs, &mut LabRng::seed_from_u64(0))
                .unwrap()
                .iter()
                .sum()
        };
        let ring_only = mass(&[]);
        let (m2, m4) = (mass(two) - ring_only, mass(&four) - ring_only);
        assert!(m4 > m2);
        // Each blob integrates to about 2 pi sigma^2 * amplitude = 4.52.
        assert!((m2 - 2.0 * 4.52).abs() < 1.0, "{m2}");
    }

    #[test]
    fn impossible_placement_is_reported() {
        let mut spec = RingImageSpec::default();
        spec.cells_per_class = [2, 3, 40];
        let mut rng = LabRng::seed_from_u64(7);
        assert!(matches!(
            render_cell_image(2, &mut rng, &spec),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn split_counts() {
        let f = SplitFractions::default();
        assert_eq!(f.counts(100), (70, 10, 20));
        assert_eq!(f.counts(TOY_CLASS_COUNTS[0]).0, 309);
        assert_eq!(f.counts(TOY_CLASS_COUNTS[1]).0, 116);
        assert_eq!(f.counts(TOY_CLASS_COUNTS[2]).0, 318);
        let bad = SplitFractions {
            train: 0.7,
            val: 0.2,
            test: 0.2,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_split_integrity() {
        let spec = RingImageSpec::default();
        let ds = build_imbalanced_dataset(&[100, 100, 100], SplitFractions::default(), 9, &spec)
            .unwrap();
        for c in 0..3 {
            let per: Vec<usize> = [Split::Train, Split::Val, Split::Test]
                .iter()
                .map(|&s| ds.indices(s).iter().filter(|&&i| ds.labels[i] == c).count())
                .collect();
            assert_eq!(per, vec![70, 10, 20]);
        }
        let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&s| ds.indices(s))
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        let again = build_imbalanced_dataset(&[100, 100, 100], SplitFractions::default(), 9, &spec)
            .unwrap();
        assert_eq!(ds, again);
        assert!(build_imbalanced_dataset(&[1, 0, 1], SplitFractions::default(), 9, &spec).is_err());
    }

    #[test]
    fn pgm_encoding() {
        let px: Vec<f64> = (0..4).map(|i| i as f64 / 3.0).collect();
        let bytes = encode_pgm(&px, 2).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 85, 170, 255]);
        assert!(encode_pgm(&px, 3).is_err());
    }

    #[test]
    fn image_export_writes_index() {
        let dir = tempfile::tempdir().unwrap();
        let spec = RingImageSpec::default();
        let ds = build_imbalanced_dataset(&[3, 2, 3], SplitFractions::default(), 1, &spec).unwrap();
        export_image_dataset(&ds, dir.path()).unwrap();
        let index = std::fs::read_to_string(dir.path().join("index.csv")).unwrap();
        assert_eq!(index.lines().count(), 9);
        assert!(index.starts_with("filename,label,split\nimg_00000.pgm,0,"));
        let pgm = std::fs::read(dir.path().join("img_00007.pgm")).unwrap();
        assert_eq!(pgm.len(), "P5\n16 16\n255\n".len() + 256);
    }

    #[test]
    fn points_csv_format() {
        let pts = RealMatrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]).unwrap();
        assert_eq!(
            points_csv(&pts, &[0, 3]).unwrap(),
            "x,y,label\n1,2,0\n-0.5,0.25,3\n"
        );
    }
}
