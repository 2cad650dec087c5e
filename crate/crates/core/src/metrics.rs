//! Fréchet distance between Gaussian fits, ring mode coverage, and
//! per-class classification metrics.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::RealMatrix;
use crate::error::{Error, Result};
use crate::testbeds::RingGmmSpec;
use crate::LabRng;

pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Seed of the fixed image feature projection.
pub const PROJECTION_SEED: u64 = 0x5233_4741;
pub const PROJECTION_DIM: usize = 16;

/// Mean and covariance of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Shape(format!(
                "covariance is {}x{} for a {d}-dimensional mean",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-12 {
            return Err(Error::Domain("covariance is not symmetric".into()));
        }
        Ok(GaussianSummary { mean, covariance })
    }

    /// Diagonal summary, mostly for analytic checks.
    pub fn diagonal(mean: &[f64], variances: &[f64]) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::Shape("mean and variance lengths differ".into()));
        }
        GaussianSummary::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance plus `1e-6 I`.
pub fn fit_gaussian(samples: &RealMatrix) -> Result<GaussianSummary> {
    let n = samples.rows();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let d = samples.cols();
    let mut mean = DVector::zeros(d);
    for row in samples.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in samples.iter_rows() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(mean.iter()) {
            *c = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += COVARIANCE_RIDGE;
    }
    GaussianSummary::new(mean, cov)
}

/// Symmetric PSD square root by eigendecomposition; negative eigenvalues are
/// clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_b^1/2 S_a S_b^1/2)^1/2)`
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "cannot compare {}-dimensional and {}-dimensional summaries",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_b = sqrt_psd(&b.covariance);
    let inner = &root_b * &a.covariance * &root_b;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let fd = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Sample domain; selects the feature map of [`proxy_fd`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Points2d,
    Image16,
}

impl Domain {
    pub fn width(self) -> usize {
        match self {
            Domain::Points2d => 2,
            Domain::Image16 => crate::testbeds::IMAGE_PIXELS,
        }
    }
}

/// Fixed `256 -> 16` Gaussian projection, entries `N(0, 1/256)`.
pub fn image_projection() -> DMatrix<f64> {
    let mut rng = LabRng::seed_from_u64(PROJECTION_SEED);
    let input = Domain::Image16.width();
    let scale = 1.0 / (input as f64).sqrt();
    DMatrix::from_fn(PROJECTION_DIM, input, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

fn features(samples: &RealMatrix, domain: Domain) -> Result<RealMatrix> {
    if samples.cols() != domain.width() {
        return Err(Error::Shape(format!(
            "{domain:?} samples need {} columns, got {}",
            domain.width(),
            samples.cols()
        )));
    }
    match domain {
        Domain::Points2d => Ok(samples.clone()),
        Domain::Image16 => {
            let proj = image_projection();
            let mut out = Vec::with_capacity(samples.rows() * PROJECTION_DIM);
            for row in samples.iter_rows() {
                let x = DVector::from_column_slice(row);
                out.extend((&proj * x).iter());
            }
            RealMatrix::new(samples.rows(), PROJECTION_DIM, out)
        }
    }
}

/// Fréchet distance in a fixed feature space: raw coordinates for points,
/// the seeded random projection for images.
pub fn proxy_fd(real_set: &RealMatrix, fake_set: &RealMatrix, domain: Domain) -> Result<f64> {
    let a = fit_gaussian(&features(real_set, domain)?)?;
    let b = fit_gaussian(&features(fake_set, domain)?)?;
    frechet_distance(&a, &b)
}

/// Number of ring modes owning at least one high-quality sample, and the
/// fraction of samples that are high quality (within `3 sigma` of their
/// nearest center).
pub fn mode_coverage(samples: &RealMatrix, spec: &RingGmmSpec) -> Result<(usize, f64)> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "mode coverage needs at least one sample".into(),
        ));
    }
    if samples.cols() != 2 {
        return Err(Error::Shape("mode coverage needs 2-D samples".into()));
    }
    spec.validate()?;
    let centers = spec.centers();
    let threshold = 3.0 * spec.sigma;
    let mut owned = vec![false; centers.len()];
    let mut hq = 0usize;
    for row in samples.iter_rows() {
        let (j, dist) = centers
            .iter()
            .enumerate()
            .map(|(j, c)| (j, (row[0] - c[0]).hypot(row[1] - c[1])))
            .fold(
                (0, f64::INFINITY),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            );
        if dist <= threshold {
            hq += 1;
            owned[j] = true;
        }
    }
    Ok((
        owned.iter().filter(|&&o| o).count(),
        hq as f64 / samples.rows() as f64,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-class and unweighted macro precision/recall/F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// `confusion[true][predicted]`
pub fn confusion_matrix(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if labels.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= num_classes || p >= num_classes {
            return Err(Error::Contract(format!(
                "label {y} / prediction {p} outside 0..{num_classes}"
            )));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn classification_report(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<ClassReport> {
    let m = confusion_matrix(labels, predictions, num_classes)?;
    Ok(report_from_confusion(&m))
}

/// Report from a confusion matrix indexed `[true][predicted]`. A class never
/// predicted has precision 0; an absent class has recall 0.
pub fn report_from_confusion(m: &[Vec<usize>]) -> ClassReport {
    let k = m.len();
    let total: usize = m.iter().map(|r| r.iter().sum::<usize>()).sum();
    let classes: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let support: usize = m[c].iter().sum();
            let predicted: usize = m.iter().map(|r| r[c]).sum();
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = if support > 0 {
                tp / support as f64
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / k.max(1) as f64;
    let correct: usize = (0..k).map(|c| m[c][c]).sum();
    ClassReport {
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        accuracy: if total > 0 {
            correct as f64 / total as f64
        } else {
            0.0
        },
        classes,
    }
}

impl ClassReport {
    /// `class,precision,recall,f1,support` rows plus a trailing `macro` row.
    pub fn to_csv_rows(&self, class_names: &[&str]) -> String {
        let mut out = String::new();
        for (i, c) in self.classes.iter().enumerate() {
            let name = class_names.get(i).copied().unwrap_or("?");
            writeln!(
                out,
                "{name},{:.6},{:.6},{:.6},{}",
                c.precision, c.recall, c.f1, c.support
            )
            .expect("string write");
        }
        let support: usize = self.classes.iter().map(|c| c.support).sum();
        writeln!(
            out,
            "macro,{:.6},{:.6},{:.6},{}",
            self.macro_precision, self.macro_recall, self.macro_f1, support
        )
        .expect("string write");
        out
    }
}
