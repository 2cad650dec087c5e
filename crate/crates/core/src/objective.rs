//! Relativistic pairing loss with zero-centered R1/R2 penalties.
//!
//! Row `i` of the real batch is paired with row `i` of the fake batch. The
//! discriminator minimizes `mean softplus(D(fake_i) - D(real_i))` plus
//! `(gamma / 2) (R1 + R2)`, where R1 and R2 are the mean squared input
//! gradient norms of `D` on the real and fake rows. The generator minimizes
//! `mean softplus(D(real_i) - D(G(z_i)))`.

use serde::{Deserialize, Serialize};

use crate::diff::{self, GradientBundle, MlpNetwork, RealMatrix};
use crate::error::{Error, Result};

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic function, evaluated on the side that cannot overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Real and fake rows paired by index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    real: RealMatrix,
    fake: RealMatrix,
}

impl PairedBatch {
    pub fn new(real: RealMatrix, fake: RealMatrix) -> Result<Self> {
        if real.rows() != fake.rows() {
            return Err(Error::Pairing {
                real: real.rows(),
                fake: fake.rows(),
            });
        }
        if real.cols() != fake.cols() {
            return Err(Error::Shape(format!(
                "real rows have {} columns, fake rows {}",
                real.cols(),
                fake.cols()
            )));
        }
        Ok(PairedBatch { real, fake })
    }

    pub fn real(&self) -> &RealMatrix {
        &self.real
    }

    pub fn fake(&self) -> &RealMatrix {
        &self.fake
    }

    pub fn len(&self) -> usize {
        self.real.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.real.rows() == 0
    }
}

/// Loss components of one discriminator/generator step. Field names double
/// as metric-log columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: f64,
    pub r2: f64,
    pub gamma: f64,
    pub d_total: f64,
}

impl LossReport {
    pub fn is_consistent(&self) -> bool {
        let expected = self.d_loss + 0.5 * self.gamma * (self.r1 + self.r2);
        self.r1 >= 0.0
            && self.r2 >= 0.0
            && (self.d_total - expected).abs() <= 1e-12 * expected.abs().max(1.0)
    }
}

fn check_pair_lengths(d_real: &[f64], d_fake: &[f64]) -> Result<()> {
    if d_real.len() != d_fake.len() {
        return Err(Error::Pairing {
            real: d_real.len(),
            fake: d_fake.len(),
        });
    }
    if d_real.is_empty() {
        return Err(Error::Contract(
            "pairing loss needs at least one pair".into(),
        ));
    }
    Ok(())
}

/// `mean_i softplus(d_fake[i] - d_real[i])`
pub fn rpgan_discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    check_pair_lengths(d_real, d_fake)?;
    let sum: f64 = d_real
        .iter()
        .zip(d_fake)
        .map(|(r, f)| softplus(f - r))
        .sum();
    Ok(sum / d_real.len() as f64)
}

/// `mean_i softplus(d_real[i] - d_fake[i])`
pub fn rpgan_generator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    rpgan_discriminator_loss(d_fake, d_real)
}

/// Mean squared input-gradient norm of `d` on `batch` and its parameter
/// gradient. R1 when `batch` holds real rows, R2 for fake rows. The caller
/// applies the `gamma / 2` weight.
pub fn zero_centered_penalty(d: &MlpNetwork, batch: &RealMatrix) -> Result<(f64, GradientBundle)> {
    diff::penalty_param_gradients(d, batch)
}

/// Gradient of `d_total` with respect to the discriminator's parameters.
/// The returned report has `g_loss` evaluated on the same scores.
pub fn discriminator_step_gradients(
    d: &MlpNetwork,
    pair: &PairedBatch,
    gamma: f64,
) -> Result<(LossReport, GradientBundle)> {
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!(
            "gamma must be non-negative, got {gamma}"
        )));
    }
    let d_real = diff::scores(d, pair.real())?;
    let d_fake = diff::scores(d, pair.fake())?;
    let d_loss = rpgan_discriminator_loss(&d_real, &d_fake)?;
    let g_loss = rpgan_generator_loss(&d_real, &d_fake)?;

    let n = d_real.len() as f64;
    // d/d(d_fake_i) softplus(d_fake_i - d_real_i) / n = sigma(d_fake_i - d_real_i) / n
    let w: Vec<f64> = d_real
        .iter()
        .zip(&d_fake)
        .map(|(r, f)| sigmoid(f - r) / n)
        .collect();
    let neg_w: Vec<f64> = w.iter().map(|v| -v).collect();
    let mut grads = diff::param_gradients(d, pair.fake(), &w)?;
    grads.add_scaled(&diff::param_gradients(d, pair.real(), &neg_w)?, 1.0);

    let (r1, r2) = if gamma > 0.0 {
        let (r1, g1) = zero_centered_penalty(d, pair.real())?;
        let (r2, g2) = zero_centered_penalty(d, pair.fake())?;
        grads.add_scaled(&g1, 0.5 * gamma);
        grads.add_scaled(&g2, 0.5 * gamma);
        (r1, r2)
    } else {
        // Still reported in the log, but they carry no gradient at gamma = 0.
        (
            zero_centered_penalty(d, pair.real())?.0,
            zero_centered_penalty(d, pair.fake())?.0,
        )
    };

    let report = LossReport {
        d_loss,
        g_loss,
        r1,
        r2,
        gamma,
        d_total: d_loss + 0.5 * gamma * (r1 + r2),
    };
    Ok((report, grads))
}

/// Gradient of the generator's pairing loss with respect to `g`'s
/// parameters, backpropagated through a frozen `d`.
pub fn generator_step_gradients(
    g: &MlpNetwork,
    d: &MlpNetwork,
    noise: &RealMatrix,
    real_samples: &RealMatrix,
) -> Result<(f64, GradientBundle)> {
    if noise.rows() != real_samples.rows() {
        return Err(Error::Shape(format!(
            "{} noise rows for {} real rows",
            noise.rows(),
            real_samples.rows()
        )));
    }
    if g.output_width() != d.input_width() {
        return Err(Error::Shape(format!(
            "generator emits {} values but the discriminator reads {}",
            g.output_width(),
            d.input_width()
        )));
    }
    let fake = diff::forward(g, noise)?;
    let d_real = diff::scores(d, real_samples)?;
    let d_fake = diff::scores(d, &fake)?;
    let g_loss = rpgan_generator_loss(&d_real, &d_fake)?;

    let n = d_real.len() as f64;
    // d/d(d_fake_i) softplus(d_real_i - d_fake_i) / n = -sigma(d_real_i - d_fake_i) / n
    let upstream: Vec<f64> = d_real
        .iter()
        .zip(&d_fake)
        .map(|(r, f)| -sigmoid(r - f) / n)
        .collect();
    let upstream = RealMatrix::new(upstream.len(), 1, upstream)?;
    let (_, d_wrt_fake) = diff::backward(d, &fake, &upstream)?;
    let (grads, _) = diff::backward(g, noise, &d_wrt_fake)?;
    Ok((g_loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Activation, Layer};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn rows(m: &[&[f64]]) -> RealMatrix {
        RealMatrix::from_rows(&m.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn linear(w: &[f64], b: f64) -> MlpNetwork {
        MlpNetwork::new(vec![Layer {
            weights: RealMatrix::new(1, w.len(), w.to_vec()).unwrap(),
            bias: vec![b],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> RealMatrix {
        RealMatrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    fn tanh_net(rng: &mut ChaCha8Rng, dims: &[usize]) -> MlpNetwork {
        MlpNetwork::init(dims, Activation::Tanh, Activation::Identity, rng).unwrap()
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - LN2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        // ln(1 + e^-10)
        assert!((softplus(-10.0) - 4.539889921686e-5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn discriminator_loss_examples() {
        let v = [0.3, -2.0, 5.5];
        assert!((rpgan_discriminator_loss(&v, &v).unwrap() - LN2).abs() < 1e-15);
        let l = rpgan_discriminator_loss(&[10.0], &[0.0]).unwrap();
        assert!((l - 4.5399e-5).abs() < 1e-8);
        assert!(matches!(
            rpgan_discriminator_loss(&[1.0, 2.0], &[1.0]),
            Err(Error::Pairing { real: 2, fake: 1 })
        ));
        assert!(rpgan_discriminator_loss(&[], &[]).is_err());
    }

    #[test]
    fn generator_loss_examples() {
        // ln(1 + e^2)
        assert!((rpgan_generator_loss(&[2.0], &[0.0]).unwrap() - 2.126928011).abs() < 1e-9);
        assert!((rpgan_generator_loss(&[1.0, -1.0], &[1.0, -1.0]).unwrap() - LN2).abs() < 1e-15);
    }

    #[test]
    fn penalty_examples() {
        let d = linear(&[3.0, 4.0], -1.0);
        let (v, _) = zero_centered_penalty(&d, &rows(&[&[0.1, 0.2], &[5.0, -3.0]])).unwrap();
        assert_eq!(v, 25.0);
        let z = linear(&[0.0, 0.0], 2.0);
        assert_eq!(
            zero_centered_penalty(&z, &rows(&[&[0.1, 0.2]])).unwrap().0,
            0.0
        );
    }

    #[test]
    fn pairing_requires_matching_batches() {
        let a = rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let b = rows(&[&[0.0, 1.0]]);
        assert!(matches!(
            PairedBatch::new(a.clone(), b),
            Err(Error::Pairing { .. })
        ));
        let c = rows(&[&[0.0], &[1.0]]);
        assert!(matches!(PairedBatch::new(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn discriminator_step_without_penalty() {
        // Equal scores on every pair: the real and fake rows coincide.
        let x = rows(&[&[0.5, -0.5], &[1.0, 2.0]]);
        let d = linear(&[0.7, -0.2], 0.1);
        let pair = PairedBatch::new(x.clone(), x.clone()).unwrap();
        let (rep, grads) = discriminator_step_gradients(&d, &pair, 0.0).unwrap();
        assert!((rep.d_total - LN2).abs() < 1e-15);
        assert!(rep.is_consistent());
        // Fake and real contributions cancel exactly.
        assert!(grads.max_abs() < 1e-15);
    }

    #[test]
    fn penalty_vanishes_for_flat_discriminator() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = linear(&[0.0, 0.0], 0.3);
        let pair =
            PairedBatch::new(rand_matrix(&mut rng, 3, 2), rand_matrix(&mut rng, 3, 2)).unwrap();
        let (with, g_with) = discriminator_step_gradients(&d, &pair, 10.0).unwrap();
        let (without, g_without) = discriminator_step_gradients(&d, &pair, 0.0).unwrap();
        assert_eq!(with.r1, 0.0);
        assert_eq!(with.r2, 0.0);
        assert_eq!(with.d_total, without.d_total);
        assert_eq!(g_with, g_without);
    }

    #[test]
    fn negative_gamma_rejected() {
        let d = linear(&[1.0], 0.0);
        let pair = PairedBatch::new(rows(&[&[1.0]]), rows(&[&[0.0]])).unwrap();
        assert!(discriminator_step_gradients(&d, &pair, -1.0).is_err());
    }

    fn d_total(d: &MlpNetwork, pair: &PairedBatch, gamma: f64) -> Result<f64> {
        // Oracle: first-order quantities only.
        let r = diff::scores(d, pair.real())?;
        let f = diff::scores(d, pair.fake())?;
        let sq = |m: &RealMatrix| -> f64 {
            m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.rows() as f64
        };
        let r1 = sq(&diff::input_gradient(d, pair.real())?);
        let r2 = sq(&diff::input_gradient(d, pair.fake())?);
        Ok(rpgan_discriminator_loss(&r, &f)? + 0.5 * gamma * (r1 + r2))
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let d = tanh_net(&mut rng, &[3, 6, 4, 1]);
            let pair =
                PairedBatch::new(rand_matrix(&mut rng, 4, 3), rand_matrix(&mut rng, 4, 3)).unwrap();
            let gamma = rng.gen_range(0.0..5.0);
            let (rep, grads) = discriminator_step_gradients(&d, &pair, gamma).unwrap();
            assert!((rep.d_total - d_total(&d, &pair, gamma).unwrap()).abs() < 1e-12);
            let numeric =
                diff::numeric_param_gradient(&d, 1e-5, |n| d_total(n, &pair, gamma)).unwrap();
            for (a, n) in grads.flatten().iter().zip(&numeric) {
                assert!(diff::relative_error(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let g = tanh_net(&mut rng, &[2, 5, 3]);
            let d = tanh_net(&mut rng, &[3, 6, 1]);
            let z = rand_matrix(&mut rng, 4, 2);
            let real = rand_matrix(&mut rng, 4, 3);
            let (_, grads) = generator_step_gradients(&g, &d, &z, &real).unwrap();
            let numeric = diff::numeric_param_gradient(&g, 1e-5, |gn| {
                let fake = diff::forward(gn, &z)?;
                rpgan_generator_loss(&diff::scores(&d, &real)?, &diff::scores(&d, &fake)?)
            })
            .unwrap();
            for (a, n) in grads.flatten().iter().zip(&numeric) {
                assert!(diff::relative_error(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn generator_against_constant_discriminator() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = tanh_net(&mut rng, &[2, 4, 2]);
        let d = linear(&[0.0, 0.0], 0.0);
        let (loss, grads) = generator_step_gradients(
            &g,
            &d,
            &rand_matrix(&mut rng, 3, 2),
            &rand_matrix(&mut rng, 3, 2),
        )
        .unwrap();
        assert!((loss - LN2).abs() < 1e-15);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn generator_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = tanh_net(&mut rng, &[2, 4, 3]);
        let d = linear(&[1.0, 1.0], 0.0);
        let z = rand_matrix(&mut rng, 3, 2);
        assert!(generator_step_gradients(&g, &d, &z, &rand_matrix(&mut rng, 3, 2)).is_err());
        let g2 = tanh_net(&mut rng, &[2, 4, 2]);
        assert!(generator_step_gradients(&g2, &d, &z, &rand_matrix(&mut rng, 2, 2)).is_err());
    }

    #[test]
    fn generator_loss_ignores_discriminator_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = tanh_net(&mut rng, &[2, 4, 2]);
        let d = tanh_net(&mut rng, &[2, 5, 1]);
        let z = rand_matrix(&mut rng, 5, 2);
        let real = rand_matrix(&mut rng, 5, 2);
        let mut shifted = d.clone();
        let last = shifted.layers().len() - 1;
        shifted.layers_mut()[last].bias[0] += 3.7;
        let (a, ga) = generator_step_gradients(&g, &d, &z, &real).unwrap();
        let (b, gb) = generator_step_gradients(&g, &shifted, &z, &real).unwrap();
        assert!((a - b).abs() < 1e-12);
        for (x, y) in ga.flatten().iter().zip(gb.flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn losses_shift_invariant_and_swap(
            pairs in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 1..12),
            c in -50.0f64..50.0,
        ) {
            let (r, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let rs: Vec<f64> = r.iter().map(|v| v + c).collect();
            let fs: Vec<f64> = f.iter().map(|v| v + c).collect();
            let d0 = rpgan_discriminator_loss(&r, &f).unwrap();
            let d1 = rpgan_discriminator_loss(&rs, &fs).unwrap();
            prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1.0));
            let g0 = rpgan_generator_loss(&r, &f).unwrap();
            prop_assert_eq!(g0, rpgan_discriminator_loss(&f, &r).unwrap());
            prop_assert!(d0 > 0.0 && g0 > 0.0);
        }
    }
}
