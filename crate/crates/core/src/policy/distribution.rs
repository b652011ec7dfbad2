//! Diagonal Gaussian in pre-squash space; actions are `tanh(u)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ACTION_DIM: usize = 4;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation at large |u|.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&x, &m), &ls)| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Density of `a = tanh(u)` evaluated through its pre-image `u`.
pub fn squashed_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    gaussian_log_prob(u, mean, log_std) - u.iter().map(|&x| log_one_minus_tanh_sq(x)).sum::<f64>()
}

/// Entropy of the pre-squash Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|&ls| ls + 0.5 + HALF_LN_2PI).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionSample {
    pub u: [f64; ACTION_DIM],
    pub action: [f64; ACTION_DIM],
    pub log_prob: f64,
}

/// Draws `u ~ N(mean, exp(log_std)^2)`, or takes the mean when
/// `deterministic`.
pub fn sample_action<R: Rng + ?Sized>(
    mean: &[f64; ACTION_DIM],
    log_std: &[f64; ACTION_DIM],
    rng: &mut R,
    deterministic: bool,
) -> ActionSample {
    let mut u = *mean;
    if !deterministic {
        for k in 0..ACTION_DIM {
            let eps: f64 = StandardNormal.sample(rng);
            u[k] += log_std[k].exp() * eps;
        }
    }
    ActionSample {
        u,
        action: u.map(f64::tanh),
        log_prob: squashed_log_prob(&u, mean, log_std),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stable_log_det_matches_naive() {
        for &u in &[-3.0, -0.5, 0.0, 0.2, 1.7, 4.0] {
            let naive = (1.0 - f64::tanh(u).powi(2)).ln();
            assert!((log_one_minus_tanh_sq(u) - naive).abs() < 1e-12);
        }
        assert!(log_one_minus_tanh_sq(50.0).is_finite());
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = [0.3, -0.2, 1.1, 0.0];
        let log_std = [-0.5, -0.1, -1.0, 0.2];
        let s = sample_action(&mean, &log_std, &mut rng, false);
        // Independent evaluation: density of a = tanh(u) is N(u) / prod(1 - a^2).
        let mut expected = 0.0;
        for k in 0..4 {
            let sd = f64::exp(log_std[k]);
            let n = (-(s.u[k] - mean[k]).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            expected += (n / (1.0 - s.action[k].powi(2))).ln();
        }
        assert!((s.log_prob - expected).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_vanishing_std_give_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = [0.3, -0.2, 1.1, 0.0];
        let d = sample_action(&mean, &[0.0; 4], &mut rng, true);
        assert_eq!(d.u, mean);
        assert_eq!(d, sample_action(&mean, &[0.0; 4], &mut rng, true));
        let tiny = sample_action(&mean, &[-40.0; 4], &mut rng, false);
        for k in 0..4 {
            assert!((tiny.action[k] - mean[k].tanh()).abs() < 1e-15);
            assert!(tiny.action[k].abs() < 1.0);
        }
    }
}
