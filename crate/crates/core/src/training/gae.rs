//! Generalized advantage estimation.

use crate::error::{Error, Result};

/// Advantages and returns for one sequence. `dones[t]` marks the last step of
/// an episode: nothing is bootstrapped across it. `last_value` is the value
/// of the state following the final step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Dimension(format!(
            "gae inputs differ in length: rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct sum over n-step TD residuals, truncated at the first done.
    fn brute_force(r: &[f64], v: &[f64], d: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let value_at = |k: usize| if k == n { last } else { v[k] };
        (0..n)
            .map(|t| {
                let mut a = 0.0;
                for k in t..n {
                    let boot = if d[k] { 0.0 } else { value_at(k + 1) };
                    let delta = r[k] + g * boot - v[k];
                    a += (g * l).powi((k - t) as i32) * delta;
                    if d[k] {
                        break;
                    }
                }
                a
            })
            .collect()
    }

    #[test]
    fn single_step() {
        let (a, ret) = compute_gae(&[1.0], &[0.0], &[false], 0.0, 0.985, 0.95).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn two_steps_hand_value() {
        let (a, _) = compute_gae(&[0.0, 1.0], &[0.0, 0.0], &[false, false], 0.0, 0.985, 0.95).unwrap();
        assert!((a[1] - 1.0).abs() < 1e-15);
        assert!((a[0] - 0.93575).abs() < 1e-12);
    }

    #[test]
    fn done_blocks_bootstrap() {
        let r = [5.0, -3.0, 1.0, 0.5];
        let v = [0.2, 0.1, 0.4, 0.3];
        let (a, _) = compute_gae(&r, &v, &[false, true, false, false], 0.7, 0.985, 0.95).unwrap();
        let r2 = [-100.0, 42.0, 1.0, 0.5];
        let (b, _) = compute_gae(&r2, &v, &[false, true, false, false], 0.7, 0.985, 0.95).unwrap();
        assert_eq!(a[2..], b[2..]);
    }

    #[test]
    fn length_mismatch() {
        assert!(compute_gae(&[1.0], &[0.0, 1.0], &[false], 0.0, 0.9, 0.9).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            steps in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, prop::bool::weighted(0.25)), 1..=8),
            last in -5.0f64..5.0,
            gamma in 0.5f64..1.0,
            lambda in 0.0f64..1.0,
        ) {
            let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
            let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
            let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
            let (a, ret) = compute_gae(&r, &v, &d, last, gamma, lambda).unwrap();
            let oracle = brute_force(&r, &v, &d, last, gamma, lambda);
            for t in 0..r.len() {
                prop_assert!((a[t] - oracle[t]).abs() <= 1e-12);
                prop_assert!((ret[t] - a[t] - v[t]).abs() <= 1e-12);
            }
        }
    }
}
