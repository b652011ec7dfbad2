//! Clipped-surrogate PPO update over recurrent minibatches.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::rollout::{RolloutBuffer, Segment};
use crate::error::{Error, Result};
use crate::policy::distribution::{gaussian_entropy, squashed_log_prob};
use crate::policy::{FlatTensors, Policy, Real, ACTION_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Truncated backpropagation window, steps.
    pub segment_len: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Fraction of training over which the learning rate decays.
    pub lr_decay_fraction: f64,
    pub n_envs: usize,
    pub rollout_steps: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.985,
            gae_lambda: 0.95,
            clip_range: 0.2,
            entropy_coef: 0.001,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            epochs: 10,
            minibatches: 8,
            segment_len: 32,
            lr_start: 3e-4,
            lr_end: 5e-5,
            lr_decay_fraction: 0.5,
            n_envs: 144,
            rollout_steps: 250,
            iterations: 5500,
            adam: AdamConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(name, "must lie in [0, 1]"))
            }
        };
        unit(self.gamma, "ppo.gamma")?;
        unit(self.gae_lambda, "ppo.gae_lambda")?;
        unit(self.lr_decay_fraction, "ppo.lr_decay_fraction")?;
        if !(self.clip_range > 0.0) {
            return Err(Error::config("ppo.clip_range", "must be positive"));
        }
        for (v, name) in [
            (self.entropy_coef, "ppo.entropy_coef"),
            (self.value_coef, "ppo.value_coef"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        for (v, name) in [
            (self.max_grad_norm, "ppo.max_grad_norm"),
            (self.lr_start, "ppo.lr_start"),
            (self.lr_end, "ppo.lr_end"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        for (v, name) in [
            (self.epochs, "ppo.epochs"),
            (self.minibatches, "ppo.minibatches"),
            (self.segment_len, "ppo.segment_len"),
            (self.n_envs, "ppo.n_envs"),
            (self.rollout_steps, "ppo.rollout_steps"),
            (self.iterations, "ppo.iterations"),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Learner transitions per iteration.
    pub fn batch_size(&self) -> usize {
        self.n_envs * self.rollout_steps
    }

    pub fn total_interactions(&self) -> usize {
        self.batch_size() * self.iterations
    }

    /// Linear from `lr_start` to `lr_end` over the decay window, then flat.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let window = self.lr_decay_fraction * self.iterations as f64;
        let x = if window > 0.0 {
            (iteration as f64 / window).min(1.0)
        } else {
            1.0
        };
        self.lr_start + (self.lr_end - self.lr_start) * x
    }
}

/// Per-sample clipped objective as a loss, with its derivative in the ratio.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (-unclipped, -advantage)
    } else {
        (-clipped, 0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatch_updates: usize,
}

/// Runs all epochs over a finished buffer.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy<f32>,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats> {
    let mut segments = buf.segments();
    let n_mb = cfg.minibatches.min(segments.len()).max(1);
    let mut stats = UpdateStats::default();
    for epoch in 0..cfg.epochs {
        segments.shuffle(rng);
        for mb in 0..n_mb {
            let lo = mb * segments.len() / n_mb;
            let hi = (mb + 1) * segments.len() / n_mb;
            let mut groups: Vec<Vec<Segment>> = Vec::new();
            for &sg in &segments[lo..hi] {
                let len = buf.segment_steps(sg);
                match groups.iter_mut().find(|g| buf.segment_steps(g[0]) == len) {
                    Some(g) => g.push(sg),
                    None => groups.push(vec![sg]),
                }
            }
            let adv_raw: Vec<f64> = segments[lo..hi]
                .iter()
                .flat_map(|&sg| {
                    let t0 = sg.index * buf.segment_len();
                    (t0..t0 + buf.segment_steps(sg)).map(move |t| (sg.seq, t))
                })
                .filter(|&(s, t)| buf.row(s, t).is_some_and(|r| r.valid))
                .map(|(s, t)| buf.advantage(s, t))
                .collect();
            if adv_raw.is_empty() {
                continue;
            }
            let n = adv_raw.len() as f64;
            let mean_adv = adv_raw.iter().sum::<f64>() / n;
            let std_adv = (adv_raw.iter().map(|a| (a - mean_adv).powi(2)).sum::<f64>() / n).sqrt();

            let log_std = policy.log_std();
            let inv_var: [f64; ACTION_DIM] = log_std.map(|ls| (-2.0 * ls).exp());
            let mut grad = FlatTensors::<f32>::zeros(policy.layout().clone());
            let mut d_ls = [0.0f64; ACTION_DIM];
            let (mut pl, mut vl, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0.0);
            for group in &groups {
                let (batch, origin) = buf.batch(group, policy.hidden())?;
                let (out, tape) = policy.forward(&batch)?;
                let total_rows = batch.steps * batch.batch;
                let mut d_mean = Array2::<f32>::zeros((total_rows, ACTION_DIM));
                let mut d_value = Array1::<f32>::zeros(total_rows);
                for (r, o) in origin.iter().enumerate() {
                    let Some((s, t)) = *o else { continue };
                    let row = buf.row(s, t).expect("full buffer");
                    let adv = (buf.advantage(s, t) - mean_adv) / (std_adv + 1e-8);
                    let mean: [f64; ACTION_DIM] = std::array::from_fn(|k| out.mean[(r, k)].f64());
                    let logp = squashed_log_prob(&row.u, &mean, &log_std);
                    let log_ratio = logp - row.log_prob;
                    let ratio = log_ratio.exp();
                    let (loss, d_ratio) = clipped_surrogate(ratio, adv, cfg.clip_range);
                    pl += loss / n;
                    kl += (ratio - 1.0 - log_ratio) / n;
                    if (ratio - 1.0).abs() > cfg.clip_range {
                        clipped += 1.0 / n;
                    }
                    let d_logp = d_ratio * ratio / n;
                    for k in 0..ACTION_DIM {
                        let diff = row.u[k] - mean[k];
                        d_mean[(r, k)] = (d_logp * diff * inv_var[k]) as f32;
                        d_ls[k] += d_logp * (diff * diff * inv_var[k] - 1.0);
                    }
                    let v_err = out.value[r].f64() - buf.ret(s, t);
                    vl += v_err * v_err / n;
                    d_value[r] = (cfg.value_coef * 2.0 * v_err / n) as f32;
                }
                let no_ls = Array1::<f32>::zeros(ACTION_DIM);
                grad.add_assign(&policy.backward(&tape, d_mean.view(), no_ls.view(), d_value.view())?);
            }
            let entropy = gaussian_entropy(&log_std);
            let loss = pl + cfg.value_coef * vl - cfg.entropy_coef * entropy;
            if !loss.is_finite() {
                return Err(Error::Loss {
                    epoch,
                    minibatch: mb,
                    detail: format!("policy {pl}, value {vl}, entropy {entropy}"),
                });
            }
            let ls_id = policy.network().log_std;
            for (g, d) in grad.slice_mut(ls_id).iter_mut().zip(d_ls) {
                *g += (d - cfg.entropy_coef) as f32;
            }
            let norm = grad.norm().f64();
            if !norm.is_finite() {
                return Err(Error::Loss {
                    epoch,
                    minibatch: mb,
                    detail: "non-finite gradient".into(),
                });
            }
            if norm > cfg.max_grad_norm {
                grad.scale(f32::of(cfg.max_grad_norm / norm));
            }
            policy.update_params(|p| adam.apply(p.as_mut_slice(), grad.as_slice(), lr));

            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.entropy += entropy;
            stats.approx_kl += kl;
            stats.clip_fraction += clipped;
            stats.grad_norm += norm;
            stats.minibatch_updates += 1;
        }
    }
    let m = stats.minibatch_updates.max(1) as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.approx_kl /= m;
    stats.clip_fraction /= m;
    stats.grad_norm /= m;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let c = PpoConfig::default();
        assert_eq!((c.gamma, c.gae_lambda, c.clip_range, c.entropy_coef), (0.985, 0.95, 0.2, 0.001));
        assert_eq!((c.epochs, c.n_envs, c.rollout_steps, c.iterations), (10, 144, 250, 5500));
        assert_eq!(c.batch_size(), 36_000);
        assert_eq!(c.total_interactions(), 198_000_000);
    }

    #[test]
    fn learning_rate_schedule() {
        let c = PpoConfig::default();
        assert!((c.learning_rate(0) - 3e-4).abs() < 1e-18);
        assert!((c.learning_rate(2750) - 5e-5).abs() < 1e-18);
        assert_eq!(c.learning_rate(4000), c.learning_rate(5500));
        let mid = c.learning_rate(1375);
        assert!((mid - 1.75e-4).abs() < 1e-15);
        // Continuity at the knee.
        assert!((c.learning_rate(2749) - 5e-5).abs() < 1e-7);
    }

    #[test]
    fn surrogate_at_unit_ratio() {
        assert_eq!(clipped_surrogate(1.0, 0.0, 0.2), (0.0, 0.0));
        assert_eq!(clipped_surrogate(1.0, 2.0, 0.2), (-2.0, -2.0));
    }

    #[test]
    fn surrogate_clipping_on_one_parameter_toy() {
        // Ratio exp(theta) with positive advantage: beyond 1 + clip the loss
        // sits at the boundary value and the slope vanishes.
        let adv = 1.5;
        let loss = |theta: f64| clipped_surrogate(theta.exp(), adv, 0.2).0;
        let theta = 1.4f64.ln();
        assert!((loss(theta) + 1.2 * adv).abs() < 1e-12);
        let (_, d) = clipped_surrogate(theta.exp(), adv, 0.2);
        assert_eq!(d, 0.0);
        // Inside the band the slope matches a finite difference.
        let theta = 0.05;
        let h = 1e-6;
        let fd = (loss(theta + h) - loss(theta - h)) / (2.0 * h);
        let (_, d) = clipped_surrogate(theta.exp(), adv, 0.2);
        assert!((fd - d * theta.exp()).abs() < 1e-8);
        // Negative advantage is clipped from below.
        let (l, d) = clipped_surrogate(0.5, -1.0, 0.2);
        assert_eq!((l, d), (0.8, 0.0));
    }
}
