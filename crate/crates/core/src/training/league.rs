//! Opponent pool: the learner's own checkpoint history plus a fixed roster.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeagueConfig {
    /// Power-law exponent of the checkpoint sampler.
    pub alpha: f64,
    /// Probability that an opponent slot draws from the checkpoint history.
    pub self_play_prob: f64,
    pub checkpoint_every: usize,
}

impl Default for LeagueConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            self_play_prob: 0.75,
            checkpoint_every: 100,
        }
    }
}

impl LeagueConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("league.alpha", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.self_play_prob) {
            return Err(Error::config("league.self_play_prob", "must lie in [0, 1]"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("league.checkpoint_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// `P(k) = k^alpha / sum_j j^alpha` for `k` in `1..=count`.
pub fn checkpoint_probabilities(count: usize, alpha: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=count).map(|k| (k as f64).powf(alpha)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Draws a 1-based checkpoint index; `count` is the most recent.
pub fn sample_checkpoint_index<R: Rng + ?Sized>(count: usize, alpha: f64, rng: &mut R) -> usize {
    assert!(count >= 1, "checkpoint history is empty");
    let dist = WeightedIndex::new((1..=count).map(|k| (k as f64).powf(alpha))).expect("positive weights");
    dist.sample(rng) + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpponentHandle {
    /// A frozen copy of the learner as of this iteration.
    Current,
    /// 1-based index into the checkpoint history.
    History(usize),
    Roster(usize),
}

#[derive(Clone, Debug, Default)]
pub struct LeaguePool {
    history: Vec<Arc<Policy<f32>>>,
    roster: Vec<Arc<Policy<f32>>>,
}

impl LeaguePool {
    pub fn new(roster: Vec<Policy<f32>>) -> Self {
        Self {
            history: Vec::new(),
            roster: roster.into_iter().map(Arc::new).collect(),
        }
    }

    pub fn push_checkpoint(&mut self, policy: Policy<f32>) {
        self.history.push(Arc::new(policy));
    }

    pub fn history(&self) -> &[Arc<Policy<f32>>] {
        &self.history
    }

    pub fn roster(&self) -> &[Arc<Policy<f32>>] {
        &self.roster
    }

    pub fn get(&self, handle: OpponentHandle) -> Option<&Arc<Policy<f32>>> {
        match handle {
            OpponentHandle::Current => None,
            OpponentHandle::History(k) => self.history.get(k - 1),
            OpponentHandle::Roster(r) => self.roster.get(r),
        }
    }
}

/// One handle per opponent slot, each drawn independently.
pub fn assign_opponents<R: Rng + ?Sized>(
    pool: &LeaguePool,
    n_opponents: usize,
    cfg: &LeagueConfig,
    rng: &mut R,
) -> Vec<OpponentHandle> {
    let (k, r) = (pool.history.len(), pool.roster.len());
    (0..n_opponents)
        .map(|_| {
            let from_history = match (k, r) {
                (0, 0) => return OpponentHandle::Current,
                (_, 0) => true,
                (0, _) => false,
                _ => rng.random::<f64>() < cfg.self_play_prob,
            };
            if from_history {
                OpponentHandle::History(sample_checkpoint_index(k, cfg.alpha, rng))
            } else {
                OpponentHandle::Roster(rng.random_range(0..r))
            }
        })
        .collect()
}
