//! Shaped per-step reward and terminal penalties.

use serde::{Deserialize, Serialize};

use crate::dynamics::Vec3;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// λ1, progress toward the next gate.
    pub progress: f64,
    /// λ2, body-rate penalty.
    pub body_rate: f64,
    /// λ3, ranking reward.
    pub rank: f64,
    /// λ4, opponent proximity (also scales the inter-agent terminal penalty).
    pub proximity: f64,
    /// λ5, proximity exponent.
    pub proximity_exponent: f64,
    pub non_terminal_collision_prob: f64,
    pub terminal_offset: f64,
    /// Wall impact penalty per m/s.
    pub wall_scale: f64,
    /// Gate hit penalty per squared metre of traversal error.
    pub gate_scale: f64,
    /// Speed-tracking penalty per m/s of deviation, circle task only.
    pub speed_tracking: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            progress: 1.0,
            body_rate: 0.005,
            rank: 0.01,
            proximity: 0.01,
            proximity_exponent: 7.0,
            non_terminal_collision_prob: 0.10,
            terminal_offset: -1.0,
            wall_scale: 0.01,
            gate_scale: 1.0,
            speed_tracking: 0.05,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("reward.progress", self.progress),
            ("reward.body_rate", self.body_rate),
            ("reward.rank", self.rank),
            ("reward.proximity", self.proximity),
            ("reward.proximity_exponent", self.proximity_exponent),
            ("reward.wall_scale", self.wall_scale),
            ("reward.gate_scale", self.gate_scale),
            ("reward.speed_tracking", self.speed_tracking),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.non_terminal_collision_prob) {
            return Err(Error::config("reward.non_terminal_collision_prob", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// What the reward needs to know about one agent at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardSnapshot {
    /// Distance to the center of the gate targeted at the previous step.
    pub dist_to_gate: f64,
    pub body_rates: Vec3,
    pub speed: f64,
    pub rank: usize,
    pub nearest_opponent: Option<f64>,
    pub collision_radius: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub progress: f64,
    pub body_rate: f64,
    pub proximity: f64,
    pub rank: f64,
    /// Speed-tracking penalty, circle task only.
    #[serde(default)]
    pub tracking: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.progress - self.body_rate - self.proximity + self.rank - self.tracking
    }
}

pub fn progress_term(d_prev: f64, d_cur: f64, cfg: &RewardConfig) -> f64 {
    cfg.progress * (d_prev - d_cur)
}

pub fn body_rate_term(body_rates: &Vec3, cfg: &RewardConfig) -> f64 {
    cfg.body_rate * body_rates.norm()
}

pub fn rank_term(rank: usize, n_agents: usize, cfg: &RewardConfig) -> f64 {
    cfg.rank * (n_agents as f64 - (rank as f64 - 1.0)) / n_agents as f64
}

/// Proximity penalty; zero unless the nearest opponent is closer than twice
/// the collision radius.
pub fn proximity_term(d_opp: Option<f64>, speed: f64, d_col: f64, cfg: &RewardConfig) -> f64 {
    match d_opp {
        Some(d) if d < 2.0 * d_col => {
            let normalized = (d - d_col) / d_col;
            (cfg.proximity * speed + 1.0) * (-cfg.proximity_exponent * normalized).exp()
        }
        _ => 0.0,
    }
}

pub fn reward_terms(prev: &RewardSnapshot, cur: &RewardSnapshot, cfg: &RewardConfig, n_agents: usize) -> RewardTerms {
    RewardTerms {
        progress: progress_term(prev.dist_to_gate, cur.dist_to_gate, cfg),
        body_rate: body_rate_term(&cur.body_rates, cfg),
        proximity: proximity_term(cur.nearest_opponent, cur.speed, cur.collision_radius, cfg),
        rank: rank_term(cur.rank, n_agents, cfg),
        tracking: 0.0,
    }
}

/// Reward of a non-terminal step.
pub fn step_reward(prev: &RewardSnapshot, cur: &RewardSnapshot, cfg: &RewardConfig, n_agents: usize) -> f64 {
    reward_terms(prev, cur, cfg, n_agents).total()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TerminalEvent {
    Wall,
    Agent,
    Gate { error: f64 },
}

/// Penalty applied instead of the step reward on a collision step.
pub fn terminal_reward(event: TerminalEvent, speed: f64, cfg: &RewardConfig) -> f64 {
    match event {
        TerminalEvent::Wall => cfg.terminal_offset - cfg.wall_scale * speed,
        TerminalEvent::Agent => cfg.terminal_offset - cfg.proximity * speed,
        TerminalEvent::Gate { error } => cfg.terminal_offset - cfg.gate_scale * error * error,
    }
}
