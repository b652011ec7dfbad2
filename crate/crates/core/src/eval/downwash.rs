//! Concentric-circle flights of a lower agent beneath a blind upper agent.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean, std_dev};
use crate::env::{EnvSetup, RaceEnv, Task};
use crate::error::{Error, Result};
use crate::policy::{Features, Policy, RecurrentState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "delay", rename_all = "lowercase")]
pub enum DownwashCondition {
    /// Lower agent alone.
    Solo,
    /// Upper agent starts ahead by this many seconds of travel.
    Delay(f64),
}

impl DownwashCondition {
    pub fn label(&self) -> String {
        match self {
            DownwashCondition::Solo => "solo".into(),
            DownwashCondition::Delay(d) => format!("{d}s"),
        }
    }
}

/// Per-tick trace of one flight. `gap` is the upper agent's angle minus the
/// lower agent's, wrapped to (-π, π]; negative values mean the lower agent
/// leads. Upper-agent series are empty in solo flights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlightTrace {
    pub time: Vec<f64>,
    pub lower_z: Vec<f64>,
    pub upper_z: Vec<f64>,
    pub gap: Vec<f64>,
    /// The lower agent flew until the time limit.
    pub survived: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub variant: String,
    pub condition: DownwashCondition,
    pub flights: Vec<FlightTrace>,
    /// Median over flights of the mean gap in each flight's last second.
    pub median_final_gap: Option<f64>,
    pub final_gap_std: Option<f64>,
    /// Mean absolute deviation of the lower agent from its circle altitude.
    pub mean_altitude_error: f64,
    pub altitude_error_std: f64,
    pub survival: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownwashReport {
    pub conditions: Vec<ConditionReport>,
}

impl DownwashReport {
    pub fn get(&self, variant: &str, condition: DownwashCondition) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.variant == variant && c.condition == condition)
    }
}

fn wrap(a: f64) -> f64 {
    let x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x - 2.0 * PI
    } else {
        x
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Flies one circle episode with both agents under `policy`.
pub fn fly(policy: &Policy<f32>, setup: &EnvSetup, condition: DownwashCondition, seed: u64) -> Result<FlightTrace> {
    let Task::Circle(task) = &setup.env.task else {
        return Err(Error::config("env.task", "the wake experiment needs the circle task"));
    };
    let mut s = setup.clone();
    s.env.n_agents = 2;
    let mut env = RaceEnv::new(s, seed)?;
    let (delay, present) = match condition {
        DownwashCondition::Solo => (0.0, false),
        DownwashCondition::Delay(d) => (d, true),
    };
    env.reset_circle(task, Some(delay), Some(present))?;
    let bounds = env.action_bounds();
    let norm = &policy.config().normalization;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = vec![RecurrentState::zeros(policy.hidden()); 2];
    let mut trace = FlightTrace::default();
    loop {
        let racing: Vec<usize> = (0..2).filter(|&i| env.agents()[i].is_racing()).collect();
        let mut commands: Vec<_> = env.agents().iter().map(|a| a.last_command).collect();
        if !racing.is_empty() {
            let feats: Vec<Features> = racing.iter().map(|&i| norm.features(&env.observe(i))).collect();
            let refs: Vec<&Features> = feats.iter().collect();
            let mut st: Vec<RecurrentState<f32>> = racing.iter().map(|&i| states[i].clone()).collect();
            let out = policy.act_features(&refs, &mut st, &mut rng, true)?;
            for ((&i, s), a) in racing.iter().zip(st).zip(&out.samples) {
                states[i] = s;
                commands[i] = bounds.to_command(&a.action);
            }
        }
        let step = env.step(&commands)?;
        let lower_done = step.outcomes[0].done;
        // After the last tick the env has already been reset.
        if step.summary.is_none() && env.agents()[0].is_racing() {
            let (lo, up) = (&env.agents()[0].state.position, &env.agents()[1].state.position);
            trace.time.push(env.time());
            trace.lower_z.push(lo.z);
            if present {
                trace.upper_z.push(up.z);
                trace.gap.push(wrap(task.angle_of(up) - task.angle_of(lo)));
            }
        }
        if lower_done {
            trace.survived = step.outcomes[0].truncated;
        }
        if step.summary.is_some() || lower_done {
            break;
        }
    }
    Ok(trace)
}

fn condition_report(
    variant: &str,
    condition: DownwashCondition,
    flights: Vec<FlightTrace>,
    altitude: f64,
    control_hz: f64,
) -> ConditionReport {
    let last = control_hz.round().max(1.0) as usize;
    let finals: Vec<f64> = flights
        .iter()
        .filter(|f| !f.gap.is_empty())
        .map(|f| mean(&f.gap[f.gap.len().saturating_sub(last)..]))
        .collect();
    let alt_err: Vec<f64> = flights
        .iter()
        .filter(|f| !f.lower_z.is_empty())
        .map(|f| mean(&f.lower_z.iter().map(|z| (z - altitude).abs()).collect::<Vec<_>>()))
        .collect();
    let survival = flights.iter().filter(|f| f.survived).count() as f64 / flights.len().max(1) as f64;
    ConditionReport {
        variant: variant.into(),
        condition,
        median_final_gap: median(finals.clone()),
        final_gap_std: (!finals.is_empty()).then(|| std_dev(&finals)),
        mean_altitude_error: mean(&alt_err),
        altitude_error_std: std_dev(&alt_err),
        survival,
        flights,
    }
}

/// Flies `flights` episodes per policy variant and condition.
pub fn run_downwash_experiment(
    variants: &[(&str, &Policy<f32>)],
    setup: &EnvSetup,
    conditions: &[DownwashCondition],
    flights: usize,
    seed: u64,
) -> Result<DownwashReport> {
    let Task::Circle(task) = &setup.env.task else {
        return Err(Error::config("env.task", "the wake experiment needs the circle task"));
    };
    let mut out = Vec::new();
    for (v, (name, policy)) in variants.iter().enumerate() {
        for (c, &cond) in conditions.iter().enumerate() {
            let traces: Vec<FlightTrace> = (0..flights)
                .into_par_iter()
                .map(|f| fly(policy, setup, cond, seed ^ ((v as u64) << 40) ^ ((c as u64) << 20) ^ f as u64))
                .collect::<Result<_>>()?;
            out.push(condition_report(name, cond, traces, task.altitude, setup.env.control_rate_hz));
        }
    }
    Ok(DownwashReport { conditions: out })
}
