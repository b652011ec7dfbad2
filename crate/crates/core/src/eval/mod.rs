//! Measurement protocols: self-evaluation, tournaments, value sweeps and the
//! wake interaction experiment.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvSetup, RaceEnv, TerminationCause};
use crate::error::{Error, Result};
use crate::policy::{Features, Policy, RecurrentState};
use crate::training::CauseCounts;

pub mod downwash;
pub mod sweep;
pub mod tournament;

pub use downwash::{run_downwash_experiment, DownwashCondition, DownwashReport, FlightTrace};
pub use sweep::{value_sweep, Scene, SweepGrid, ValueField};
pub use tournament::{run_tournament, MethodStats, TournamentReport};

/// Outcome of one agent in one race.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceResult {
    pub race: usize,
    pub agent: usize,
    /// Index of the controlling policy in the evaluated pool.
    pub policy: usize,
    pub slot: usize,
    pub gates_passed: usize,
    pub completion: f64,
    pub lap_times: Vec<f64>,
    pub finish_time: Option<f64>,
    pub cause: TerminationCause,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub races: usize,
    pub seed: u64,
    /// Act with the distribution mean instead of sampling.
    pub deterministic: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            races: 64,
            seed: 0,
            deterministic: true,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.races == 0 {
            return Err(Error::config("eval.races", "must be at least 1"));
        }
        Ok(())
    }
}

/// Fraction of the race completed, in [0, 1].
pub fn completion(gates_passed: usize, total_gates: usize) -> f64 {
    if total_gates == 0 {
        return 0.0;
    }
    (gates_passed as f64 / total_gates as f64).min(1.0)
}

/// Lap times from gate passage times. Laps are split at passages of the
/// first gate; the first lap starts at the start signal and the last one
/// ends at the finish. Only completed laps are reported.
pub fn lap_times(gate_times: &[f64], gates_per_lap: usize, laps: usize, finish_time: Option<f64>) -> Vec<f64> {
    if gates_per_lap == 0 {
        return Vec::new();
    }
    let mut bounds = vec![0.0];
    for k in 1..laps {
        match gate_times.get(k * gates_per_lap) {
            Some(&t) => bounds.push(t),
            None => break,
        }
    }
    if bounds.len() == laps {
        if let Some(t) = finish_time {
            bounds.push(t);
        }
    }
    bounds.windows(2).map(|w| w[1] - w[0]).collect()
}

/// The `k`-th permutation of `0..n` in lexicographic order.
pub fn nth_permutation(n: usize, mut k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let mut fact: Vec<usize> = vec![1; n.max(1)];
    for i in 1..n {
        fact[i] = fact[i - 1].saturating_mul(i);
    }
    let mut out = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let f = fact[i];
        let idx = (k / f).min(pool.len() - 1);
        k %= f;
        out.push(pool.remove(idx));
    }
    out
}

/// Start slot of each agent in race `race`. Cycles through all slot
/// permutations when there are no more of them than races, otherwise draws
/// a seeded permutation per race.
pub fn slot_assignment(n: usize, race: usize, races: usize, seed: u64) -> Vec<usize> {
    let count = (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k));
    match count {
        Some(c) if c <= races => nth_permutation(n, race % c),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(race as u64 + 1);
            let mut s: Vec<usize> = (0..n).collect();
            s.shuffle(&mut rng);
            s
        }
    }
}

fn race_setup(setup: &EnvSetup, n: usize) -> EnvSetup {
    let mut s = setup.clone();
    s.env.n_agents = n;
    s.env.buffer.seed_states = 0;
    s
}

/// Runs one race from the start grid. `policies[i]` controls agent `i`,
/// which starts in grid slot `slots[i]`; `ids[i]` is recorded as its
/// policy index.
pub fn run_race(
    setup: &EnvSetup,
    policies: &[Arc<Policy<f32>>],
    ids: &[usize],
    slots: &[usize],
    race: usize,
    seed: u64,
    deterministic: bool,
) -> Result<Vec<RaceResult>> {
    let n = policies.len();
    if ids.len() != n || slots.len() != n {
        return Err(Error::Dimension("one policy id and slot per agent".into()));
    }
    let mut env = RaceEnv::new(race_setup(setup, n), seed)?;
    env.reset_race(Some(slots))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64 + 1);
    let bounds = env.action_bounds();
    let mut states: Vec<RecurrentState<f32>> = policies.iter().map(|p| RecurrentState::zeros(p.hidden())).collect();
    // Agents sharing a policy act in one batch.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        match groups.iter_mut().find(|g| Arc::ptr_eq(&policies[g[0]], &policies[i])) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    let summary = loop {
        let mut commands: Vec<_> = env.agents().iter().map(|a| a.last_command).collect();
        for g in &groups {
            let members: Vec<usize> = g.iter().copied().filter(|&i| env.agents()[i].is_racing()).collect();
            if members.is_empty() {
                continue;
            }
            let policy = &policies[members[0]];
            let norm = &policy.config().normalization;
            let feats: Vec<Features> = members.iter().map(|&i| norm.features(&env.observe(i))).collect();
            let refs: Vec<&Features> = feats.iter().collect();
            let mut st: Vec<RecurrentState<f32>> = members.iter().map(|&i| states[i].clone()).collect();
            let out = policy.act_features(&refs, &mut st, &mut rng, deterministic)?;
            for ((&i, s), a) in members.iter().zip(st).zip(&out.samples) {
                states[i] = s;
                commands[i] = bounds.to_command(&a.action);
            }
        }
        let step = env.step(&commands)?;
        if let Some(summary) = step.summary {
            break summary;
        }
    };
    let track = env.track();
    let per_lap = track.gates.len();
    let total = track.total_gates();
    Ok(summary
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| RaceResult {
            race,
            agent: i,
            policy: ids[i],
            slot: slots[i],
            gates_passed: a.gates_passed,
            completion: completion(a.gates_passed, total),
            lap_times: lap_times(&a.gate_times, per_lap, track.laps, a.finish_time),
            finish_time: a.finish_time,
            cause: a.cause.unwrap_or(TerminationCause::Timeout),
            rank: a.rank,
        })
        .collect())
}

/// Fractions of agent-results per termination cause; they sum to 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CauseFractions {
    pub finished: f64,
    pub gate: f64,
    pub wall: f64,
    pub opponent: f64,
    pub timeout: f64,
}

impl CauseFractions {
    pub fn from_counts(c: &CauseCounts) -> Self {
        let n = c.total();
        if n == 0 {
            return Self::default();
        }
        let f = |k: usize| k as f64 / n as f64;
        Self {
            finished: f(c.finished),
            gate: f(c.gate),
            wall: f(c.wall),
            opponent: f(c.opponent),
            timeout: f(c.timeout),
        }
    }

    pub fn sum(&self) -> f64 {
        self.finished + self.gate + self.wall + self.opponent + self.timeout
    }
}

pub fn cause_counts<'a>(results: impl IntoIterator<Item = &'a RaceResult>) -> CauseCounts {
    let mut c = CauseCounts::default();
    for r in results {
        c.add(r.cause);
    }
    c
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfEvalSummary {
    pub n_agents: usize,
    pub races: usize,
    pub records: usize,
    pub mean_completion: f64,
    /// Standard deviation of completion over agent-results.
    pub completion_std: f64,
    /// Mean completion per start slot.
    pub slot_completion: Vec<f64>,
    /// Standard deviation of `slot_completion`.
    pub slot_std: f64,
    pub causes: CauseFractions,
    pub mean_lap_time: Option<f64>,
}

impl SelfEvalSummary {
    pub fn from_results(n_agents: usize, races: usize, results: &[RaceResult]) -> Self {
        let completions: Vec<f64> = results.iter().map(|r| r.completion).collect();
        let slot_completion: Vec<f64> = (0..n_agents)
            .map(|s| {
                let v: Vec<f64> = results.iter().filter(|r| r.slot == s).map(|r| r.completion).collect();
                mean(&v)
            })
            .collect();
        let laps: Vec<f64> = results.iter().flat_map(|r| r.lap_times.iter().copied()).collect();
        Self {
            n_agents,
            races,
            records: results.len(),
            mean_completion: mean(&completions),
            completion_std: std_dev(&completions),
            slot_std: std_dev(&slot_completion),
            slot_completion,
            causes: CauseFractions::from_counts(&cause_counts(results)),
            mean_lap_time: (!laps.is_empty()).then(|| mean(&laps)),
        }
    }
}

/// `n_agents` copies of `policy` race `protocol.races` times from permuted
/// start slots. Races run in parallel; results are ordered by race.
pub fn run_self_eval(
    policy: &Arc<Policy<f32>>,
    n_agents: usize,
    setup: &EnvSetup,
    protocol: &EvalProtocol,
) -> Result<(SelfEvalSummary, Vec<RaceResult>)> {
    protocol.validate()?;
    if n_agents == 0 {
        return Err(Error::config("eval.n_agents", "must be at least 1"));
    }
    let policies = vec![policy.clone(); n_agents];
    let ids = vec![0; n_agents];
    let per_race: Vec<Vec<RaceResult>> = (0..protocol.races)
        .into_par_iter()
        .map(|r| {
            let slots = slot_assignment(n_agents, r, protocol.races, protocol.seed);
            let seed = race_seed(protocol.seed, n_agents, r);
            run_race(setup, &policies, &ids, &slots, r, seed, protocol.deterministic)
        })
        .collect::<Result<_>>()?;
    let results: Vec<RaceResult> = per_race.into_iter().flatten().collect();
    Ok((SelfEvalSummary::from_results(n_agents, protocol.races, &results), results))
}

fn race_seed(seed: u64, config: usize, race: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((config as u64) << 32) ^ race as u64
}

#[cfg(test)]
mod tests;
