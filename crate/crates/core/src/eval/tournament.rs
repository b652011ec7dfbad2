//! Mixed-pool tournaments over random four-policy configurations.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean, race_seed, run_race, slot_assignment, std_dev, RaceResult};
use crate::env::EnvSetup;
use crate::error::{Error, Result};
use crate::policy::Policy;

pub const RACERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub policy: usize,
    pub races: usize,
    pub mean_completion: f64,
    pub completion_std: f64,
    pub mean_lap_time: Option<f64>,
    /// `rank_counts[k]` races finished at rank `k + 1`.
    pub rank_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TournamentReport {
    pub configs: Vec<Vec<usize>>,
    pub races_per_config: usize,
    pub methods: Vec<MethodStats>,
}

/// Draws `n_configs` configurations of four distinct pool members and races
/// each `races_per_config` times from permuted start slots.
pub fn run_tournament(
    pool: &[Arc<Policy<f32>>],
    setup: &EnvSetup,
    n_configs: usize,
    races_per_config: usize,
    seed: u64,
    deterministic: bool,
) -> Result<(TournamentReport, Vec<RaceResult>)> {
    if pool.len() < RACERS {
        return Err(Error::config("tournament.pool", "needs at least 4 policies"));
    }
    if n_configs == 0 || races_per_config == 0 {
        return Err(Error::config("tournament", "needs at least one configuration and one race"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<Vec<usize>> = (0..n_configs).map(|_| sample(&mut rng, pool.len(), RACERS).into_vec()).collect();
    let jobs: Vec<(usize, usize)> = (0..n_configs).flat_map(|c| (0..races_per_config).map(move |r| (c, r))).collect();
    let per_race: Vec<Vec<RaceResult>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let ids = &configs[c];
            let policies: Vec<Arc<Policy<f32>>> = ids.iter().map(|&k| pool[k].clone()).collect();
            let slots = slot_assignment(RACERS, r, races_per_config, seed ^ c as u64);
            let race = c * races_per_config + r;
            run_race(setup, &policies, ids, &slots, race, race_seed(seed, c, r), deterministic)
        })
        .collect::<Result<_>>()?;
    let results: Vec<RaceResult> = per_race.into_iter().flatten().collect();
    let methods = (0..pool.len())
        .filter_map(|k| {
            let mine: Vec<&RaceResult> = results.iter().filter(|r| r.policy == k).collect();
            if mine.is_empty() {
                return None;
            }
            let comp: Vec<f64> = mine.iter().map(|r| r.completion).collect();
            let laps: Vec<f64> = mine.iter().flat_map(|r| r.lap_times.iter().copied()).collect();
            let mut rank_counts = vec![0; RACERS];
            for r in &mine {
                rank_counts[r.rank.clamp(1, RACERS) - 1] += 1;
            }
            Some(MethodStats {
                policy: k,
                races: mine.len(),
                mean_completion: mean(&comp),
                completion_std: std_dev(&comp),
                mean_lap_time: (!laps.is_empty()).then(|| mean(&laps)),
                rank_counts,
            })
        })
        .collect();
    Ok((
        TournamentReport {
            configs,
            races_per_config,
            methods,
        },
        results,
    ))
}
