//! Recurrent PPO training: rollouts over vectorized races, league opponent
//! sampling, curriculum scheduling and checkpointing.

pub mod adam;
pub mod gae;
pub mod league;
pub mod ppo;
pub mod rollout;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Command;
use crate::env::{CurriculumSchedule, CurriculumState, EnvSetup, RewardTerms, TerminationCause, VecEnv};
use crate::error::{Error, Result};
use crate::policy::checkpoint::{Checkpoint, RngCursor};
use crate::policy::{Features, Policy, PolicyConfig, RecurrentState};
pub use adam::{Adam, AdamConfig};
pub use gae::compute_gae;
pub use league::{assign_opponents, sample_checkpoint_index, LeagueConfig, LeaguePool, OpponentHandle};
pub use ppo::{clipped_surrogate, ppo_update, PpoConfig, UpdateStats};
pub use rollout::{RolloutBuffer, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Agent 0 learns; the others are frozen league opponents.
    League,
    /// One learner per agent slot, each updated from its own transitions.
    Independent,
    /// A single learner controls every agent.
    Shared,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub league: LeagueConfig,
    pub curriculum: CurriculumSchedule,
    pub policy: PolicyConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.league.validate()?;
        self.curriculum.validate()?;
        self.policy.validate()
    }

    /// Checkpoints written over a full run.
    pub fn checkpoint_count(&self) -> usize {
        self.ppo.iterations / self.league.checkpoint_every
    }
}

/// Opponent-blind single-vehicle variant of `setup`.
pub fn single_agent_setup(setup: &EnvSetup) -> EnvSetup {
    let mut s = setup.clone();
    s.env.n_agents = 1;
    s.env.opponent_observations = false;
    s
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseCounts {
    pub finished: usize,
    pub gate: usize,
    pub wall: usize,
    pub opponent: usize,
    pub timeout: usize,
}

impl CauseCounts {
    pub fn add(&mut self, cause: TerminationCause) {
        match cause {
            TerminationCause::Finished => self.finished += 1,
            TerminationCause::Gate => self.gate += 1,
            TerminationCause::Wall => self.wall += 1,
            TerminationCause::Opponent => self.opponent += 1,
            TerminationCause::Timeout => self.timeout += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.finished + self.gate + self.wall + self.opponent + self.timeout
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub env_steps: usize,
    pub learning_rate: f64,
    pub mean_step_reward: f64,
    /// Mean reward terms per learner step.
    pub terms: RewardTerms,
    pub episodes: usize,
    /// Mean fraction of the race completed over finished episodes.
    pub completion: f64,
    pub mean_episode_progress: f64,
    pub max_gates_passed: usize,
    /// Most gates passed within a single finished episode.
    pub max_episode_gates: usize,
    pub causes: CauseCounts,
    pub curriculum: CurriculumState,
    pub update: UpdateStats,
}

pub fn write_metrics<W: Write>(out: &mut W, m: &IterationMetrics) -> Result<()> {
    serde_json::to_writer(&mut *out, m)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub struct Learner {
    pub policy: Policy<f32>,
    pub adam: Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Controller {
    Learner(usize),
    Opponent(OpponentHandle),
}

fn resolve<'a>(learners: &'a [Learner], pool: &'a LeaguePool, c: Controller) -> &'a Policy<f32> {
    match c {
        Controller::Learner(l) => &learners[l].policy,
        Controller::Opponent(OpponentHandle::Current) => &learners[0].policy,
        Controller::Opponent(h) => pool.get(h).expect("handles come from the pool"),
    }
}

pub struct Trainer {
    mode: TrainMode,
    cfg: TrainConfig,
    label: String,
    venv: VecEnv,
    learners: Vec<Learner>,
    pool: LeaguePool,
    rng: ChaCha8Rng,
    iteration: usize,
    env_steps: usize,
    controllers: Vec<Vec<Controller>>,
    pending: Vec<Option<Vec<OpponentHandle>>>,
    states: Vec<Vec<RecurrentState<f32>>>,
    fresh: Vec<Vec<bool>>,
    progress: Vec<Vec<f64>>,
    episode_gates: Vec<Vec<usize>>,
    /// Learner index and sequence index of each (env, agent).
    seq_of: Vec<Vec<Option<(usize, usize)>>>,
    n_seq: Vec<usize>,
    checkpoint_dir: Option<PathBuf>,
    saved: Vec<PathBuf>,
}

impl Trainer {
    /// Environments use seeds `seed + 1 ..`; learner `l` initializes from
    /// stream `l + 1` of `seed`; rollouts draw from stream 0.
    pub fn new(mode: TrainMode, cfg: TrainConfig, setup: EnvSetup, roster: Vec<Policy<f32>>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        setup.validate()?;
        let n_agents = setup.env.n_agents;
        let n_envs = cfg.ppo.n_envs;
        let venv = VecEnv::new(&setup, n_envs, seed.wrapping_add(1))?;
        let n_learners = if mode == TrainMode::Independent { n_agents } else { 1 };
        let learners = (0..n_learners)
            .map(|l| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(l as u64 + 1);
                let policy = Policy::<f32>::new(cfg.policy.clone(), &mut r)?;
                let adam = Adam::new(policy.num_params(), cfg.ppo.adam.clone());
                Ok(Learner { policy, adam })
            })
            .collect::<Result<Vec<_>>>()?;
        let controllers: Vec<Vec<Controller>> = (0..n_envs)
            .map(|_| {
                (0..n_agents)
                    .map(|i| match mode {
                        TrainMode::League if i > 0 => Controller::Opponent(OpponentHandle::Current),
                        TrainMode::League | TrainMode::Shared => Controller::Learner(0),
                        TrainMode::Independent => Controller::Learner(i),
                    })
                    .collect()
            })
            .collect();
        let mut n_seq = vec![0; n_learners];
        let seq_of = controllers
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| match c {
                        Controller::Learner(l) => {
                            n_seq[*l] += 1;
                            Some((*l, n_seq[*l] - 1))
                        }
                        Controller::Opponent(_) => None,
                    })
                    .collect()
            })
            .collect();
        let mut t = Self {
            mode,
            label: match mode {
                TrainMode::League => "league",
                TrainMode::Independent => "independent",
                TrainMode::Shared => "shared",
            }
            .to_string(),
            venv,
            pool: LeaguePool::new(roster),
            rng: ChaCha8Rng::seed_from_u64(seed),
            iteration: 0,
            env_steps: 0,
            pending: vec![None; n_envs],
            states: Vec::new(),
            fresh: vec![vec![true; n_agents]; n_envs],
            progress: vec![vec![0.0; n_agents]; n_envs],
            episode_gates: vec![vec![0; n_agents]; n_envs],
            seq_of,
            n_seq,
            controllers,
            learners,
            cfg,
            checkpoint_dir: None,
            saved: Vec::new(),
        };
        if mode == TrainMode::League {
            let mut mask = vec![false; n_agents];
            mask[0] = true;
            for env in t.venv.envs_mut() {
                env.set_learners(&mask)?;
            }
        }
        t.states = (0..n_envs)
            .map(|e| (0..n_agents).map(|i| t.zero_state(t.controllers[e][i])).collect())
            .collect();
        Ok(t)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Checkpoints are also written to `dir` at the league cadence.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Starts every learner from `policy` with fresh optimizer moments.
    /// Must be called before the first iteration.
    pub fn with_initial_policy(mut self, policy: &Policy<f32>) -> Result<Self> {
        if policy.config() != &self.cfg.policy {
            return Err(Error::config("train.policy", "warm-start policy has a different architecture"));
        }
        if self.iteration > 0 {
            return Err(Error::config("train.warm_start", "training has already started"));
        }
        for l in &mut self.learners {
            l.policy = policy.clone();
            l.adam = Adam::new(policy.num_params(), self.cfg.ppo.adam.clone());
        }
        Ok(self)
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn learners(&self) -> &[Learner] {
        &self.learners
    }

    pub fn into_policies(self) -> Vec<Policy<f32>> {
        self.learners.into_iter().map(|l| l.policy).collect()
    }

    pub fn pool(&self) -> &LeaguePool {
        &self.pool
    }

    pub fn envs(&self) -> &VecEnv {
        &self.venv
    }

    pub fn saved_checkpoints(&self) -> &[PathBuf] {
        &self.saved
    }

    fn policy_for(&self, c: Controller) -> &Policy<f32> {
        resolve(&self.learners, &self.pool, c)
    }

    fn zero_state(&self, c: Controller) -> RecurrentState<f32> {
        RecurrentState::zeros(self.policy_for(c).hidden())
    }

    /// Full checkpoint of learner `l`, including optimizer moments, the
    /// rollout RNG position and the current curriculum stage.
    pub fn checkpoint(&self, l: usize) -> Checkpoint {
        let learner = &self.learners[l];
        let mut ck = Checkpoint::from_policy(&learner.policy, self.learner_label(l), self.iteration).with_moments(
            learner.adam.m.clone(),
            learner.adam.v.clone(),
            learner.adam.step,
        );
        ck.header.curriculum = Some(self.curriculum_now());
        ck.header.rng = vec![RngCursor::capture(&self.rng)];
        ck
    }

    fn learner_label(&self, l: usize) -> String {
        if self.learners.len() == 1 {
            self.label.clone()
        } else {
            format!("{}-{l}", self.label)
        }
    }

    fn curriculum_now(&self) -> CurriculumState {
        self.cfg.curriculum.state_at(self.iteration, self.cfg.ppo.iterations)
    }

    fn apply_assignment(&mut self, e: usize, handles: Vec<OpponentHandle>) {
        for (k, h) in handles.into_iter().enumerate() {
            self.controllers[e][k + 1] = Controller::Opponent(h);
            self.states[e][k + 1] = self.zero_state(Controller::Opponent(h));
        }
    }

    /// Collects one rollout, updates every learner and advances the
    /// curriculum.
    pub fn iterate(&mut self) -> Result<IterationMetrics> {
        let ppo = self.cfg.ppo.clone();
        let lr = ppo.learning_rate(self.iteration);
        let curriculum = self.curriculum_now();
        for env in self.venv.envs_mut() {
            env.set_curriculum(curriculum.clone());
        }
        let n_envs = self.venv.len();
        let n_agents = self.controllers[0].len();
        if self.mode == TrainMode::League {
            for e in 0..n_envs {
                let handles = assign_opponents(&self.pool, n_agents - 1, &self.cfg.league, &mut self.rng);
                if self.fresh[e].iter().all(|&f| f) {
                    self.apply_assignment(e, handles);
                } else {
                    self.pending[e] = Some(handles);
                }
            }
        }
        let mut buffers: Vec<RolloutBuffer> = self
            .n_seq
            .iter()
            .map(|&n| RolloutBuffer::new(n, ppo.rollout_steps, ppo.segment_len))
            .collect();
        let bounds = self.venv.envs()[0].action_bounds();
        let hover = Command::hover(&self.venv.envs()[0].setup().params);
        let total_gates = self.venv.envs()[0].track().total_gates();

        let mut term_sum = RewardTerms::default();
        let mut reward_sum = 0.0;
        let mut learner_steps = 0usize;
        let mut causes = CauseCounts::default();
        let mut completion_sum = 0.0;
        let mut progress_sum = 0.0;
        let mut max_gates = 0usize;
        let mut max_episode_gates = 0usize;

        for t in 0..ppo.rollout_steps {
            let pre_states = self.states.clone();
            let mut feats: Vec<Vec<Option<Features>>> = vec![vec![None; n_agents]; n_envs];
            let mut groups: BTreeMap<Controller, Vec<(usize, usize)>> = BTreeMap::new();
            for (e, env) in self.venv.envs().iter().enumerate() {
                for i in 0..n_agents {
                    if env.agents()[i].is_racing() {
                        let c = self.controllers[e][i];
                        let norm = &self.policy_for(c).config().normalization;
                        feats[e][i] = Some(norm.features(&env.observe(i)));
                        groups.entry(c).or_default().push((e, i));
                    }
                }
            }
            let mut samples = vec![vec![None; n_agents]; n_envs];
            for (c, members) in &groups {
                let fs: Vec<&Features> = members.iter().map(|&(e, i)| feats[e][i].as_ref().unwrap()).collect();
                let mut st: Vec<RecurrentState<f32>> = members.iter().map(|&(e, i)| self.states[e][i].clone()).collect();
                let out = resolve(&self.learners, &self.pool, *c).act_features(&fs, &mut st, &mut self.rng, false)?;
                for (k, &(e, i)) in members.iter().enumerate() {
                    self.states[e][i] = st[k].clone();
                    samples[e][i] = Some((out.samples[k], out.values[k]));
                }
            }
            let commands: Vec<Vec<Command>> = samples
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|s| s.map_or(hover, |(a, _)| bounds.to_command(&a.action)))
                        .collect()
                })
                .collect();
            let steps = self.venv.step_all(&commands)?;

            for (e, step) in steps.iter().enumerate() {
                for i in 0..n_agents {
                    let Some((l, seq)) = self.seq_of[e][i] else {
                        continue;
                    };
                    let row = match (&samples[e][i], feats[e][i].take()) {
                        (Some((s, value)), Some(features)) => {
                            let out = &step.outcomes[i];
                            learner_steps += 1;
                            reward_sum += out.reward;
                            term_sum.progress += out.terms.progress;
                            term_sum.body_rate += out.terms.body_rate;
                            term_sum.proximity += out.terms.proximity;
                            term_sum.rank += out.terms.rank;
                            term_sum.tracking += out.terms.tracking;
                            self.progress[e][i] += out.terms.progress;
                            self.episode_gates[e][i] += usize::from(out.passed_gate);
                            if out.done {
                                let gates = match &step.summary {
                                    Some(sum) => sum.agents[i].gates_passed,
                                    None => self.venv.envs()[e].agents()[i].gates_passed,
                                };
                                if let Some(cause) = out.cause {
                                    causes.add(cause);
                                }
                                completion_sum += (gates as f64 / total_gates as f64).min(1.0);
                                progress_sum += self.progress[e][i];
                                max_gates = max_gates.max(gates);
                                max_episode_gates = max_episode_gates.max(self.episode_gates[e][i]);
                                self.progress[e][i] = 0.0;
                                self.episode_gates[e][i] = 0;
                            }
                            Transition {
                                features,
                                u: s.u,
                                log_prob: s.log_prob,
                                value: *value,
                                reward: out.reward,
                                done: out.done,
                                reset: self.fresh[e][i],
                                valid: true,
                            }
                        }
                        _ => Transition::placeholder(),
                    };
                    buffers[l].push(seq, t, row, &pre_states[e][i]);
                }
                for f in &mut self.fresh[e] {
                    *f = false;
                }
                if step.episode_done {
                    if let Some(h) = self.pending[e].take() {
                        self.apply_assignment(e, h);
                    }
                    for i in 0..n_agents {
                        self.states[e][i] = self.zero_state(self.controllers[e][i]);
                        self.fresh[e][i] = true;
                        self.progress[e][i] = 0.0;
                        self.episode_gates[e][i] = 0;
                    }
                }
            }
        }

        // Bootstrap values for the state after the last step.
        for (l, buf) in buffers.iter_mut().enumerate() {
            let mut members = Vec::new();
            let mut fs = Vec::new();
            let mut st = Vec::new();
            for (e, env) in self.venv.envs().iter().enumerate() {
                for i in 0..n_agents {
                    if let Some((ll, seq)) = self.seq_of[e][i] {
                        if ll == l && env.agents()[i].is_racing() {
                            let norm = &self.learners[l].policy.config().normalization;
                            fs.push(norm.features(&env.observe(i)));
                            st.push(if self.fresh[e][i] {
                                self.zero_state(Controller::Learner(l))
                            } else {
                                self.states[e][i].clone()
                            });
                            members.push(seq);
                        }
                    }
                }
            }
            if !members.is_empty() {
                let refs: Vec<&Features> = fs.iter().collect();
                let out = self.learners[l].policy.act_features(&refs, &mut st, &mut self.rng, true)?;
                for (k, &seq) in members.iter().enumerate() {
                    buf.set_last_value(seq, out.values[k]);
                }
            }
            buf.finish(ppo.gamma, ppo.gae_lambda)?;
        }

        let mut update = UpdateStats::default();
        for (l, buf) in buffers.iter().enumerate() {
            let learner = &mut self.learners[l];
            let s = ppo_update(&mut learner.policy, &mut learner.adam, buf, &ppo, lr, &mut self.rng)?;
            let w = 1.0 / buffers.len() as f64;
            update.policy_loss += w * s.policy_loss;
            update.value_loss += w * s.value_loss;
            update.entropy += w * s.entropy;
            update.approx_kl += w * s.approx_kl;
            update.clip_fraction += w * s.clip_fraction;
            update.grad_norm += w * s.grad_norm;
            update.minibatch_updates += s.minibatch_updates;
        }

        self.iteration += 1;
        self.env_steps += learner_steps;
        if self.iteration % self.cfg.league.checkpoint_every == 0 {
            self.save_checkpoints()?;
        }

        let steps = learner_steps.max(1) as f64;
        let episodes = causes.total();
        let per_episode = |x: f64| if episodes > 0 { x / episodes as f64 } else { 0.0 };
        Ok(IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            learning_rate: lr,
            mean_step_reward: reward_sum / steps,
            terms: RewardTerms {
                progress: term_sum.progress / steps,
                body_rate: term_sum.body_rate / steps,
                proximity: term_sum.proximity / steps,
                rank: term_sum.rank / steps,
                tracking: term_sum.tracking / steps,
            },
            episodes,
            completion: per_episode(completion_sum),
            mean_episode_progress: per_episode(progress_sum),
            max_gates_passed: max_gates,
            max_episode_gates,
            causes,
            curriculum,
            update,
        })
    }

    fn save_checkpoints(&mut self) -> Result<()> {
        if self.mode == TrainMode::League {
            self.pool.push_checkpoint(self.learners[0].policy.clone());
        }
        if let Some(dir) = self.checkpoint_dir.clone() {
            std::fs::create_dir_all(&dir)?;
            for l in 0..self.learners.len() {
                let path = dir.join(format!("{}-{:05}.ckpt", self.learner_label(l), self.iteration));
                self.checkpoint(l).save(&path)?;
                self.saved.push(path);
            }
        }
        Ok(())
    }

    /// Runs the remaining iterations, handing each metrics record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&IterationMetrics) -> Result<()>) -> Result<()> {
        while self.iteration < self.cfg.ppo.iterations {
            let m = self.iterate()?;
            sink(&m)?;
        }
        Ok(())
    }
}

/// Trains four co-racing learners and returns their final policies.
pub fn train_independent(cfg: TrainConfig, setup: EnvSetup, seed: u64) -> Result<Vec<Policy<f32>>> {
    let mut t = Trainer::new(TrainMode::Independent, cfg, setup, Vec::new(), seed)?;
    t.run(|_| Ok(()))?;
    Ok(t.into_policies())
}

/// Loads roster policies from checkpoint files.
pub fn load_roster(paths: &[impl AsRef<Path>]) -> Result<Vec<Policy<f32>>> {
    paths
        .iter()
        .map(|p| {
            Checkpoint::load(p.as_ref())
                .and_then(|c| c.policy())
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.as_ref().display())))
        })
        .collect()
}

#[cfg(test)]
mod tests;
