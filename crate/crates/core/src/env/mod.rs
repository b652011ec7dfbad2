//! Multi-agent racing environment.
//!
//! Each [`RaceEnv`] owns N vehicles, a shared wake field and its own RNG
//! streams. A step applies actuation delay, integrates one control tick,
//! resolves gate passages and collisions, ranks the field and computes
//! per-agent rewards. When every learning agent is done the environment
//! resets itself before returning.

pub mod curriculum;
pub mod log;
pub mod observation;
pub mod reward;
pub mod vec_env;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::downwash::{WakeConfig, WakeField};
use crate::dynamics::{
    apply_actuation_delay, randomize, step_with_controller, Command, CommandHistory, QuadParams, QuadState,
    RandomizationSpec, Vec3,
};
use crate::error::{Error, Result};
use crate::track::{
    check_agent_collision, check_gate_transition, compute_rankings, start_grid, Gate, GateCrossing, ProgressState,
    Track, TrackConfig,
};

pub use curriculum::{BufferConfig, CurriculumSchedule, CurriculumState, InitialStateBuffer, Snapshot};
pub use log::TickRecord;
pub use observation::{EgoObservation, Observation, OpponentObservation, EGO_DIM, OPPONENT_DIM};
pub use reward::{RewardConfig, RewardTerms, TerminalEvent};
pub use vec_env::VecEnv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminationCause {
    Finished,
    Gate,
    Wall,
    Opponent,
    Timeout,
}

impl TerminationCause {
    pub const ALL: [TerminationCause; 5] = [
        TerminationCause::Finished,
        TerminationCause::Gate,
        TerminationCause::Wall,
        TerminationCause::Opponent,
        TerminationCause::Timeout,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TerminationCause::Finished => "finished",
            TerminationCause::Gate => "gate",
            TerminationCause::Wall => "wall",
            TerminationCause::Opponent => "opponent",
            TerminationCause::Timeout => "timeout",
        }
    }

    pub fn is_crash(&self) -> bool {
        matches!(self, TerminationCause::Gate | TerminationCause::Wall | TerminationCause::Opponent)
    }
}

/// Concentric-circle flight used for the wake interaction experiment. Agent
/// 0 flies the lower circle and sees agent 1, which flies the upper circle
/// blind and starts ahead by `lead_delay` seconds of travel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircleTask {
    pub center: [f64; 2],
    pub radius: f64,
    pub altitude: f64,
    pub separation: f64,
    pub reference_speed: f64,
    pub virtual_gates: usize,
    /// Lead delay drawn uniformly from this range at each reset, s.
    pub lead_delay: [f64; 2],
    /// Probability that the upper agent takes part in an episode.
    pub upper_present_prob: f64,
}

impl Default for CircleTask {
    fn default() -> Self {
        Self {
            center: [2.0, 0.5],
            radius: 3.0,
            altitude: 1.5,
            separation: 0.5,
            reference_speed: 2.5,
            virtual_gates: 8,
            lead_delay: [0.0, 0.6],
            upper_present_prob: 0.75,
        }
    }
}

impl CircleTask {
    /// Virtual gates around the lower circle, counter-clockwise.
    pub fn track(&self, base: &TrackConfig) -> Result<Track> {
        let mut cfg = base.clone();
        let c = Vec3::new(self.center[0], self.center[1], self.altitude);
        cfg.gates = (0..self.virtual_gates)
            .map(|k| {
                let theta = 2.0 * PI * k as f64 / self.virtual_gates as f64;
                let p = c + Vec3::new(theta.cos(), theta.sin(), 0.0) * self.radius;
                [p.x, p.y, p.z, (theta + PI / 2.0).to_degrees()]
            })
            .collect();
        cfg.subset = None;
        cfg.laps = 1000;
        cfg.build()
    }

    /// Angle of `p` about the circle center, in [0, 2π).
    pub fn angle_of(&self, p: &Vec3) -> f64 {
        (p.y - self.center[1]).atan2(p.x - self.center[0]).rem_euclid(2.0 * PI)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.virtual_gates < 3 {
            return Err(Error::config("env.task.radius", "circle needs a positive radius and at least 3 gates"));
        }
        if !(self.lead_delay[0] >= 0.0 && self.lead_delay[0] <= self.lead_delay[1]) {
            return Err(Error::config("env.task.lead_delay", "must be an ordered non-negative range"));
        }
        if !(0.0..=1.0).contains(&self.upper_present_prob) {
            return Err(Error::config("env.task.upper_present_prob", "must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    #[default]
    Race,
    Circle(CircleTask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub control_rate_hz: f64,
    pub episode_seconds: f64,
    /// Body-rate command at full deflection, rad/s.
    pub max_body_rate: f64,
    pub actuation_delay: bool,
    pub randomize_dynamics: bool,
    pub randomize_initial: bool,
    /// Agents observe opponents at all; false gives opponent-blind policies.
    pub opponent_observations: bool,
    pub reward: RewardConfig,
    pub buffer: BufferConfig,
    pub task: Task,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_agents: 4,
            control_rate_hz: 50.0,
            episode_seconds: 30.0,
            max_body_rate: 10.0,
            actuation_delay: true,
            randomize_dynamics: true,
            randomize_initial: true,
            opponent_observations: true,
            reward: RewardConfig::default(),
            buffer: BufferConfig::default(),
            task: Task::Race,
        }
    }
}

impl EnvConfig {
    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn max_steps(&self) -> usize {
        (self.episode_seconds * self.control_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::config("env.n_agents", "must be at least 1"));
        }
        if !(self.control_rate_hz > 0.0) {
            return Err(Error::config("env.control_rate_hz", "must be positive"));
        }
        if !(self.episode_seconds > 0.0) {
            return Err(Error::config("env.episode_seconds", "must be positive"));
        }
        if !(self.max_body_rate > 0.0) {
            return Err(Error::config("env.max_body_rate", "must be positive"));
        }
        self.reward.validate()?;
        self.buffer.validate()?;
        if let Task::Circle(c) = &self.task {
            c.validate()?;
            if self.n_agents > 2 {
                return Err(Error::config("env.n_agents", "circle task supports at most 2 agents"));
            }
        }
        Ok(())
    }
}

/// Everything needed to build an environment instance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSetup {
    pub env: EnvConfig,
    pub params: QuadParams,
    pub randomization: RandomizationSpec,
    pub wake: WakeConfig,
    pub track: TrackConfig,
}

impl EnvSetup {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.params.validate()?;
        self.randomization.validate()?;
        self.wake.validate()?;
        self.track.validate()
    }
}

/// Maps normalized policy outputs in [-1, 1] to a physical command.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionBounds {
    pub max_collective: f64,
    pub max_body_rate: f64,
}

impl ActionBounds {
    pub fn new(params: &QuadParams, env: &EnvConfig) -> Self {
        Self {
            max_collective: params.max_collective_accel(),
            max_body_rate: env.max_body_rate,
        }
    }

    pub fn to_command(&self, a: &[f64; 4]) -> Command {
        let c = |x: f64| x.clamp(-1.0, 1.0);
        Command::new(
            0.5 * (c(a[0]) + 1.0) * self.max_collective,
            Vec3::new(c(a[1]), c(a[2]), c(a[3])) * self.max_body_rate,
        )
    }

    pub fn to_normalized(&self, cmd: &Command) -> [f64; 4] {
        [
            2.0 * cmd.collective / self.max_collective - 1.0,
            cmd.body_rates.x / self.max_body_rate,
            cmd.body_rates.y / self.max_body_rate,
            cmd.body_rates.z / self.max_body_rate,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentStatus {
    Racing,
    Done(TerminationCause),
    /// Not taking part in this episode.
    Absent,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub state: QuadState,
    pub plant: QuadParams,
    pub delay: f64,
    history: CommandHistory,
    pub gates_passed: usize,
    pub dist_to_next: f64,
    pub rank: usize,
    pub status: AgentStatus,
    pub gate_times: Vec<f64>,
    pub finish_time: Option<f64>,
    pub blind: bool,
    /// Offset applied to every gate this agent targets.
    pub gate_offset: Vec3,
    pub last_command: Command,
}

impl Agent {
    pub fn is_racing(&self) -> bool {
        self.status == AgentStatus::Racing
    }

    pub fn is_present(&self) -> bool {
        self.status != AgentStatus::Absent
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AgentOutcome {
    /// The agent was racing when the step began.
    pub active: bool,
    pub reward: f64,
    pub terms: RewardTerms,
    pub done: bool,
    /// Done because of the episode time limit.
    pub truncated: bool,
    pub cause: Option<TerminationCause>,
    pub passed_gate: bool,
    pub contact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub present: bool,
    pub gates_passed: usize,
    pub cause: Option<TerminationCause>,
    pub finish_time: Option<f64>,
    pub gate_times: Vec<f64>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub race_start: bool,
    pub steps: usize,
    pub agents: Vec<AgentSummary>,
}

#[derive(Clone, Debug)]
pub struct EnvStep {
    pub outcomes: Vec<AgentOutcome>,
    pub episode_done: bool,
    /// Final state of the episode that just ended; the env has been reset.
    pub summary: Option<EpisodeSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Resolution {
    Continue { contact: bool },
    Terminate(TerminalEvent),
}

/// Turns per-agent gate/wall events and inter-agent contact pairs into
/// per-agent outcomes. Each contact is independently non-terminal with
/// probability `p_non_terminal`; pairs involving an agent that already
/// terminated are ignored.
pub fn resolve_collisions<R: Rng + ?Sized>(
    events: &[Option<TerminalEvent>],
    contacts: &[(usize, usize)],
    p_non_terminal: f64,
    rng: &mut R,
) -> Vec<Resolution> {
    let mut out: Vec<Resolution> = events
        .iter()
        .map(|e| match e {
            Some(ev) => Resolution::Terminate(*ev),
            None => Resolution::Continue { contact: false },
        })
        .collect();
    for &(i, j) in contacts {
        let alive = |r: &Resolution| matches!(r, Resolution::Continue { .. });
        if !alive(&out[i]) || !alive(&out[j]) {
            continue;
        }
        if rng.random::<f64>() < p_non_terminal {
            out[i] = Resolution::Continue { contact: true };
            out[j] = Resolution::Continue { contact: true };
        } else {
            out[i] = Resolution::Terminate(TerminalEvent::Agent);
            out[j] = Resolution::Terminate(TerminalEvent::Agent);
        }
    }
    out
}

pub struct RaceEnv {
    setup: EnvSetup,
    track: Track,
    agents: Vec<Agent>,
    wake: WakeField,
    rng: ChaCha8Rng,
    agent_rngs: Vec<ChaCha8Rng>,
    steps: usize,
    curriculum: CurriculumState,
    buffer: InitialStateBuffer,
    learners: Vec<bool>,
    race_start: bool,
    records: Option<Vec<TickRecord>>,
}

impl RaceEnv {
    pub fn new(setup: EnvSetup, seed: u64) -> Result<Self> {
        setup.validate()?;
        let track = match &setup.env.task {
            Task::Race => setup.track.build()?,
            Task::Circle(c) => c.track(&setup.track)?,
        };
        let n = setup.env.n_agents;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent_rngs = (0..n)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64 + 1);
                r
            })
            .collect();
        let mut buffer = InitialStateBuffer::new(setup.env.buffer.capacity);
        if setup.env.task == Task::Race {
            for _ in 0..setup.env.buffer.seed_states.min(setup.env.buffer.capacity) {
                let s = curriculum::sample_track_snapshot(&track, &setup.params, n, &setup.env.buffer, &mut rng);
                buffer.admit(s, &track, &mut rng);
            }
        }
        let dt = setup.env.control_dt();
        let history = CommandHistory::new(dt, setup.randomization.max_delay);
        let agents = (0..n)
            .map(|_| Agent {
                state: QuadState::at_rest(Vec3::zeros()),
                plant: setup.params.clone(),
                delay: 0.0,
                history: history.clone(),
                gates_passed: 0,
                dist_to_next: 0.0,
                rank: 1,
                status: AgentStatus::Racing,
                gate_times: Vec::new(),
                finish_time: None,
                blind: !setup.env.opponent_observations,
                gate_offset: Vec3::zeros(),
                last_command: Command::hover(&setup.params),
            })
            .collect();
        let mut env = Self {
            wake: WakeField::new(setup.wake.clone()),
            setup,
            track,
            agents,
            rng,
            agent_rngs,
            steps: 0,
            curriculum: CurriculumState::full(),
            buffer,
            learners: vec![true; n],
            race_start: true,
            records: None,
        };
        env.reset()?;
        Ok(env)
    }

    pub fn setup(&self) -> &EnvSetup {
        &self.setup
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn track(&self) -> &Track {
        &self.track
    }

    pub fn wake(&self) -> &WakeField {
        &self.wake
    }

    pub fn buffer(&self) -> &InitialStateBuffer {
        &self.buffer
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.setup.env.control_dt()
    }

    pub fn curriculum(&self) -> &CurriculumState {
        &self.curriculum
    }

    /// Takes effect at the next reset.
    pub fn set_curriculum(&mut self, c: CurriculumState) {
        self.curriculum = c;
    }

    /// Agents whose termination ends the episode. At least one must be set.
    pub fn set_learners(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.agents.len() || !mask.iter().any(|&m| m) {
            return Err(Error::Dimension(format!(
                "learner mask needs {} entries with at least one set",
                self.agents.len()
            )));
        }
        self.learners = mask.to_vec();
        Ok(())
    }

    pub fn last_reset_was_race_start(&self) -> bool {
        self.race_start
    }

    pub fn action_bounds(&self) -> ActionBounds {
        ActionBounds::new(&self.setup.params, &self.setup.env)
    }

    pub fn set_recording(&mut self, on: bool) {
        self.records = if on { Some(Vec::new()) } else { None };
    }

    pub fn take_records(&mut self) -> Vec<TickRecord> {
        self.records.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn circle_task(&self) -> Option<&CircleTask> {
        match &self.setup.env.task {
            Task::Circle(c) => Some(c),
            Task::Race => None,
        }
    }

    /// Gate agent `i` targets after passing `gates_passed` gates.
    pub fn gate_for(&self, i: usize, gates_passed: usize) -> Gate {
        let mut g = self.track.gate_for(gates_passed).clone();
        g.center += self.agents[i].gate_offset;
        g
    }

    pub fn target_gate(&self, i: usize) -> Gate {
        self.gate_for(i, self.agents[i].gates_passed)
    }

    pub fn observe(&self, i: usize) -> Observation {
        let a = &self.agents[i];
        let ego = EgoObservation::new(&a.state, &self.gate_for(i, a.gates_passed), &self.gate_for(i, a.gates_passed + 1));
        let mut opponents = Vec::new();
        if self.curriculum.opponents_enabled && !a.blind {
            for (j, b) in self.agents.iter().enumerate() {
                if j != i && b.is_racing() {
                    opponents.push(OpponentObservation::relative(&a.state, &b.state));
                }
            }
        }
        Observation { ego, opponents }
    }

    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            race_start: self.race_start,
            steps: self.steps,
            agents: self
                .agents
                .iter()
                .map(|a| AgentSummary {
                    present: a.is_present(),
                    gates_passed: a.gates_passed,
                    cause: match a.status {
                        AgentStatus::Done(c) => Some(c),
                        _ => None,
                    },
                    finish_time: a.finish_time,
                    gate_times: a.gate_times.clone(),
                    rank: a.rank,
                })
                .collect(),
        }
    }

    /// Starts a new episode according to the current curriculum.
    pub fn reset(&mut self) -> Result<()> {
        match self.setup.env.task.clone() {
            Task::Race => {
                let race_start = self.buffer.is_empty() || self.rng.random::<f64>() < self.curriculum.race_start_prob;
                if race_start {
                    self.reset_race(None)
                } else {
                    let snapshot = self.buffer.sample(&mut self.rng).cloned().expect("buffer is non-empty");
                    self.reset_from_snapshot(&snapshot, false)
                }
            }
            Task::Circle(c) => self.reset_circle(&c, None, None),
        }
    }

    /// Race start from the grid. `slots[i]` is the grid slot of agent `i`;
    /// `None` shuffles the slots.
    pub fn reset_race(&mut self, slots: Option<&[usize]>) -> Result<()> {
        self.track.set_size_multiplier(self.curriculum.gate_multiplier);
        let n = self.agents.len();
        let poses = match slots {
            Some(s) => {
                let base = start_grid::<ChaCha8Rng>(&self.track, n, None)?;
                if s.len() != n || s.iter().any(|&k| k >= n) {
                    return Err(Error::Dimension(format!("slot assignment must map {n} agents to {n} slots")));
                }
                s.iter().map(|&k| base[k]).collect::<Vec<_>>()
            }
            None => start_grid(&self.track, n, Some(&mut self.rng))?,
        };
        let nominal: Vec<QuadState> = poses
            .iter()
            .map(|p| QuadState::hover(p.position, p.yaw, &self.setup.params))
            .collect();
        let mut snapshot: Snapshot = nominal
            .iter()
            .map(|s| curriculum::AgentSnapshot {
                state: s.clone(),
                gates_passed: 0,
            })
            .collect();
        if self.setup.env.randomize_initial {
            for _ in 0..32 {
                let trial: Snapshot = nominal
                    .iter()
                    .map(|s| curriculum::AgentSnapshot {
                        state: self.setup.randomization.perturb_initial(s, &mut self.rng),
                        gates_passed: 0,
                    })
                    .collect();
                if curriculum::admissible(&trial, &self.track) {
                    snapshot = trial;
                    break;
                }
            }
        }
        self.reset_from_snapshot(&snapshot, true)
    }

    fn reset_from_snapshot(&mut self, snapshot: &Snapshot, race_start: bool) -> Result<()> {
        if snapshot.len() != self.agents.len() {
            return Err(Error::Dimension(format!(
                "snapshot has {} agents, env has {}",
                snapshot.len(),
                self.agents.len()
            )));
        }
        self.track.set_size_multiplier(self.curriculum.gate_multiplier);
        self.race_start = race_start;
        for (i, s) in snapshot.iter().enumerate() {
            self.begin_agent(i, s.state.clone(), s.gates_passed, Vec3::zeros());
        }
        self.begin_episode();
        Ok(())
    }

    /// Circle start with an optional fixed lead delay and upper-agent
    /// presence; otherwise both are drawn from the task ranges.
    pub fn reset_circle(&mut self, task: &CircleTask, lead_delay: Option<f64>, upper_present: Option<bool>) -> Result<()> {
        self.race_start = true;
        let lead = lead_delay.unwrap_or_else(|| {
            let [lo, hi] = task.lead_delay;
            if hi > lo {
                self.rng.random_range(lo..=hi)
            } else {
                lo
            }
        });
        let present = upper_present.unwrap_or_else(|| self.rng.random::<f64>() < task.upper_present_prob);
        let theta0 = 2.0 * PI * self.rng.random::<f64>();
        let dtheta = 2.0 * PI / task.virtual_gates as f64;
        for i in 0..self.agents.len() {
            let (theta, dz) = if i == 0 {
                (theta0, 0.0)
            } else {
                (theta0 + lead * task.reference_speed / task.radius, task.separation)
            };
            let theta = theta.rem_euclid(2.0 * PI);
            let pos = Vec3::new(
                task.center[0] + task.radius * theta.cos(),
                task.center[1] + task.radius * theta.sin(),
                task.altitude + dz,
            );
            let mut state = QuadState::hover(pos, theta + PI / 2.0, &self.setup.params);
            state.velocity = Vec3::new(-theta.sin(), theta.cos(), 0.0) * task.reference_speed;
            let next = (theta / dtheta).floor() as usize + 1;
            self.begin_agent(i, state, next, Vec3::new(0.0, 0.0, dz));
            if i == 1 {
                self.agents[1].blind = true;
                if !present {
                    self.agents[1].status = AgentStatus::Absent;
                }
            }
        }
        self.begin_episode();
        Ok(())
    }

    fn begin_agent(&mut self, i: usize, state: QuadState, gates_passed: usize, gate_offset: Vec3) {
        let nominal = &self.setup.params;
        let spec = &self.setup.randomization;
        let rng = &mut self.agent_rngs[i];
        let plant = if self.setup.env.randomize_dynamics {
            randomize(nominal, spec, rng)
        } else {
            nominal.clone()
        };
        let delay = if self.setup.env.actuation_delay {
            spec.sample_delay(rng)
        } else {
            0.0
        };
        let hover = Command::hover(nominal);
        let a = &mut self.agents[i];
        a.state = state;
        a.plant = plant;
        a.delay = delay;
        a.history.clear();
        a.history.push(hover);
        a.last_command = hover;
        a.gates_passed = gates_passed;
        a.status = AgentStatus::Racing;
        a.gate_times.clear();
        a.finish_time = None;
        a.blind = !self.setup.env.opponent_observations;
        a.gate_offset = gate_offset;
    }

    fn begin_episode(&mut self) {
        self.steps = 0;
        self.wake.clear();
        for i in 0..self.agents.len() {
            let g = self.target_gate(i);
            self.agents[i].dist_to_next = (self.agents[i].state.position - g.center).norm();
        }
        self.update_ranks(None);
    }

    fn ranking_key(&self, i: usize) -> ProgressState {
        let a = &self.agents[i];
        // Finishers all have the same gate count; earlier finish ranks first.
        let d = match a.finish_time {
            Some(t) => t,
            None => a.dist_to_next,
        };
        ProgressState {
            gates_passed: a.gates_passed,
            dist_to_next: d,
            rank: a.rank,
        }
    }

    fn update_ranks(&mut self, frozen: Option<&[Option<(usize, f64)>]>) {
        let present: Vec<usize> = (0..self.agents.len()).filter(|&i| self.agents[i].is_present()).collect();
        let keys: Vec<ProgressState> = present
            .iter()
            .map(|&i| {
                let mut k = self.ranking_key(i);
                if let Some(Some((g, d))) = frozen.map(|f| f[i]) {
                    k.gates_passed = g;
                    k.dist_to_next = d;
                }
                k
            })
            .collect();
        let ranks = compute_rankings(&keys);
        for (slot, &i) in present.iter().enumerate() {
            self.agents[i].rank = ranks[slot];
        }
    }

    fn n_present(&self) -> usize {
        self.agents.iter().filter(|a| a.is_present()).count()
    }

    /// Advances all racing agents by one control tick. `commands` holds one
    /// entry per agent; entries of agents that are not racing are ignored.
    pub fn step(&mut self, commands: &[Command]) -> Result<EnvStep> {
        let n = self.agents.len();
        if commands.len() != n {
            return Err(Error::Dimension(format!("expected {n} commands, got {}", commands.len())));
        }
        let dt = self.setup.env.control_dt();
        let opponents = self.curriculum.opponents_enabled && n > 1;
        let circle = matches!(self.setup.env.task, Task::Circle(_));
        let racing: Vec<bool> = self.agents.iter().map(Agent::is_racing).collect();
        let prev_pos: Vec<Vec3> = self.agents.iter().map(|a| a.state.position).collect();
        let prev_progress: Vec<(usize, f64)> = self.agents.iter().map(|a| (a.gates_passed, a.dist_to_next)).collect();
        let prev_targets: Vec<Gate> = (0..n).map(|i| self.target_gate(i)).collect();

        for i in 0..n {
            if !racing[i] {
                continue;
            }
            let cmd = commands[i];
            if !cmd.is_finite() {
                return Err(Error::NonFinite(format!("command of agent {i}")));
            }
            let wind = if opponents && self.setup.wake.enabled && !self.wake.is_empty() {
                self.wake.sample_airspeed(&prev_pos[i], Some(i))
            } else {
                Vec3::zeros()
            };
            let a = &mut self.agents[i];
            a.last_command = cmd;
            a.history.push(cmd);
            let applied = if self.setup.env.actuation_delay {
                apply_actuation_delay(&a.history, a.delay).unwrap_or(cmd)
            } else {
                cmd
            };
            a.state = step_with_controller(&a.state, &applied, &a.plant, &self.setup.params, &wind, dt)?;
        }
        self.steps += 1;
        let now = self.time();

        // Gate passages, gate hits and walls.
        let total = self.track.total_gates();
        let mut events: Vec<Option<TerminalEvent>> = vec![None; n];
        let mut passed = vec![false; n];
        let mut finished = vec![false; n];
        for i in 0..n {
            if !racing[i] {
                continue;
            }
            let a = &mut self.agents[i];
            match check_gate_transition(&prev_pos[i], &a.state.position, &prev_targets[i]) {
                GateCrossing::Passed => {
                    a.gates_passed += 1;
                    a.gate_times.push(now);
                    passed[i] = true;
                    if !circle && a.gates_passed >= total {
                        finished[i] = true;
                        a.finish_time = Some(now);
                    }
                }
                GateCrossing::Hit { error } if !circle => events[i] = Some(TerminalEvent::Gate { error }),
                _ => {}
            }
            if events[i].is_none() && !finished[i] && !self.track.arena.contains(&a.state.position) {
                events[i] = Some(TerminalEvent::Wall);
            }
        }

        let mut contacts = Vec::new();
        if opponents {
            let d_col = self.track.collision_radius;
            for i in 0..n {
                for j in i + 1..n {
                    if racing[i]
                        && racing[j]
                        && !finished[i]
                        && !finished[j]
                        && check_agent_collision(&self.agents[i].state.position, &self.agents[j].state.position, d_col)
                    {
                        contacts.push((i, j));
                    }
                }
            }
        }
        let p_nt = self.setup.env.reward.non_terminal_collision_prob;
        let resolution = resolve_collisions(&events, &contacts, p_nt, &mut self.rng);

        // Progress and ranks; agents removed by an opponent collision keep
        // their pre-impact progress.
        let mut frozen = vec![None; n];
        for i in 0..n {
            if !racing[i] {
                continue;
            }
            if resolution[i] == Resolution::Terminate(TerminalEvent::Agent) {
                let (g, d) = prev_progress[i];
                let a = &mut self.agents[i];
                a.gates_passed = g;
                if passed[i] {
                    a.gate_times.pop();
                    passed[i] = false;
                }
                a.dist_to_next = d;
                frozen[i] = Some((g, d));
            } else {
                let g = self.target_gate(i);
                self.agents[i].dist_to_next = (self.agents[i].state.position - g.center).norm();
            }
        }
        self.update_ranks(Some(&frozen));

        // Rewards.
        let cfg = &self.setup.env.reward;
        let d_col = self.track.collision_radius;
        let n_present = self.n_present();
        let max_steps = self.setup.env.max_steps();
        let mut outcomes = vec![AgentOutcome::default(); n];
        for i in 0..n {
            if !racing[i] {
                continue;
            }
            let a = &self.agents[i];
            let speed = a.state.velocity.norm();
            let out = &mut outcomes[i];
            out.active = true;
            out.passed_gate = passed[i];
            match resolution[i] {
                Resolution::Terminate(ev) => {
                    out.reward = reward::terminal_reward(ev, speed, cfg);
                    out.done = true;
                    out.cause = Some(match ev {
                        TerminalEvent::Wall => TerminationCause::Wall,
                        TerminalEvent::Agent => TerminationCause::Opponent,
                        TerminalEvent::Gate { .. } => TerminationCause::Gate,
                    });
                }
                Resolution::Continue { contact } => {
                    let nearest = if opponents {
                        (0..n)
                            .filter(|&j| j != i && racing[j])
                            .map(|j| (self.agents[j].state.position - a.state.position).norm())
                            .min_by(f64::total_cmp)
                    } else {
                        None
                    };
                    let prev = reward::RewardSnapshot {
                        dist_to_gate: (prev_pos[i] - prev_targets[i].center).norm(),
                        body_rates: Vec3::zeros(),
                        speed: 0.0,
                        rank: a.rank,
                        nearest_opponent: None,
                        collision_radius: d_col,
                    };
                    let cur = reward::RewardSnapshot {
                        dist_to_gate: (a.state.position - prev_targets[i].center).norm(),
                        body_rates: a.state.body_rates,
                        speed,
                        rank: a.rank,
                        nearest_opponent: nearest,
                        collision_radius: d_col,
                    };
                    let mut terms = reward::reward_terms(&prev, &cur, cfg, n_present);
                    if let Task::Circle(task) = &self.setup.env.task {
                        terms.rank = 0.0;
                        terms.tracking = cfg.speed_tracking * (speed - task.reference_speed).abs();
                    }
                    out.terms = terms;
                    out.reward = terms.total();
                    if contact {
                        out.contact = true;
                        out.reward += reward::terminal_reward(TerminalEvent::Agent, speed, cfg);
                    }
                    if finished[i] {
                        out.done = true;
                        out.cause = Some(TerminationCause::Finished);
                    } else if self.steps >= max_steps {
                        out.done = true;
                        out.truncated = true;
                        out.cause = Some(TerminationCause::Timeout);
                    }
                }
            }
        }
        for (a, out) in self.agents.iter_mut().zip(&outcomes) {
            if let Some(c) = out.cause {
                a.status = AgentStatus::Done(c);
            }
        }

        // Wake: survivors shed particles for the next tick.
        if self.setup.wake.enabled && opponents {
            self.wake.advance(dt);
            for i in 0..n {
                if self.agents[i].is_racing() {
                    let a = &self.agents[i];
                    let thrust = a.state.per_rotor_thrust(&a.plant);
                    self.wake.emit(i, &a.state, &a.plant, &thrust, &mut self.rng)?;
                }
            }
            self.wake.rebuild_index();
        }

        if let Some(records) = self.records.as_mut() {
            for (i, out) in outcomes.iter().enumerate() {
                if !out.active {
                    continue;
                }
                let a = &self.agents[i];
                let q = a.state.orientation.quaternion();
                let c = a.last_command;
                records.push(TickRecord {
                    time: now,
                    agent: i,
                    p: a.state.position.into(),
                    q: [q.w, q.i, q.j, q.k],
                    v: a.state.velocity.into(),
                    omega: a.state.body_rates.into(),
                    action: [c.collective, c.body_rates.x, c.body_rates.y, c.body_rates.z],
                    terms: out.terms,
                    reward: out.reward,
                    gates_passed: a.gates_passed,
                    passed_gate: out.passed_gate,
                    contact: out.contact,
                    event: out.cause,
                });
            }
        }

        if !circle && self.steps % self.setup.env.buffer.admit_every == 0 && self.agents.iter().all(Agent::is_racing) {
            let snapshot: Snapshot = self
                .agents
                .iter()
                .map(|a| curriculum::AgentSnapshot {
                    state: a.state.clone(),
                    gates_passed: a.gates_passed,
                })
                .collect();
            self.buffer.admit(snapshot, &self.track, &mut self.rng);
        }

        let episode_done = !self
            .agents
            .iter()
            .zip(&self.learners)
            .any(|(a, &learner)| learner && a.is_racing());
        let summary = if episode_done {
            let s = self.summary();
            self.reset()?;
            Some(s)
        } else {
            None
        };
        Ok(EnvStep {
            outcomes,
            episode_done,
            summary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_setup(n: usize) -> EnvSetup {
        let mut s = EnvSetup::default();
        s.env.n_agents = n;
        s.env.randomize_dynamics = false;
        s.env.randomize_initial = false;
        s.env.actuation_delay = false;
        s
    }

    fn hover_commands(env: &RaceEnv) -> Vec<Command> {
        vec![Command::hover(&env.setup().params); env.n_agents()]
    }

    #[test]
    fn hover_keeps_racing_until_timeout() {
        let mut s = quiet_setup(2);
        s.env.episode_seconds = 2.0;
        let mut env = RaceEnv::new(s, 1).unwrap();
        let cmds = hover_commands(&env);
        for k in 1..100 {
            let st = env.step(&cmds).unwrap();
            assert!(!st.episode_done, "ended early at {k}");
        }
        let st = env.step(&cmds).unwrap();
        assert!(st.episode_done);
        assert!(st.outcomes.iter().all(|o| o.truncated && o.cause == Some(TerminationCause::Timeout)));
        assert_eq!(env.steps(), 0);
    }

    #[test]
    fn paper_episode_cap_is_1500_steps() {
        assert_eq!(EnvConfig::default().max_steps(), 1500);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut env = RaceEnv::new(quiet_setup(2), 1).unwrap();
        assert!(matches!(env.step(&[Command::default()]), Err(Error::Dimension(_))));
    }

    #[test]
    fn forced_collision_outcomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let events = [None, None, Some(TerminalEvent::Wall)];
        let always = resolve_collisions(&events, &[(0, 1), (1, 2)], 0.0, &mut rng);
        assert_eq!(always[0], Resolution::Terminate(TerminalEvent::Agent));
        assert_eq!(always[1], Resolution::Terminate(TerminalEvent::Agent));
        assert_eq!(always[2], Resolution::Terminate(TerminalEvent::Wall));
        let never = resolve_collisions(&events, &[(0, 1)], 1.0, &mut rng);
        assert_eq!(never[0], Resolution::Continue { contact: true });
        let none = resolve_collisions(&[None, None], &[], 0.1, &mut rng);
        assert!(none.iter().all(|r| *r == Resolution::Continue { contact: false }));
    }

    #[test]
    fn non_terminal_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 10_000;
        let mut cont = 0;
        for _ in 0..trials {
            let r = resolve_collisions(&[None, None], &[(0, 1)], 0.10, &mut rng);
            if r[0] == (Resolution::Continue { contact: true }) {
                cont += 1;
            }
        }
        let frac = cont as f64 / trials as f64;
        assert!((frac - 0.10).abs() < 0.01, "{frac}");
    }

    #[test]
    fn terminal_collision_ranks_by_prior_progress() {
        let mut s = quiet_setup(2);
        s.env.reward.non_terminal_collision_prob = 0.0;
        let mut env = RaceEnv::new(s, 3).unwrap();
        let g = env.track().gates[0].clone();
        let p = g.center - g.normal() * 3.0;
        env.agents[0].state = QuadState::hover(p, g.yaw, &env.setup.params);
        env.agents[1].state = QuadState::hover(p + Vec3::new(0.0, 0.0, 0.05), g.yaw, &env.setup.params);
        env.agents[1].dist_to_next = 1.0;
        env.agents[0].dist_to_next = 5.0;
        let cmds = hover_commands(&env);
        let st = env.step(&cmds).unwrap();
        assert!(st.episode_done);
        let sum = st.summary.unwrap();
        assert_eq!(sum.agents[0].cause, Some(TerminationCause::Opponent));
        assert_eq!(sum.agents[1].cause, Some(TerminationCause::Opponent));
        assert_eq!(sum.agents[1].rank, 1);
        assert_eq!(sum.agents[0].rank, 2);
        assert!(st.outcomes[0].reward <= -1.0);
    }

    #[test]
    fn solo_and_blind_see_no_opponents() {
        let env = RaceEnv::new(quiet_setup(1), 1).unwrap();
        assert!(env.observe(0).opponents.is_empty());
        let mut s = quiet_setup(3);
        s.env.opponent_observations = false;
        let env = RaceEnv::new(s, 1).unwrap();
        assert!(env.observe(0).opponents.is_empty());
        let mut env = RaceEnv::new(quiet_setup(3), 1).unwrap();
        assert_eq!(env.observe(0).opponents.len(), 2);
        env.set_curriculum(CurriculumState {
            opponents_enabled: false,
            ..CurriculumState::full()
        });
        assert!(env.observe(0).opponents.is_empty());
    }

    #[test]
    fn opponent_record_is_relative() {
        let mut env = RaceEnv::new(quiet_setup(2), 1).unwrap();
        let p = Vec3::new(0.0, 0.0, 2.0);
        env.agents[0].state = QuadState::at_rest(p);
        env.agents[1].state = QuadState::at_rest(p + Vec3::x());
        let o = env.observe(0).opponents[0];
        assert_eq!(o.p_rel, Vec3::x());
        assert_eq!(o.v_rel, Vec3::zeros());
    }

    #[test]
    fn race_start_probability() {
        let mut env = RaceEnv::new(quiet_setup(4), 9).unwrap();
        env.set_curriculum(CurriculumState {
            opponents_enabled: true,
            gate_multiplier: 2.0,
            race_start_prob: 0.05,
        });
        let n = 10_000;
        let mut starts = 0;
        for _ in 0..n {
            env.reset().unwrap();
            if env.last_reset_was_race_start() {
                starts += 1;
            }
            for a in env.agents() {
                assert!(env.track().arena.contains(&a.state.position));
            }
        }
        let p = starts as f64 / n as f64;
        // 4 sigma of Binomial(10^4, 0.05).
        assert!((p - 0.05).abs() < 4.0 * (0.05f64 * 0.95 / n as f64).sqrt(), "{p}");
        assert_eq!(env.track().size_multiplier(), 2.0);
    }

    #[test]
    fn circle_reset_places_upper_ahead() {
        let mut s = quiet_setup(2);
        let task = CircleTask::default();
        s.env.task = Task::Circle(task.clone());
        let mut env = RaceEnv::new(s, 4).unwrap();
        env.reset_circle(&task, Some(0.5), Some(true)).unwrap();
        let a0 = task.angle_of(&env.agents()[0].state.position);
        let a1 = task.angle_of(&env.agents()[1].state.position);
        let gap = (a1 - a0).rem_euclid(2.0 * PI);
        assert!((gap - 0.5 * 2.5 / 3.0).abs() < 1e-9);
        assert!((env.agents()[1].state.position.z - env.agents()[0].state.position.z - 0.5).abs() < 1e-12);
        assert!(env.observe(1).opponents.is_empty());
        assert_eq!(env.observe(0).opponents.len(), 1);
        env.reset_circle(&task, Some(0.1), Some(false)).unwrap();
        assert!(env.observe(0).opponents.is_empty());
    }

    #[test]
    fn action_bounds_round_trip() {
        let b = ActionBounds::new(&QuadParams::default(), &EnvConfig::default());
        assert!((b.max_collective - 14.0 / 0.220).abs() < 1e-12);
        let c = b.to_command(&[1.0, -1.0, 0.0, 0.5]);
        assert!((c.collective - b.max_collective).abs() < 1e-12);
        let back = b.to_normalized(&c);
        assert!((back[3] - 0.5).abs() < 1e-12);
    }
}
