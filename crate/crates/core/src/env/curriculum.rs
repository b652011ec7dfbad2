//! Training curriculum: opponent switch-on, gate-size shrinking, race-start
//! probability, and the pool of mid-track initial states.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{QuadParams, QuadState, Vec3};
use crate::error::{Error, Result};
use crate::track::{check_agent_collision, Track};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// Opponents are observed, collidable and shed wake onto each other.
    pub opponents_enabled: bool,
    pub gate_multiplier: f64,
    pub race_start_prob: f64,
}

impl CurriculumState {
    /// Final curriculum stage, used for evaluation.
    pub fn full() -> Self {
        Self {
            opponents_enabled: true,
            gate_multiplier: 1.0,
            race_start_prob: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.race_start_prob) {
            return Err(Error::config("curriculum.race_start_prob", "must be in [0, 1]"));
        }
        if !(1.0..=2.0).contains(&self.gate_multiplier) {
            return Err(Error::config("curriculum.gate_multiplier", "must be in [1, 2]"));
        }
        Ok(())
    }
}

impl Default for CurriculumState {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub enabled: bool,
    /// Fraction of training after which opponents are switched on.
    pub opponents_after: f64,
    /// Fraction of training over which the gate multiplier reaches 1.
    pub shrink_until: f64,
    pub initial_gate_multiplier: f64,
    pub race_start_initial: f64,
    pub race_start_final: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            enabled: true,
            opponents_after: 0.10,
            shrink_until: 0.30,
            initial_gate_multiplier: 2.0,
            race_start_initial: 0.05,
            race_start_final: 0.95,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("curriculum.opponents_after", self.opponents_after),
            ("curriculum.shrink_until", self.shrink_until),
            ("curriculum.race_start_initial", self.race_start_initial),
            ("curriculum.race_start_final", self.race_start_final),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("must be in [0, 1], got {v}")));
            }
        }
        if !(1.0..=2.0).contains(&self.initial_gate_multiplier) {
            return Err(Error::config("curriculum.initial_gate_multiplier", "must be in [1, 2]"));
        }
        Ok(())
    }

    pub fn state_at(&self, iteration: usize, total: usize) -> CurriculumState {
        if !self.enabled {
            return CurriculumState::full();
        }
        let frac = if total == 0 {
            1.0
        } else {
            (iteration as f64 / total as f64).clamp(0.0, 1.0)
        };
        let shrink = if self.shrink_until > 0.0 {
            (frac / self.shrink_until).min(1.0)
        } else {
            1.0
        };
        CurriculumState {
            opponents_enabled: frac >= self.opponents_after,
            gate_multiplier: self.initial_gate_multiplier + (1.0 - self.initial_gate_multiplier) * shrink,
            race_start_prob: self.race_start_initial + (self.race_start_final - self.race_start_initial) * frac,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferConfig {
    pub capacity: usize,
    /// Live states are offered to the buffer every this many steps.
    pub admit_every: usize,
    /// Track-sampled states the buffer starts with.
    pub seed_states: usize,
    /// Minimum distance behind the target gate plane for seeded states, m.
    pub seed_gate_clearance: f64,
    pub seed_max_speed: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 10_000,
            admit_every: 50,
            seed_states: 256,
            seed_gate_clearance: 0.5,
            seed_max_speed: 4.0,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::config("env.buffer.capacity", "must be positive"));
        }
        if self.admit_every == 0 {
            return Err(Error::config("env.buffer.admit_every", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSnapshot {
    pub state: QuadState,
    pub gates_passed: usize,
}

/// Whole-environment state: one entry per agent.
pub type Snapshot = Vec<AgentSnapshot>;

/// Collision-free and inside the arena.
pub fn admissible(snapshot: &[AgentSnapshot], track: &Track) -> bool {
    if !snapshot.iter().all(|a| track.arena.contains(&a.state.position) && a.state.is_finite()) {
        return false;
    }
    for (i, a) in snapshot.iter().enumerate() {
        for b in &snapshot[i + 1..] {
            if check_agent_collision(&a.state.position, &b.state.position, track.collision_radius) {
                return false;
            }
        }
    }
    true
}

/// Fixed-capacity pool with uniform random eviction.
#[derive(Clone, Debug, Default)]
pub struct InitialStateBuffer {
    capacity: usize,
    entries: Vec<Snapshot>,
}

impl InitialStateBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[Snapshot] {
        &self.entries
    }

    /// Stores `snapshot` if admissible; returns whether it was stored.
    pub fn admit<R: Rng + ?Sized>(&mut self, snapshot: Snapshot, track: &Track, rng: &mut R) -> bool {
        if self.capacity == 0 || !admissible(&snapshot, track) {
            return false;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(snapshot);
        } else {
            let slot = rng.random_range(0..self.entries.len());
            self.entries[slot] = snapshot;
        }
        true
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&Snapshot> {
        self.entries.choose(rng)
    }
}

/// One hover-attitude state on the approach to a random gate, behind the
/// gate plane and moving toward it.
pub fn sample_track_state<R: Rng + ?Sized>(
    track: &Track,
    params: &QuadParams,
    cfg: &BufferConfig,
    rng: &mut R,
) -> AgentSnapshot {
    let n = track.gates.len();
    let total = track.total_gates();
    for _ in 0..64 {
        let k = rng.random_range(0..total);
        let target = track.gate_for(k);
        let from = if k == 0 {
            track.start_reference
        } else {
            track.gate_for(k - 1).center
        };
        let t: f64 = rng.random();
        let mut p = from + (target.center - from) * t;
        if target.signed_distance(&p) > -cfg.seed_gate_clearance {
            let back = cfg.seed_gate_clearance + 2.5 * rng.random::<f64>();
            p = target.center - target.normal() * back;
        }
        let jitter = Vec3::new(
            rng.random_range(-0.3..=0.3),
            rng.random_range(-0.3..=0.3),
            rng.random_range(-0.3..=0.3),
        );
        p += jitter;
        if !track.arena.contains(&p) || target.signed_distance(&p) > -cfg.seed_gate_clearance {
            continue;
        }
        let dir = (target.center - p).normalize();
        let mut state = QuadState::hover(p, dir.y.atan2(dir.x), params);
        state.velocity = dir * cfg.seed_max_speed * rng.random::<f64>();
        return AgentSnapshot { state, gates_passed: k };
    }
    // Every gate has free space right behind it.
    let k = rng.random_range(0..n);
    let target = &track.gates[k];
    let p = target.center - target.normal() * (cfg.seed_gate_clearance + 0.5);
    AgentSnapshot {
        state: QuadState::hover(p, target.yaw, params),
        gates_passed: k,
    }
}

/// A collision-free multi-agent snapshot of track-sampled states.
pub fn sample_track_snapshot<R: Rng + ?Sized>(
    track: &Track,
    params: &QuadParams,
    n_agents: usize,
    cfg: &BufferConfig,
    rng: &mut R,
) -> Snapshot {
    loop {
        let snapshot: Snapshot = (0..n_agents).map(|_| sample_track_state(track, params, cfg, rng)).collect();
        if admissible(&snapshot, track) {
            return snapshot;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        let s = CurriculumSchedule::default();
        let c0 = s.state_at(0, 1000);
        assert!(!c0.opponents_enabled);
        assert_eq!(c0.gate_multiplier, 2.0);
        assert!((c0.race_start_prob - 0.05).abs() < 1e-12);
        let c_mid = s.state_at(150, 1000);
        assert!(c_mid.opponents_enabled);
        assert!((c_mid.gate_multiplier - 1.5).abs() < 1e-12);
        let c_end = s.state_at(1000, 1000);
        assert_eq!(c_end.gate_multiplier, 1.0);
        assert!((c_end.race_start_prob - 0.95).abs() < 1e-12);
        for i in 0..=1000 {
            s.state_at(i, 1000).validate().unwrap();
        }
    }

    #[test]
    fn seeded_states_are_behind_their_gate() {
        let track = Track::default();
        let params = QuadParams::default();
        let cfg = BufferConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let a = sample_track_state(&track, &params, &cfg, &mut rng);
            let gate = track.gate_for(a.gates_passed);
            assert!(track.arena.contains(&a.state.position));
            assert!(gate.signed_distance(&a.state.position) <= -cfg.seed_gate_clearance + 1e-9);
        }
    }

    #[test]
    fn buffer_evicts_at_capacity() {
        let track = Track::default();
        let params = QuadParams::default();
        let cfg = BufferConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut buf = InitialStateBuffer::new(10);
        for _ in 0..50 {
            let s = sample_track_snapshot(&track, &params, 4, &cfg, &mut rng);
            assert!(buf.admit(s, &track, &mut rng));
        }
        assert_eq!(buf.len(), 10);
        let crowded = vec![
            AgentSnapshot { state: QuadState::at_rest(Vec3::new(0.0, 0.0, 1.0)), gates_passed: 0 },
            AgentSnapshot { state: QuadState::at_rest(Vec3::new(0.05, 0.0, 1.0)), gates_passed: 0 },
        ];
        assert!(!buf.admit(crowded, &track, &mut rng));
        let outside = vec![AgentSnapshot { state: QuadState::at_rest(Vec3::new(50.0, 0.0, 1.0)), gates_passed: 0 }];
        assert!(!buf.admit(outside, &track, &mut rng));
    }
}
