//! Critic value over a vertical plane of ego positions in a frozen scene.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{QuadState, Vec3};
use crate::env::{EgoObservation, Observation, OpponentObservation};
use crate::error::{Error, Result};
use crate::policy::{Features, Policy, RecurrentState};
use crate::track::Track;

/// Ego kinematics and opponent states held fixed while the ego position
/// moves over the grid.
#[derive(Clone, Debug)]
pub struct Scene {
    pub ego: QuadState,
    pub opponents: Vec<QuadState>,
    pub gates_passed: usize,
}

/// A regular grid over the (x, z) plane at the ego's y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub x: [f64; 2],
    pub z: [f64; 2],
    pub nx: usize,
    pub nz: usize,
}

impl SweepGrid {
    pub fn xs(&self) -> Vec<f64> {
        linspace(self.x, self.nx)
    }

    pub fn zs(&self) -> Vec<f64> {
        linspace(self.z, self.nz)
    }
}

fn linspace([a, b]: [f64; 2], n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        _ => (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect(),
    }
}

/// Values in row-major order: `values[iz * nx + ix]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub grid: SweepGrid,
    pub y: f64,
    pub xs: Vec<f64>,
    pub zs: Vec<f64>,
    pub values: Vec<f64>,
}

impl ValueField {
    pub fn at(&self, ix: usize, iz: usize) -> f64 {
        self.values[iz * self.grid.nx + ix]
    }
}

/// Evaluates the critic with the ego moved to every grid point. Points past
/// the plane of the next gate are scored as if that gate had been passed.
pub fn value_sweep(policy: &Policy<f32>, track: &Track, scene: &Scene, grid: &SweepGrid) -> Result<ValueField> {
    if grid.nx == 0 || grid.nz == 0 {
        return Err(Error::config("sweep.grid", "needs at least one point per axis"));
    }
    let y = scene.ego.position.y;
    let xs = grid.xs();
    let zs = grid.zs();
    for (x, z) in [(grid.x[0], grid.z[0]), (grid.x[1], grid.z[1])] {
        if !track.arena.contains(&Vec3::new(x, y, z)) {
            return Err(Error::config("sweep.grid", "must lie inside the arena"));
        }
    }
    let norm = &policy.config().normalization;
    let mut feats = Vec::with_capacity(xs.len() * zs.len());
    for &z in &zs {
        for &x in &xs {
            let mut ego = scene.ego.clone();
            ego.position = Vec3::new(x, y, z);
            let mut k = scene.gates_passed;
            if track.gate_for(k).signed_distance(&ego.position) >= 0.0 {
                k += 1;
            }
            let obs = Observation {
                ego: EgoObservation::new(&ego, track.gate_for(k), track.gate_for(k + 1)),
                opponents: scene.opponents.iter().map(|o| OpponentObservation::relative(&ego, o)).collect(),
            };
            feats.push(norm.features(&obs));
        }
    }
    let refs: Vec<&Features> = feats.iter().collect();
    let mut states = vec![RecurrentState::zeros(policy.hidden()); refs.len()];
    let out = policy.act_features(&refs, &mut states, &mut ChaCha8Rng::seed_from_u64(0), true)?;
    Ok(ValueField {
        grid: *grid,
        y,
        xs,
        zs,
        values: out.values,
    })
}
