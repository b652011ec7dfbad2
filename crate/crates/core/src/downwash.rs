//! Particle-based propeller downwash.
//!
//! Every control tick each vehicle sheds particles below its rotors. A
//! particle leaves with the momentum-theory jet speed of its rotor plus the
//! vehicle velocity, then coasts with an exponentially decaying velocity
//! until it reaches its maximum age. The local wind seen by a vehicle is the
//! inverse-distance-weighted mean velocity of particles within the query
//! radius, ignoring particles the vehicle shed itself.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::UnitQuaternion;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{QuadParams, QuadState, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WakeConfig {
    pub enabled: bool,
    /// Air density, kg/m^3.
    pub air_density: f64,
    /// Propeller diameter, m.
    pub prop_diameter: f64,
    /// Particles shed per vehicle per tick, split evenly over the rotors.
    pub particles_per_vehicle: usize,
    pub cone_half_angle_deg: f64,
    /// Time constant of the exponential velocity decay, s.
    pub decay_time: f64,
    pub max_age: f64,
    pub query_radius: f64,
    /// Distance floor of the inverse-distance weights, m.
    pub idw_floor: f64,
    pub capacity: usize,
}

impl Default for WakeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            air_density: 1.204,
            prop_diameter: 0.0737,
            particles_per_vehicle: 96,
            cone_half_angle_deg: 15.0,
            decay_time: 0.5,
            max_age: 1.5,
            query_radius: 0.3,
            idw_floor: 1e-3,
            capacity: 50_000,
        }
    }
}

impl WakeConfig {
    pub fn prop_disk_area(&self) -> f64 {
        PI * (self.prop_diameter / 2.0).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("downwash.air_density", self.air_density),
            ("downwash.prop_diameter", self.prop_diameter),
            ("downwash.decay_time", self.decay_time),
            ("downwash.max_age", self.max_age),
            ("downwash.query_radius", self.query_radius),
            ("downwash.idw_floor", self.idw_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..90.0).contains(&self.cone_half_angle_deg) {
            return Err(Error::config("downwash.cone_half_angle_deg", "must be in [0, 90)"));
        }
        if self.capacity == 0 {
            return Err(Error::config("downwash.capacity", "must be positive"));
        }
        Ok(())
    }
}

/// Induced jet speed of a rotor from momentum theory, `sqrt(T / (2 rho A))`.
pub fn initial_jet_speed(thrust: f64, air_density: f64, disk_area: f64) -> Result<f64> {
    if !(thrust >= 0.0) {
        return Err(Error::config("thrust", format!("must be non-negative, got {thrust}")));
    }
    if !(air_density > 0.0 && disk_area > 0.0) {
        return Err(Error::config("air_density/disk_area", "must be positive"));
    }
    Ok((thrust / (2.0 * air_density * disk_area)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WakeParticle {
    pub position: Vec3,
    pub velocity: Vec3,
    pub age: f64,
    pub source: usize,
}

/// Uniform grid over particle positions. Cells are located by binary search
/// over sorted packed keys.
#[derive(Clone, Debug, Default)]
struct CellIndex {
    cell: f64,
    keys: Vec<(u64, u32)>,
}

const KEY_BITS: u32 = 21;
const KEY_OFFSET: i64 = 1 << (KEY_BITS - 1);
const KEY_MASK: i64 = (1 << KEY_BITS) - 1;

fn cell_coords(p: &Vec3, cell: f64) -> [i64; 3] {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}

fn pack(c: [i64; 3]) -> u64 {
    let mut key = 0u64;
    for v in c {
        key = (key << KEY_BITS) | (((v + KEY_OFFSET) & KEY_MASK) as u64);
    }
    key
}

impl CellIndex {
    fn build(cell: f64, particles: &VecDeque<WakeParticle>) -> Self {
        let mut keys: Vec<(u64, u32)> = particles
            .iter()
            .enumerate()
            .map(|(i, p)| (pack(cell_coords(&p.position, cell)), i as u32))
            .collect();
        keys.sort_unstable();
        Self { cell, keys }
    }

    fn for_each_near(&self, q: &Vec3, mut f: impl FnMut(usize)) {
        let c = cell_coords(q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = pack([c[0] + dx, c[1] + dy, c[2] + dz]);
                    let start = self.keys.partition_point(|e| e.0 < key);
                    for e in self.keys[start..].iter().take_while(|e| e.0 == key) {
                        f(e.1 as usize);
                    }
                }
            }
        }
    }
}

/// Particle population of one environment.
#[derive(Clone, Debug)]
pub struct WakeField {
    config: WakeConfig,
    particles: VecDeque<WakeParticle>,
    index: CellIndex,
    index_valid: bool,
}

impl WakeField {
    pub fn new(config: WakeConfig) -> Self {
        Self {
            particles: VecDeque::with_capacity(config.capacity.min(1 << 16)),
            index: CellIndex::default(),
            index_valid: false,
            config,
        }
    }

    pub fn config(&self) -> &WakeConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> impl Iterator<Item = &WakeParticle> {
        self.particles.iter()
    }

    pub fn clear(&mut self) {
        self.particles.clear();
        self.index_valid = false;
    }

    /// Inserts a particle, evicting the oldest when at capacity.
    pub fn insert(&mut self, particle: WakeParticle) {
        if self.particles.len() >= self.config.capacity {
            self.particles.pop_front();
        }
        self.particles.push_back(particle);
        self.index_valid = false;
    }

    /// Sheds one tick's worth of particles below each rotor of `agent`.
    pub fn emit<R: Rng + ?Sized>(
        &mut self,
        agent_id: usize,
        state: &QuadState,
        params: &QuadParams,
        per_rotor_thrust: &[f64; 4],
        rng: &mut R,
    ) -> Result<()> {
        let area = self.config.prop_disk_area();
        let rotors = params.rotor_positions();
        let axis = -state.orientation.transform_vector(&Vec3::z());
        let cos_max = self.config.cone_half_angle_deg.to_radians().cos();
        let radius = self.config.prop_diameter / 2.0;
        let per_vehicle = self.config.particles_per_vehicle;
        for (i, &thrust) in per_rotor_thrust.iter().enumerate() {
            if thrust <= 0.0 {
                continue;
            }
            let count = per_vehicle / 4 + usize::from(i < per_vehicle % 4);
            let speed = initial_jet_speed(thrust, self.config.air_density, area)?;
            let hub = state.position + state.orientation.transform_vector(&rotors[i]);
            for _ in 0..count {
                let dir = sample_cone(&axis, cos_max, rng);
                let r = radius * rng.random::<f64>().sqrt();
                let phi = 2.0 * PI * rng.random::<f64>();
                let offset = state
                    .orientation
                    .transform_vector(&Vec3::new(r * phi.cos(), r * phi.sin(), 0.0));
                self.insert(WakeParticle {
                    position: hub + offset,
                    velocity: dir * speed + state.velocity,
                    age: 0.0,
                    source: agent_id,
                });
            }
        }
        Ok(())
    }

    /// Advects all particles over `dt` with exponentially decaying velocity
    /// and drops particles that reached their maximum age.
    pub fn advance(&mut self, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        let tau = self.config.decay_time;
        let decay = (-dt / tau).exp();
        let travel = tau * (1.0 - decay);
        for p in self.particles.iter_mut() {
            p.position += p.velocity * travel;
            p.velocity *= decay;
            p.age += dt;
        }
        let limit = self.config.max_age - 1e-12;
        // Emission order makes ages non-increasing front to back.
        while self.particles.front().is_some_and(|p| p.age >= limit) {
            self.particles.pop_front();
        }
        self.particles.retain(|p| p.age < limit);
        self.index_valid = false;
    }

    /// Rebuilds the spatial index; queries after this are grid-accelerated.
    pub fn rebuild_index(&mut self) {
        self.index = CellIndex::build(self.config.query_radius, &self.particles);
        self.index_valid = true;
    }

    /// Local wind at `query`, excluding particles shed by `exclude`.
    pub fn sample_airspeed(&self, query: &Vec3, exclude: Option<usize>) -> Vec3 {
        let r2 = self.config.query_radius * self.config.query_radius;
        let floor = self.config.idw_floor;
        let mut acc = Vec3::zeros();
        let mut wsum = 0.0;
        let mut visit = |p: &WakeParticle| {
            if Some(p.source) == exclude {
                return;
            }
            let d2 = (p.position - query).norm_squared();
            if d2 < r2 {
                let w = 1.0 / d2.sqrt().max(floor);
                acc += p.velocity * w;
                wsum += w;
            }
        };
        if self.index_valid {
            self.index.for_each_near(query, |i| visit(&self.particles[i]));
        } else {
            self.particles.iter().for_each(visit);
        }
        if wsum > 0.0 {
            acc / wsum
        } else {
            Vec3::zeros()
        }
    }

    /// Flat CSV snapshot: one particle per line.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,z,vx,vy,vz,age,source")?;
        for p in &self.particles {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                p.position.x, p.position.y, p.position.z, p.velocity.x, p.velocity.y, p.velocity.z, p.age, p.source
            )?;
        }
        Ok(())
    }
}

/// Uniform direction on the spherical cap of half-angle `acos(cos_max)`
/// around `axis`.
fn sample_cone<R: Rng + ?Sized>(axis: &Vec3, cos_max: f64, rng: &mut R) -> Vec3 {
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - cos_max);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    let local = Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
    let rot = UnitQuaternion::rotation_between(&Vec3::z(), axis)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vec3::x_axis(), PI));
    rot.transform_vector(&local)
}
