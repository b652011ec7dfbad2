//! Gate circuit geometry, collision tests, race progress and start grid.
//!
//! A gate is a square aperture in a vertical plane. Its yaw gives the forward
//! normal: passing means crossing the plane along that normal inside the
//! (curriculum-scaled) aperture. A crossing outside the aperture but within
//! the frame band is a gate hit whose error is the in-plane distance to the
//! aperture edge.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Vec3;
use crate::error::{Error, Result};

/// Split-S circuit: (x, y, z, yaw in degrees) per gate.
pub const SPLIT_S_GATES: [[f64; 4]; 7] = [
    [-0.60, -0.86, 3.68, -20.0],
    [9.00, 6.45, 1.05, 0.0],
    [8.85, -3.80, 1.05, -130.0],
    [-4.30, -5.60, 3.40, 180.0],
    [-4.30, -5.60, 1.42, 0.0],
    [4.50, -0.45, 1.05, 80.0],
    [-1.95, 6.81, 1.05, -150.0],
];

pub const SPLIT_S_START: [f64; 3] = [-5.0, 4.7, 0.61];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub center: Vec3,
    /// Heading of the forward normal about world z, rad.
    pub yaw: f64,
    /// Nominal aperture side length, m.
    pub aperture: f64,
    /// Width of the frame band beyond the aperture edge, m.
    pub frame_band: f64,
    /// Curriculum scale of the aperture, in [1, 2].
    pub size_multiplier: f64,
}

impl Gate {
    pub fn new(center: Vec3, yaw: f64, aperture: f64, frame_band: f64) -> Self {
        Self {
            center,
            yaw,
            aperture,
            frame_band,
            size_multiplier: 1.0,
        }
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }

    /// Horizontal in-plane axis.
    pub fn lateral(&self) -> Vec3 {
        Vec3::new(-self.yaw.sin(), self.yaw.cos(), 0.0)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.aperture * self.size_multiplier
    }

    /// Aperture corners: (+lat,+up), (-lat,+up), (-lat,-up), (+lat,-up).
    pub fn corners(&self) -> [Vec3; 4] {
        let h = self.half_width();
        let u = self.lateral() * h;
        let w = Vec3::z() * h;
        [
            self.center + u + w,
            self.center - u + w,
            self.center - u - w,
            self.center + u - w,
        ]
    }

    /// Signed distance of `p` from the gate plane along the forward normal.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        (p - self.center).dot(&self.normal())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateCrossing {
    None,
    Passed,
    Hit { error: f64 },
}

/// Classifies the segment `prev -> new` against one gate.
pub fn check_gate_transition(prev: &Vec3, new: &Vec3, gate: &Gate) -> GateCrossing {
    let s0 = gate.signed_distance(prev);
    let s1 = gate.signed_distance(new);
    let forward = s0 < 0.0 && s1 >= 0.0;
    let backward = s0 >= 0.0 && s1 < 0.0;
    if !forward && !backward {
        return GateCrossing::None;
    }
    let t = s0 / (s0 - s1);
    let x = prev + (new - prev) * t - gate.center;
    let a = x.dot(&gate.lateral()).abs();
    let b = x.z.abs();
    let h = gate.half_width();
    let da = (a - h).max(0.0);
    let db = (b - h).max(0.0);
    let error = (da * da + db * db).sqrt();
    if error == 0.0 {
        if forward {
            GateCrossing::Passed
        } else {
            GateCrossing::None
        }
    } else if error <= gate.frame_band {
        GateCrossing::Hit { error }
    } else {
        GateCrossing::None
    }
}

/// Two collision spheres of radius `d_col` touch.
pub fn check_agent_collision(p_i: &Vec3, p_j: &Vec3, d_col: f64) -> bool {
    (p_i - p_j).norm() < 2.0 * d_col
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Arena {
    fn default() -> Self {
        Self {
            min: [-8.0, -9.0, 0.0],
            max: [12.0, 10.0, 6.0],
        }
    }
}

impl Arena {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// (x, y, z, yaw_deg) per gate, in race order.
    pub gates: Vec<[f64; 4]>,
    /// Optional subset of gate indices to race instead of the full circuit.
    pub subset: Option<Vec<usize>>,
    pub aperture: f64,
    pub frame_band: f64,
    pub laps: usize,
    pub collision_radius: f64,
    pub arena: Arena,
    pub start_reference: [f64; 3],
    pub start_spacing: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            gates: SPLIT_S_GATES.to_vec(),
            subset: None,
            aperture: 1.5,
            frame_band: 0.4,
            laps: 3,
            collision_radius: 0.1,
            arena: Arena::default(),
            start_reference: SPLIT_S_START,
            start_spacing: 1.0,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gates.is_empty() {
            return Err(Error::config("track.gates", "must not be empty"));
        }
        if let Some(sub) = &self.subset {
            if sub.is_empty() || sub.iter().any(|&i| i >= self.gates.len()) {
                return Err(Error::config("track.subset", "indices must be valid and non-empty"));
            }
        }
        if !(self.aperture > 0.0) {
            return Err(Error::config("track.aperture", "must be positive"));
        }
        if !(self.collision_radius > 0.0) {
            return Err(Error::config("track.collision_radius", "must be positive"));
        }
        if self.laps == 0 {
            return Err(Error::config("track.laps", "must be at least 1"));
        }
        if !(self.start_spacing > 0.0) {
            return Err(Error::config("track.start_spacing", "must be positive"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Track> {
        self.validate()?;
        let picked: Vec<[f64; 4]> = match &self.subset {
            Some(sub) => sub.iter().map(|&i| self.gates[i]).collect(),
            None => self.gates.clone(),
        };
        let gates = picked
            .iter()
            .map(|g| Gate::new(Vec3::new(g[0], g[1], g[2]), g[3].to_radians(), self.aperture, self.frame_band))
            .collect();
        Ok(Track {
            gates,
            arena: self.arena,
            laps: self.laps,
            collision_radius: self.collision_radius,
            start_reference: Vec3::from(self.start_reference),
            start_spacing: self.start_spacing,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub gates: Vec<Gate>,
    pub arena: Arena,
    pub laps: usize,
    pub collision_radius: f64,
    pub start_reference: Vec3,
    pub start_spacing: f64,
}

impl Default for Track {
    fn default() -> Self {
        TrackConfig::default().build().expect("default track is valid")
    }
}

impl Track {
    pub fn total_gates(&self) -> usize {
        self.laps * self.gates.len()
    }

    pub fn gate_for(&self, gates_passed: usize) -> &Gate {
        &self.gates[gates_passed % self.gates.len()]
    }

    pub fn set_size_multiplier(&mut self, m: f64) {
        let m = m.clamp(1.0, 2.0);
        for g in &mut self.gates {
            g.size_multiplier = m;
        }
    }

    pub fn size_multiplier(&self) -> f64 {
        self.gates[0].size_multiplier
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressState {
    pub gates_passed: usize,
    /// Distance to the next gate center, m.
    pub dist_to_next: f64,
    pub rank: usize,
}

/// Ranks 1..N ordered by gates passed (desc) then distance to the next gate
/// (asc); ties keep agent order.
pub fn compute_rankings(progress: &[ProgressState]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..progress.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&progress[a], &progress[b]);
        pb.gates_passed
            .cmp(&pa.gates_passed)
            .then_with(|| pa.dist_to_next.total_cmp(&pb.dist_to_next))
            .then(Ordering::Equal)
    });
    let mut ranks = vec![0; progress.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StartPose {
    pub position: Vec3,
    /// Heading toward the first gate, rad.
    pub yaw: f64,
}

/// Start slots on a horizontal arc around the first gate, symmetric about
/// the reference bearing, adjacent slots `spacing` apart.
pub fn start_slots(n: usize, spacing: f64, reference: &Vec3, gate: &Gate, arena: &Arena) -> Result<Vec<StartPose>> {
    if n == 0 {
        return Err(Error::config("n_agents", "must be at least 1"));
    }
    if !(spacing > 0.0) {
        return Err(Error::config("spacing", "must be positive"));
    }
    let rel = reference - gate.center;
    let radius = (rel.x * rel.x + rel.y * rel.y).sqrt();
    if spacing >= 2.0 * radius {
        return Err(Error::GridOutOfArena { n });
    }
    let bearing = rel.y.atan2(rel.x);
    let step = 2.0 * (spacing / (2.0 * radius)).asin();
    if (n as f64 - 1.0) * step >= 2.0 * std::f64::consts::PI {
        return Err(Error::GridOutOfArena { n });
    }
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        let angle = bearing + (k as f64 - (n as f64 - 1.0) / 2.0) * step;
        let position = Vec3::new(
            gate.center.x + radius * angle.cos(),
            gate.center.y + radius * angle.sin(),
            reference.z,
        );
        if !arena.contains(&position) {
            return Err(Error::GridOutOfArena { n });
        }
        let to_gate = gate.center - position;
        poses.push(StartPose {
            position,
            yaw: to_gate.y.atan2(to_gate.x),
        });
    }
    Ok(poses)
}

/// Start slots with an optional random slot permutation.
pub fn start_grid<R: Rng + ?Sized>(track: &Track, n: usize, rng: Option<&mut R>) -> Result<Vec<StartPose>> {
    let mut poses = start_slots(n, track.start_spacing, &track.start_reference, &track.gates[0], &track.arena)?;
    if let Some(rng) = rng {
        poses.shuffle(rng);
    }
    Ok(poses)
}

/// Reads a track file: one `x,y,z,yaw_deg` record per line; blank lines,
/// `#` comments and a header line are skipped.
pub fn read_track_file<R: BufRead>(input: R) -> Result<Vec<[f64; 4]>> {
    let mut gates = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('x') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!("line {}: expected 4 fields, got {}", lineno + 1, fields.len())));
        }
        let mut g = [0.0; 4];
        for (slot, f) in g.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: `{f}`: {e}", lineno + 1)))?;
        }
        gates.push(g);
    }
    if gates.is_empty() {
        return Err(Error::Parse("track file contains no gates".into()));
    }
    Ok(gates)
}

pub fn write_track_file<W: Write>(gates: &[[f64; 4]], mut out: W) -> Result<()> {
    writeln!(out, "x,y,z,yaw_deg")?;
    for g in gates {
        writeln!(out, "{},{},{},{}", g[0], g[1], g[2], g[3])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_gate() -> Gate {
        Gate::new(Vec3::new(0.0, 0.0, 2.0), 0.0, 1.5, 0.4)
    }

    #[test]
    fn pass_through_center() {
        let g = unit_gate();
        let r = check_gate_transition(&Vec3::new(-0.1, 0.0, 2.0), &Vec3::new(0.1, 0.0, 2.0), &g);
        assert_eq!(r, GateCrossing::Passed);
    }

    #[test]
    fn off_center_hit() {
        let g = unit_gate();
        let r = check_gate_transition(&Vec3::new(-0.1, 0.9, 2.0), &Vec3::new(0.1, 0.9, 2.0), &g);
        match r {
            GateCrossing::Hit { error } => assert_relative_eq!(error, 0.15, epsilon = 1e-12),
            other => panic!("expected hit, got {other:?}"),
        }
        let far = check_gate_transition(&Vec3::new(-0.1, 2.0, 2.0), &Vec3::new(0.1, 2.0, 2.0), &g);
        assert_eq!(far, GateCrossing::None);
    }

    #[test]
    fn no_crossing_and_backward() {
        let g = unit_gate();
        assert_eq!(
            check_gate_transition(&Vec3::new(-0.5, 0.0, 2.0), &Vec3::new(-0.1, 0.0, 2.0), &g),
            GateCrossing::None
        );
        assert_eq!(
            check_gate_transition(&Vec3::new(0.1, 0.0, 2.0), &Vec3::new(-0.1, 0.0, 2.0), &g),
            GateCrossing::None
        );
    }

    #[test]
    fn doubled_gate_turns_near_miss_into_pass() {
        let mut g = unit_gate();
        let (a, b) = (Vec3::new(-0.1, 1.05, 2.0), Vec3::new(0.1, 1.05, 2.0));
        assert!(matches!(check_gate_transition(&a, &b, &g), GateCrossing::Hit { .. }));
        g.size_multiplier = 2.0;
        assert_eq!(check_gate_transition(&a, &b, &g), GateCrossing::Passed);
    }

    #[test]
    fn agent_contact() {
        let o = Vec3::zeros();
        assert!(check_agent_collision(&o, &Vec3::new(0.15, 0.0, 0.0), 0.1));
        assert!(!check_agent_collision(&o, &Vec3::new(0.25, 0.0, 0.0), 0.1));
        assert!(check_agent_collision(&o, &o, 0.1));
    }

    #[test]
    fn ranking_rules() {
        let p = |g, d| ProgressState {
            gates_passed: g,
            dist_to_next: d,
            rank: 0,
        };
        assert_eq!(compute_rankings(&[p(5, 2.0), p(4, 0.5)]), vec![1, 2]);
        assert_eq!(compute_rankings(&[p(3, 1.0), p(3, 3.0)]), vec![1, 2]);
        assert_eq!(compute_rankings(&[p(3, 3.0), p(3, 1.0)]), vec![2, 1]);
        assert_eq!(compute_rankings(&[p(2, 1.0), p(2, 1.0), p(2, 1.0)]), vec![1, 2, 3]);
    }

    #[test]
    fn start_grid_geometry() {
        let track = Track::default();
        let gate = &track.gates[0];
        let one = start_grid::<ChaCha8Rng>(&track, 1, None).unwrap();
        assert_relative_eq!((one[0].position - track.start_reference).norm(), 0.0, epsilon = 1e-12);

        let two = start_grid::<ChaCha8Rng>(&track, 2, None).unwrap();
        assert_relative_eq!((two[0].position - two[1].position).norm(), 1.0, epsilon = 1e-12);
        let d0 = (two[0].position - gate.center).norm();
        let d1 = (two[1].position - gate.center).norm();
        assert!((d0 - d1).abs() < 1e-6);

        for n in 1..=8 {
            let poses = start_grid::<ChaCha8Rng>(&track, n, None).unwrap();
            let d_ref = (track.start_reference - gate.center).norm();
            for p in &poses {
                assert!(((p.position - gate.center).norm() - d_ref).abs() < 1e-6);
            }
        }
        assert!(start_grid::<ChaCha8Rng>(&track, 60, None).is_err());
    }

    #[test]
    fn start_grid_shuffles_slots() {
        let track = Track::default();
        let base = start_grid::<ChaCha8Rng>(&track, 4, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shuffled = start_grid(&track, 4, Some(&mut rng)).unwrap();
        for p in &shuffled {
            assert!(base.iter().any(|b| b.position == p.position));
        }
    }

    #[test]
    fn track_file_round_trip() {
        let mut buf = Vec::new();
        write_track_file(&SPLIT_S_GATES, &mut buf).unwrap();
        let back = read_track_file(&buf[..]).unwrap();
        assert_eq!(back, SPLIT_S_GATES.to_vec());
        assert!(read_track_file(&b"x,y,z,yaw_deg\n1,2,3\n"[..]).is_err());
    }
}
