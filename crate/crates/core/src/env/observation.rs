//! Ego and opponent observation records.

use serde::{Deserialize, Serialize};

use crate::dynamics::{QuadState, Vec3};
use crate::track::Gate;

pub const EGO_DIM: usize = 39;
pub const OPPONENT_DIM: usize = 6;

/// Ego state plus the geometry of the next two gates. Gate corners are world
/// frame offsets: `gate_corners[k] = corner_k(next) - p` and
/// `next_corners[k] = corner_k(next after) - corner_k(next)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoObservation {
    pub position: Vec3,
    pub velocity: Vec3,
    /// World-from-body rotation matrix, row-major.
    pub rotation: [f64; 9],
    pub gate_corners: [Vec3; 4],
    pub next_corners: [Vec3; 4],
}

impl EgoObservation {
    pub fn new(state: &QuadState, next: &Gate, after: &Gate) -> Self {
        let r = state.orientation.to_rotation_matrix();
        let m = r.matrix();
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = m[(i, j)];
            }
        }
        let c0 = next.corners();
        let c1 = after.corners();
        Self {
            position: state.position,
            velocity: state.velocity,
            rotation,
            gate_corners: c0.map(|c| c - state.position),
            next_corners: [c1[0] - c0[0], c1[1] - c0[1], c1[2] - c0[2], c1[3] - c0[3]],
        }
    }

    pub fn to_array(&self) -> [f64; EGO_DIM] {
        let mut out = [0.0; EGO_DIM];
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3..6].copy_from_slice(self.velocity.as_slice());
        out[6..15].copy_from_slice(&self.rotation);
        for k in 0..4 {
            out[15 + 3 * k..18 + 3 * k].copy_from_slice(self.gate_corners[k].as_slice());
            out[27 + 3 * k..30 + 3 * k].copy_from_slice(self.next_corners[k].as_slice());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpponentObservation {
    pub p_rel: Vec3,
    pub v_rel: Vec3,
    pub valid: bool,
}

impl OpponentObservation {
    pub fn relative(ego: &QuadState, other: &QuadState) -> Self {
        Self {
            p_rel: other.position - ego.position,
            v_rel: other.velocity - ego.velocity,
            valid: true,
        }
    }

    pub fn to_array(&self) -> [f64; OPPONENT_DIM] {
        [self.p_rel.x, self.p_rel.y, self.p_rel.z, self.v_rel.x, self.v_rel.y, self.v_rel.z]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub ego: EgoObservation,
    pub opponents: Vec<OpponentObservation>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::QuadParams;
    use crate::track::Track;

    #[test]
    fn rotation_block_is_orthonormal() {
        let track = Track::default();
        let mut s = QuadState::hover(Vec3::new(1.0, 2.0, 3.0), 0.7, &QuadParams::default());
        s.orientation = nalgebra::UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let obs = EgoObservation::new(&s, &track.gates[0], &track.gates[1]);
        let r = nalgebra::Matrix3::from_row_slice(&obs.rotation);
        assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < 1e-6);
        assert_eq!(obs.to_array().len(), EGO_DIM);
    }

    #[test]
    fn corners_at_gate_center() {
        // Gate 1 of the circuit: center (-0.60, -0.86, 3.68), yaw -20 deg, side 1.5.
        let track = Track::default();
        let g = &track.gates[0];
        let s = QuadState::hover(g.center, 0.0, &QuadParams::default());
        let obs = EgoObservation::new(&s, g, &track.gates[1]);
        let yaw = (-20.0f64).to_radians();
        let lat = Vec3::new(-yaw.sin(), yaw.cos(), 0.0) * 0.75;
        let up = Vec3::new(0.0, 0.0, 0.75);
        let expected = [lat + up, -lat + up, -lat - up, lat - up];
        for k in 0..4 {
            assert!((obs.gate_corners[k] - expected[k]).norm() < 1e-12);
            assert!((obs.gate_corners[k].norm() - 1.5 / 2f64.sqrt()).abs() < 1e-12);
        }
    }
}
