use nalgebra::{UnitQuaternion, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quadleague::downwash::{WakeConfig, WakeField, WakeParticle};
use quadleague::dynamics::{motor_setpoint, propagate, Command, QuadParams, QuadState, Vec3};
use quadleague::env::reward::{
    body_rate_term, progress_term, proximity_term, rank_term, step_reward, RewardSnapshot,
};
use quadleague::env::{EgoObservation, OpponentObservation, RewardConfig};
use quadleague::track::{check_gate_transition, Gate, GateCrossing};

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

#[test]
fn quaternion_norm_survives_long_random_flight() {
    let params = QuadParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = QuadState::hover(Vec3::new(0.0, 0.0, 1e4), 0.0, &params);
    let mut worst_pre: f64 = 0.0;
    let mut worst_post: f64 = 0.0;
    let mut cmd = Command::hover(&params);
    for k in 0..100_000 {
        if k % 10 == 0 {
            let c = rng.random_range(0.0..params.max_collective_accel());
            cmd = Command::new(c, Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0)));
        }
        if k % 500 == 0 {
            s.velocity = Vec3::zeros();
            s.position = Vec3::new(0.0, 0.0, 1e4);
        }
        let sp = motor_setpoint(&s, &cmd, &params);
        let (next, err) = propagate(&s, &sp, &params, &Vec3::zeros(), 0.002).unwrap();
        worst_pre = worst_pre.max(err);
        worst_post = worst_post.max((next.orientation.quaternion().norm() - 1.0).abs());
        s = next;
    }
    assert!(worst_pre < 1e-5, "{worst_pre}");
    assert!(worst_post < 1e-9, "{worst_post}");
}

fn rotational_energy(s: &QuadState, p: &QuadParams) -> f64 {
    (0..3).map(|i| 0.5 * p.inertia[i] * s.body_rates[i].powi(2)).sum()
}

fn translational_energy(s: &QuadState, p: &QuadParams) -> f64 {
    0.5 * p.mass * s.velocity.norm_squared() - p.mass * p.gravity_vec().dot(&s.position)
}

proptest! {
    #[test]
    fn free_tumbling_conserves_energy(v in vec3(5.0), w in vec3(15.0), roll in -3.0f64..3.0, pitch in -1.5f64..1.5) {
        let params = QuadParams { drag: [0.0; 3], ..QuadParams::default() };
        let mut s = QuadState::at_rest(Vec3::new(0.0, 0.0, 3.0));
        s.velocity = v;
        s.body_rates = w;
        s.orientation = UnitQuaternion::from_euler_angles(roll, pitch, 0.0);
        let (end, _) = propagate(&s, &Vector4::zeros(), &params, &Vec3::zeros(), 1.0).unwrap();
        let (r0, r1) = (rotational_energy(&s, &params), rotational_energy(&end, &params));
        let (t0, t1) = (translational_energy(&s, &params), translational_energy(&end, &params));
        let scale = 0.5 * params.mass * (v.norm_squared() + 1.0) + params.mass * 9.81 * 3.0;
        prop_assert!((r1 - r0).abs() <= 1e-3 * r0.max(1e-12), "rotational {r0} -> {r1}");
        prop_assert!((t1 - t0).abs() <= 1e-3 * scale, "translational {t0} -> {t1}");
    }

    #[test]
    fn step_reward_is_the_sum_of_its_terms(
        d_prev in 0.0f64..20.0,
        d_cur in 0.0f64..20.0,
        rates in vec3(10.0),
        speed in 0.0f64..25.0,
        opp in prop::option::of(0.0f64..0.5),
        n in 1usize..=8,
        rank_seed in 0usize..8,
    ) {
        let cfg = RewardConfig::default();
        let rank = 1 + rank_seed % n;
        let snap = |d: f64| RewardSnapshot {
            dist_to_gate: d,
            body_rates: rates,
            speed,
            rank,
            nearest_opponent: opp,
            collision_radius: 0.1,
        };
        let r = step_reward(&snap(d_prev), &snap(d_cur), &cfg, n);
        let sum = progress_term(d_prev, d_cur, &cfg) - body_rate_term(&rates, &cfg)
            - proximity_term(opp, speed, 0.1, &cfg)
            + rank_term(rank, n, &cfg);
        prop_assert_eq!(r, sum);
    }

    #[test]
    fn proximity_is_continuous_below_the_cutoff(d in 0.0f64..0.2, speed in 0.0f64..25.0) {
        let cfg = RewardConfig::default();
        let f = |x: f64| proximity_term(Some(x), speed, 0.1, &cfg);
        let h = 1e-7;
        prop_assume!(d + h < 0.2);
        // |f'| = (λ5 / d_col) f on the active branch.
        let bound = 70.0 * f(d) * h * 1.01;
        prop_assert!((f(d + h) - f(d)).abs() <= bound);
    }

    #[test]
    fn proximity_jump_at_the_cutoff_is_small(speed in 0.0f64..25.0) {
        let cfg = RewardConfig::default();
        let below = proximity_term(Some(0.2 - 1e-12), speed, 0.1, &cfg);
        let at = proximity_term(Some(0.2), speed, 0.1, &cfg);
        prop_assert_eq!(at, 0.0);
        prop_assert!(below - at < 1.2e-3 * (cfg.proximity * speed + 1.0));
    }

    #[test]
    fn rank_reward_is_bounded(n in 1usize..=16, k in 0usize..16) {
        let cfg = RewardConfig::default();
        let r = rank_term(1 + k % n, n, &cfg);
        prop_assert!(r >= cfg.rank / n as f64 - 1e-15 && r <= cfg.rank);
        prop_assert_eq!(rank_term(1, n, &cfg), cfg.rank);
    }

    #[test]
    fn world_yaw_leaves_relative_geometry_unchanged(
        psi in -3.2f64..3.2,
        p in vec3(5.0),
        v in vec3(5.0),
        q in vec3(5.0),
        g in vec3(5.0),
        gate_yaw in -3.2f64..3.2,
        tilt in -0.5f64..0.5,
    ) {
        let params = QuadParams::default();
        let mut ego = QuadState::hover(p, 0.3, &params);
        ego.velocity = v;
        ego.orientation = UnitQuaternion::from_euler_angles(tilt, -tilt, 0.3);
        let other = QuadState::hover(q, 0.0, &params);
        let gate = Gate::new(g, gate_yaw, 1.5, 0.4);
        let after = Gate::new(g + Vec3::new(3.0, -1.0, 0.5), gate_yaw + 0.4, 1.5, 0.4);

        let rot = UnitQuaternion::from_euler_angles(0.0, 0.0, psi);
        let turn_state = |s: &QuadState| {
            let mut t = s.clone();
            t.position = rot * s.position;
            t.velocity = rot * s.velocity;
            t.orientation = rot * s.orientation;
            t
        };
        let turn_gate = |x: &Gate| Gate::new(rot * x.center, x.yaw + psi, x.aperture, x.frame_band);

        let a = EgoObservation::new(&ego, &gate, &after);
        let b = EgoObservation::new(&turn_state(&ego), &turn_gate(&gate), &turn_gate(&after));
        for k in 0..4 {
            prop_assert!((a.gate_corners[k].norm() - b.gate_corners[k].norm()).abs() < 1e-9);
            prop_assert!((a.next_corners[k].norm() - b.next_corners[k].norm()).abs() < 1e-9);
        }
        let d_a = (gate.center - ego.position).norm();
        let d_b = (turn_gate(&gate).center - turn_state(&ego).position).norm();
        prop_assert!((d_a - d_b).abs() < 1e-9);
        let o_a = OpponentObservation::relative(&ego, &other);
        let o_b = OpponentObservation::relative(&turn_state(&ego), &turn_state(&other));
        prop_assert!((o_a.p_rel.norm() - o_b.p_rel.norm()).abs() < 1e-9);
        prop_assert!((o_a.v_rel.norm() - o_b.v_rel.norm()).abs() < 1e-9);
    }

    #[test]
    fn forward_crossing_is_classified_by_where_it_pierces(
        yaw in -3.2f64..3.2,
        a in -2.5f64..2.5,
        b in -2.5f64..2.5,
        before in 0.01f64..1.0,
        beyond in 0.01f64..1.0,
        mult in 1.0f64..2.0,
    ) {
        let mut gate = Gate::new(Vec3::new(1.0, 2.0, 3.0), yaw, 1.5, 0.4);
        gate.size_multiplier = mult;
        let pierce = gate.center + gate.lateral() * a + Vec3::z() * b;
        let prev = pierce - gate.normal() * before;
        let next = pierce + gate.normal() * beyond;
        let h = gate.half_width();
        let (da, db) = ((a.abs() - h).max(0.0), (b.abs() - h).max(0.0));
        let err = (da * da + db * db).sqrt();
        // Keep clear of the boundaries where rounding decides.
        prop_assume!(err == 0.0 && a.abs().max(b.abs()) < h - 1e-9 || err > 1e-9 && (err - 0.4).abs() > 1e-9);
        match check_gate_transition(&prev, &next, &gate) {
            GateCrossing::Passed => prop_assert!(err == 0.0),
            GateCrossing::Hit { error } => {
                prop_assert!(err > 0.0 && err <= 0.4);
                prop_assert!((error - err).abs() < 1e-9);
            }
            GateCrossing::None => prop_assert!(err > 0.4),
        }
        // The reverse crossing never counts as a passage.
        prop_assert!(check_gate_transition(&next, &prev, &gate) != GateCrossing::Passed);
    }

    #[test]
    fn doubled_gate_passes_near_misses(e in 0.001f64..0.375, theta in 0.0f64..std::f64::consts::FRAC_PI_2) {
        let mut gate = Gate::new(Vec3::zeros(), 0.0, 1.5, 0.4);
        let h = gate.half_width();
        // Misses the nominal aperture by exactly `e`.
        let (la, lb) = (h + e * theta.cos(), h + e * theta.sin());
        let pierce = Vec3::new(0.0, la, lb);
        let (prev, next) = (pierce - Vec3::x() * 0.1, pierce + Vec3::x() * 0.1);
        let hit = matches!(check_gate_transition(&prev, &next, &gate), GateCrossing::Hit { .. });
        prop_assert!(hit);
        gate.size_multiplier = 2.0;
        prop_assert_eq!(check_gate_transition(&prev, &next, &gate), GateCrossing::Passed);
    }

    #[test]
    fn wake_particles_never_speed_up(
        v in vec3(8.0),
        steps in prop::collection::vec(1e-4f64..0.1, 1..30),
    ) {
        let mut f = WakeField::new(WakeConfig::default());
        f.insert(WakeParticle { position: Vec3::zeros(), velocity: v, age: 0.0, source: 0 });
        let mut last = v.norm();
        for dt in steps {
            f.advance(dt);
            let Some(p) = f.particles().next() else { break };
            let speed = p.velocity.norm();
            prop_assert!(speed <= last);
            prop_assert!(p.age >= 0.0);
            last = speed;
        }
    }

    #[test]
    fn emission_is_seed_deterministic(seed in 0u64..1000, tilt in -0.4f64..0.4) {
        let params = QuadParams::default();
        let mut s = QuadState::hover(Vec3::new(0.0, 0.0, 2.0), 0.0, &params);
        s.orientation = UnitQuaternion::from_euler_angles(tilt, 0.0, 0.0);
        let thrust = s.per_rotor_thrust(&params);
        let run = || {
            let mut f = WakeField::new(WakeConfig::default());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..3 {
                f.emit(0, &s, &params, &thrust, &mut rng).unwrap();
                f.advance(0.02);
            }
            f.particles().cloned().collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn isolated_hovering_vehicle_feels_no_own_wake(seed in 0u64..1000, x in -3.0f64..3.0, y in -3.0f64..3.0) {
        let params = QuadParams::default();
        let s = QuadState::hover(Vec3::new(x, y, 2.0), 0.0, &params);
        let thrust = s.per_rotor_thrust(&params);
        let mut f = WakeField::new(WakeConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..25 {
            f.emit(3, &s, &params, &thrust, &mut rng).unwrap();
            f.advance(0.02);
        }
        f.rebuild_index();
        for dz in [0.0, -0.2, -0.5, -1.0] {
            let q = s.position + Vec3::z() * dz;
            prop_assert_eq!(f.sample_airspeed(&q, Some(3)), Vec3::zeros());
        }
    }
}
