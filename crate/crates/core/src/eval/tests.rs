use super::*;
use crate::dynamics::{QuadState, Vec3};
use crate::env::{CircleTask, Task};
use crate::policy::PolicyConfig;
use crate::track::Track;

fn tiny_policy(seed: u64) -> Arc<Policy<f32>> {
    let cfg = PolicyConfig {
        embed_dim: 4,
        n_latents: 2,
        n_heads: 2,
        head_dim: 2,
        lstm_hidden: 8,
        mlp_hidden: vec![8, 8],
        ..PolicyConfig::default()
    };
    Arc::new(Policy::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
}

fn short_setup(seconds: f64) -> EnvSetup {
    let mut s = EnvSetup::default();
    s.env.episode_seconds = seconds;
    s
}

fn protocol(races: usize, seed: u64) -> EvalProtocol {
    EvalProtocol {
        races,
        seed,
        deterministic: true,
    }
}

#[test]
fn completion_arithmetic() {
    assert!((completion(10, 21) - 0.476_190_476_190_476_2).abs() < 1e-15);
    assert!((100.0 * completion(10, 21) - 47.62).abs() < 5e-3);
    assert_eq!(completion(21, 21), 1.0);
    assert_eq!(completion(0, 21), 0.0);
    assert_eq!(completion(25, 21), 1.0);
}

#[test]
fn laps_split_at_first_gate() {
    // Three gates per lap, two laps.
    let times = [1.0, 2.0, 3.0, 4.5, 5.0, 6.0];
    assert_eq!(lap_times(&times, 3, 2, Some(6.0)), vec![4.5, 1.5]);
    // Crashed during the second lap.
    assert_eq!(lap_times(&times[..4], 3, 2, None), vec![4.5]);
    assert!(lap_times(&times[..2], 3, 2, None).is_empty());
    assert_eq!(lap_times(&[1.0, 2.0], 2, 1, Some(2.0)), vec![2.0]);
}

#[test]
fn permutations_cover_all_orders() {
    let mut seen: Vec<Vec<usize>> = (0..24).map(|k| nth_permutation(4, k)).collect();
    assert_eq!(seen[0], vec![0, 1, 2, 3]);
    assert_eq!(seen[23], vec![3, 2, 1, 0]);
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 24);
    for r in 0..64 {
        let mut s = slot_assignment(8, r, 64, 3);
        s.sort();
        assert_eq!(s, (0..8).collect::<Vec<_>>());
    }
}

#[test]
fn self_eval_record_counts_and_partition() {
    let p = tiny_policy(1);
    let (summary, results) = run_self_eval(&p, 4, &short_setup(1.0), &protocol(64, 5)).unwrap();
    assert_eq!(results.len(), 256);
    assert_eq!(summary.records, 256);
    assert!((summary.causes.sum() - 1.0).abs() < 1e-12);
    assert_eq!(summary.slot_completion.len(), 4);
    for r in 0..64 {
        let mut slots: Vec<usize> = results[4 * r..4 * r + 4].iter().map(|x| x.slot).collect();
        slots.sort();
        assert_eq!(slots, vec![0, 1, 2, 3]);
        assert!(results[4 * r..4 * r + 4].iter().all(|x| x.race == r));
    }
}

#[test]
fn self_eval_is_deterministic() {
    let p = tiny_policy(2);
    let setup = short_setup(1.0);
    let (a, ra) = run_self_eval(&p, 3, &setup, &protocol(6, 11)).unwrap();
    let (b, rb) = run_self_eval(&p, 3, &setup, &protocol(6, 11)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn solo_races_have_no_opponent_crashes() {
    let p = tiny_policy(3);
    let (s, results) = run_self_eval(&p, 1, &short_setup(1.0), &protocol(4, 0)).unwrap();
    assert_eq!(results.len(), 4);
    assert_eq!(s.causes.opponent, 0.0);
}

#[test]
fn crash_causes_match_the_env_record() {
    let p = tiny_policy(4);
    let setup = short_setup(1.0);
    let policies = vec![p.clone(); 2];
    let results = run_race(&setup, &policies, &[0, 0], &[1, 0], 0, 9, true).unwrap();
    // Replay the same race by hand and compare termination causes.
    let mut env = RaceEnv::new(race_setup(&setup, 2), 9).unwrap();
    env.reset_race(Some(&[1, 0])).unwrap();
    let bounds = env.action_bounds();
    let norm = &p.config().normalization;
    let mut states = vec![RecurrentState::zeros(p.hidden()); 2];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    rng.set_stream(3);
    let summary = loop {
        let racing: Vec<usize> = (0..2).filter(|&i| env.agents()[i].is_racing()).collect();
        let mut cmds: Vec<_> = env.agents().iter().map(|a| a.last_command).collect();
        if !racing.is_empty() {
            let feats: Vec<Features> = racing.iter().map(|&i| norm.features(&env.observe(i))).collect();
            let refs: Vec<&Features> = feats.iter().collect();
            let mut st: Vec<_> = racing.iter().map(|&i| states[i].clone()).collect();
            let out = p.act_features(&refs, &mut st, &mut rng, true).unwrap();
            for ((&i, s), a) in racing.iter().zip(st).zip(&out.samples) {
                states[i] = s;
                cmds[i] = bounds.to_command(&a.action);
            }
        }
        if let Some(s) = env.step(&cmds).unwrap().summary {
            break s;
        }
    };
    for (r, a) in results.iter().zip(&summary.agents) {
        assert_eq!(Some(r.cause), a.cause);
        assert_eq!(r.gates_passed, a.gates_passed);
    }
}

#[test]
fn tournament_of_identical_policies() {
    let p = tiny_policy(5);
    let pool = vec![p.clone(), p.clone(), p.clone(), p];
    let (report, results) = run_tournament(&pool, &short_setup(1.0), 3, 8, 2, true).unwrap();
    assert_eq!(results.len(), 3 * 8 * 4);
    assert_eq!(report.methods.len(), 4);
    for m in &report.methods {
        assert_eq!(m.races, 24);
        assert_eq!(m.rank_counts.iter().sum::<usize>(), m.races);
    }
    let se = |m: &MethodStats| m.completion_std / (m.races as f64).sqrt();
    for a in &report.methods {
        for b in &report.methods {
            let sigma = (se(a).powi(2) + se(b).powi(2)).sqrt();
            assert!((a.mean_completion - b.mean_completion).abs() <= 3.0 * sigma + 1e-12);
        }
    }
}

#[test]
fn tournament_needs_four_policies() {
    let p = tiny_policy(6);
    assert!(run_tournament(&[p.clone(), p.clone(), p], &short_setup(1.0), 1, 1, 0, true).is_err());
}

fn scene(track: &Track) -> Scene {
    let params = crate::dynamics::QuadParams::default();
    let g = track.gate_for(0);
    let ego = QuadState::hover(g.center - g.normal() * 2.0, g.yaw, &params);
    let opp = QuadState::hover(g.center - g.normal() * 1.0 + Vec3::new(0.0, 0.0, 0.3), g.yaw, &params);
    Scene {
        ego,
        opponents: vec![opp],
        gates_passed: 0,
    }
}

#[test]
fn sweep_grid_shape_and_order() {
    let p = tiny_policy(7);
    let track = Track::default();
    let sc = scene(&track);
    let grid = SweepGrid {
        x: [-4.0, 4.0],
        z: [0.5, 3.0],
        nx: 50,
        nz: 30,
    };
    let field = value_sweep(&p, &track, &sc, &grid).unwrap();
    assert_eq!(field.values.len(), 1500);
    assert_eq!((field.xs.len(), field.zs.len()), (50, 30));
    for &(ix, iz) in &[(0usize, 0usize), (49, 0), (7, 13), (49, 29)] {
        let one = SweepGrid {
            x: [field.xs[ix]; 2],
            z: [field.zs[iz]; 2],
            nx: 1,
            nz: 1,
        };
        let v = value_sweep(&p, &track, &sc, &one).unwrap().values[0];
        assert!((v - field.at(ix, iz)).abs() < 1e-5);
    }
}

#[test]
fn zero_critic_gives_flat_field() {
    let mut p = (*tiny_policy(8)).clone();
    let last = p.network().critic.layers.last().unwrap().clone();
    p.update_params(|v| {
        v.slice_mut(last.w).fill(0.0);
        v.slice_mut(last.b).fill(0.0);
    });
    let track = Track::default();
    let grid = SweepGrid {
        x: [-3.0, 3.0],
        z: [0.5, 2.5],
        nx: 9,
        nz: 5,
    };
    let field = value_sweep(&p, &track, &scene(&track), &grid).unwrap();
    assert!(field.values.iter().all(|&v| v == field.values[0]));
}

#[test]
fn sweep_rejects_points_outside_the_arena() {
    let p = tiny_policy(9);
    let track = Track::default();
    let grid = SweepGrid {
        x: [-100.0, 0.0],
        z: [0.5, 2.5],
        nx: 3,
        nz: 3,
    };
    assert!(value_sweep(&p, &track, &scene(&track), &grid).is_err());
}

#[test]
fn downwash_flight_counts() {
    let p = tiny_policy(10);
    let mut setup = short_setup(0.5);
    setup.env.task = Task::Circle(CircleTask::default());
    let conds = [DownwashCondition::Solo, DownwashCondition::Delay(0.1), DownwashCondition::Delay(0.5)];
    let report = run_downwash_experiment(&[("with", &p), ("without", &p)], &setup, &conds, 15, 1).unwrap();
    assert_eq!(report.conditions.len(), 6);
    for c in &report.conditions {
        assert_eq!(c.flights.len(), 15);
        let solo = c.condition == DownwashCondition::Solo;
        assert!(c.flights.iter().all(|f| f.gap.is_empty() == solo));
        assert_eq!(c.median_final_gap.is_none(), solo);
    }
    // Delayed starts open with the upper agent ahead.
    let d = report.get("with", DownwashCondition::Delay(0.5)).unwrap();
    for f in &d.flights {
        if let Some(&g) = f.gap.first() {
            assert!(g > 0.0);
        }
    }
}
