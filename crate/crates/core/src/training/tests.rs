use super::*;
use crate::env::EnvSetup;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_policy() -> PolicyConfig {
    PolicyConfig {
        embed_dim: 8,
        n_latents: 2,
        n_heads: 2,
        head_dim: 4,
        lstm_hidden: 8,
        mlp_hidden: vec![16, 16],
        ..PolicyConfig::default()
    }
}

fn tiny_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        ppo: PpoConfig {
            n_envs: 2,
            rollout_steps: 40,
            iterations,
            epochs: 2,
            minibatches: 2,
            segment_len: 16,
            ..PpoConfig::default()
        },
        league: LeagueConfig {
            checkpoint_every: 2,
            ..LeagueConfig::default()
        },
        policy: tiny_policy(),
        ..TrainConfig::default()
    }
}

fn setup() -> EnvSetup {
    let mut s = EnvSetup::default();
    s.env.buffer.seed_states = 16;
    s
}

#[test]
fn league_opponents_stay_frozen() {
    let roster = vec![Policy::new(tiny_policy(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap()];
    let mut t = Trainer::new(TrainMode::League, tiny_config(6), setup(), roster, 3).unwrap();
    let learner_before = t.learners()[0].policy.params().values().as_slice().to_vec();
    for _ in 0..2 {
        t.iterate().unwrap();
    }
    assert_eq!(t.pool().history().len(), 1);
    assert_ne!(t.learners()[0].policy.params().values().as_slice(), learner_before.as_slice());
    let snap: Vec<Vec<f32>> = t
        .pool()
        .history()
        .iter()
        .chain(t.pool().roster())
        .map(|p| p.params().values().as_slice().to_vec())
        .collect();
    t.iterate().unwrap();
    for (p, before) in t.pool().history().iter().chain(t.pool().roster()).zip(&snap) {
        assert_eq!(p.params().values().as_slice(), before.as_slice());
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let hash = |seed| {
        let mut t = Trainer::new(TrainMode::League, tiny_config(10), setup(), Vec::new(), seed).unwrap();
        let mut stream = Vec::new();
        t.run(|m| write_metrics(&mut stream, m)).unwrap();
        assert_eq!(t.iteration(), 10);
        (t.checkpoint(0).sha256(), stream)
    };
    let (a, ma) = hash(5);
    let (b, mb) = hash(5);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let (c, _) = hash(6);
    assert_ne!(a, c);
}

#[test]
fn metric_counters_are_monotone() {
    let mut t = Trainer::new(TrainMode::Shared, tiny_config(4), single_agent_setup(&setup()), Vec::new(), 1).unwrap();
    let mut seen = Vec::new();
    t.run(|m| {
        seen.push((m.iteration, m.env_steps));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(seen.windows(2).all(|w| w[1].1 > w[0].1));
    // A single learner slot per env fills exactly envs x steps rows.
    assert_eq!(seen[0].1, 2 * 40);
}

#[test]
fn single_agent_mode_observes_no_opponents() {
    let t = Trainer::new(TrainMode::Shared, tiny_config(1), single_agent_setup(&setup()), Vec::new(), 2).unwrap();
    for env in t.envs().envs() {
        assert_eq!(env.n_agents(), 1);
        assert!(env.observe(0).opponents.is_empty());
    }
}

#[test]
fn independent_learners_own_their_slots() {
    let mut cfg = tiny_config(2);
    cfg.curriculum.enabled = false;
    let mut t = Trainer::new(TrainMode::Independent, cfg, setup(), Vec::new(), 4).unwrap();
    assert_eq!(t.learners().len(), 4);
    for (e, row) in t.seq_of.iter().enumerate() {
        for (i, s) in row.iter().enumerate() {
            assert_eq!(*s, Some((i, e)));
        }
    }
    t.iterate().unwrap();
    t.iterate().unwrap();
    let params: Vec<Vec<f32>> = t.into_policies().iter().map(|p| p.params().values().as_slice().to_vec()).collect();
    for a in 0..4 {
        for b in a + 1..4 {
            let d: f32 = params[a].iter().zip(&params[b]).map(|(x, y)| (x - y).abs()).sum();
            assert!(d > 0.0);
        }
    }
}

#[test]
fn checkpoint_series_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(TrainMode::League, tiny_config(4), setup(), Vec::new(), 8)
        .unwrap()
        .with_checkpoint_dir(dir.path());
    t.run(|_| Ok(())).unwrap();
    assert_eq!(t.saved_checkpoints().len(), 2);
    let roster = load_roster(t.saved_checkpoints()).unwrap();
    assert_eq!(
        roster[1].params().values().as_slice(),
        t.pool().history()[1].params().values().as_slice()
    );
    let ck = Checkpoint::load(&t.saved_checkpoints()[1]).unwrap();
    assert_eq!(ck.header.iteration, 4);
    assert!(ck.header.has_moments);
}

#[test]
fn paper_scale_arithmetic() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.ppo.batch_size(), 36_000);
    assert_eq!(cfg.checkpoint_count(), 55);
}

#[test]
fn warm_start_copies_parameters() {
    let source = Policy::new(tiny_policy(), &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let t = Trainer::new(TrainMode::League, tiny_config(2), setup(), Vec::new(), 4)
        .unwrap()
        .with_initial_policy(&source)
        .unwrap();
    assert_eq!(t.learners()[0].policy.params().values().as_slice(), source.params().values().as_slice());
    assert!(t.learners()[0].adam.m.iter().all(|&m| m == 0.0));

    let other = PolicyConfig {
        lstm_hidden: 12,
        ..tiny_policy()
    };
    let wrong = Policy::new(other, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let t = Trainer::new(TrainMode::League, tiny_config(2), setup(), Vec::new(), 4).unwrap();
    assert!(t.with_initial_policy(&wrong).is_err());
}
