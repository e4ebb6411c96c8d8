use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synflow::chemgraph::parse_smiles;
use synflow::mdp::presets::preset;
use synflow::mdp::*;
use synflow::numerics::{Matrix, Tape};
use synflow::policy::{BackwardNet, BbMode};
use synflow::rewards::{RewardFn, ScoreTable};
use synflow::training::*;

fn env(name: &str, require_reversible: bool) -> EnvConfig {
    preset(name)
        .unwrap()
        .build(EnvOptions {
            fp_nbits: 256,
            require_reversible,
            ..Default::default()
        })
        .unwrap()
}

fn small(mode: BackwardMode) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        steps: 10,
        lr_pf: 1e-3,
        lr_pb: 1e-3,
        lr_z: 1e-2,
        backward_mode: mode,
        ..TrainConfig::default()
    }
}

fn set_log_z(t: &mut Trainer, x: f32) {
    let id = t.model.log_z.id("log_z").unwrap();
    *t.model.log_z.value_mut(id) = Matrix::scalar(x);
}

#[test]
fn forced_env_log_z_converges_to_zero() {
    let e = env("single", false);
    let cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&e, &RewardFn::Constant, cfg, 0).unwrap();
    set_log_z(&mut t, 0.3);
    for _ in 0..500 {
        t.step().unwrap();
    }
    assert!(t.model.log_z_value().abs() < 0.05, "{}", t.model.log_z_value());
}

#[test]
fn two_terminal_log_z_matches_total_reward() {
    let e = EnvConfig::new(
        vec![parse_smiles("CCO").unwrap(), parse_smiles("CCN").unwrap()],
        vec![],
        EnvOptions {
            max_len: 1,
            fp_nbits: 256,
            ..Default::default()
        },
    )
    .unwrap();
    let reward = RewardFn::External {
        table: ScoreTable::parse("CCO\t1\nCCN\t3\n", None).unwrap(),
    };
    let cfg = TrainConfig {
        steps: 400,
        ..small(BackwardMode::Uniform)
    };
    let out = run_training(&e, &reward, &cfg, 1, None).unwrap();
    let z = f64::from(out.model.log_z_value());
    assert!((z - 4f64.ln()).abs() < 0.1, "{z}");
}

#[test]
fn balanced_batch_leaves_parameters_unchanged() {
    let e = env("single", false);
    let mut t = Trainer::new(&e, &RewardFn::Constant, small(BackwardMode::Free), 0).unwrap();
    let before = (t.model.forward.params.hash(), t.model.backward.params.hash(), t.model.log_z_value());
    let m = t.step().unwrap();
    assert_eq!(m.tb_loss, 0.0);
    let after = (t.model.forward.params.hash(), t.model.backward.params.hash(), t.model.log_z_value());
    assert_eq!(before, after);
}

#[test]
fn tb_step_only_touches_pb_in_free_mode() {
    let e = env("trap", true);
    for (mode, changes) in [
        (BackwardMode::Free, true),
        (BackwardMode::MaxLikelihood, false),
        (BackwardMode::Reinforce, false),
    ] {
        let mut t = Trainer::new(&e, &RewardFn::Constant, small(mode), 3).unwrap();
        // move P_B off its zero-initialized heads so it receives gradient
        t.step().unwrap();
        t.step().unwrap();
        let batch = t.sample_batch().unwrap();
        let refs: Vec<&Trajectory> = batch.iter().collect();
        let pb = t.model.backward.params.hash();
        let pf = t.model.forward.params.hash();
        t.tb_update(&refs).unwrap();
        assert_eq!(t.model.backward.params.hash() != pb, changes, "{mode:?}");
        assert_ne!(t.model.forward.params.hash(), pf);
        if mode != BackwardMode::Free {
            t.backward_update(&refs).unwrap();
            assert_ne!(t.model.backward.params.hash(), pb, "{mode:?} backward update");
        }
    }
}

fn mean_neg_log_pb(net: &BackwardNet<f32>, e: &EnvConfig, refs: &[&Trajectory]) -> f64 {
    let mut tape = Tape::new();
    let v = net.load(&mut tape, false);
    let lp = net.trajectory_logprobs(&mut tape, &v, e, refs).unwrap();
    -tape.value(lp).data().iter().map(|&x| f64::from(x)).sum::<f64>() / refs.len() as f64
}

#[test]
fn max_likelihood_updates_reduce_the_loss() {
    let e = env("trap", false);
    let mut t = Trainer::new(&e, &RewardFn::Constant, small(BackwardMode::MaxLikelihood), 0).unwrap();
    let batch = t.sample_batch().unwrap();
    let refs: Vec<&Trajectory> = batch.iter().collect();
    let start = mean_neg_log_pb(&t.model.backward, &e, &refs);
    let mut losses = vec![start];
    for _ in 0..60 {
        t.backward_update(&refs).unwrap();
        losses.push(mean_neg_log_pb(&t.model.backward, &e, &refs));
    }
    // smoothed over windows of ten
    let smooth: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{smooth:?}");
    }
    assert!(*losses.last().unwrap() < 0.5 * start, "{start} -> {:?}", losses.last());
}

#[test]
fn uniform_backward_logprob_cases() {
    let e = env("aromatic", false);
    let zero = BackwardNet::<f32>::new(&e, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trajs: Vec<Trajectory> = (0..50)
        .map(|_| rollout_forward(&e, &mut UniformPolicy, &mut UniformPolicy, 1.0, &mut rng).unwrap())
        .collect();
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let mut tape = Tape::new();
    let v = zero.load(&mut tape, false);
    let lp = zero.trajectory_logprobs(&mut tape, &v, &e, &refs).unwrap();
    for (j, t) in trajs.iter().enumerate() {
        let u = uniform_backward_logprob(&e, t).unwrap();
        assert!((u - f64::from(tape.value(lp).get(j, 0))).abs() < 1e-5);
        assert!((u - t.sum_bck()).abs() < 1e-9);
    }

    let single = env("single", false);
    let t = rollout_forward(&single, &mut UniformPolicy, &mut UniformPolicy, 1.0, &mut rng).unwrap();
    assert_eq!(uniform_backward_logprob(&single, &t).unwrap(), 0.0);

    // the amide's only backward moves are its coupling parents
    let pair = env("pair", false);
    let two = (0..200)
        .map(|_| rollout_forward(&pair, &mut UniformPolicy, &mut UniformPolicy, 1.0, &mut rng).unwrap())
        .find(|t| t.num_reactions() == 1)
        .unwrap();
    let opts = pair.backward_options(two.terminal());
    let choices: usize = opts.bi.iter().map(|(_, c)| c.len()).sum();
    let expected = -(choices as f64).ln();
    assert!((uniform_backward_logprob(&pair, &two).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn reinforce_requires_reversible_env() {
    let e = env("trap", false);
    let err = Trainer::new(&e, &RewardFn::Constant, small(BackwardMode::Reinforce), 0).err();
    assert!(matches!(err, Some(TrainError::Config(_))));
}

#[test]
fn reinforce_raises_backward_reward() {
    let e = env("trap", true);
    let cfg = TrainConfig {
        batch_size: 32,
        steps: 60,
        ..small(BackwardMode::Reinforce)
    };
    let out = run_training(&e, &RewardFn::Constant, &cfg, 0, None).unwrap();
    let mean = |m: &[StepMetrics]| m.iter().map(|x| x.backward_reward_mean).sum::<f64>() / m.len() as f64;
    let first = mean(&out.metrics[..10]);
    let last = mean(&out.metrics[50..]);
    assert!(last > first + 0.3, "{first} -> {last}");
}

#[test]
fn runs_are_byte_identical() {
    let e = env("tiny", false);
    let target = parse_smiles(preset("tiny").unwrap().target.unwrap()).unwrap();
    let reward = RewardFn::rediscovery(&target, 2, 2048).unwrap();
    let cfg = TrainConfig {
        steps: 6,
        checkpoint_every: 3,
        bb_mode: BbMode::Embedding,
        ..small(BackwardMode::MaxLikelihood)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_training(&e, &reward, &cfg, 42, Some(a.path())).unwrap();
    run_training(&e, &reward, &cfg, 42, Some(b.path())).unwrap();
    for f in [
        a.path().join(METRICS_FILE),
        a.path().join(FINAL_CHECKPOINT),
        checkpoint_path(a.path(), 3),
        checkpoint_path(a.path(), 6),
    ] {
        let g = b.path().join(f.strip_prefix(a.path()).unwrap());
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(&g).unwrap(), "{f:?}");
    }
    let csv = std::fs::read_to_string(a.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let c = tempfile::tempdir().unwrap();
    run_training(&e, &reward, &cfg, 43, Some(c.path())).unwrap();
    assert_ne!(
        std::fs::read(a.path().join(METRICS_FILE)).unwrap(),
        std::fs::read(c.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn non_finite_reward_aborts_with_dump() {
    let e = env("pair", false);
    let reward = RewardFn::External {
        table: ScoreTable::parse("", Some(f64::NAN)).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let err = run_training(&e, &reward, &small(BackwardMode::Uniform), 0, Some(dir.path())).err();
    assert!(matches!(err, Some(TrainError::NonFinite { step: 0, .. })));
    let dump = std::fs::read_to_string(dir.path().join(NAN_DUMP_FILE)).unwrap();
    assert!(dump.contains("terminal"));
    assert!(!dir.path().join(FINAL_CHECKPOINT).exists());
}
