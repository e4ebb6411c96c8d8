//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use synflow::chemgraph::parse_smiles;
use synflow::eval::*;
use synflow::mdp::presets::preset;
use synflow::mdp::*;
use synflow::policy::BbMode;
use synflow::rewards::RewardFn;
use synflow::training::*;

struct Line {
    id: u32,
    pass: bool,
    detail: String,
}

fn line(id: u32, pass: bool, detail: String) -> Line {
    let l = Line { id, pass, detail };
    // progress goes to stderr; the summary table is printed at the end
    eprintln!("criterion {} done: {}", l.id, l.detail);
    l
}

fn build(name: &str, options: EnvOptions) -> EnvConfig {
    preset(name).unwrap().build(options).unwrap()
}

fn tiny_reward() -> RewardFn {
    let target = parse_smiles(preset("tiny").unwrap().target.unwrap()).unwrap();
    RewardFn::rediscovery(&target, 2, 2048).unwrap()
}

/// R/Z over the enumerated terminal set.
fn exact_distribution(env: &EnvConfig, reward: &RewardFn) -> BTreeMap<String, f64> {
    let recs = enumerate_records(env, 100_000).unwrap();
    let mut q = BTreeMap::new();
    let mut z = 0.0;
    for r in &recs {
        let x = reward.evaluate(&r.mol, &r.smiles).unwrap();
        z += x;
        q.insert(r.smiles.clone(), x);
    }
    for v in q.values_mut() {
        *v /= z;
    }
    q
}

const TINY_STEPS: u64 = 1000;
const SAMPLES: usize = 50_000;

struct TinyRun {
    tv: f64,
    bb_hash_changed: bool,
    top10: f64,
    n_terminals: usize,
    secs: f64,
}

fn train_tiny(mode: BbMode) -> TinyRun {
    let t0 = Instant::now();
    let env = build("tiny", EnvOptions::default());
    let reward = tiny_reward();
    let q = exact_distribution(&env, &reward);
    let cfg = TrainConfig {
        steps: TINY_STEPS,
        lr_pf: 1e-3,
        lr_z: 1e-1,
        bb_mode: mode,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&env, &reward, cfg, 0).unwrap();
    let before = tr.model.forward.bb_matrix.hash();
    for _ in 0..TINY_STEPS {
        tr.step().unwrap();
    }
    let after = tr.model.forward.bb_matrix.hash();
    let trajs = sample_trajectories(&env, &tr.model.forward, SAMPLES, 1.0, 99).unwrap();
    let p = empirical_distribution(trajs.iter().map(|t| t.terminal().smiles.as_str()));
    let mut scored: BTreeMap<&str, f64> = BTreeMap::new();
    for t in &trajs {
        let rec = t.terminal();
        if !scored.contains_key(rec.smiles.as_str()) {
            scored.insert(&rec.smiles, reward.evaluate(&rec.mol, &rec.smiles).unwrap());
        }
    }
    let pairs: Vec<(&str, f64)> = scored.into_iter().collect();
    TinyRun {
        tv: tv_distance(&p, &q),
        bb_hash_changed: before != after,
        top10: top_k_mean(&pairs, 10).unwrap(),
        n_terminals: q.len(),
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn criterion_2() -> Line {
    let mut parts = Vec::new();
    let mut ok = true;
    let mut counts = BTreeSet::new();
    for name in ["single", "pair", "aromatic", "tiny"] {
        let env = build(name, EnvOptions::default());
        let n = enumerate_space(&env, 100_000).unwrap().len();
        let cfg = TrainConfig {
            steps: 500,
            lr_pf: 1e-3,
            lr_z: 1e-1,
            ..TrainConfig::default()
        };
        let out = run_training(&env, &RewardFn::Constant, &cfg, 0, None).unwrap();
        let err = logz_vs_count(f64::from(out.model.log_z_value()), n);
        ok &= err <= 0.15;
        counts.insert(n);
        parts.push(format!("{name} N={n} err={err:.4}"));
    }
    let spread = counts.len() >= 3 && counts.contains(&1) && counts.iter().any(|&n| n >= 20);
    line(2, ok && spread, parts.join(", "))
}

struct TrapRun {
    train_rate: f64,
    train_uniform: f64,
    test_rate: f64,
    test_uniform: f64,
    n_train: usize,
    n_test: usize,
    final_rb: f64,
}

fn train_trap(env: &EnvConfig, mode: BackwardMode) -> TrapRun {
    let steps = 100;
    let cfg = TrainConfig {
        steps,
        batch_size: 32,
        lr_pf: 1e-3,
        lr_z: 1e-1,
        lr_pb: 1e-3,
        alpha: 1.0,
        backward_mode: mode,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(env, &RewardFn::Constant, cfg, 0).unwrap();
    let mut seen = BTreeSet::new();
    let mut rb = Vec::new();
    for _ in 0..steps {
        rb.push(tr.step().unwrap().backward_reward_mean);
        seen.extend(tr.last_batch().iter().map(|t| t.terminal().smiles.clone()));
    }
    let train: Vec<Arc<MolRecord>> = seen
        .iter()
        .map(|s| env.record(&parse_smiles(s).unwrap()).unwrap())
        .collect();
    // unseen terminals reached by the uniform forward sampler
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut test = Vec::new();
    let mut test_names = BTreeSet::new();
    for _ in 0..3000 {
        let t = rollout_forward(env, &mut UniformPolicy, &mut UniformPolicy, 1.0, &mut rng).unwrap();
        let rec = t.terminal();
        if !seen.contains(&rec.smiles) && test_names.insert(rec.smiles.clone()) {
            test.push(rec.clone());
        }
    }
    let net = &tr.model.backward;
    let rate = |set: &[Arc<MolRecord>], trained: bool| {
        if trained {
            solved_routes_rate(env, || net.sampler(), set, 1, 3).unwrap()
        } else {
            solved_routes_rate(env, || UniformPolicy, set, 1, 3).unwrap()
        }
    };
    TrapRun {
        train_rate: rate(&train, true),
        train_uniform: rate(&train, false),
        test_rate: rate(&test, true),
        test_uniform: rate(&test, false),
        n_train: train.len(),
        n_test: test.len(),
        final_rb: rb[rb.len() - 20..].iter().sum::<f64>() / 20.0,
    }
}

fn criteria_3_4() -> (Line, Line) {
    let env = build(
        "trap",
        EnvOptions {
            require_reversible: true,
            ..Default::default()
        },
    );
    let mut ok = true;
    let mut parts = Vec::new();
    let mut rf_rb = 0.0;
    for (name, mode) in [
        ("mle", BackwardMode::MaxLikelihood),
        ("reinforce", BackwardMode::Reinforce),
    ] {
        let r = train_trap(&env, mode);
        ok &= r.train_rate >= 0.9
            && r.train_rate - r.train_uniform >= 0.30
            && r.n_test > 0
            && r.test_rate > r.test_uniform;
        parts.push(format!(
            "{name}: train {:.3} vs uniform {:.3} ({} mols), test {:.3} vs uniform {:.3} ({} mols)",
            r.train_rate, r.train_uniform, r.n_train, r.test_rate, r.test_uniform, r.n_test
        ));
        if mode == BackwardMode::Reinforce {
            rf_rb = r.final_rb;
        }
    }
    (
        line(3, ok, parts.join("; ")),
        line(4, rf_rb >= 0.9, format!("REINFORCE mean R_B over last 20 steps {rf_rb:.3}")),
    )
}

fn criterion_5() -> Line {
    let env = build(
        "tiny",
        EnvOptions {
            fp_nbits: 64,
            ..Default::default()
        },
    );
    let reward = tiny_reward();
    let mut worst: f64 = 0.0;
    let (mut coords, mut skipped) = (0, 0);
    for seed in 0..20 {
        let r = tb_grad_check(&env, &reward, BbMode::Fingerprint, 8, 1e-3, seed).unwrap();
        worst = worst.max(r.max_rel_err);
        coords += r.coords;
        skipped += r.skipped;
    }
    line(
        5,
        worst <= 1e-4,
        format!("max rel err {worst:.2e} over 20 seeds, {coords} coords checked, {skipped} skipped at kinks"),
    )
}

fn criterion_6() -> Line {
    let canon = common::canonical_failures(1000, 11);
    let (products, round) = common::round_trip_failures();
    let m = common::matcher_discrepancies(300, 5);
    line(
        6,
        canon.is_empty() && round.is_empty() && m.discrepancies.is_empty() && products > 0,
        format!(
            "canonical {} failures / 1000; round trip {} failures / {products} products; matcher {} discrepancies / {} pairs",
            canon.len(),
            round.len(),
            m.discrepancies.len(),
            m.pairs
        ),
    )
}

fn criterion_7() -> Line {
    let r = common::mask_fuzz(10_000, 7);
    line(
        7,
        r.violations.is_empty() && r.actions >= 10_000,
        format!(
            "{} violations in {} actions ({} reactions) over {} envs",
            r.violations.len(),
            r.actions,
            r.reactions,
            r.envs
        ),
    )
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_10() -> Line {
    let env = build("tiny", EnvOptions::default());
    let reward = tiny_reward();
    let cfg = TrainConfig {
        steps: 20,
        checkpoint_every: 5,
        bb_mode: BbMode::Embedding,
        backward_mode: BackwardMode::MaxLikelihood,
        ..TrainConfig::default()
    };
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        run_training(&env, &reward, &cfg, 42, Some(d.path())).unwrap();
    }
    let (a, b) = (files_under(dirs[0].path()), files_under(dirs[1].path()));
    let same = a == b && a.contains_key(METRICS_FILE) && a.contains_key(FINAL_CHECKPOINT);
    line(10, same, format!("{} files compared byte for byte", a.len()))
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let fp = train_tiny(BbMode::Fingerprint);
    let emb = train_tiny(BbMode::Embedding);
    let mut lines = vec![line(
        1,
        fp.tv <= 0.05 && fp.secs <= 600.0,
        format!(
            "TV {:.4} over {} terminals, {TINY_STEPS} steps, {SAMPLES} samples, {:.0}s",
            fp.tv, fp.n_terminals, fp.secs
        ),
    )];
    lines.push(criterion_2());
    let (c3, c4) = criteria_3_4();
    lines.push(c3);
    lines.push(c4);
    lines.push(criterion_5());
    lines.push(criterion_6());
    lines.push(criterion_7());
    lines.push(line(8, fp.top10 >= 0.9, format!("top-10 unique mean rediscovery {:.3}", fp.top10)));
    lines.push(line(
        9,
        !fp.bb_hash_changed && emb.bb_hash_changed && fp.tv <= 0.05 && emb.tv <= 0.05,
        format!(
            "fingerprint: hash changed {}, TV {:.4}; embedding: hash changed {}, TV {:.4}",
            fp.bb_hash_changed, fp.tv, emb.bb_hash_changed, emb.tv
        ),
    ));
    lines.push(criterion_10());
    lines.sort_by_key(|l| l.id);
    println!();
    for l in &lines {
        println!("{} criterion {:>2}: {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.detail);
    }
    println!("acceptance finished in {:.0}s", t0.elapsed().as_secs_f64());
    if lines.iter().all(|l| l.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
