//! One function per subcommand. Every output file is written under `out`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use synflow::chemgraph::{fnv1a64, morgan_fingerprint, parse_smiles};
use synflow::eval::{
    count_modes, diversity, enumerate_space, logz_vs_count, read_reference_set, solved_routes_rate,
    top_k_mean, ReferenceIndex,
};
use synflow::mdp::{rollout_forward, write_routes_jsonl, EnvConfig, MolRecord, RouteRecord, Trajectory, UniformPolicy};
use synflow::policy::Model;
use synflow::rewards::RewardFn;
use synflow::training::{
    run_training, sample_trajectories, tb_grad_check, FINAL_CHECKPOINT, SEEN_TERMINALS_FILE,
};

use crate::config::RunConfig;

pub const ROUTES_FILE: &str = "routes.jsonl";
pub const EVAL_FILE: &str = "eval.csv";
pub const TERMINALS_FILE: &str = "terminals.txt";
pub const COUNT_FILE: &str = "count.txt";
pub const ROUTE_REPORT_FILE: &str = "routes_report.csv";
pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

/// Inputs shared by every command.
pub struct Ctx {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Ctx {
    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(FINAL_CHECKPOINT))
    }

    fn load_model(&self, env: &EnvConfig) -> Result<Model> {
        let path = self.checkpoint_path();
        let bytes = fs::read(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let (model, step, _) = Model::from_bytes(env, &bytes)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        log::info!("loaded {} at step {step}", path.display());
        Ok(model)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn with_rewards(reward: &RewardFn, trajs: &mut [Trajectory]) -> Result<()> {
    for t in trajs {
        let rec = t.terminal();
        t.reward = Some(reward.evaluate(&rec.mol, &rec.smiles)?);
    }
    Ok(())
}

/// Seed of one command's sampling stream, kept apart from training seeds.
fn command_seed(seed: u64, purpose: u64) -> u64 {
    fnv1a64(&[seed, purpose, 0x5eed])
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let env = ctx.config.build_env()?;
    let reward = ctx.config.build_reward()?;
    let out = ctx.out_dir()?;
    let outcome = run_training(&env, &reward, &ctx.config.train, ctx.seed, Some(out))?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "trained {} steps: tb_loss {:.4}, logZ {:.4}, mean reward {:.4}",
            last.step + 1,
            last.tb_loss,
            outcome.model.log_z_value(),
            last.mean_reward
        );
    }
    Ok(())
}

pub fn sample(ctx: &Ctx) -> Result<()> {
    let env = ctx.config.build_env()?;
    let reward = ctx.config.build_reward()?;
    let model = ctx.load_model(&env)?;
    let s = &ctx.config.sample;
    let mut trajs = sample_trajectories(&env, &model.forward, s.n, s.temperature, command_seed(ctx.seed, 1))?;
    with_rewards(&reward, &mut trajs)?;
    let routes: Vec<RouteRecord> = trajs.iter().map(|t| RouteRecord::from_trajectory(&env, t)).collect();
    let path = ctx.out_dir()?.join(ROUTES_FILE);
    export_routes(&routes, &path)?;
    println!("wrote {} routes to {}", routes.len(), path.display());
    Ok(())
}

/// Writes routes as JSON lines; an empty list gives an empty file.
pub fn export_routes(routes: &[RouteRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_routes_jsonl(&mut buf, routes)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
struct EvalRow {
    samples: usize,
    unique: usize,
    mean_reward: f64,
    top_k: usize,
    top_k_mean_reward: f64,
    diversity: f64,
    modes: usize,
    novelty: Option<f64>,
}

pub fn eval(ctx: &Ctx) -> Result<()> {
    let env = ctx.config.build_env()?;
    let reward = ctx.config.build_reward()?;
    let model = ctx.load_model(&env)?;
    let e = &ctx.config.eval;
    if e.n < 2 {
        bail!("eval: n must be at least 2");
    }
    let mut trajs = sample_trajectories(&env, &model.forward, e.n, 1.0, command_seed(ctx.seed, 2))?;
    with_rewards(&reward, &mut trajs)?;
    let recs: Vec<&Arc<MolRecord>> = trajs.iter().map(|t| t.terminal()).collect();
    let rewards: Vec<f64> = trajs.iter().map(|t| t.reward.unwrap_or(0.0)).collect();
    let unique: BTreeSet<&str> = recs.iter().map(|r| r.smiles.as_str()).collect();
    let fps: Vec<_> = recs.iter().map(|r| &r.fp).collect();
    let scored: Vec<(&str, f64)> = recs.iter().map(|r| r.smiles.as_str()).zip(rewards.iter().copied()).collect();
    let mols: Vec<_> = recs.iter().map(|r| &r.mol).zip(rewards.iter().copied()).collect();
    let novelty = match &e.reference {
        None => None,
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let opts = env.options();
            let reference = read_reference_set(&text)?
                .iter()
                .map(|m| morgan_fingerprint(m, opts.fp_radius, opts.fp_nbits))
                .collect::<Result<Vec<_>, _>>()?;
            let index = ReferenceIndex::new(&reference.iter().collect::<Vec<_>>())?;
            let sims = fps
                .iter()
                .map(|f| index.max_similarity(f))
                .collect::<Result<Vec<_>, _>>()?;
            Some(sims.iter().sum::<f64>() / sims.len() as f64)
        }
    };
    let row = EvalRow {
        samples: trajs.len(),
        unique: unique.len(),
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        top_k: e.top_k,
        top_k_mean_reward: top_k_mean(&scored, e.top_k.min(unique.len()))?,
        diversity: diversity(&fps)?,
        modes: count_modes(&mols, e.mode_threshold)?,
        novelty,
    };
    let path = ctx.out_dir()?.join(EVAL_FILE);
    write_csv(&path, &[&row])?;
    println!("{row:?}");
    Ok(())
}

pub fn enumerate(ctx: &Ctx) -> Result<()> {
    let env = ctx.config.build_env()?;
    let space = enumerate_space(&env, ctx.config.enumerate.budget)?;
    let out = ctx.out_dir()?;
    let mut list = String::new();
    for s in &space {
        list.push_str(s);
        list.push('\n');
    }
    fs::write(out.join(TERMINALS_FILE), list)?;
    fs::write(out.join(COUNT_FILE), format!("{}\n", space.len()))?;
    println!("{}", space.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct RouteReportRow {
    set: &'static str,
    molecules: usize,
    trained_solved: f64,
    uniform_solved: f64,
}

fn read_terminals(env: &EnvConfig, path: &Path) -> Result<Vec<Arc<MolRecord>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| Ok(env.record(&parse_smiles(l)?)?))
        .collect()
}

pub fn routes(ctx: &Ctx) -> Result<()> {
    let env = ctx.config.build_env()?;
    let model = ctx.load_model(&env)?;
    let r = &ctx.config.routes;
    let train_path = match &r.train_terminals {
        Some(p) => p.clone(),
        None => ctx
            .checkpoint_path()
            .parent()
            .map_or_else(|| PathBuf::from(SEEN_TERMINALS_FILE), |d| d.join(SEEN_TERMINALS_FILE)),
    };
    let train = read_terminals(&env, &train_path)?;
    let seen: BTreeSet<&str> = train.iter().map(|t| t.smiles.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(command_seed(ctx.seed, 3));
    let mut test = Vec::new();
    let mut test_names = BTreeSet::new();
    for _ in 0..r.test_rollouts {
        let t = rollout_forward(&env, &mut UniformPolicy, &mut UniformPolicy, 1.0, &mut rng)?;
        let rec = t.terminal();
        if !seen.contains(rec.smiles.as_str()) && test_names.insert(rec.smiles.clone()) {
            test.push(rec.clone());
        }
    }
    let seed = command_seed(ctx.seed, 4);
    let net = &model.backward;
    let mut rows = Vec::new();
    for (set, mols) in [("train", &train), ("test", &test)] {
        if mols.is_empty() {
            log::warn!("no {set} terminals");
        }
        let rate = |trained: bool| -> Result<f64> {
            if mols.is_empty() {
                return Ok(f64::NAN);
            }
            Ok(if trained {
                solved_routes_rate(&env, || net.sampler(), mols, r.rollouts_per_mol, seed)?
            } else {
                solved_routes_rate(&env, || UniformPolicy, mols, r.rollouts_per_mol, seed)?
            })
        };
        rows.push(RouteReportRow {
            set,
            molecules: mols.len(),
            trained_solved: rate(true)?,
            uniform_solved: rate(false)?,
        });
    }
    let path = ctx.out_dir()?.join(ROUTE_REPORT_FILE);
    write_csv(&path, &rows)?;
    for row in &rows {
        println!("{row:?}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EstimateRow {
    exact_count: usize,
    #[serde(rename = "logZ")]
    log_z: f64,
    exp_log_z: f64,
    relative_error: f64,
}

/// Trains with the constant reward and compares `exp(logZ)` to the
/// enumerated number of terminals.
pub fn estimate_space(ctx: &Ctx) -> Result<()> {
    let env = ctx.config.build_env()?;
    let count = enumerate_space(&env, ctx.config.enumerate.budget)?.len();
    let out = ctx.out_dir()?;
    let outcome = run_training(&env, &RewardFn::Constant, &ctx.config.train, ctx.seed, Some(out))?;
    let log_z = f64::from(outcome.model.log_z_value());
    let row = EstimateRow {
        exact_count: count,
        log_z,
        exp_log_z: log_z.exp(),
        relative_error: logz_vs_count(log_z, count),
    };
    write_csv(&out.join(ESTIMATE_FILE), &[&row])?;
    println!("{row:?}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckRow {
    seed: u64,
    max_rel_err: f64,
    coords: usize,
    skipped: usize,
}

pub fn gradcheck(ctx: &Ctx) -> Result<()> {
    let env = ctx.config.build_env()?;
    let reward = ctx.config.build_reward()?;
    let g = &ctx.config.gradcheck;
    let mut rows = Vec::new();
    for k in 0..g.seeds {
        let seed = ctx.seed + k;
        let r = tb_grad_check(&env, &reward, ctx.config.train.bb_mode, g.batch, g.h, seed)?;
        rows.push(GradcheckRow {
            seed,
            max_rel_err: r.max_rel_err,
            coords: r.coords,
            skipped: r.skipped,
        });
    }
    write_csv(&ctx.out_dir()?.join(GRADCHECK_FILE), &rows)?;
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} over {} seeds", rows.len());
    if worst > g.tolerance {
        bail!("gradient check failed: {worst:.3e} > {:.1e}", g.tolerance);
    }
    Ok(())
}
