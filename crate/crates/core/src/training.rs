//! Trajectory-balance training with uniform, free, maximum-likelihood or
//! REINFORCE backward policies.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chemgraph::fnv1a64;
use crate::eval::{ModeCounter, MODE_THRESHOLD};
use crate::mdp::{
    rollout_backward, rollout_forward, BackwardPolicy, BackwardRollout, EnvConfig, MdpError,
    MolRecord, Trajectory, UniformPolicy,
};
use crate::numerics::{grad_check, Adam, GradCheckReport, Matrix, NumericsError, ParamStore, Scalar, Tape, Var};
use crate::policy::{BackwardNet, BackwardVars, BbMode, ForwardNet, ForwardVars, Model, PolicyError};
use crate::rewards::{RewardError, RewardFn};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite values at step {step}; offending trajectories: {dump}")]
    NonFinite { step: u64, dump: String },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Chem(#[from] crate::chemgraph::ChemError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    #[default]
    Uniform,
    /// P_B trained jointly through the TB loss.
    Free,
    MaxLikelihood,
    Reinforce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr_pf: f64,
    pub lr_pb: f64,
    pub lr_z: f64,
    pub beta: f64,
    pub backward_mode: BackwardMode,
    pub alpha: f64,
    pub replay_capacity: usize,
    pub reward_floor: f64,
    /// Subtract the batch-mean backward reward in REINFORCE.
    pub reinforce_baseline: bool,
    /// Keep P_B out of the TB step in the max-likelihood and REINFORCE modes.
    pub freeze_pb_in_tb: bool,
    /// Backward rollouts per step; `None` means `batch_size / 2`.
    pub backward_rollouts: Option<usize>,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub bb_mode: BbMode,
    pub sample_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 1000,
            lr_pf: 1e-4,
            lr_pb: 1e-4,
            lr_z: 1e-3,
            beta: 1.0,
            backward_mode: BackwardMode::Uniform,
            alpha: 1.0,
            replay_capacity: 1000,
            reward_floor: 1e-8,
            reinforce_baseline: true,
            freeze_pb_in_tb: true,
            backward_rollouts: None,
            checkpoint_every: 0,
            bb_mode: BbMode::Fingerprint,
            sample_temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return bad("beta must be finite and at least 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and nonnegative");
        }
        for (name, lr) in [("lr_pf", self.lr_pf), ("lr_pb", self.lr_pb), ("lr_z", self.lr_z)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.reward_floor > 0.0 && self.reward_floor.is_finite()) {
            return bad("reward_floor must be positive");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity must be positive");
        }
        if self.backward_rollouts == Some(0) {
            return bad("backward_rollouts must be positive");
        }
        if !(self.sample_temperature > 0.0 && self.sample_temperature.is_finite()) {
            return bad("sample_temperature must be positive");
        }
        Ok(())
    }

    pub fn rollouts_per_step(&self) -> usize {
        self.backward_rollouts.unwrap_or(self.batch_size / 2).max(1)
    }
}

/// `(log_z + Σlog P_F − β·ln max(reward, floor) − Σlog P_B)²`.
pub fn tb_loss(sum_log_pf: f64, sum_log_pb: f64, reward: f64, log_z: f64, beta: f64, floor: f64) -> f64 {
    let d = log_z + sum_log_pf - beta * reward.max(floor).ln() - sum_log_pb;
    d * d
}

/// `Σ log P_B` of a trajectory under the uniform backward policy.
pub fn uniform_backward_logprob(env: &EnvConfig, traj: &Trajectory) -> Result<f64, MdpError> {
    Ok(crate::mdp::backward_logprobs(env, &traj.states, &traj.actions, &mut UniformPolicy)?
        .iter()
        .sum())
}

/// Where the `Σ log P_B` term of the TB loss comes from.
pub enum BackwardTerm<'a, T> {
    /// Per-trajectory constants.
    Fixed(Vec<f64>),
    Net(&'a BackwardNet<T>, BackwardVars),
}

/// Mean TB loss over `trajs` on `tape`, plus the per-trajectory squared
/// residuals.
#[allow(clippy::too_many_arguments)]
pub fn tb_objective<T: Scalar>(
    tape: &mut Tape<T>,
    env: &EnvConfig,
    forward: &ForwardNet<T>,
    fv: &ForwardVars,
    backward: BackwardTerm<'_, T>,
    log_z: Var,
    trajs: &[&Trajectory],
    log_rewards: &[f64],
) -> Result<(Var, Var), PolicyError> {
    let n = trajs.len();
    let fwd = forward.trajectory_logprobs(tape, fv, env, trajs)?.total;
    let bck = match backward {
        BackwardTerm::Fixed(v) => tape.constant(Matrix::from_f64(n, 1, &v)),
        BackwardTerm::Net(net, bv) => net.trajectory_logprobs(tape, &bv, env, trajs)?,
    };
    let logr = tape.constant(Matrix::from_f64(n, 1, log_rewards));
    let d = tape.add(fwd, log_z)?;
    let d = tape.sub(d, logr)?;
    let d = tape.sub(d, bck)?;
    let sq = tape.square(d);
    Ok((tape.mean(sq), sq))
}

/// Everything logged for one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub tb_loss: f64,
    #[serde(rename = "logZ")]
    pub log_z: f64,
    pub mean_reward: f64,
    pub backward_reward_mean: f64,
    pub solved_rate: f64,
    pub modes_count: usize,
}

pub fn write_metrics_csv<W: std::io::Write>(w: W, rows: &[StepMetrics]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

fn derive_seed(seed: u64, step: u64, purpose: u64) -> u64 {
    fnv1a64(&[seed, step, purpose])
}

fn stream_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

/// `n` forward trajectories sampled in parallel. Trajectory `j` uses its own
/// random stream, so the result does not depend on the thread count.
pub fn sample_trajectories<T: Scalar>(
    env: &EnvConfig,
    forward: &ForwardNet<T>,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Trajectory>, TrainError> {
    forward.sampler()?;
    let out = (0..n)
        .into_par_iter()
        .map_init(
            || forward.sampler().expect("sampler construction checked above"),
            |fwd, j| {
                let mut rng = stream_rng(seed, j);
                rollout_forward(env, fwd, &mut UniformPolicy, temperature, &mut rng)
            },
        )
        .collect::<Result<Vec<_>, _>>()?;
    Ok(out)
}

/// One backward rollout per terminal, in parallel with per-index streams.
pub fn backward_rollouts<P, F>(
    env: &EnvConfig,
    make_policy: F,
    terminals: &[Arc<MolRecord>],
    seed: u64,
) -> Result<Vec<BackwardRollout>, MdpError>
where
    P: BackwardPolicy,
    F: Fn() -> P + Sync + Send,
{
    terminals
        .par_iter()
        .enumerate()
        .map_init(make_policy, |policy, (j, rec)| {
            let mut rng = stream_rng(seed, j);
            rollout_backward(env, policy, rec.clone(), &mut rng)
        })
        .collect()
}

#[derive(Serialize)]
struct DumpEntry<'a> {
    terminal: &'a str,
    actions: &'a [crate::mdp::ForwardAction],
    reward: Option<f64>,
    residual: f64,
}

fn dump(trajs: &[&Trajectory], residuals: &[f64]) -> String {
    let entries: Vec<DumpEntry> = trajs
        .iter()
        .zip(residuals)
        .filter(|(t, r)| !r.is_finite() || !t.reward.is_some_and(f64::is_finite))
        .map(|(t, &r)| DumpEntry {
            terminal: &t.terminal().smiles,
            actions: &t.actions,
            reward: t.reward,
            residual: r,
        })
        .collect();
    serde_json::to_string(&entries).unwrap_or_default()
}

/// Owns the model, optimizers and replay buffer of one training run.
pub struct Trainer<'a> {
    env: &'a EnvConfig,
    reward: &'a RewardFn,
    config: TrainConfig,
    seed: u64,
    pub model: Model,
    step: u64,
    replay: VecDeque<Arc<MolRecord>>,
    modes: ModeCounter,
    reward_cache: HashMap<String, f64>,
    last_batch: Vec<Trajectory>,
}

impl<'a> Trainer<'a> {
    pub fn new(env: &'a EnvConfig, reward: &'a RewardFn, config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        if config.backward_mode == BackwardMode::Reinforce && !env.options().require_reversible {
            return Err(TrainError::Config(
                "reinforce needs an environment built with require_reversible".into(),
            ));
        }
        Ok(Trainer {
            model: Model::new(env, config.bb_mode, seed),
            env,
            reward,
            config,
            seed,
            step: 0,
            replay: VecDeque::new(),
            modes: ModeCounter::new(MODE_THRESHOLD),
            reward_cache: HashMap::new(),
            last_batch: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    /// Trajectories sampled by the most recent [`Trainer::step`].
    pub fn last_batch(&self) -> &[Trajectory] {
        &self.last_batch
    }

    fn reward_of(&mut self, rec: &MolRecord) -> Result<f64, TrainError> {
        if let Some(&r) = self.reward_cache.get(&rec.smiles) {
            return Ok(r);
        }
        let r = self.reward.evaluate(&rec.mol, &rec.smiles)?;
        self.reward_cache.insert(rec.smiles.clone(), r);
        Ok(r)
    }

    fn pb_in_tb(&self) -> bool {
        match self.config.backward_mode {
            BackwardMode::Uniform => false,
            BackwardMode::Free => true,
            BackwardMode::MaxLikelihood | BackwardMode::Reinforce => !self.config.freeze_pb_in_tb,
        }
    }

    /// Samples a batch from the current P_F and attaches rewards.
    pub fn sample_batch(&mut self) -> Result<Vec<Trajectory>, TrainError> {
        let mut trajs = sample_trajectories(
            self.env,
            &self.model.forward,
            self.config.batch_size,
            self.config.sample_temperature,
            derive_seed(self.seed, self.step, 1),
        )?;
        for t in &mut trajs {
            t.reward = Some(self.reward_of(t.terminal())?);
        }
        Ok(trajs)
    }

    /// Sample a batch, take a TB step, then update P_B according to the mode.
    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        let trajs = self.sample_batch()?;
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        let rewards: Vec<f64> = refs.iter().map(|t| t.reward.unwrap_or(f64::NAN)).collect();
        for t in &refs {
            let rec = t.terminal();
            self.modes.observe(&rec.mol, &rec.smiles, t.reward.unwrap_or(0.0))?;
        }
        let (tb_loss, log_z) = self.tb_update(&refs)?;
        let (backward_reward_mean, solved_rate) = self.backward_update(&refs)?;
        let metrics = StepMetrics {
            step: self.step,
            tb_loss,
            log_z,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            backward_reward_mean,
            solved_rate,
            modes_count: self.modes.count(),
        };
        self.step += 1;
        self.last_batch = trajs;
        Ok(metrics)
    }

    /// One Adam step on the mean TB loss of `refs`, whose rewards must be
    /// set. Returns the loss and the log Z it was computed with.
    pub fn tb_update(&mut self, refs: &[&Trajectory]) -> Result<(f64, f64), TrainError> {
        let cfg = &self.config;
        let log_rewards: Vec<f64> = refs
            .iter()
            .map(|t| match t.reward {
                Some(r) if r.is_finite() => cfg.beta * r.max(cfg.reward_floor).ln(),
                _ => f64::NAN,
            })
            .collect();
        if log_rewards.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite {
                step: self.step,
                dump: dump(refs, &log_rewards),
            });
        }
        self.tb_step(refs, &log_rewards)
    }

    /// The mode's P_B update followed by monitoring rollouts. Returns the
    /// mean backward reward and the rollout success rate.
    pub fn backward_update(&mut self, refs: &[&Trajectory]) -> Result<(f64, f64), TrainError> {
        let k = self.config.rollouts_per_step();
        match self.config.backward_mode {
            BackwardMode::MaxLikelihood => {
                self.mle_step(refs)?;
                self.monitor(refs, k)
            }
            BackwardMode::Reinforce => self.reinforce_step(refs, k),
            BackwardMode::Uniform | BackwardMode::Free => self.monitor(refs, k),
        }
    }

    fn tb_step(&mut self, refs: &[&Trajectory], log_rewards: &[f64]) -> Result<(f64, f64), TrainError> {
        let cfg = &self.config;
        let pb_trainable = self.pb_in_tb();
        let model = &mut self.model;
        let mut tape = Tape::<f32>::new();
        let fv = model.forward.load(&mut tape, true)?;
        let zid = model.log_z.id("log_z").expect("log_z parameter");
        let z = tape.param(&model.log_z, zid);
        let log_z = f64::from(tape.scalar(z));
        let term = if cfg.backward_mode == BackwardMode::Uniform {
            BackwardTerm::Fixed(refs.iter().map(|t| t.sum_bck()).collect())
        } else {
            BackwardTerm::Net(&model.backward, model.backward.load(&mut tape, pb_trainable))
        };
        let (loss, sq) = tb_objective(&mut tape, self.env, &model.forward, &fv, term, z, refs, log_rewards)?;
        let residuals: Vec<f64> = tape.value(sq).data().iter().map(|&x| f64::from(x)).collect();
        let value = f64::from(tape.scalar(loss));
        let non_finite = |step| TrainError::NonFinite {
            step,
            dump: dump(refs, &residuals),
        };
        if !value.is_finite() {
            return Err(non_finite(self.step));
        }
        let grads = tape.backward(loss);
        let pf = Adam::new(cfg.lr_pf);
        let result = (|| -> Result<(), NumericsError> {
            model.forward.params.adam_step(&pf, &grads.for_store(&model.forward.params))?;
            if model.forward.bb_trainable() {
                model
                    .forward
                    .bb_matrix
                    .adam_step(&pf, &grads.for_store(&model.forward.bb_matrix))?;
            }
            model.log_z.adam_step(&Adam::new(cfg.lr_z), &grads.for_store(&model.log_z))?;
            if pb_trainable {
                model
                    .backward
                    .params
                    .adam_step(&Adam::new(cfg.lr_pb), &grads.for_store(&model.backward.params))?;
            }
            Ok(())
        })();
        match result {
            Err(NumericsError::NonFiniteGradient(_)) => Err(non_finite(self.step)),
            other => other.map(|_| (value, log_z)).map_err(Into::into),
        }
    }

    fn mle_step(&mut self, refs: &[&Trajectory]) -> Result<(), TrainError> {
        let net = &mut self.model.backward;
        let mut tape = Tape::<f32>::new();
        let bv = net.load(&mut tape, true);
        let lp = net.trajectory_logprobs(&mut tape, &bv, self.env, refs)?;
        let neg = tape.scale(lp, -1.0);
        let loss = tape.mean(neg);
        if !tape.scalar(loss).is_finite() {
            let res: Vec<f64> = tape.value(lp).data().iter().map(|&x| f64::from(x)).collect();
            return Err(TrainError::NonFinite {
                step: self.step,
                dump: dump(refs, &res),
            });
        }
        let grads = tape.backward(loss);
        net.params
            .adam_step(&Adam::new(self.config.lr_pb), &grads.for_store(&net.params))
            .map_err(|e| match e {
                NumericsError::NonFiniteGradient(_) => TrainError::NonFinite {
                    step: self.step,
                    dump: String::from("[]"),
                },
                e => e.into(),
            })
    }

    fn rollouts_from(&self, terminals: &[Arc<MolRecord>], seed: u64) -> Result<Vec<BackwardRollout>, MdpError> {
        if self.config.backward_mode == BackwardMode::Uniform {
            backward_rollouts(self.env, || UniformPolicy, terminals, seed)
        } else {
            let net = &self.model.backward;
            backward_rollouts(self.env, || net.sampler(), terminals, seed)
        }
    }

    /// Backward reward mean and success rate of rollouts from the first `k`
    /// batch terminals under the current P_B.
    fn monitor(&self, refs: &[&Trajectory], k: usize) -> Result<(f64, f64), TrainError> {
        let terminals: Vec<Arc<MolRecord>> = refs.iter().take(k).map(|t| t.terminal().clone()).collect();
        let rolls = self.rollouts_from(&terminals, derive_seed(self.seed, self.step, 3))?;
        Ok(rollout_stats(&rolls))
    }

    fn reinforce_step(&mut self, refs: &[&Trajectory], k: usize) -> Result<(f64, f64), TrainError> {
        for t in refs {
            self.replay.push_back(t.terminal().clone());
            if self.replay.len() > self.config.replay_capacity {
                self.replay.pop_front();
            }
        }
        if self.replay.is_empty() {
            log::warn!("step {}: replay buffer empty, skipping backward update", self.step);
            return Ok((0.0, 0.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.step, 2));
        let picked: Vec<Arc<MolRecord>> = (0..k)
            .map(|_| self.replay[rng.random_range(0..self.replay.len())].clone())
            .collect();
        let rolls = self.rollouts_from(&picked, derive_seed(self.seed, self.step, 3))?;
        let stats = rollout_stats(&rolls);
        let fwd: Vec<&Trajectory> = refs.iter().take(k).copied().collect();

        let mut rb: Vec<f64> = rolls
            .iter()
            .map(|r| if r.reached_s0 { 1.0 } else { -1.0 })
            .collect();
        rb.extend(std::iter::repeat_n(1.0, fwd.len()));
        let m = rb.len() as f64;
        let b = if self.config.reinforce_baseline {
            rb.iter().sum::<f64>() / m
        } else {
            0.0
        };
        // Per-sample weight on log P_B in the loss. The entropy estimate only
        // uses the rollouts, which are the samples drawn from P_B.
        let ent = self.config.alpha / rolls.len().max(1) as f64;
        let w: Vec<f64> = rb
            .iter()
            .enumerate()
            .map(|(i, r)| -(r - b) / m + if i < rolls.len() { ent } else { 0.0 })
            .collect();

        let net = &mut self.model.backward;
        let mut tape = Tape::<f32>::new();
        let bv = net.load(&mut tape, true);
        let roll_refs: Vec<&BackwardRollout> = rolls.iter().collect();
        let lr = net.rollout_logprobs(&mut tape, &bv, self.env, &roll_refs)?;
        let lf = net.trajectory_logprobs(&mut tape, &bv, self.env, &fwd)?;
        let wr = tape.constant(Matrix::from_f64(rolls.len(), 1, &w[..rolls.len()]));
        let wf = tape.constant(Matrix::from_f64(fwd.len(), 1, &w[rolls.len()..]));
        let a = tape.mul(lr, wr)?;
        let a = tape.sum(a);
        let c = tape.mul(lf, wf)?;
        let c = tape.sum(c);
        let loss = tape.add(a, c)?;
        if !tape.scalar(loss).is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                dump: dump(&fwd, &vec![f64::NAN; fwd.len()]),
            });
        }
        let grads = tape.backward(loss);
        net.params
            .adam_step(&Adam::new(self.config.lr_pb), &grads.for_store(&net.params))?;
        Ok(stats)
    }
}

/// `(mean R_B, success rate)` with `R_B = +1` on reaching s0 and `-1` otherwise.
fn rollout_stats(rolls: &[BackwardRollout]) -> (f64, f64) {
    if rolls.is_empty() {
        return (0.0, 0.0);
    }
    let ok = rolls.iter().filter(|r| r.reached_s0).count() as f64 / rolls.len() as f64;
    (2.0 * ok - 1.0, ok)
}

/// Result of [`run_training`].
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    /// Distinct terminal SMILES of every training batch.
    pub seen_terminals: BTreeSet<String>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const NAN_DUMP_FILE: &str = "nonfinite_dump.json";
/// Sorted terminal SMILES seen in training batches, one per line.
pub const SEEN_TERMINALS_FILE: &str = "train_terminals.txt";

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:07}.ckpt"))
}

/// Full training loop. With `out`, writes the metrics CSV, periodic
/// checkpoints and the final model there. On a non-finite loss the run stops,
/// earlier checkpoints are kept and the offending trajectories are dumped.
pub fn run_training(
    env: &EnvConfig,
    reward: &RewardFn,
    config: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(env, reward, config.clone(), seed)?;
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let extra = serde_json::json!({ "config": config, "seed": seed });
    let mut metrics = Vec::with_capacity(config.steps as usize);
    let mut seen_terminals = BTreeSet::new();
    for _ in 0..config.steps {
        let m = match trainer.step() {
            Ok(m) => m,
            Err(e) => {
                if let (Some(dir), TrainError::NonFinite { dump, .. }) = (out, &e) {
                    fs::write(dir.join(NAN_DUMP_FILE), dump)?;
                }
                return Err(e);
            }
        };
        seen_terminals.extend(trainer.last_batch().iter().map(|t| t.terminal().smiles.clone()));
        if let Some(w) = writer.as_mut() {
            w.serialize(&m)?;
            w.flush()?;
        }
        log::debug!(
            "step {} loss {:.4} logZ {:.4} reward {:.4} R_B {:.3}",
            m.step,
            m.tb_loss,
            m.log_z,
            m.mean_reward,
            m.backward_reward_mean
        );
        metrics.push(m);
        let done = trainer.step_count();
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                let path = checkpoint_path(dir, done);
                fs::create_dir_all(path.parent().expect("has parent"))?;
                fs::write(path, trainer.model.to_bytes(done, extra.clone()))?;
            }
        }
    }
    if let Some(dir) = out {
        let mut f = fs::File::create(dir.join(FINAL_CHECKPOINT))?;
        f.write_all(&trainer.model.to_bytes(trainer.step_count(), extra))?;
        let mut list = String::new();
        for s in &seen_terminals {
            list.push_str(s);
            list.push('\n');
        }
        fs::write(dir.join(SEEN_TERMINALS_FILE), list)?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
        seen_terminals,
    })
}

/// Finite-difference check of the full TB loss in double precision over
/// the forward net, the BB matrix in embedding mode, a free P_B and logZ.
/// Parameters are perturbed away from their initialization first so that
/// zero-initialized heads carry gradient.
pub fn tb_grad_check(
    env: &EnvConfig,
    reward: &RewardFn,
    bb_mode: BbMode,
    batch: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let model = Model::new(env, bb_mode, seed);
    let mut forward: ForwardNet<f64> = model.forward.cast();
    let mut backward: BackwardNet<f64> = model.backward.cast();
    let mut log_z: ParamStore<f64> = model.log_z.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&[seed, 4]));
    let normal = Normal::new(0.0, 0.05).expect("finite std");
    for store in [&mut forward.params, &mut forward.bb_matrix, &mut backward.params, &mut log_z] {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for x in store.value_mut(id).data_mut() {
                *x += normal.sample(&mut rng);
            }
        }
    }
    let trajs = sample_trajectories(env, &forward, batch, 1.0, seed)?;
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let log_rewards = refs
        .iter()
        .map(|t| Ok(reward.evaluate(&t.terminal().mol, &t.terminal().smiles)?.max(1e-8).ln()))
        .collect::<Result<Vec<f64>, TrainError>>()?;
    let with_bb = forward.bb_trainable();
    let mut stores = vec![forward.params.clone()];
    if with_bb {
        stores.push(forward.bb_matrix.clone());
    }
    stores.push(backward.params.clone());
    stores.push(log_z.clone());
    let loss = |stores: &[ParamStore<f64>]| {
        let mut f = forward.clone();
        let mut b = backward.clone();
        let mut k = 0;
        f.params = stores[k].clone();
        if with_bb {
            k += 1;
            f.bb_matrix = stores[k].clone();
        }
        b.params = stores[k + 1].clone();
        let lz = &stores[k + 2];
        let mut tape = Tape::new();
        let fv = f.load(&mut tape, true).expect("forward net loads");
        let bv = b.load(&mut tape, true);
        let z = tape.param(lz, lz.id("log_z").expect("log_z parameter"));
        let term = BackwardTerm::Net(&b, bv);
        let (out, _) = tb_objective(&mut tape, env, &f, &fv, term, z, &refs, &log_rewards)
            .expect("objective on sampled trajectories");
        (tape, out)
    };
    Ok(grad_check(&mut stores, loss, h, 24, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tb_loss_examples() {
        assert_eq!(tb_loss(0.0, 0.0, 1.0, 0.0, 1.0, 1e-8), 0.0);
        let x = tb_loss(0.5f64.ln(), 0.0, 2.0, 0.0, 1.0, 1e-8);
        assert!((x - 0.25f64.ln().powi(2)).abs() < 1e-12);
        assert!((x - 1.92181).abs() < 1e-5);
        let c: f64 = 7.0;
        let y = tb_loss(-1.3, -0.2, 2.0 * c, c.ln(), 1.0, 1e-8);
        let z = tb_loss(-1.3, -0.2, 2.0, 0.0, 1.0, 1e-8);
        assert!((y - z).abs() < 1e-12);
        assert!(tb_loss(0.0, 0.0, 0.0, 0.0, 1.0, 1e-8).is_finite());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.lr_z, 1e-3);
        assert_eq!(c.rollouts_per_step(), 32);
        c.validate().unwrap();
        let bad = TrainConfig {
            beta: 0.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            alpha: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn metrics_header() {
        let mut buf = Vec::new();
        write_metrics_csv(
            &mut buf,
            &[StepMetrics {
                step: 0,
                tb_loss: 1.5,
                log_z: 0.25,
                mean_reward: 1.0,
                backward_reward_mean: 1.0,
                solved_rate: 1.0,
                modes_count: 2,
            }],
        )
        .unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with(
            "step,tb_loss,logZ,mean_reward,backward_reward_mean,solved_rate,modes_count\n"
        ));
    }
}
