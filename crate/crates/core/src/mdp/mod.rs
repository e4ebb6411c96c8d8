//! The synthesis MDP: states, masks, transitions and rollouts.
//!
//! A trajectory picks a building block, applies up to `max_len` reactions and
//! stops. A bi-molecular reaction and the choice of its partner building
//! block form one transition. The backward process walks from a terminal
//! molecule back to the empty state and tracks how many reactions it has
//! undone, so it never exceeds the length limit.

mod env;
pub mod presets;
mod route;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::chemgraph::ChemError;
use crate::numerics::NumericsError;
use crate::templates::TemplateError;

pub use env::{
    BackwardMasks, BackwardOptions, EnvConfig, EnvOptions, ForwardMasks, ForwardOptions, MolRecord,
};
pub use route::{read_routes_jsonl, write_routes_jsonl, RouteRecord, RouteStep};

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("masked action: {0}")]
    MaskedAction(String),
    #[error("no legal action at {0}")]
    NoLegalAction(String),
    #[error("terminal state has no outgoing actions")]
    TerminalState,
    #[error("environment: {0}")]
    Config(String),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone)]
pub enum State {
    Empty,
    Mol { rec: Arc<MolRecord>, steps: usize },
    Terminal { rec: Arc<MolRecord>, steps: usize },
}

impl State {
    pub fn mol(&self) -> Option<&Arc<MolRecord>> {
        match self {
            State::Empty => None,
            State::Mol { rec, .. } | State::Terminal { rec, .. } => Some(rec),
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            State::Empty => 0,
            State::Mol { steps, .. } | State::Terminal { steps, .. } => *steps,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, State::Terminal { .. })
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Empty => write!(f, "Empty"),
            State::Mol { rec, steps } => write!(f, "Mol({}, {steps})", rec.smiles),
            State::Terminal { rec, steps } => write!(f, "Terminal({}, {steps})", rec.smiles),
        }
    }
}

impl PartialEq for State {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (State::Empty, State::Empty) => true,
            (State::Mol { rec: a, steps: x }, State::Mol { rec: b, steps: y })
            | (State::Terminal { rec: a, steps: x }, State::Terminal { rec: b, steps: y }) => {
                x == y && a.smiles == b.smiles
            }
            _ => false,
        }
    }
}

/// Forward actions. Templates are global indices into the template list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ForwardAction {
    Stop,
    AddFirstReactant { bb: usize },
    ReactUni { template: usize },
    /// Bi-molecular reaction with building block `bb` as the partner.
    ReactBi { template: usize, bb: usize },
}

/// Backward actions. `choice` indexes the parents listed by
/// [`EnvConfig::backward_options`] for the template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackwardAction {
    ReactUni { template: usize, choice: usize },
    ReactBi { template: usize, choice: usize },
    RemoveFirstReactant,
}

/// Forward policy: log-probabilities over the masks it is given.
pub trait ForwardPolicy {
    /// Over the forward top mask at a molecule state.
    fn top(&mut self, state: &State, mask: &[bool]) -> Result<Vec<f32>, MdpError>;
    /// Over building blocks at s0.
    fn first(&mut self, mask: &[bool]) -> Result<Vec<f32>, MdpError>;
    /// Over building blocks as partners for the `slot`-th bi template.
    fn partner(&mut self, state: &State, slot: usize, mask: &[bool]) -> Result<Vec<f32>, MdpError>;
}

/// Backward policy over the backward top mask. Parent choices within a
/// template are uniform and added by the caller.
pub trait BackwardPolicy {
    fn top(&mut self, rec: &MolRecord, unwound: usize, mask: &[bool]) -> Result<Vec<f32>, MdpError>;
}

/// Uniform over whatever is unmasked.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

/// Uniform log-probabilities over `mask`.
pub fn uniform_logprobs(mask: &[bool]) -> Vec<f32> {
    let n = mask.iter().filter(|&&m| m).count();
    let lp = -(n as f64).ln() as f32;
    mask.iter()
        .map(|&m| if m { lp } else { f32::NEG_INFINITY })
        .collect()
}

impl ForwardPolicy for UniformPolicy {
    fn top(&mut self, _: &State, mask: &[bool]) -> Result<Vec<f32>, MdpError> {
        Ok(uniform_logprobs(mask))
    }
    fn first(&mut self, mask: &[bool]) -> Result<Vec<f32>, MdpError> {
        Ok(uniform_logprobs(mask))
    }
    fn partner(&mut self, _: &State, _: usize, mask: &[bool]) -> Result<Vec<f32>, MdpError> {
        Ok(uniform_logprobs(mask))
    }
}

impl BackwardPolicy for UniformPolicy {
    fn top(&mut self, _: &MolRecord, _: usize, mask: &[bool]) -> Result<Vec<f32>, MdpError> {
        Ok(uniform_logprobs(mask))
    }
}

/// Draws an index from log-probabilities. `temperature == 0` is greedy
/// (lowest index on ties); otherwise probabilities are `p^(1/T)` renormalized.
pub fn sample_index<R: Rng + ?Sized>(logprobs: &[f32], temperature: f64, rng: &mut R) -> usize {
    let finite = |i: &usize| logprobs[*i].is_finite();
    if temperature <= 0.0 {
        return (0..logprobs.len())
            .filter(finite)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if logprobs[b] >= logprobs[i] => Some(b),
                _ => Some(i),
            })
            .expect("at least one unmasked entry");
    }
    let scaled: Vec<f64> = logprobs
        .iter()
        .map(|&x| f64::from(x) / temperature)
        .collect();
    let max = scaled
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled
        .iter()
        .map(|&x| if x.is_finite() { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return i;
            }
            u -= w;
            last = Some(i);
        }
    }
    last.expect("at least one unmasked entry")
}

/// A complete forward trajectory from s0 to a terminal state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `actions.len() + 1` states, from `Empty` to `Terminal`.
    pub states: Vec<State>,
    pub actions: Vec<ForwardAction>,
    /// Forward log-probability of each action at temperature 1. Empty when the
    /// trajectory came from a backward rollout.
    pub fwd_logprobs: Vec<f64>,
    /// Backward log-probability of undoing each action; zero for `Stop`.
    pub bck_logprobs: Vec<f64>,
    pub reward: Option<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &Arc<MolRecord> {
        self.states
            .last()
            .and_then(State::mol)
            .expect("trajectory ends in a molecule")
    }

    pub fn num_reactions(&self) -> usize {
        self.states.last().map_or(0, State::steps)
    }

    pub fn sum_fwd(&self) -> f64 {
        self.fwd_logprobs.iter().sum()
    }

    pub fn sum_bck(&self) -> f64 {
        self.bck_logprobs.iter().sum()
    }

    /// Building block the trajectory started from.
    pub fn first_bb(&self) -> usize {
        match self.actions.first() {
            Some(ForwardAction::AddFirstReactant { bb }) => *bb,
            _ => panic!("trajectory does not start with AddFirstReactant"),
        }
    }
}

/// Unwound count of the backward process at forward state `s`, for a
/// trajectory with `k` reactions.
fn unwound_at(s: &State, k: usize) -> usize {
    k - s.steps()
}

/// Backward log-probabilities of undoing each action of a trajectory.
pub fn backward_logprobs(
    env: &EnvConfig,
    states: &[State],
    actions: &[ForwardAction],
    bck: &mut dyn BackwardPolicy,
) -> Result<Vec<f64>, MdpError> {
    let k = states.last().map_or(0, State::steps);
    let mut out = Vec::with_capacity(actions.len());
    for (j, a) in actions.iter().enumerate() {
        let (prev, next) = (&states[j], &states[j + 1]);
        let Some(rev) = env.reverse_of(prev, a, next)? else {
            out.push(0.0);
            continue;
        };
        let rec = next.mol().expect("reverse from a molecule");
        let u = unwound_at(next, k);
        let masks = env.backward_mask(rec, u);
        let slot = env.backward_slot(&rev);
        let lp = bck.top(rec, u, &masks.top)?;
        out.push(f64::from(lp[slot]) - (masks.choices[slot] as f64).ln());
    }
    Ok(out)
}

/// Samples a forward trajectory. Recorded forward log-probabilities are at
/// temperature 1 whatever `temperature` is used for sampling.
pub fn rollout_forward<R: Rng + ?Sized>(
    env: &EnvConfig,
    fwd: &mut dyn ForwardPolicy,
    bck: &mut dyn BackwardPolicy,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory, MdpError> {
    let mut states = vec![State::Empty];
    let mut actions = Vec::new();
    let mut fwd_logprobs = Vec::new();
    loop {
        let state = states.last().expect("nonempty").clone();
        if state.is_terminal() {
            break;
        }
        let masks = env.forward_mask(&state)?;
        let (action, lp) = if let Some(first) = &masks.first {
            let lp = fwd.first(first)?;
            let bb = sample_index(&lp, temperature, rng);
            (ForwardAction::AddFirstReactant { bb }, f64::from(lp[bb]))
        } else {
            let lp = fwd.top(&state, &masks.top)?;
            let slot = sample_index(&lp, temperature, rng);
            let nu = env.uni_templates().len();
            if slot == 0 {
                (ForwardAction::Stop, f64::from(lp[0]))
            } else if slot <= nu {
                let template = env.uni_templates()[slot - 1];
                (ForwardAction::ReactUni { template }, f64::from(lp[slot]))
            } else {
                let local = slot - 1 - nu;
                let template = env.bi_templates()[local];
                let pmask = env.addreactant_mask(&state, template)?;
                let plp = fwd.partner(&state, local, &pmask)?;
                let bb = sample_index(&plp, temperature, rng);
                (
                    ForwardAction::ReactBi { template, bb },
                    f64::from(lp[slot]) + f64::from(plp[bb]),
                )
            }
        };
        let next = env.step_forward(&state, &action)?;
        actions.push(action);
        fwd_logprobs.push(lp);
        states.push(next);
    }
    let bck_logprobs = backward_logprobs(env, &states, &actions, bck)?;
    Ok(Trajectory {
        states,
        actions,
        fwd_logprobs,
        bck_logprobs,
        reward: None,
    })
}

/// A walk of the backward process from a terminal molecule.
#[derive(Debug, Clone)]
pub struct BackwardRollout {
    pub terminal: Arc<MolRecord>,
    /// `(molecule, unwound)` before each action.
    pub states: Vec<(Arc<MolRecord>, usize)>,
    pub actions: Vec<BackwardAction>,
    /// Log-probability of each action including the parent choice.
    pub logprobs: Vec<f64>,
    pub reached_s0: bool,
}

impl BackwardRollout {
    pub fn sum_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// The forward trajectory this walk undoes, if it reached s0.
    pub fn to_trajectory(&self, env: &EnvConfig) -> Option<Trajectory> {
        if !self.reached_s0 {
            return None;
        }
        let n = self.actions.len();
        let k = n - 1;
        let (first, _) = &self.states[k];
        let bb = first.bb?;
        let mut states = vec![
            State::Empty,
            State::Mol {
                rec: first.clone(),
                steps: 0,
            },
        ];
        let mut actions = vec![ForwardAction::AddFirstReactant { bb }];
        let mut bck_logprobs = vec![self.logprobs[k]];
        for i in (0..k).rev() {
            let (rec, _) = &self.states[i];
            let action = match self.actions[i] {
                BackwardAction::ReactUni { template, .. } => ForwardAction::ReactUni { template },
                BackwardAction::ReactBi { template, choice } => {
                    let opts = env.backward_options(rec);
                    let (_, bb) = opts.bi_choices(template)[choice];
                    ForwardAction::ReactBi { template, bb }
                }
                BackwardAction::RemoveFirstReactant => return None,
            };
            actions.push(action);
            bck_logprobs.push(self.logprobs[i]);
            states.push(State::Mol {
                rec: rec.clone(),
                steps: k - i,
            });
        }
        actions.push(ForwardAction::Stop);
        bck_logprobs.push(0.0);
        states.push(State::Terminal {
            rec: self.terminal.clone(),
            steps: k,
        });
        Some(Trajectory {
            states,
            actions,
            fwd_logprobs: Vec::new(),
            bck_logprobs,
            reward: None,
        })
    }
}

/// Walks backward from `terminal` until s0 or a dead end.
pub fn rollout_backward<R: Rng + ?Sized>(
    env: &EnvConfig,
    bck: &mut dyn BackwardPolicy,
    terminal: Arc<MolRecord>,
    rng: &mut R,
) -> Result<BackwardRollout, MdpError> {
    let mut out = BackwardRollout {
        terminal: terminal.clone(),
        states: Vec::new(),
        actions: Vec::new(),
        logprobs: Vec::new(),
        reached_s0: false,
    };
    let mut rec = terminal;
    let mut unwound = 0;
    loop {
        let masks = env.backward_mask(&rec, unwound);
        if !masks.any() {
            return Ok(out);
        }
        let lp = bck.top(&rec, unwound, &masks.top)?;
        let slot = sample_index(&lp, 1.0, rng);
        let n = masks.choices[slot];
        let choice = if n > 1 { rng.random_range(0..n) } else { 0 };
        let action = env.backward_action(slot, choice);
        let (prev, extra) = env.step_backward(&rec, unwound, &action)?;
        out.states.push((rec.clone(), unwound));
        out.actions.push(action);
        out.logprobs.push(f64::from(lp[slot]) + extra);
        match prev {
            None => {
                out.reached_s0 = true;
                return Ok(out);
            }
            Some(p) => {
                rec = p;
                unwound += 1;
            }
        }
    }
}

impl EnvConfig {
    /// States visited by `actions` from s0.
    pub fn replay(&self, actions: &[ForwardAction]) -> Result<Vec<State>, MdpError> {
        let mut states = vec![State::Empty];
        for a in actions {
            let next = self.step_forward(states.last().expect("nonempty"), a)?;
            states.push(next);
        }
        Ok(states)
    }
}
