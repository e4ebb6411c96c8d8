//! Sample metrics and exact oracles for small environments.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::chemgraph::{
    bemis_murcko_scaffold, parse_smiles, tanimoto, write_canonical_smiles, ChemError, Fingerprint,
    MolGraph,
};
use crate::mdp::{
    rollout_backward, BackwardAction, BackwardPolicy, EnvConfig, MdpError, MolRecord, State,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("enumeration budget of {budget} states exceeded; {} terminals found so far", partial.len())]
    Budget {
        budget: usize,
        partial: BTreeSet<String>,
    },
    #[error("reference set is empty")]
    EmptyReference,
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Mean pairwise Tanimoto distance over unordered pairs.
pub fn diversity(fps: &[&Fingerprint]) -> Result<f64, EvalError> {
    if fps.len() < 2 {
        return Err(EvalError::TooFewSamples {
            need: 2,
            got: fps.len(),
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            total += 1.0 - tanimoto(fps[i], fps[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Canonical SMILES of the Bemis-Murcko scaffold; empty for acyclic molecules.
pub fn scaffold_key(mol: &MolGraph) -> Result<String, ChemError> {
    let s = bemis_murcko_scaffold(mol);
    if s.acyclic {
        Ok(String::new())
    } else {
        write_canonical_smiles(&s.mol)
    }
}

/// Distinct scaffolds among molecules with reward above a threshold.
#[derive(Debug, Clone)]
pub struct ModeCounter {
    pub threshold: f64,
    seen: BTreeSet<String>,
    by_smiles: HashMap<String, String>,
}

impl ModeCounter {
    pub fn new(threshold: f64) -> Self {
        ModeCounter {
            threshold,
            seen: BTreeSet::new(),
            by_smiles: HashMap::new(),
        }
    }

    pub fn observe(&mut self, mol: &MolGraph, smiles: &str, reward: f64) -> Result<(), ChemError> {
        if reward > self.threshold {
            let key = match self.by_smiles.get(smiles) {
                Some(k) => k.clone(),
                None => {
                    let k = scaffold_key(mol)?;
                    self.by_smiles.insert(smiles.to_string(), k.clone());
                    k
                }
            };
            self.seen.insert(key);
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.seen.len()
    }
}

pub const MODE_THRESHOLD: f64 = 0.9;

/// Number of distinct scaffolds among samples with reward above `threshold`.
pub fn count_modes(samples: &[(&MolGraph, f64)], threshold: f64) -> Result<usize, ChemError> {
    let mut c = ModeCounter::new(threshold);
    for (m, r) in samples {
        let s = write_canonical_smiles(m)?;
        c.observe(m, &s, *r)?;
    }
    Ok(c.count())
}

/// Fraction of terminals for which at least one of `rollouts_per_mol`
/// backward rollouts reaches s0.
pub fn solved_routes_rate<P, F>(
    env: &EnvConfig,
    make_policy: F,
    terminals: &[Arc<MolRecord>],
    rollouts_per_mol: usize,
    seed: u64,
) -> Result<f64, EvalError>
where
    P: BackwardPolicy,
    F: Fn() -> P + Sync,
{
    if terminals.is_empty() {
        return Ok(0.0);
    }
    let solved: Vec<bool> = terminals
        .par_iter()
        .enumerate()
        .map_init(&make_policy, |policy, (i, rec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            for _ in 0..rollouts_per_mol {
                if rollout_backward(env, policy, rec.clone(), &mut rng)?.reached_s0 {
                    return Ok(true);
                }
            }
            Ok(false)
        })
        .collect::<Result<_, MdpError>>()?;
    Ok(solved.iter().filter(|&&s| s).count() as f64 / terminals.len() as f64)
}

/// Every terminal molecule reachable in `env`, by breadth-first closure over
/// `(molecule, steps)` states. Fails once more than `budget` states are expanded.
pub fn enumerate_space(env: &EnvConfig, budget: usize) -> Result<BTreeSet<String>, EvalError> {
    Ok(enumerate_records(env, budget)?
        .into_iter()
        .map(|r| r.smiles.clone())
        .collect())
}

/// Like [`enumerate_space`] but returns the records, in canonical order.
pub fn enumerate_records(env: &EnvConfig, budget: usize) -> Result<Vec<Arc<MolRecord>>, EvalError> {
    let mut seen: BTreeSet<(String, usize)> = BTreeSet::new();
    let mut terminals: BTreeMap<String, Arc<MolRecord>> = BTreeMap::new();
    let first = env
        .forward_mask(&State::Empty)?
        .first
        .expect("s0 offers first reactants");
    let mut queue: VecDeque<(Arc<MolRecord>, usize)> = env
        .building_blocks()
        .iter()
        .zip(&first)
        .filter(|(_, &ok)| ok)
        .map(|(b, _)| (b.clone(), 0))
        .collect();
    while let Some((rec, steps)) = queue.pop_front() {
        if !seen.insert((rec.smiles.clone(), steps)) {
            continue;
        }
        if seen.len() > budget {
            return Err(EvalError::Budget {
                budget,
                partial: terminals.into_keys().collect(),
            });
        }
        if env.options().allow_bb_terminals || steps >= 1 {
            terminals.entry(rec.smiles.clone()).or_insert_with(|| rec.clone());
        }
        if steps < env.max_len() {
            let opts = env.forward_options(&rec);
            for (_, p) in &opts.uni {
                queue.push_back((p.clone(), steps + 1));
            }
            for (_, partners) in &opts.bi {
                for (_, p) in partners {
                    queue.push_back((p.clone(), steps + 1));
                }
            }
        }
    }
    Ok(terminals.into_values().collect())
}

/// `|exp(log_z) - count| / count`.
pub fn logz_vs_count(log_z: f64, count: usize) -> f64 {
    (log_z.exp() - count as f64).abs() / count as f64
}

/// Normalized frequencies of `items`.
pub fn empirical_distribution<'a, I: IntoIterator<Item = &'a str>>(items: I) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut n = 0.0;
    for s in items {
        *counts.entry(s.to_string()).or_default() += 1.0;
        n += 1.0;
    }
    for v in counts.values_mut() {
        *v /= n;
    }
    counts
}

/// `½ Σ |p − q|` over the union of supports.
pub fn tv_distance(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

/// For each sample, the best Tanimoto similarity against `reference`.
pub fn max_similarity_to_reference(
    samples: &[&Fingerprint],
    reference: &[&Fingerprint],
) -> Result<Vec<f64>, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    samples
        .iter()
        .map(|s| {
            reference.iter().try_fold(0.0f64, |best, r| Ok(best.max(tanimoto(s, r)?)))
        })
        .collect()
}

/// Reference fingerprints sorted by popcount, so most candidates can be
/// skipped with the bound `sim(a, b) <= min(|a|, |b|) / max(|a|, |b|)`.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    fps: Vec<Fingerprint>,
    counts: Vec<usize>,
}

impl ReferenceIndex {
    pub fn new(reference: &[&Fingerprint]) -> Result<Self, EvalError> {
        if reference.is_empty() {
            return Err(EvalError::EmptyReference);
        }
        let mut fps: Vec<Fingerprint> = reference.iter().map(|f| (*f).clone()).collect();
        fps.sort_by_key(Fingerprint::popcount);
        let counts = fps.iter().map(Fingerprint::popcount).collect();
        Ok(ReferenceIndex { fps, counts })
    }

    pub fn max_similarity(&self, query: &Fingerprint) -> Result<f64, EvalError> {
        let a = query.popcount();
        let bound = |b: usize| {
            let (lo, hi) = (a.min(b), a.max(b));
            if hi == 0 {
                1.0
            } else {
                lo as f64 / hi as f64
            }
        };
        let start = self.counts.partition_point(|&c| c < a);
        let (mut lo, mut hi) = (start, start);
        let mut best = 0.0f64;
        loop {
            let up = (hi < self.fps.len()).then(|| bound(self.counts[hi]));
            let down = (lo > 0).then(|| bound(self.counts[lo - 1]));
            let (idx, b) = match (up, down) {
                (Some(u), Some(d)) if u >= d => (hi, u),
                (Some(_), Some(d)) => (lo - 1, d),
                (Some(u), None) => (hi, u),
                (None, Some(d)) => (lo - 1, d),
                (None, None) => break,
            };
            if b <= best {
                break;
            }
            best = best.max(tanimoto(query, &self.fps[idx])?);
            if idx == hi {
                hi += 1;
            } else {
                lo -= 1;
            }
        }
        Ok(best)
    }
}

/// Parses one SMILES per line, skipping blanks and `#` comments.
pub fn read_reference_set(text: &str) -> Result<Vec<MolGraph>, ChemError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| parse_smiles(l.split_whitespace().next().unwrap_or(l)))
        .collect()
}

/// Exact probability that a uniform backward walk from `rec` reaches s0.
#[derive(Debug, Default)]
pub struct UniformBackwardOracle {
    memo: HashMap<(String, usize), f64>,
}

impl UniformBackwardOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn success(&mut self, env: &EnvConfig, rec: &MolRecord, unwound: usize) -> f64 {
        if let Some(&p) = self.memo.get(&(rec.smiles.clone(), unwound)) {
            return p;
        }
        let masks = env.backward_mask(rec, unwound);
        let live: Vec<usize> = (0..masks.top.len()).filter(|&s| masks.top[s]).collect();
        let opts = env.backward_options(rec);
        let mut p = 0.0;
        for &slot in &live {
            let w = 1.0 / live.len() as f64;
            let prevs: Vec<Arc<MolRecord>> = match env.backward_action(slot, 0) {
                BackwardAction::RemoveFirstReactant => {
                    p += w;
                    continue;
                }
                BackwardAction::ReactUni { template, .. } => opts.uni_choices(template).to_vec(),
                BackwardAction::ReactBi { template, .. } => {
                    opts.bi_choices(template).iter().map(|(m, _)| m.clone()).collect()
                }
            };
            for prev in &prevs {
                p += w / prevs.len() as f64 * self.success(env, prev, unwound + 1);
            }
        }
        self.memo.insert((rec.smiles.clone(), unwound), p);
        p
    }
}

/// Mean of the `k` highest rewards among distinct molecules.
pub fn top_k_mean(samples: &[(&str, f64)], k: usize) -> Result<f64, EvalError> {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for &(s, r) in samples {
        let e = best.entry(s).or_insert(r);
        *e = e.max(r);
    }
    if best.len() < k || k == 0 {
        return Err(EvalError::TooFewSamples {
            need: k.max(1),
            got: best.len(),
        });
    }
    let mut rs: Vec<f64> = best.into_values().collect();
    rs.sort_by(|a, b| b.total_cmp(a));
    Ok(rs[..k].iter().sum::<f64>() / k as f64)
}
