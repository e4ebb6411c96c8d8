//! Terminal-state rewards and reward shaping.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::chemgraph::{
    morgan_fingerprint, parse_smiles, tanimoto, write_canonical_smiles, ChemError, Fingerprint,
    MolGraph,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("scale_min + scale_max must be nonzero")]
    DegenerateScale,
    #[error("no score for {0}")]
    MissingScore(String),
    #[error("score table line {line}: {message}")]
    Table { line: usize, message: String },
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("product reward needs at least one factor")]
    EmptyProduct,
}

/// `(affinity + scale_min) / (scale_min + scale_max) - 1`, exactly as
/// published.
pub fn scale_affinity(affinity: f64, scale_min: f64, scale_max: f64) -> Result<f64, RewardError> {
    let denom = scale_min + scale_max;
    if denom == 0.0 {
        return Err(RewardError::DegenerateScale);
    }
    Ok((affinity + scale_min) / denom - 1.0)
}

pub const DEFAULT_SIZE_ALLOWANCE: usize = 8;
pub const SIZE_PENALTY: f64 = -0.4;

/// `-0.4` when the molecule exceeds the reference size by more than `allowance`.
pub fn size_penalty(mol: &MolGraph, ref_heavy_atoms: usize, allowance: usize) -> f64 {
    if mol.heavy_atom_count() > ref_heavy_atoms + allowance {
        SIZE_PENALTY
    } else {
        0.0
    }
}

pub fn apply_exponent(r: f64, beta: f64) -> f64 {
    r.powf(beta)
}

/// Pre-scored molecules keyed by canonical SMILES.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    scores: BTreeMap<String, f64>,
    /// Returned for molecules not in the table; `None` makes them an error.
    pub default: Option<f64>,
}

impl ScoreTable {
    /// Reads `smiles<TAB>score` lines; keys are canonicalized.
    pub fn parse(text: &str, default: Option<f64>) -> Result<Self, RewardError> {
        let mut scores = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| RewardError::Table {
                line: lineno + 1,
                message,
            };
            let (smi, score) = line
                .split_once('\t')
                .ok_or_else(|| err("expected smiles<TAB>score".into()))?;
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|e| err(format!("bad score: {e}")))?;
            let mol = parse_smiles(smi.trim()).map_err(|e| err(e.to_string()))?;
            let key = write_canonical_smiles(&mol).map_err(|e| err(e.to_string()))?;
            scores.insert(key, score);
        }
        Ok(ScoreTable { scores, default })
    }

    pub fn insert(&mut self, canonical_smiles: String, score: f64) {
        self.scores.insert(canonical_smiles, score);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn lookup(&self, canonical_smiles: &str) -> Result<f64, RewardError> {
        self.scores
            .get(canonical_smiles)
            .copied()
            .or(self.default)
            .ok_or_else(|| RewardError::MissingScore(canonical_smiles.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardFn {
    Constant,
    /// Tanimoto similarity to a target fingerprint.
    Rediscovery { target: Fingerprint },
    /// Raw score from a table.
    External { table: ScoreTable },
    /// Scaled table affinity plus an optional size penalty.
    ScaledAffinity {
        table: ScoreTable,
        scale_min: f64,
        scale_max: f64,
        ref_heavy_atoms: Option<usize>,
        allowance: usize,
    },
    Product(Vec<RewardFn>),
}

impl RewardFn {
    pub fn rediscovery(target: &MolGraph, radius: usize, nbits: usize) -> Result<Self, RewardError> {
        Ok(RewardFn::Rediscovery {
            target: morgan_fingerprint(target, radius, nbits)?,
        })
    }

    /// Reward of `mol`, whose canonical SMILES is `smiles`.
    pub fn evaluate(&self, mol: &MolGraph, smiles: &str) -> Result<f64, RewardError> {
        match self {
            RewardFn::Constant => Ok(1.0),
            RewardFn::Rediscovery { target } => {
                let fp = morgan_fingerprint(mol, target.radius(), target.nbits())?;
                Ok(tanimoto(&fp, target)?)
            }
            RewardFn::External { table } => table.lookup(smiles),
            RewardFn::ScaledAffinity {
                table,
                scale_min,
                scale_max,
                ref_heavy_atoms,
                allowance,
            } => {
                let base = scale_affinity(table.lookup(smiles)?, *scale_min, *scale_max)?;
                let penalty = ref_heavy_atoms.map_or(0.0, |r| size_penalty(mol, r, *allowance));
                Ok(base + penalty)
            }
            RewardFn::Product(factors) => {
                if factors.is_empty() {
                    return Err(RewardError::EmptyProduct);
                }
                factors
                    .iter()
                    .try_fold(1.0, |acc, f| Ok(acc * f.evaluate(mol, smiles)?))
            }
        }
    }
}
