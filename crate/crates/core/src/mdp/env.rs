use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::chemgraph::{
    fnv1a64, morgan_fingerprint, write_canonical_smiles, Fingerprint, MolGraph, DEFAULT_NBITS,
    DEFAULT_RADIUS,
};
use crate::templates::{Arity, ReactionTemplate};

use super::{BackwardAction, ForwardAction, MdpError, State};

/// A molecule with its canonical form and fingerprint.
#[derive(Debug, Clone)]
pub struct MolRecord {
    pub mol: MolGraph,
    pub smiles: String,
    pub fp: Fingerprint,
    /// Index in the building-block list, if it is one.
    pub bb: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvOptions {
    pub max_len: usize,
    pub allow_bb_terminals: bool,
    pub require_reversible: bool,
    pub fp_radius: usize,
    pub fp_nbits: usize,
}

impl Default for EnvOptions {
    fn default() -> Self {
        EnvOptions {
            max_len: 3,
            allow_bb_terminals: true,
            require_reversible: false,
            fp_radius: DEFAULT_RADIUS,
            fp_nbits: DEFAULT_NBITS,
        }
    }
}

/// Forward transitions out of a molecule, independent of the step count.
#[derive(Debug, Default)]
pub struct ForwardOptions {
    /// `(global template, product)` for each applicable uni template.
    pub uni: Vec<(usize, Arc<MolRecord>)>,
    /// `(global template, [(bb, product)])` for bi templates with at least one partner.
    pub bi: Vec<(usize, Vec<(usize, Arc<MolRecord>)>)>,
}

impl ForwardOptions {
    pub fn uni_product(&self, t: usize) -> Option<&Arc<MolRecord>> {
        self.uni.iter().find(|(u, _)| *u == t).map(|(_, p)| p)
    }

    pub fn bi_partners(&self, t: usize) -> Option<&[(usize, Arc<MolRecord>)]> {
        self.bi.iter().find(|(b, _)| *b == t).map(|(_, v)| v.as_slice())
    }

    pub fn bi_product(&self, t: usize, bb: usize) -> Option<&Arc<MolRecord>> {
        self.bi_partners(t)?
            .iter()
            .find(|(b, _)| *b == bb)
            .map(|(_, p)| p)
    }

    pub fn has_reaction(&self) -> bool {
        !self.uni.is_empty() || !self.bi.is_empty()
    }
}

/// Parents of a molecule that are consistent with a forward edge.
#[derive(Debug, Default)]
pub struct BackwardOptions {
    /// `(global template, previous molecules)`.
    pub uni: Vec<(usize, Vec<Arc<MolRecord>>)>,
    /// `(global template, [(previous molecule, building block)])`.
    pub bi: Vec<(usize, Vec<(Arc<MolRecord>, usize)>)>,
    pub bb: Option<usize>,
}

impl BackwardOptions {
    pub fn uni_choices(&self, t: usize) -> &[Arc<MolRecord>] {
        self.uni
            .iter()
            .find(|(u, _)| *u == t)
            .map_or(&[], |(_, v)| v.as_slice())
    }

    pub fn bi_choices(&self, t: usize) -> &[(Arc<MolRecord>, usize)] {
        self.bi
            .iter()
            .find(|(b, _)| *b == t)
            .map_or(&[], |(_, v)| v.as_slice())
    }
}

/// Legal forward moves at one state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardMasks {
    /// Over `[stop, uni templates.., bi templates..]`; all false at s0.
    pub top: Vec<bool>,
    /// Over building blocks; `Some` only at s0.
    pub first: Option<Vec<bool>>,
}

/// Legal backward moves at one state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackwardMasks {
    /// Over `[uni templates.., bi templates.., remove]`.
    pub top: Vec<bool>,
    /// Number of parent choices behind each entry of `top`.
    pub choices: Vec<usize>,
}

impl BackwardMasks {
    pub fn any(&self) -> bool {
        self.top.iter().any(|&m| m)
    }
}

/// The synthesis environment: building blocks, templates and limits.
#[derive(Debug)]
pub struct EnvConfig {
    building_blocks: Vec<Arc<MolRecord>>,
    templates: Vec<ReactionTemplate>,
    options: EnvOptions,
    uni: Vec<usize>,
    bi: Vec<usize>,
    /// Global template index to its position among templates of the same arity.
    local: Vec<usize>,
    bb_index: HashMap<String, usize>,
    /// For bi template `t` (global) and role `r`, which building blocks match.
    compat: HashMap<usize, [Vec<bool>; 2]>,
    first_mask: Vec<bool>,
    records: RwLock<HashMap<String, Arc<MolRecord>>>,
    forward_cache: RwLock<HashMap<String, Arc<ForwardOptions>>>,
    backward_cache: RwLock<HashMap<String, Arc<BackwardOptions>>>,
}

impl EnvConfig {
    pub fn new(
        building_blocks: Vec<MolGraph>,
        templates: Vec<ReactionTemplate>,
        options: EnvOptions,
    ) -> Result<Self, MdpError> {
        if options.max_len == 0 {
            return Err(MdpError::Config("max_len must be positive".into()));
        }
        let mut bbs: Vec<Arc<MolRecord>> = Vec::new();
        let mut bb_index = HashMap::new();
        for mol in building_blocks {
            let smiles = write_canonical_smiles(&mol)?;
            if bb_index.contains_key(&smiles) {
                log::warn!("duplicate building block {smiles} dropped");
                continue;
            }
            let fp = morgan_fingerprint(&mol, options.fp_radius, options.fp_nbits)?;
            bb_index.insert(smiles.clone(), bbs.len());
            bbs.push(Arc::new(MolRecord {
                mol,
                smiles,
                fp,
                bb: Some(bbs.len()),
            }));
        }
        if bbs.is_empty() {
            return Err(MdpError::Config("no building blocks".into()));
        }
        let mut uni = Vec::new();
        let mut bi = Vec::new();
        let mut local = Vec::new();
        for (g, t) in templates.iter().enumerate() {
            match t.arity() {
                Arity::Uni => {
                    local.push(uni.len());
                    uni.push(g);
                }
                Arity::Bi => {
                    local.push(bi.len());
                    bi.push(g);
                }
            }
        }
        let compat = bi
            .iter()
            .map(|&g| {
                let roles = [0, 1].map(|r| {
                    bbs.iter()
                        .map(|b| templates[g].matches_reactant(r, &b.mol))
                        .collect()
                });
                (g, roles)
            })
            .collect();
        let records = bbs.iter().map(|r| (r.smiles.clone(), r.clone())).collect();
        let mut env = EnvConfig {
            building_blocks: bbs,
            templates,
            options,
            uni,
            bi,
            local,
            bb_index,
            compat,
            first_mask: Vec::new(),
            records: RwLock::new(records),
            forward_cache: RwLock::new(HashMap::new()),
            backward_cache: RwLock::new(HashMap::new()),
        };
        env.first_mask = (0..env.building_blocks.len())
            .map(|b| {
                env.options.allow_bb_terminals
                    || env.forward_options(&env.building_blocks[b]).has_reaction()
            })
            .collect();
        if !env.first_mask.iter().any(|&m| m) {
            return Err(MdpError::Config(
                "no building block can start a trajectory".into(),
            ));
        }
        Ok(env)
    }

    pub fn options(&self) -> &EnvOptions {
        &self.options
    }

    pub fn max_len(&self) -> usize {
        self.options.max_len
    }

    pub fn building_blocks(&self) -> &[Arc<MolRecord>] {
        &self.building_blocks
    }

    pub fn num_bbs(&self) -> usize {
        self.building_blocks.len()
    }

    pub fn templates(&self) -> &[ReactionTemplate] {
        &self.templates
    }

    /// Global indices of uni templates, in head order.
    pub fn uni_templates(&self) -> &[usize] {
        &self.uni
    }

    /// Global indices of bi templates, in head order.
    pub fn bi_templates(&self) -> &[usize] {
        &self.bi
    }

    /// Position of global template `t` among templates of its arity.
    pub fn local_index(&self, t: usize) -> usize {
        self.local[t]
    }

    pub fn bb_lookup(&self, smiles: &str) -> Option<usize> {
        self.bb_index.get(smiles).copied()
    }

    /// Stable hash of everything that shapes the action space.
    pub fn hash(&self) -> u64 {
        let mut words: Vec<u64> = Vec::new();
        for b in &self.building_blocks {
            words.extend(b.smiles.bytes().map(u64::from));
            words.push(0);
        }
        for t in &self.templates {
            words.extend(t.text.bytes().map(u64::from));
            words.push(1);
        }
        words.push(self.options.max_len as u64);
        words.push(u64::from(self.options.allow_bb_terminals));
        words.push(u64::from(self.options.require_reversible));
        words.push(self.options.fp_radius as u64);
        words.push(self.options.fp_nbits as u64);
        fnv1a64(&words)
    }

    /// Cached record for `mol`.
    pub fn record(&self, mol: &MolGraph) -> Result<Arc<MolRecord>, MdpError> {
        let smiles = write_canonical_smiles(mol)?;
        if let Some(r) = self.records.read().expect("lock").get(&smiles) {
            return Ok(r.clone());
        }
        let fp = morgan_fingerprint(mol, self.options.fp_radius, self.options.fp_nbits)?;
        let rec = Arc::new(MolRecord {
            mol: mol.clone(),
            bb: self.bb_lookup(&smiles),
            smiles: smiles.clone(),
            fp,
        });
        Ok(self
            .records
            .write()
            .expect("lock")
            .entry(smiles)
            .or_insert(rec)
            .clone())
    }

    fn record_of(&self, mol: MolGraph, smiles: String) -> Arc<MolRecord> {
        if let Some(r) = self.records.read().expect("lock").get(&smiles) {
            return r.clone();
        }
        let fp = morgan_fingerprint(&mol, self.options.fp_radius, self.options.fp_nbits)
            .expect("fingerprint size validated at construction");
        let rec = Arc::new(MolRecord {
            mol,
            bb: self.bb_lookup(&smiles),
            smiles: smiles.clone(),
            fp,
        });
        self.records
            .write()
            .expect("lock")
            .entry(smiles)
            .or_insert(rec)
            .clone()
    }

    pub fn forward_options(&self, rec: &MolRecord) -> Arc<ForwardOptions> {
        if let Some(o) = self.forward_cache.read().expect("lock").get(&rec.smiles) {
            return o.clone();
        }
        let opts = Arc::new(self.compute_forward(rec));
        self.forward_cache
            .write()
            .expect("lock")
            .entry(rec.smiles.clone())
            .or_insert(opts)
            .clone()
    }

    fn reversible(&self, t: usize, product: &MolGraph, reactants: &[&str]) -> bool {
        if !self.options.require_reversible {
            return true;
        }
        let mut want: Vec<String> = reactants.iter().map(|s| s.to_string()).collect();
        want.sort();
        self.templates[t].product_reverses_to(product, &want)
    }

    fn uni_product_of(&self, rec: &MolRecord, t: usize) -> Option<Arc<MolRecord>> {
        let p = self.templates[t].apply_forward(&[&rec.mol]).ok()?.into_iter().next()?;
        self.reversible(t, &p.mol, &[&rec.smiles])
            .then(|| self.record_of(p.mol, p.smiles))
    }

    fn bi_roles(&self, rec: &MolRecord, t: usize) -> Vec<usize> {
        (0..2)
            .filter(|&r| self.templates[t].matches_reactant(r, &rec.mol))
            .collect()
    }

    /// First canonical product over both role assignments of `rec` and BB `b`.
    fn bi_product_of(&self, rec: &MolRecord, t: usize, roles: &[usize], b: usize) -> Option<Arc<MolRecord>> {
        let template = &self.templates[t];
        let bb = &self.building_blocks[b];
        let mut best: Option<crate::templates::Product> = None;
        for &r in roles {
            if !self.compat[&t][1 - r][b] {
                continue;
            }
            let pair: [&MolGraph; 2] = if r == 0 {
                [&rec.mol, &bb.mol]
            } else {
                [&bb.mol, &rec.mol]
            };
            if let Ok(products) = template.apply_forward(&pair) {
                if let Some(p) = products.into_iter().next() {
                    if best.as_ref().is_none_or(|q| p.smiles < q.smiles) {
                        best = Some(p);
                    }
                }
            }
        }
        let p = best?;
        self.reversible(t, &p.mol, &[&rec.smiles, &bb.smiles])
            .then(|| self.record_of(p.mol, p.smiles))
    }

    fn compute_forward(&self, rec: &MolRecord) -> ForwardOptions {
        let mut out = ForwardOptions::default();
        for &t in &self.uni {
            if let Some(p) = self.uni_product_of(rec, t) {
                out.uni.push((t, p));
            }
        }
        for &t in &self.bi {
            let roles = self.bi_roles(rec, t);
            if roles.is_empty() {
                continue;
            }
            let partners: Vec<(usize, Arc<MolRecord>)> = (0..self.building_blocks.len())
                .filter_map(|b| self.bi_product_of(rec, t, &roles, b).map(|p| (b, p)))
                .collect();
            if !partners.is_empty() {
                out.bi.push((t, partners));
            }
        }
        out
    }

    /// Product of one forward reaction, from the cache when available.
    fn single_product(&self, rec: &MolRecord, t: usize, bb: Option<usize>) -> Option<Arc<MolRecord>> {
        if let Some(o) = self.forward_cache.read().expect("lock").get(&rec.smiles) {
            return match bb {
                None => o.uni_product(t).cloned(),
                Some(b) => o.bi_product(t, b).cloned(),
            };
        }
        match bb {
            None => self.uni_product_of(rec, t),
            Some(b) => self.bi_product_of(rec, t, &self.bi_roles(rec, t), b),
        }
    }

    pub fn backward_options(&self, rec: &MolRecord) -> Arc<BackwardOptions> {
        if let Some(o) = self.backward_cache.read().expect("lock").get(&rec.smiles) {
            return o.clone();
        }
        let opts = Arc::new(self.compute_backward(rec));
        self.backward_cache
            .write()
            .expect("lock")
            .entry(rec.smiles.clone())
            .or_insert(opts)
            .clone()
    }

    fn compute_backward(&self, rec: &MolRecord) -> BackwardOptions {
        let mut out = BackwardOptions {
            bb: rec.bb,
            ..BackwardOptions::default()
        };
        for &t in &self.uni {
            let mut prevs: Vec<Arc<MolRecord>> = Vec::new();
            for set in self.templates[t].apply_backward(&rec.mol) {
                let prev = self.record_of(set.mols[0].clone(), set.smiles[0].clone());
                let consistent = self
                    .single_product(&prev, t, None)
                    .is_some_and(|p| p.smiles == rec.smiles);
                if consistent && !prevs.iter().any(|p| p.smiles == prev.smiles) {
                    prevs.push(prev);
                }
            }
            if !prevs.is_empty() {
                out.uni.push((t, prevs));
            }
        }
        for &t in &self.bi {
            let mut choices: Vec<(Arc<MolRecord>, usize)> = Vec::new();
            for set in self.templates[t].apply_backward(&rec.mol) {
                for (keep, bb_side) in [(0, 1), (1, 0)] {
                    let Some(bb) = self.bb_lookup(&set.smiles[bb_side]) else {
                        continue;
                    };
                    let prev =
                        self.record_of(set.mols[keep].clone(), set.smiles[keep].clone());
                    let consistent = self
                        .single_product(&prev, t, Some(bb))
                        .is_some_and(|p| p.smiles == rec.smiles);
                    let dup = choices
                        .iter()
                        .any(|(p, b)| *b == bb && p.smiles == prev.smiles);
                    if consistent && !dup {
                        choices.push((prev, bb));
                    }
                }
            }
            if !choices.is_empty() {
                out.bi.push((t, choices));
            }
        }
        out
    }

    /// Masks at a non-terminal forward state.
    pub fn forward_mask(&self, state: &State) -> Result<ForwardMasks, MdpError> {
        let width = 1 + self.uni.len() + self.bi.len();
        match state {
            State::Empty => Ok(ForwardMasks {
                top: vec![false; width],
                first: Some(self.first_mask.clone()),
            }),
            State::Mol { rec, steps } => {
                let mut top = vec![false; width];
                top[0] = self.options.allow_bb_terminals || *steps >= 1;
                if *steps < self.options.max_len {
                    let opts = self.forward_options(rec);
                    for (t, _) in &opts.uni {
                        top[1 + self.local[*t]] = true;
                    }
                    for (t, _) in &opts.bi {
                        top[1 + self.uni.len() + self.local[*t]] = true;
                    }
                }
                if !top.iter().any(|&m| m) {
                    return Err(MdpError::NoLegalAction(rec.smiles.clone()));
                }
                Ok(ForwardMasks { top, first: None })
            }
            State::Terminal { .. } => Err(MdpError::TerminalState),
        }
    }

    /// Building blocks that complete bi template `t` (global) at `state`.
    pub fn addreactant_mask(&self, state: &State, t: usize) -> Result<Vec<bool>, MdpError> {
        let State::Mol { rec, steps } = state else {
            return Err(MdpError::MaskedAction(format!("AddReactant at {state:?}")));
        };
        if *steps >= self.options.max_len {
            return Err(MdpError::MaskedAction("AddReactant at max length".into()));
        }
        let opts = self.forward_options(rec);
        let partners = opts
            .bi_partners(t)
            .ok_or_else(|| MdpError::MaskedAction(format!("ReactBi {t} at {}", rec.smiles)))?;
        let mut mask = vec![false; self.num_bbs()];
        for (b, _) in partners {
            mask[*b] = true;
        }
        Ok(mask)
    }

    pub fn step_forward(&self, state: &State, action: &ForwardAction) -> Result<State, MdpError> {
        let masked = || MdpError::MaskedAction(format!("{action:?} at {state:?}"));
        match (state, action) {
            (State::Empty, ForwardAction::AddFirstReactant { bb }) => {
                if !self.first_mask.get(*bb).copied().unwrap_or(false) {
                    return Err(masked());
                }
                Ok(State::Mol {
                    rec: self.building_blocks[*bb].clone(),
                    steps: 0,
                })
            }
            (State::Mol { rec, steps }, ForwardAction::Stop) => {
                if !(self.options.allow_bb_terminals || *steps >= 1) {
                    return Err(masked());
                }
                Ok(State::Terminal {
                    rec: rec.clone(),
                    steps: *steps,
                })
            }
            (State::Mol { rec, steps }, ForwardAction::ReactUni { template }) => {
                if *steps >= self.options.max_len {
                    return Err(masked());
                }
                let opts = self.forward_options(rec);
                let p = opts.uni_product(*template).ok_or_else(masked)?;
                Ok(State::Mol {
                    rec: p.clone(),
                    steps: steps + 1,
                })
            }
            (State::Mol { rec, steps }, ForwardAction::ReactBi { template, bb }) => {
                if *steps >= self.options.max_len {
                    return Err(masked());
                }
                let opts = self.forward_options(rec);
                let p = opts.bi_product(*template, *bb).ok_or_else(masked)?;
                Ok(State::Mol {
                    rec: p.clone(),
                    steps: steps + 1,
                })
            }
            _ => Err(masked()),
        }
    }

    /// Backward masks at molecule `rec` after `unwound` reactions were reversed.
    pub fn backward_mask(&self, rec: &MolRecord, unwound: usize) -> BackwardMasks {
        let (nu, nb) = (self.uni.len(), self.bi.len());
        let mut top = vec![false; nu + nb + 1];
        let mut choices = vec![0; nu + nb + 1];
        let opts = self.backward_options(rec);
        if unwound < self.options.max_len {
            for (t, prevs) in &opts.uni {
                top[self.local[*t]] = true;
                choices[self.local[*t]] = prevs.len();
            }
            for (t, pairs) in &opts.bi {
                top[nu + self.local[*t]] = true;
                choices[nu + self.local[*t]] = pairs.len();
            }
        }
        if opts.bb.is_some() && (self.options.allow_bb_terminals || unwound >= 1) {
            top[nu + nb] = true;
            choices[nu + nb] = 1;
        }
        BackwardMasks { top, choices }
    }

    /// Backward action for entry `slot` of the backward top mask with parent `choice`.
    pub fn backward_action(&self, slot: usize, choice: usize) -> BackwardAction {
        let nu = self.uni.len();
        if slot < nu {
            BackwardAction::ReactUni {
                template: self.uni[slot],
                choice,
            }
        } else if slot < nu + self.bi.len() {
            BackwardAction::ReactBi {
                template: self.bi[slot - nu],
                choice,
            }
        } else {
            BackwardAction::RemoveFirstReactant
        }
    }

    /// Slot of a backward action in the backward top mask.
    pub fn backward_slot(&self, action: &BackwardAction) -> usize {
        match action {
            BackwardAction::ReactUni { template, .. } => self.local[*template],
            BackwardAction::ReactBi { template, .. } => self.uni.len() + self.local[*template],
            BackwardAction::RemoveFirstReactant => self.uni.len() + self.bi.len(),
        }
    }

    /// Slot of a forward action in the forward top mask (`None` for AddFirstReactant).
    pub fn forward_slot(&self, action: &ForwardAction) -> Option<usize> {
        match action {
            ForwardAction::Stop => Some(0),
            ForwardAction::ReactUni { template } => Some(1 + self.local[*template]),
            ForwardAction::ReactBi { template, .. } => {
                Some(1 + self.uni.len() + self.local[*template])
            }
            ForwardAction::AddFirstReactant { .. } => None,
        }
    }

    /// Previous molecule (`None` for s0) of a backward action, with the
    /// log-probability of the parent choice within the action.
    pub fn step_backward(
        &self,
        rec: &MolRecord,
        unwound: usize,
        action: &BackwardAction,
    ) -> Result<(Option<Arc<MolRecord>>, f64), MdpError> {
        let masks = self.backward_mask(rec, unwound);
        let slot = self.backward_slot(action);
        if !masks.top[slot] {
            return Err(MdpError::MaskedAction(format!(
                "{action:?} at {} (unwound {unwound})",
                rec.smiles
            )));
        }
        let n = masks.choices[slot];
        let extra = -(n as f64).ln();
        let opts = self.backward_options(rec);
        let out_of_range = || MdpError::MaskedAction(format!("{action:?}: choice out of range"));
        match action {
            BackwardAction::RemoveFirstReactant => Ok((None, 0.0)),
            BackwardAction::ReactUni { template, choice } => {
                let prev = opts.uni_choices(*template).get(*choice).ok_or_else(out_of_range)?;
                Ok((Some(prev.clone()), extra))
            }
            BackwardAction::ReactBi { template, choice } => {
                let (prev, _) = opts.bi_choices(*template).get(*choice).ok_or_else(out_of_range)?;
                Ok((Some(prev.clone()), extra))
            }
        }
    }

    /// The backward action that undoes forward `action` taken from `prev`
    /// into `next`.
    pub fn reverse_of(
        &self,
        prev: &State,
        action: &ForwardAction,
        next: &State,
    ) -> Result<Option<BackwardAction>, MdpError> {
        let next_rec = match next {
            State::Mol { rec, .. } => rec,
            State::Terminal { .. } => return Ok(None),
            State::Empty => return Err(MdpError::MaskedAction("transition into s0".into())),
        };
        let opts = self.backward_options(next_rec);
        let missing = || {
            MdpError::MaskedAction(format!(
                "{action:?} into {} has no reverse",
                next_rec.smiles
            ))
        };
        match (prev, action) {
            (State::Empty, ForwardAction::AddFirstReactant { .. }) => {
                Ok(Some(BackwardAction::RemoveFirstReactant))
            }
            (State::Mol { rec, .. }, ForwardAction::ReactUni { template }) => {
                let choice = opts
                    .uni_choices(*template)
                    .iter()
                    .position(|p| p.smiles == rec.smiles)
                    .ok_or_else(missing)?;
                Ok(Some(BackwardAction::ReactUni {
                    template: *template,
                    choice,
                }))
            }
            (State::Mol { rec, .. }, ForwardAction::ReactBi { template, bb }) => {
                let choice = opts
                    .bi_choices(*template)
                    .iter()
                    .position(|(p, b)| b == bb && p.smiles == rec.smiles)
                    .ok_or_else(missing)?;
                Ok(Some(BackwardAction::ReactBi {
                    template: *template,
                    choice,
                }))
            }
            _ => Err(missing()),
        }
    }
}
