use std::collections::{BTreeMap, BTreeSet};

use crate::chemgraph::{write_canonical_smiles, Atom, BondOrder, MolGraph};

use super::matcher::{match_pattern, Embedding};
use super::pattern::{parse_pattern, AtomPattern, BondPattern, PatternGraph};
use super::TemplateError;

/// Synthetic map numbers given to implicitly paired atoms start here.
const IMPLICIT_MAP_BASE: u32 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arity {
    Uni,
    Bi,
}

impl Arity {
    pub fn count(self) -> usize {
        match self {
            Arity::Uni => 1,
            Arity::Bi => 2,
        }
    }
}

/// Location of a pattern atom: `(reactant index, atom index)`.
pub type PatternAtomRef = (usize, usize);

/// Graph edits that turn matched reactants into the product.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateEdits {
    /// Reactant atoms absent from the product (leaving groups).
    pub removed_atoms: Vec<PatternAtomRef>,
    /// Bonds from kept atoms to removed atoms, as `(map, removed atom)`.
    pub leaving_bonds: Vec<(u32, PatternAtomRef)>,
    pub broken_bonds: Vec<(u32, u32, BondPattern)>,
    pub formed_bonds: Vec<(u32, u32, BondPattern)>,
    /// `(map, map, reactant kind, product kind)` for bonds whose pattern differs.
    pub changed_bonds: Vec<(u32, u32, BondPattern, BondPattern)>,
}

/// A product of forward application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Product {
    pub mol: MolGraph,
    pub smiles: String,
}

/// One way to split a product into reactants, in reactant-pattern order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReactantSet {
    pub mols: Vec<MolGraph>,
    pub smiles: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ReactionTemplate {
    pub id: String,
    pub text: String,
    reactants: Vec<PatternGraph>,
    product: PatternGraph,
    edits: TemplateEdits,
    reactant_map: BTreeMap<u32, PatternAtomRef>,
    product_map: BTreeMap<u32, usize>,
}

impl ReactionTemplate {
    pub fn parse(id: &str, text: &str) -> Result<Self, TemplateError> {
        let (left, right) = text
            .split_once(">>")
            .ok_or_else(|| perr(0, "missing '>>'"))?;
        if right.contains(">>") {
            return Err(perr(left.len() + 2 + right.find(">>").unwrap_or(0), "extra '>>'"));
        }
        let mut reactants = Vec::new();
        let mut offset = 0;
        for part in left.split('.') {
            reactants.push(parse_pattern(part, offset)?);
            offset += part.len() + 1;
        }
        if reactants.len() > 2 {
            return Err(perr(0, "at most two reactant patterns are supported"));
        }
        let product_base = left.len() + 2;
        if let Some(dot) = right.find('.') {
            return Err(perr(product_base + dot, "product must be a single pattern"));
        }
        let mut product = parse_pattern(right, product_base)?;

        let mut reactant_map = BTreeMap::new();
        for (r, pat) in reactants.iter().enumerate() {
            for (i, atom) in pat.atoms().iter().enumerate() {
                if atom.is_wildcard() {
                    return Err(TemplateError::ReactantWildcard { reactant: r });
                }
                if let Some(m) = atom.map {
                    if reactant_map.insert(m, (r, i)).is_some() {
                        return Err(TemplateError::DuplicateMap(m));
                    }
                }
            }
        }
        for m in product.maps() {
            if !reactant_map.contains_key(&m) {
                return Err(TemplateError::UnknownProductMap(m));
            }
        }
        pair_unmapped(&mut reactants, &mut product, &mut reactant_map)?;
        let product_map: BTreeMap<u32, usize> = product
            .atoms()
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map.map(|m| (m, i)))
            .collect();
        let edits = derive_edits(&reactants, &product, &reactant_map, &product_map);
        Ok(ReactionTemplate {
            id: id.to_string(),
            text: text.to_string(),
            reactants,
            product,
            edits,
            reactant_map,
            product_map,
        })
    }

    pub fn arity(&self) -> Arity {
        if self.reactants.len() == 1 {
            Arity::Uni
        } else {
            Arity::Bi
        }
    }

    pub fn reactant_patterns(&self) -> &[PatternGraph] {
        &self.reactants
    }

    pub fn product_pattern(&self) -> &PatternGraph {
        &self.product
    }

    pub fn edits(&self) -> &TemplateEdits {
        &self.edits
    }

    /// Embeddings of reactant pattern `r` into `mol`, one per distinct
    /// assignment of kept and removed atoms.
    pub fn reactant_embeddings(&self, r: usize, mol: &MolGraph) -> Vec<Embedding> {
        let pat = &self.reactants[r];
        let mut seen = BTreeSet::new();
        match_pattern(pat, mol)
            .into_iter()
            .filter(|emb| {
                let mapped: Vec<usize> = pat
                    .atoms()
                    .iter()
                    .zip(emb)
                    .filter(|(a, _)| a.map.is_some())
                    .map(|(_, &m)| m)
                    .collect();
                let removed: BTreeSet<usize> = self
                    .edits
                    .removed_atoms
                    .iter()
                    .filter(|&&(rr, _)| rr == r)
                    .map(|&(_, i)| emb[i])
                    .collect();
                seen.insert((mapped, removed))
            })
            .collect()
    }

    pub fn matches_reactant(&self, r: usize, mol: &MolGraph) -> bool {
        !match_pattern(&self.reactants[r], mol).is_empty()
    }

    /// Distinct valid products sorted by canonical SMILES.
    pub fn apply_forward(&self, reactants: &[&MolGraph]) -> Result<Vec<Product>, TemplateError> {
        if reactants.len() != self.reactants.len() {
            return Err(TemplateError::ArityMismatch {
                expected: self.reactants.len(),
                got: reactants.len(),
            });
        }
        let per_reactant: Vec<Vec<Embedding>> = reactants
            .iter()
            .enumerate()
            .map(|(r, mol)| self.reactant_embeddings(r, mol))
            .collect();
        if per_reactant.iter().any(Vec::is_empty) {
            return Err(TemplateError::NotApplicable);
        }
        let mut products: BTreeMap<String, MolGraph> = BTreeMap::new();
        let mut combo = vec![0usize; reactants.len()];
        loop {
            let embs: Vec<&Embedding> = combo
                .iter()
                .enumerate()
                .map(|(r, &k)| &per_reactant[r][k])
                .collect();
            match self.forward_once(reactants, &embs) {
                Some(mol) => match write_canonical_smiles(&mol) {
                    Ok(s) => {
                        products.entry(s).or_insert(mol);
                    }
                    Err(e) => log::debug!("template {}: product discarded: {e}", self.id),
                },
                None => log::debug!("template {}: invalid product discarded", self.id),
            }
            if !advance(&mut combo, &per_reactant) {
                break;
            }
        }
        Ok(products
            .into_iter()
            .map(|(smiles, mol)| Product { mol, smiles })
            .collect())
    }

    fn forward_once(&self, reactants: &[&MolGraph], embs: &[&Embedding]) -> Option<MolGraph> {
        let mut draft = Draft::default();
        let mut offsets = Vec::new();
        for mol in reactants {
            offsets.push(draft.append(mol));
        }
        let loc = |(r, i): PatternAtomRef| offsets[r] + embs[r][i];
        let maps: Vec<(u32, usize)> = self
            .reactant_map
            .iter()
            .filter(|(m, _)| self.product_map.contains_key(m))
            .map(|(&m, &at)| (m, loc(at)))
            .collect();
        let at = |m: u32| loc(self.reactant_map[&m]);
        let before = draft.snapshot(maps.iter().map(|&(_, a)| a));

        for &(a, b, _) in &self.edits.broken_bonds {
            draft.bonds.remove(&key(at(a), at(b)));
        }
        for &(a, b, kind) in &self.edits.formed_bonds {
            let k = key(at(a), at(b));
            if draft.bonds.contains_key(&k) {
                return None;
            }
            draft
                .bonds
                .insert(k, kind.explicit_order().unwrap_or(BondOrder::Single));
        }
        for &(a, b, from, to) in &self.edits.changed_bonds {
            let k = key(at(a), at(b));
            let old = draft.bonds[&k];
            draft.bonds.insert(k, retarget(old, from, to));
        }
        for &(m, a) in &maps {
            let (r, i) = self.reactant_map[&m];
            let from = self.reactants[r].atoms()[i];
            let to = self.product.atoms()[self.product_map[&m]];
            draft.atoms[a].formal_charge = recharge(draft.atoms[a].formal_charge, &from, &to);
        }
        for &pa in &self.edits.removed_atoms {
            draft.removed[loc(pa)] = true;
        }
        draft.finish(&before)
    }

    /// Reactant sets obtained by reversing the edits at every embedding of
    /// the product pattern. Empty when nothing matches.
    pub fn apply_backward(&self, product: &MolGraph) -> Vec<ReactantSet> {
        let mut out: BTreeMap<Vec<String>, Vec<MolGraph>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for emb in match_pattern(&self.product, product) {
            let mapped: Vec<usize> = self.product_map.values().map(|&i| emb[i]).collect();
            if !seen.insert(mapped) {
                continue;
            }
            if let Some(set) = self.backward_once(product, &emb) {
                let smiles: Option<Vec<String>> = set
                    .iter()
                    .map(|m| write_canonical_smiles(m).ok())
                    .collect();
                if let Some(smiles) = smiles {
                    out.entry(smiles).or_insert(set);
                }
            }
        }
        out.into_iter()
            .map(|(smiles, mols)| ReactantSet { mols, smiles })
            .collect()
    }

    fn backward_once(&self, product: &MolGraph, emb: &Embedding) -> Option<Vec<MolGraph>> {
        let mut draft = Draft::default();
        draft.append(product);
        let at = |m: u32| emb[self.product_map[&m]];
        let before = draft.snapshot(self.product_map.values().map(|&i| emb[i]));

        for &(a, b, _) in &self.edits.formed_bonds {
            draft.bonds.remove(&key(at(a), at(b)));
        }
        for &(a, b, kind) in &self.edits.broken_bonds {
            let k = key(at(a), at(b));
            if draft.bonds.contains_key(&k) {
                return None;
            }
            draft
                .bonds
                .insert(k, kind.explicit_order().unwrap_or(BondOrder::Single));
        }
        for &(a, b, from, to) in &self.edits.changed_bonds {
            let k = key(at(a), at(b));
            let old = draft.bonds[&k];
            draft.bonds.insert(k, retarget(old, to, from));
        }
        for (&m, &pi) in &self.product_map {
            let (r, i) = self.reactant_map[&m];
            let to = self.reactants[r].atoms()[i];
            let from = self.product.atoms()[pi];
            let a = emb[pi];
            draft.atoms[a].formal_charge = recharge(draft.atoms[a].formal_charge, &from, &to);
        }
        // recreate leaving groups
        let mut placed: BTreeMap<PatternAtomRef, usize> = BTreeMap::new();
        for &(r, i) in &self.edits.removed_atoms {
            let pat = self.reactants[r].atoms()[i];
            let element = pat.element.expect("reactant atoms are never wildcards").element();
            let charge = pat.charge.unwrap_or(0);
            let aromatic = pat.aromatic.unwrap_or(false);
            let explicit_h = if charge != 0 || aromatic {
                pat.hydrogens
            } else {
                None
            };
            let idx = draft.push(Atom {
                element,
                aromatic,
                formal_charge: charge,
                explicit_h,
            });
            placed.insert((r, i), idx);
        }
        for (r, pat) in self.reactants.iter().enumerate() {
            for b in pat.bonds() {
                let ends = [(r, b.a), (r, b.b)];
                if !ends.iter().any(|e| placed.contains_key(e)) {
                    continue;
                }
                let resolve = |e: PatternAtomRef| -> usize {
                    placed
                        .get(&e)
                        .copied()
                        .unwrap_or_else(|| at(pat.atoms()[e.1].map.expect("kept atoms are mapped")))
                };
                let (x, y) = (resolve(ends[0]), resolve(ends[1]));
                let both_aromatic = draft.atoms[x].aromatic && draft.atoms[y].aromatic;
                let order = b.kind.explicit_order().unwrap_or(if both_aromatic {
                    BondOrder::Aromatic
                } else {
                    BondOrder::Single
                });
                draft.bonds.insert(key(x, y), order);
            }
        }
        let mol = draft.finish_unchecked(&before);
        let frags = mol.fragments();
        if frags.len() != self.reactants.len() {
            return None;
        }
        // assign each reactant pattern to the fragment holding its first atom
        let frag_of = |atom: usize| frags.iter().position(|f| f.contains(&atom));
        let mut used = vec![false; frags.len()];
        let mut out = Vec::new();
        for (r, pat) in self.reactants.iter().enumerate() {
            let first = placed.get(&(r, 0)).copied().unwrap_or_else(|| {
                at(pat.atoms()[0].map.expect("kept atoms are mapped"))
            });
            let f = frag_of(first)?;
            if used[f] {
                return None;
            }
            used[f] = true;
            let part = mol.subgraph(&frags[f]);
            if !is_sane(&part) {
                return None;
            }
            out.push(part);
        }
        Some(out)
    }

    /// Whether some forward product decomposes back into exactly `reactants`.
    pub fn check_reversible(&self, reactants: &[&MolGraph]) -> bool {
        let Ok(products) = self.apply_forward(reactants) else {
            return false;
        };
        let Some(mut want) = reactants
            .iter()
            .map(|m| write_canonical_smiles(m).ok())
            .collect::<Option<Vec<String>>>()
        else {
            return false;
        };
        want.sort();
        products
            .iter()
            .any(|p| self.product_reverses_to(&p.mol, &want))
    }

    /// Whether backward application on `product` yields the sorted reactant
    /// SMILES `want`.
    pub fn product_reverses_to(&self, product: &MolGraph, want: &[String]) -> bool {
        self.apply_backward(product).into_iter().any(|set| {
            let mut got = set.smiles;
            got.sort();
            got == want
        })
    }
}

fn perr(offset: usize, message: &str) -> TemplateError {
    TemplateError::Parse {
        offset,
        message: message.to_string(),
    }
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// New order of a bond whose pattern changes from `from` to `to`.
fn retarget(old: BondOrder, from: BondPattern, to: BondPattern) -> BondOrder {
    match (from.explicit_order(), to.explicit_order()) {
        (_, Some(o)) => o,
        (Some(_), None) => BondOrder::Single,
        (None, None) => old,
    }
}

fn recharge(old: i8, from: &AtomPattern, to: &AtomPattern) -> i8 {
    match (from.charge, to.charge) {
        (_, Some(q)) => q,
        (Some(_), None) => 0,
        (None, None) => old,
    }
}

/// Advances a mixed-radix counter; false once it wraps.
fn advance(combo: &mut [usize], sizes: &[Vec<Embedding>]) -> bool {
    for (slot, options) in combo.iter_mut().zip(sizes).rev() {
        *slot += 1;
        if *slot < options.len() {
            return true;
        }
        *slot = 0;
    }
    false
}

/// Gives unmapped product atoms the map of an identical unmapped reactant
/// atom bonded to the same mapped neighbor.
fn pair_unmapped(
    reactants: &mut [PatternGraph],
    product: &mut PatternGraph,
    reactant_map: &mut BTreeMap<u32, PatternAtomRef>,
) -> Result<(), TemplateError> {
    let mut next = IMPLICIT_MAP_BASE;
    loop {
        let pending: Vec<usize> = (0..product.atom_count())
            .filter(|&i| product.atoms()[i].map.is_none())
            .collect();
        if pending.is_empty() {
            return Ok(());
        }
        let mut progress = false;
        for p in pending {
            let found = product.incident(p).iter().find_map(|&(q, bi)| {
                let mq = product.atoms()[q].map?;
                let kind = product.bonds()[bi].kind;
                let (r, rq) = reactant_map[&mq];
                let pat = &reactants[r];
                let candidates: Vec<(usize, bool)> = pat
                    .incident(rq)
                    .iter()
                    .filter(|&&(cand, _)| {
                        let c = pat.atoms()[cand];
                        c.map.is_none() && AtomPattern { map: None, ..c } == product.atoms()[p]
                    })
                    .map(|&(cand, rbi)| (cand, pat.bonds()[rbi].kind == kind))
                    .collect();
                // prefer a counterpart bonded with the same kind
                candidates
                    .iter()
                    .find(|c| c.1)
                    .or(candidates.first())
                    .map(|&(cand, _)| (r, cand))
            });
            if let Some((r, cand)) = found {
                reactants[r].atom_mut(cand).map = Some(next);
                product.atom_mut(p).map = Some(next);
                reactant_map.insert(next, (r, cand));
                next += 1;
                progress = true;
            }
        }
        if !progress {
            let p = (0..product.atom_count())
                .find(|&i| product.atoms()[i].map.is_none())
                .expect("pending is nonempty");
            return Err(TemplateError::UnmappedProductAtom(p));
        }
    }
}

fn derive_edits(
    reactants: &[PatternGraph],
    product: &PatternGraph,
    reactant_map: &BTreeMap<u32, PatternAtomRef>,
    product_map: &BTreeMap<u32, usize>,
) -> TemplateEdits {
    let mut edits = TemplateEdits::default();
    let kept = |r: usize, i: usize| {
        reactants[r].atoms()[i]
            .map
            .is_some_and(|m| product_map.contains_key(&m))
    };
    for (r, pat) in reactants.iter().enumerate() {
        for i in 0..pat.atom_count() {
            if !kept(r, i) {
                edits.removed_atoms.push((r, i));
            }
        }
        for b in pat.bonds() {
            match (kept(r, b.a), kept(r, b.b)) {
                (true, true) => {
                    let (ma, mb) = (
                        pat.atoms()[b.a].map.expect("kept"),
                        pat.atoms()[b.b].map.expect("kept"),
                    );
                    match product.bond_between(product_map[&ma], product_map[&mb]) {
                        None => edits.broken_bonds.push((ma, mb, b.kind)),
                        Some(pb) if pb.kind != b.kind => {
                            edits.changed_bonds.push((ma, mb, b.kind, pb.kind))
                        }
                        Some(_) => {}
                    }
                }
                (true, false) => edits
                    .leaving_bonds
                    .push((pat.atoms()[b.a].map.expect("kept"), (r, b.b))),
                (false, true) => edits
                    .leaving_bonds
                    .push((pat.atoms()[b.b].map.expect("kept"), (r, b.a))),
                (false, false) => {}
            }
        }
    }
    for b in product.bonds() {
        let ma = product.atoms()[b.a].map.expect("product atoms are mapped");
        let mb = product.atoms()[b.b].map.expect("product atoms are mapped");
        let (ra, ia) = reactant_map[&ma];
        let (rb, ib) = reactant_map[&mb];
        if ra != rb || reactants[ra].bond_between(ia, ib).is_none() {
            edits.formed_bonds.push((ma, mb, b.kind));
        }
    }
    edits
}

/// Mutable molecule used while applying edits.
#[derive(Default)]
struct Draft {
    atoms: Vec<Atom>,
    bonds: BTreeMap<(usize, usize), BondOrder>,
    removed: Vec<bool>,
}

/// Per-atom state recorded before edits: `(atom, bond valence, hydrogens, charge)`.
type Snapshot = Vec<(usize, i32, i32, i8)>;

impl Draft {
    fn push(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.removed.push(false);
        self.atoms.len() - 1
    }

    fn append(&mut self, mol: &MolGraph) -> usize {
        let offset = self.atoms.len();
        for &a in mol.atoms() {
            self.push(a);
        }
        for b in mol.bonds() {
            self.bonds.insert(key(b.a + offset, b.b + offset), b.order);
        }
        offset
    }

    fn build(&self) -> (MolGraph, Vec<usize>) {
        let mut index = vec![usize::MAX; self.atoms.len()];
        let mut mol = MolGraph::new();
        for (i, &a) in self.atoms.iter().enumerate() {
            if !self.removed[i] {
                index[i] = mol.add_atom(a);
            }
        }
        for (&(a, b), &order) in &self.bonds {
            if index[a] != usize::MAX && index[b] != usize::MAX {
                mol.add_bond(index[a], index[b], order)
                    .expect("draft bonds are unique");
            }
        }
        (mol, index)
    }

    fn snapshot(&self, atoms: impl Iterator<Item = usize>) -> Snapshot {
        let (mol, index) = self.build();
        atoms
            .map(|a| {
                let i = index[a];
                (
                    a,
                    i32::from(mol.bond_valence(i)),
                    i32::from(mol.hydrogens(i)),
                    mol.atom(i).formal_charge,
                )
            })
            .collect()
    }

    /// Builds the edited molecule with hydrogens adjusted on touched atoms.
    fn finish_unchecked(&mut self, before: &Snapshot) -> MolGraph {
        let (mut mol, index) = self.build();
        for &(a, old_v, old_h, old_q) in before {
            let i = index[a];
            if i == usize::MAX {
                continue;
            }
            let new_v = i32::from(mol.bond_valence(i));
            let atom = *mol.atom(i);
            if new_v == old_v && atom.formal_charge == old_q {
                continue;
            }
            if atom.formal_charge == 0 && !atom.aromatic {
                mol.atom_mut(i).explicit_h = None;
                continue;
            }
            let base = |q: i8| i32::from(atom.element.valences(q).first().copied().unwrap_or(0));
            let h = (old_h - (new_v - old_v) + base(atom.formal_charge) - base(old_q)).max(0);
            let h = u8::try_from(h).unwrap_or(u8::MAX);
            mol.atom_mut(i).explicit_h = None;
            if mol.implicit_hydrogens(i) != h {
                mol.atom_mut(i).explicit_h = Some(h);
            }
        }
        mol
    }

    fn finish(&mut self, before: &Snapshot) -> Option<MolGraph> {
        let mol = self.finish_unchecked(before);
        (mol.is_connected() && is_sane(&mol)).then_some(mol)
    }
}

/// Valences respected and aromaticity confined to rings.
fn is_sane(mol: &MolGraph) -> bool {
    if mol.valence_violation().is_some() {
        return false;
    }
    let ring_bonds = mol.ring_bonds();
    let ring_atoms = mol.ring_atoms();
    mol.bonds()
        .iter()
        .zip(&ring_bonds)
        .all(|(b, &r)| b.order != BondOrder::Aromatic || r)
        && (0..mol.atom_count()).all(|i| !mol.atom(i).aromatic || ring_atoms[i])
}
