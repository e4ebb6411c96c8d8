//! Backtracking subgraph matcher in the VF2 style.

use crate::chemgraph::MolGraph;

use super::pattern::PatternGraph;

/// Injective map from pattern atom indices to molecule atom indices.
pub type Embedding = Vec<usize>;

/// Every embedding of `pattern` into `mol`, automorphic images included,
/// sorted lexicographically by mapped molecule indices.
pub fn match_pattern(pattern: &PatternGraph, mol: &MolGraph) -> Vec<Embedding> {
    let np = pattern.atom_count();
    if np == 0 || np > mol.atom_count() {
        return Vec::new();
    }
    let ring = mol.ring_atoms();
    let order = visit_order(pattern);
    // for each pattern atom in visit order, an earlier-visited neighbor
    let anchor: Vec<Option<usize>> = order
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            pattern
                .incident(p)
                .iter()
                .map(|&(q, _)| q)
                .find(|q| order[..k].contains(q))
        })
        .collect();
    let mut state = Search {
        pattern,
        mol,
        ring: &ring,
        order: &order,
        anchor: &anchor,
        map: vec![usize::MAX; np],
        used: vec![false; mol.atom_count()],
        out: Vec::new(),
    };
    state.extend(0);
    let mut out = state.out;
    out.sort();
    out
}

/// Depth-first order over the pattern so that every atom after the first of
/// its component has an already-placed neighbor.
fn visit_order(pattern: &PatternGraph) -> Vec<usize> {
    let n = pattern.atom_count();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for root in 0..n {
        if seen[root] {
            continue;
        }
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(u) = stack.pop() {
            order.push(u);
            for &(v, _) in pattern.incident(u).iter().rev() {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    order
}

struct Search<'a> {
    pattern: &'a PatternGraph,
    mol: &'a MolGraph,
    ring: &'a [bool],
    order: &'a [usize],
    anchor: &'a [Option<usize>],
    map: Vec<usize>,
    used: Vec<bool>,
    out: Vec<Embedding>,
}

impl Search<'_> {
    fn extend(&mut self, depth: usize) {
        if depth == self.order.len() {
            self.out.push(self.map.clone());
            return;
        }
        let p = self.order[depth];
        let candidates: Vec<usize> = match self.anchor[depth] {
            Some(q) => self.mol.neighbors(self.map[q]).collect(),
            None => (0..self.mol.atom_count()).collect(),
        };
        for m in candidates {
            if self.used[m] || !self.feasible(p, m) {
                continue;
            }
            self.map[p] = m;
            self.used[m] = true;
            self.extend(depth + 1);
            self.used[m] = false;
            self.map[p] = usize::MAX;
        }
    }

    fn feasible(&self, p: usize, m: usize) -> bool {
        if !self.pattern.atoms()[p].matches(self.mol, self.ring, m) {
            return false;
        }
        self.pattern.incident(p).iter().all(|&(q, bi)| {
            let mq = self.map[q];
            if mq == usize::MAX {
                return true;
            }
            match self.mol.bond_between(m, mq) {
                Some(mb) => self.pattern.bonds()[bi]
                    .kind
                    .matches(self.mol.bonds()[mb].order),
                None => false,
            }
        })
    }
}

/// Whether `emb` is a valid embedding, checked directly against the
/// definition.
pub fn is_valid_embedding(pattern: &PatternGraph, mol: &MolGraph, emb: &[usize]) -> bool {
    if emb.len() != pattern.atom_count() {
        return false;
    }
    let ring = mol.ring_atoms();
    for (i, &a) in emb.iter().enumerate() {
        if a >= mol.atom_count() || emb[..i].contains(&a) {
            return false;
        }
        if !pattern.atoms()[i].matches(mol, &ring, a) {
            return false;
        }
    }
    pattern.bonds().iter().all(|b| {
        mol.bond_between(emb[b.a], emb[b.b])
            .is_some_and(|mb| b.kind.matches(mol.bonds()[mb].order))
    })
}
