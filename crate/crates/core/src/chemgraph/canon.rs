//! Canonical atom ranking and canonical SMILES output.

use super::graph::{BondOrder, MolGraph};
use super::ChemError;

/// Canonical rank of every atom; ranks are a permutation of `0..n`.
///
/// Ranks start from per-atom invariants (element, degree, charge, aromaticity,
/// hydrogen count, ring membership) and are refined by sorted neighbor
/// `(bond order, rank)` lists until stable. Remaining ties are broken by
/// lowering one member of the smallest tied class and refining again.
pub fn canonical_ranks(mol: &MolGraph) -> Vec<usize> {
    let n = mol.atom_count();
    if n == 0 {
        return Vec::new();
    }
    let ring = mol.ring_atoms();
    let initial: Vec<(u8, usize, i8, bool, u8, bool)> = (0..n)
        .map(|i| {
            let a = mol.atom(i);
            (
                a.element.atomic_number(),
                mol.degree(i),
                a.formal_charge,
                a.aromatic,
                mol.hydrogens(i),
                ring[i],
            )
        })
        .collect();
    let mut ranks = rank_by_key(&initial);
    loop {
        ranks = refine(mol, ranks);
        let Some(tied) = smallest_tied_class(&ranks) else {
            return ranks;
        };
        let chosen = (0..n)
            .find(|&i| ranks[i] == tied)
            .expect("tied class is nonempty");
        let keys: Vec<(usize, u8)> = (0..n)
            .map(|i| (ranks[i], u8::from(ranks[i] == tied && i != chosen)))
            .collect();
        ranks = rank_by_key(&keys);
    }
}

/// Dense rank: the number of atoms with a strictly smaller key.
fn rank_by_key<K: Ord>(keys: &[K]) -> Vec<usize> {
    rank_by(keys.len(), |a, b| keys[a].cmp(&keys[b]))
}

fn rank_by(n: usize, cmp: impl Fn(usize, usize) -> std::cmp::Ordering) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp(a, b));
    let mut ranks = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = if pos > 0 && cmp(order[pos - 1], i).is_eq() {
            ranks[order[pos - 1]]
        } else {
            pos
        };
    }
    ranks
}

fn class_count(ranks: &[usize]) -> usize {
    let mut seen = vec![false; ranks.len()];
    ranks.iter().filter(|&&r| !std::mem::replace(&mut seen[r], true)).count()
}

fn refine(mol: &MolGraph, mut ranks: Vec<usize>) -> Vec<usize> {
    let n = mol.atom_count();
    let mut start = Vec::with_capacity(n + 1);
    let mut nbrs: Vec<(u8, usize)> = Vec::new();
    start.push(0);
    for i in 0..n {
        nbrs.extend(
            mol.incident(i)
                .iter()
                .map(|&(nb, bi)| (mol.bonds()[bi].order.code(), nb)),
        );
        start.push(nbrs.len());
    }
    let mut env: Vec<(u8, usize)> = vec![(0, 0); nbrs.len()];
    let mut classes = class_count(&ranks);
    loop {
        for i in 0..n {
            let slot = &mut env[start[i]..start[i + 1]];
            for (e, &(code, nb)) in slot.iter_mut().zip(&nbrs[start[i]..start[i + 1]]) {
                *e = (code, ranks[nb]);
            }
            slot.sort_unstable();
        }
        let next = rank_by(n, |a, b| {
            ranks[a]
                .cmp(&ranks[b])
                .then_with(|| env[start[a]..start[a + 1]].cmp(&env[start[b]..start[b + 1]]))
        });
        let next_classes = class_count(&next);
        if next_classes == classes {
            return next;
        }
        classes = next_classes;
        ranks = next;
    }
}

fn smallest_tied_class(ranks: &[usize]) -> Option<usize> {
    let mut counts = vec![0usize; ranks.len()];
    for &r in ranks {
        counts[r] += 1;
    }
    counts.iter().position(|&c| c > 1)
}

/// Canonical SMILES for a single-fragment molecule. The empty graph yields "".
pub fn write_canonical_smiles(mol: &MolGraph) -> Result<String, ChemError> {
    if mol.is_empty() {
        return Ok(String::new());
    }
    let fragments = mol.fragments();
    if fragments.len() > 1 {
        return Err(ChemError::MultiFragment(fragments.len()));
    }
    let ranks = canonical_ranks(mol);
    Ok(Writer::new(mol, &ranks).write())
}

struct Writer<'a> {
    mol: &'a MolGraph,
    ranks: &'a [usize],
    /// Tree children of each atom in output order.
    children: Vec<Vec<usize>>,
    /// Ring-closure bonds per atom, in the order their digits are written.
    ring_marks: Vec<Vec<usize>>,
    start: usize,
}

impl<'a> Writer<'a> {
    fn new(mol: &'a MolGraph, ranks: &'a [usize]) -> Self {
        let n = mol.atom_count();
        let start = (0..n).min_by_key(|&i| ranks[i]).expect("nonempty");
        let mut w = Writer {
            mol,
            ranks,
            children: vec![Vec::new(); n],
            ring_marks: vec![Vec::new(); n],
            start,
        };
        w.plan();
        w
    }

    fn sorted_neighbors(&self, atom: usize) -> Vec<(usize, usize)> {
        let mut nbrs = self.mol.incident(atom).to_vec();
        nbrs.sort_by_key(|&(nb, _)| self.ranks[nb]);
        nbrs
    }

    /// DFS over the graph deciding tree edges and ring-closure bonds.
    fn plan(&mut self) {
        let n = self.mol.atom_count();
        let mut visited = vec![false; n];
        let mut used_bond = vec![false; self.mol.bond_count()];
        // opening and closing marks are collected separately, then merged
        let mut opens: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut closes: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut stack = vec![(self.start, 0usize)];
        visited[self.start] = true;
        let mut nbr_lists: Vec<Option<Vec<(usize, usize)>>> = vec![None; n];
        while let Some(&mut (u, ref mut slot)) = stack.last_mut() {
            if nbr_lists[u].is_none() {
                nbr_lists[u] = Some(self.sorted_neighbors(u));
            }
            let nbrs = nbr_lists[u].as_ref().expect("set above");
            if *slot >= nbrs.len() {
                stack.pop();
                continue;
            }
            let (v, bi) = nbrs[*slot];
            *slot += 1;
            if used_bond[bi] {
                continue;
            }
            used_bond[bi] = true;
            if visited[v] {
                // v was reached earlier: it opens the ring, u closes it
                opens[v].push(bi);
                closes[u].push(bi);
            } else {
                visited[v] = true;
                self.children[u].push(v);
                stack.push((v, 0));
            }
        }
        for atom in 0..n {
            let mut marks = std::mem::take(&mut closes[atom]);
            marks.append(&mut opens[atom]);
            self.ring_marks[atom] = marks;
        }
    }

    fn write(&self) -> String {
        let mut out = String::new();
        let mut digits: Vec<Option<usize>> = vec![None; self.mol.bond_count()];
        let mut free: Vec<bool> = vec![true; 100];
        let mut stack: Vec<Frame> = vec![Frame::Atom {
            atom: self.start,
            from: None,
        }];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Close => out.push(')'),
                Frame::Open => out.push('('),
                Frame::Atom { atom, from } => {
                    if let Some(parent) = from {
                        let bi = self
                            .mol
                            .bond_between(parent, atom)
                            .expect("tree edge is a bond");
                        out.push_str(self.bond_symbol(bi));
                    }
                    self.write_atom(atom, &mut out);
                    for &bi in &self.ring_marks[atom] {
                        match digits[bi] {
                            Some(d) => {
                                free[d] = true;
                                push_ring_digit(&mut out, d);
                            }
                            None => {
                                let d = (1..100).find(|&d| free[d]).expect("ring digits exhausted");
                                free[d] = false;
                                digits[bi] = Some(d);
                                out.push_str(self.bond_symbol(bi));
                                push_ring_digit(&mut out, d);
                            }
                        }
                    }
                    let kids = &self.children[atom];
                    // push in reverse so the first child is written first
                    for (k, &child) in kids.iter().enumerate().rev() {
                        let branch = k + 1 < kids.len();
                        if branch {
                            stack.push(Frame::Close);
                        }
                        stack.push(Frame::Atom {
                            atom: child,
                            from: Some(atom),
                        });
                        if branch {
                            stack.push(Frame::Open);
                        }
                    }
                }
            }
        }
        out
    }

    fn bond_symbol(&self, bond: usize) -> &'static str {
        let b = self.mol.bonds()[bond];
        let both_aromatic = self.mol.atom(b.a).aromatic && self.mol.atom(b.b).aromatic;
        match b.order {
            BondOrder::Single if both_aromatic => "-",
            BondOrder::Single => "",
            BondOrder::Double => "=",
            BondOrder::Triple => "#",
            BondOrder::Aromatic if both_aromatic => "",
            BondOrder::Aromatic => ":",
        }
    }

    fn write_atom(&self, i: usize, out: &mut String) {
        let atom = self.mol.atom(i);
        let symbol = if atom.aromatic {
            atom.element
                .aromatic_symbol()
                .unwrap_or_else(|| atom.element.symbol())
        } else {
            atom.element.symbol()
        };
        let h = self.mol.hydrogens(i);
        let bare_ok = atom.formal_charge == 0 && h == self.mol.implicit_hydrogens(i);
        if bare_ok {
            out.push_str(symbol);
            return;
        }
        out.push('[');
        out.push_str(symbol);
        match h {
            0 => {}
            1 => out.push('H'),
            h => {
                out.push('H');
                out.push_str(&h.to_string());
            }
        }
        match atom.formal_charge {
            0 => {}
            1 => out.push('+'),
            -1 => out.push('-'),
            q if q > 0 => out.push_str(&format!("+{q}")),
            q => out.push_str(&format!("-{}", -q)),
        }
        out.push(']');
    }
}

enum Frame {
    Atom { atom: usize, from: Option<usize> },
    Open,
    Close,
}

fn push_ring_digit(out: &mut String, d: usize) {
    if d < 10 {
        out.push(char::from(b'0' + d as u8));
    } else {
        out.push('%');
        out.push_str(&format!("{d:02}"));
    }
}
