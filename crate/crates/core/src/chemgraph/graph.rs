use serde::{Deserialize, Serialize};

use super::element::Element;
use super::ChemError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Valence units consumed by the bond. Aromatic bonds count one unit; the
    /// extra pi unit is charged to the atom, see [`MolGraph::implicit_hydrogens`].
    pub fn valence(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i8,
    /// Hydrogen count fixed by a bracket atom; `None` means implicit.
    pub explicit_h: Option<u8>,
}

impl Atom {
    pub fn new(element: Element) -> Self {
        Atom {
            element,
            aromatic: false,
            formal_charge: 0,
            explicit_h: None,
        }
    }

    pub fn aromatic(element: Element) -> Self {
        Atom {
            aromatic: true,
            ..Atom::new(element)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

/// Attributed molecular graph with hydrogens kept implicit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// For each atom, `(neighbor, bond index)` pairs.
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &Atom {
        &self.atoms[i]
    }

    pub fn atom_mut(&mut self, i: usize) -> &mut Atom {
        &mut self.atoms[i]
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn add_atom(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.adjacency.push(Vec::new());
        self.atoms.len() - 1
    }

    pub fn add_bond(&mut self, a: usize, b: usize, order: BondOrder) -> Result<usize, ChemError> {
        if a == b || a >= self.atoms.len() || b >= self.atoms.len() {
            return Err(ChemError::InvalidBond { a, b });
        }
        if self.bond_between(a, b).is_some() {
            return Err(ChemError::DuplicateBond { a, b });
        }
        let idx = self.bonds.len();
        self.bonds.push(Bond { a, b, order });
        self.adjacency[a].push((b, idx));
        self.adjacency[b].push((a, idx));
        Ok(idx)
    }

    pub fn set_bond_order(&mut self, bond: usize, order: BondOrder) {
        self.bonds[bond].order = order;
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i].iter().map(|&(n, _)| n)
    }

    /// `(neighbor, bond index)` pairs of atom `i`.
    pub fn incident(&self, i: usize) -> &[(usize, usize)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|&&(n, _)| n == b)
            .map(|&(_, bi)| bi)
    }

    /// Sum of bond valence units on atom `i`.
    pub fn bond_valence(&self, i: usize) -> u8 {
        self.adjacency[i]
            .iter()
            .map(|&(_, bi)| self.bonds[bi].order.valence())
            .sum()
    }

    fn has_aromatic_bond(&self, i: usize) -> bool {
        self.adjacency[i]
            .iter()
            .any(|&(_, bi)| self.bonds[bi].order == BondOrder::Aromatic)
    }

    /// Hydrogens implied by the default valence model for atom `i`, ignoring
    /// any explicit count.
    pub fn implicit_hydrogens(&self, i: usize) -> u8 {
        let atom = &self.atoms[i];
        let used = self.bond_valence(i);
        let valences = atom.element.valences(atom.formal_charge);
        if atom.aromatic {
            let pi = u8::from(atom.element.aromatic_pi_unit() && self.has_aromatic_bond(i));
            let base = valences.first().copied().unwrap_or(0);
            return base.saturating_sub(used + pi);
        }
        valences
            .iter()
            .find(|&&v| v >= used)
            .map(|&v| v - used)
            .unwrap_or(0)
    }

    /// Total hydrogen count (explicit when set, implicit otherwise).
    pub fn hydrogens(&self, i: usize) -> u8 {
        self.atoms[i]
            .explicit_h
            .unwrap_or_else(|| self.implicit_hydrogens(i))
    }

    /// Degree plus hydrogens.
    pub fn connectivity(&self, i: usize) -> usize {
        self.degree(i) + usize::from(self.hydrogens(i))
    }

    pub fn heavy_atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// First atom whose bonds plus hydrogens exceed its largest allowed valence.
    pub fn valence_violation(&self) -> Option<usize> {
        (0..self.atoms.len()).find(|&i| {
            let atom = &self.atoms[i];
            let max = atom
                .element
                .valences(atom.formal_charge)
                .into_iter()
                .max()
                .unwrap_or(0);
            self.bond_valence(i) + self.hydrogens(i) > max
        })
    }

    pub fn check_valence(&self) -> Result<(), ChemError> {
        match self.valence_violation() {
            Some(atom) => Err(ChemError::Valence {
                atom,
                element: self.atoms[atom].element,
            }),
            None => Ok(()),
        }
    }

    /// Bonds that lie on at least one cycle (non-bridges).
    pub fn ring_bonds(&self) -> Vec<bool> {
        let n = self.atoms.len();
        let mut in_ring = vec![true; self.bonds.len()];
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut time = 0usize;
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            // iterative Tarjan bridge search: (atom, parent bond, next incident slot)
            let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
            disc[root] = time;
            low[root] = time;
            time += 1;
            while let Some(&mut (u, parent_bond, ref mut slot)) = stack.last_mut() {
                if *slot < self.adjacency[u].len() {
                    let (v, bi) = self.adjacency[u][*slot];
                    *slot += 1;
                    if bi == parent_bond {
                        continue;
                    }
                    if disc[v] == usize::MAX {
                        disc[v] = time;
                        low[v] = time;
                        time += 1;
                        stack.push((v, bi, 0));
                    } else {
                        low[u] = low[u].min(disc[v]);
                    }
                } else {
                    stack.pop();
                    if let Some(&(p, _, _)) = stack.last() {
                        low[p] = low[p].min(low[u]);
                        if low[u] > disc[p] {
                            in_ring[parent_bond] = false;
                        }
                    }
                }
            }
        }
        in_ring
    }

    pub fn ring_atoms(&self) -> Vec<bool> {
        let ring_bonds = self.ring_bonds();
        let mut atoms = vec![false; self.atoms.len()];
        for (bond, &ring) in self.bonds.iter().zip(&ring_bonds) {
            if ring {
                atoms[bond.a] = true;
                atoms[bond.b] = true;
            }
        }
        atoms
    }

    /// Connected components as sorted atom index lists, ordered by smallest member.
    pub fn fragments(&self) -> Vec<Vec<usize>> {
        let n = self.atoms.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut head = 0;
            while head < comp.len() {
                let u = comp[head];
                head += 1;
                for v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.fragments().len() <= 1
    }

    /// Induced subgraph on `keep`, atoms ordered as given.
    pub fn subgraph(&self, keep: &[usize]) -> MolGraph {
        let mut index = vec![usize::MAX; self.atoms.len()];
        let mut out = MolGraph::new();
        for &i in keep {
            index[i] = out.add_atom(self.atoms[i]);
        }
        for bond in &self.bonds {
            let (a, b) = (index[bond.a], index[bond.b]);
            if a != usize::MAX && b != usize::MAX {
                out.add_bond(a, b, bond.order)
                    .expect("induced subgraph inherits valid bonds");
            }
        }
        out
    }

    /// Copy with atoms reordered: new atom `k` is old atom `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> MolGraph {
        assert_eq!(order.len(), self.atoms.len());
        self.subgraph(order)
    }

    /// Copy without the atoms flagged in `remove`.
    pub fn without_atoms(&self, remove: &[bool]) -> MolGraph {
        let keep: Vec<usize> = (0..self.atoms.len()).filter(|&i| !remove[i]).collect();
        self.subgraph(&keep)
    }

    /// Copy with bond `bond` deleted.
    pub fn without_bond(&self, bond: usize) -> MolGraph {
        let mut out = MolGraph::new();
        for atom in &self.atoms {
            out.add_atom(*atom);
        }
        for (i, b) in self.bonds.iter().enumerate() {
            if i != bond {
                out.add_bond(b.a, b.b, b.order).expect("valid bond");
            }
        }
        out
    }
}
