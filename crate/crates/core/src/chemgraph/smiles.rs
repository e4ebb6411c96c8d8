//! Restricted SMILES reader.
//!
//! Supports organic-subset and bracket atoms (charge and hydrogen count),
//! aromatic lowercase atoms, branches, ring closures (`1`..`9`, `%nn`) and the
//! bond symbols `-`, `=`, `#`, `:`. Stereo markers are accepted and dropped;
//! wildcards, isotopes and atom classes are rejected.

use std::collections::BTreeMap;

use super::element::Element;
use super::graph::{Atom, BondOrder, MolGraph};
use super::ChemError;

/// Parse result plus flags for information that was discarded.
#[derive(Debug, Clone)]
pub struct ParsedSmiles {
    pub mol: MolGraph,
    pub stereo_stripped: bool,
}

pub fn parse_smiles(text: &str) -> Result<MolGraph, ChemError> {
    let parsed = parse_smiles_with_flags(text)?;
    if parsed.stereo_stripped {
        log::warn!("stereo markers stripped from {text:?}");
    }
    Ok(parsed.mol)
}

#[derive(Clone, Copy)]
enum PendingBond {
    Explicit(BondOrder),
    /// `/` or `\`: single bond with stereo information dropped.
    Directional,
}

struct RingOpen {
    atom: usize,
    bond: Option<PendingBond>,
    offset: usize,
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    mol: MolGraph,
    atom_offsets: Vec<usize>,
    /// Bonds written without a symbol between two aromatic atoms; resolved to
    /// aromatic or single once rings are known.
    implicit_aromatic: Vec<usize>,
    stereo_stripped: bool,
}

pub fn parse_smiles_with_flags(text: &str) -> Result<ParsedSmiles, ChemError> {
    let mut p = Parser {
        text,
        bytes: text.as_bytes(),
        pos: 0,
        mol: MolGraph::new(),
        atom_offsets: Vec::new(),
        implicit_aromatic: Vec::new(),
        stereo_stripped: false,
    };
    p.run()?;
    p.finish()
}

fn err(offset: usize, message: impl Into<String>) -> ChemError {
    ChemError::Parse {
        offset,
        message: message.into(),
    }
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn run(&mut self) -> Result<(), ChemError> {
        let mut prev: Option<usize> = None;
        let mut pending: Option<(PendingBond, usize)> = None;
        let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
        let mut rings: BTreeMap<u32, RingOpen> = BTreeMap::new();
        // true right after '(' until the first atom/bond of the branch
        let mut branch_start = false;

        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    if prev.is_none() || pending.is_some() {
                        return Err(err(start, "branch must follow an atom"));
                    }
                    branches.push((prev, start));
                    branch_start = true;
                    self.pos += 1;
                    continue;
                }
                b')' => {
                    let Some((anchor, _)) = branches.pop() else {
                        return Err(err(start, "unbalanced ')'"));
                    };
                    if branch_start || pending.is_some() {
                        return Err(err(start, "empty branch"));
                    }
                    prev = anchor;
                    self.pos += 1;
                    continue;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if pending.is_some() {
                        return Err(err(start, "two consecutive bond symbols"));
                    }
                    let bond = match c {
                        b'-' => PendingBond::Explicit(BondOrder::Single),
                        b'=' => PendingBond::Explicit(BondOrder::Double),
                        b'#' => PendingBond::Explicit(BondOrder::Triple),
                        b':' => PendingBond::Explicit(BondOrder::Aromatic),
                        _ => {
                            self.stereo_stripped = true;
                            PendingBond::Directional
                        }
                    };
                    pending = Some((bond, start));
                    branch_start = false;
                    self.pos += 1;
                    continue;
                }
                b'.' => {
                    if pending.is_some() || !branches.is_empty() {
                        return Err(err(start, "unexpected '.'"));
                    }
                    prev = None;
                    self.pos += 1;
                    continue;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(atom) = prev else {
                        return Err(err(start, "ring closure without a preceding atom"));
                    };
                    let label = self.ring_label()?;
                    let bond = pending.take().map(|(b, _)| b);
                    match rings.remove(&label) {
                        Some(open) => {
                            let order = match (open.bond, bond) {
                                (Some(PendingBond::Explicit(a)), Some(PendingBond::Explicit(b)))
                                    if a != b =>
                                {
                                    return Err(err(start, "conflicting ring-closure bonds"));
                                }
                                (Some(b), _) | (None, Some(b)) => Some(b),
                                (None, None) => None,
                            };
                            if open.atom == atom || self.mol.bond_between(open.atom, atom).is_some() {
                                return Err(err(start, "invalid ring closure"));
                            }
                            self.connect(open.atom, atom, order, start)?;
                        }
                        None => {
                            rings.insert(
                                label,
                                RingOpen {
                                    atom,
                                    bond,
                                    offset: start,
                                },
                            );
                        }
                    }
                    continue;
                }
                _ => {}
            }

            let atom = self.atom()?;
            if let Some(p) = prev {
                let bond = pending.take().map(|(b, _)| b);
                self.connect(p, atom, bond, start)?;
            } else if let Some((_, off)) = pending {
                return Err(err(off, "bond without a preceding atom"));
            }
            prev = Some(atom);
            branch_start = false;
        }

        if let Some((_, off)) = pending {
            return Err(err(off, "dangling bond"));
        }
        if let Some((_, off)) = branches.first() {
            return Err(err(*off, "unbalanced branch"));
        }
        if let Some(open) = rings.values().min_by_key(|r| r.offset) {
            return Err(err(open.offset, "unclosed ring"));
        }
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, ChemError> {
        let start = self.pos;
        if self.peek() == Some(b'%') {
            let digits = self.bytes.get(self.pos + 1..self.pos + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    Ok(u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0'))
                }
                _ => Err(err(start, "'%' must be followed by two digits")),
            }
        } else {
            let d = self.bytes[self.pos] - b'0';
            self.pos += 1;
            Ok(u32::from(d))
        }
    }

    fn connect(
        &mut self,
        a: usize,
        b: usize,
        bond: Option<PendingBond>,
        offset: usize,
    ) -> Result<(), ChemError> {
        let both_aromatic = self.mol.atom(a).aromatic && self.mol.atom(b).aromatic;
        let order = match bond {
            Some(PendingBond::Explicit(order)) => order,
            Some(PendingBond::Directional) => BondOrder::Single,
            None if both_aromatic => BondOrder::Aromatic,
            None => BondOrder::Single,
        };
        if order == BondOrder::Aromatic && !both_aromatic {
            return Err(err(offset, "aromatic bond between non-aromatic atoms"));
        }
        let idx = self
            .mol
            .add_bond(a, b, order)
            .map_err(|_| err(offset, "duplicate bond"))?;
        if bond.is_none() && both_aromatic {
            self.implicit_aromatic.push(idx);
        }
        Ok(())
    }

    fn atom(&mut self) -> Result<usize, ChemError> {
        let start = self.pos;
        let atom = if self.peek() == Some(b'[') {
            self.bracket_atom()?
        } else {
            let (element, aromatic) = self
                .element_symbol()
                .ok_or_else(|| self.unknown_symbol(start))?;
            if aromatic {
                Atom::aromatic(element)
            } else {
                Atom::new(element)
            }
        };
        self.atom_offsets.push(start);
        Ok(self.mol.add_atom(atom))
    }

    fn unknown_symbol(&self, offset: usize) -> ChemError {
        let c = self.text[offset..].chars().next().unwrap_or('?');
        if c == '*' {
            err(offset, "wildcard atoms are not supported")
        } else {
            err(offset, format!("unknown element or symbol '{c}'"))
        }
    }

    /// Reads an element symbol. Returns `(element, aromatic)`.
    fn element_symbol(&mut self) -> Option<(Element, bool)> {
        let rest = &self.bytes[self.pos..];
        let two = |s: &[u8]| rest.starts_with(s);
        let (element, aromatic, len) = if two(b"Cl") {
            (Element::Cl, false, 2)
        } else if two(b"Br") {
            (Element::Br, false, 2)
        } else {
            let c = *rest.first()?;
            let (e, arom) = match c {
                b'B' => (Element::B, false),
                b'C' => (Element::C, false),
                b'N' => (Element::N, false),
                b'O' => (Element::O, false),
                b'P' => (Element::P, false),
                b'S' => (Element::S, false),
                b'F' => (Element::F, false),
                b'I' => (Element::I, false),
                b'b' => (Element::B, true),
                b'c' => (Element::C, true),
                b'n' => (Element::N, true),
                b'o' => (Element::O, true),
                b'p' => (Element::P, true),
                b's' => (Element::S, true),
                _ => return None,
            };
            (e, arom, 1)
        };
        self.pos += len;
        Some((element, aromatic))
    }

    fn bracket_atom(&mut self) -> Result<Atom, ChemError> {
        let open = self.pos;
        self.pos += 1;
        if self.peek().is_some_and(|c| c.is_ascii_digit()) {
            return Err(err(self.pos, "isotopes are not supported"));
        }
        let sym_at = self.pos;
        let (element, aromatic) = self
            .element_symbol()
            .ok_or_else(|| self.unknown_symbol(sym_at))?;
        let mut atom = if aromatic {
            Atom::aromatic(element)
        } else {
            Atom::new(element)
        };
        while self.peek() == Some(b'@') {
            self.stereo_stripped = true;
            self.pos += 1;
        }
        let mut h = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            h = match self.peek() {
                Some(d @ b'0'..=b'9') => {
                    self.pos += 1;
                    d - b'0'
                }
                _ => 1,
            };
        }
        atom.explicit_h = Some(h);
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let unit: i8 = if sign == b'+' { 1 } else { -1 };
            let mut charge = unit;
            match self.peek() {
                Some(d @ b'1'..=b'9') => {
                    self.pos += 1;
                    charge = unit * (d - b'0') as i8;
                }
                _ => {
                    while self.peek() == Some(sign) {
                        self.pos += 1;
                        charge += unit;
                    }
                }
            }
            atom.formal_charge = charge;
        }
        match self.peek() {
            Some(b']') => {
                self.pos += 1;
                Ok(atom)
            }
            Some(b':') => Err(err(self.pos, "atom classes are not supported")),
            _ => Err(err(open, "unterminated bracket atom")),
        }
    }

    fn finish(mut self) -> Result<ParsedSmiles, ChemError> {
        let ring_bonds = self.mol.ring_bonds();
        for &bi in &self.implicit_aromatic {
            if !ring_bonds[bi] {
                self.mol.set_bond_order(bi, BondOrder::Single);
            }
        }
        let ring_bonds = self.mol.ring_bonds();
        for (bi, bond) in self.mol.bonds().iter().enumerate() {
            if bond.order == BondOrder::Aromatic && !ring_bonds[bi] {
                return Err(err(
                    self.atom_offsets[bond.a.max(bond.b)],
                    "aromatic bond outside a ring",
                ));
            }
        }
        let ring_atoms = self.mol.ring_atoms();
        for (i, atom) in self.mol.atoms().iter().enumerate() {
            if atom.aromatic && !ring_atoms[i] {
                return Err(err(self.atom_offsets[i], "aromatic atom outside a ring"));
            }
        }
        if let Some(i) = self.mol.valence_violation() {
            return Err(err(
                self.atom_offsets[i],
                format!("valence violation on {}", self.mol.atom(i).element),
            ));
        }
        Ok(ParsedSmiles {
            mol: self.mol,
            stereo_stripped: self.stereo_stripped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset_of(e: ChemError) -> usize {
        match e {
            ChemError::Parse { offset, .. } => offset,
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ethanol() {
        let m = parse_smiles("CCO").unwrap();
        assert_eq!(m.atom_count(), 3);
        assert_eq!(m.bond_count(), 2);
        assert_eq!(m.atom(2).element, Element::O);
        assert!(m.bonds().iter().all(|b| b.order == BondOrder::Single));
    }

    #[test]
    fn benzene_is_aromatic_ring() {
        let m = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(m.atom_count(), 6);
        assert!(m.atoms().iter().all(|a| a.aromatic && a.element == Element::C));
        assert_eq!(m.bond_count(), 6);
        assert!(m.bonds().iter().all(|b| b.order == BondOrder::Aromatic));
    }

    #[test]
    fn unbalanced_branch_reports_offset() {
        assert_eq!(offset_of(parse_smiles("C(").unwrap_err()), 1);
        assert_eq!(offset_of(parse_smiles("CC)C").unwrap_err()), 2);
    }

    #[test]
    fn unclosed_ring_reports_offset() {
        assert_eq!(offset_of(parse_smiles("C1CC").unwrap_err()), 1);
    }

    #[test]
    fn wildcard_and_unknown_elements_rejected() {
        assert!(parse_smiles("C*C").is_err());
        assert!(parse_smiles("[Xe]").is_err());
        assert!(parse_smiles("CZ").is_err());
    }

    #[test]
    fn valence_violation_names_atom_offset() {
        assert_eq!(offset_of(parse_smiles("CC(C)(C)(C)C").unwrap_err()), 1);
        assert!(parse_smiles("O=O=O").is_err());
    }

    #[test]
    fn stereo_is_stripped_with_flag() {
        let p = parse_smiles_with_flags("F/C=C/F").unwrap();
        assert!(p.stereo_stripped);
        assert_eq!(p.mol.atom_count(), 4);
        let p = parse_smiles_with_flags("N[C@@H](C)C(=O)O").unwrap();
        assert!(p.stereo_stripped);
        assert_eq!(p.mol.hydrogens(1), 1);
    }

    #[test]
    fn bracket_atoms_carry_charge_and_hydrogens() {
        let m = parse_smiles("C[N+](=O)[O-]").unwrap();
        assert_eq!(m.atom(1).formal_charge, 1);
        assert_eq!(m.atom(3).formal_charge, -1);
        assert_eq!(m.hydrogens(3), 0);
        let pyrrole = parse_smiles("c1cc[nH]c1").unwrap();
        assert_eq!(pyrrole.hydrogens(3), 1);
    }

    #[test]
    fn biaryl_bond_between_rings_is_single() {
        let m = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        let singles = m
            .bonds()
            .iter()
            .filter(|b| b.order == BondOrder::Single)
            .count();
        assert_eq!(singles, 1);
        let implicit = parse_smiles("c1ccccc1c1ccccc1").unwrap();
        assert_eq!(
            implicit
                .bonds()
                .iter()
                .filter(|b| b.order == BondOrder::Single)
                .count(),
            1
        );
    }

    #[test]
    fn aromatic_atom_outside_ring_rejected() {
        assert!(parse_smiles("cC").is_err());
    }

    #[test]
    fn percent_ring_labels() {
        let m = parse_smiles("C%12CCC%12").unwrap();
        assert_eq!(m.bond_count(), 4);
    }
}
