//! Pattern graphs: a restricted SMARTS subset used on both sides of a
//! reaction template.

use std::collections::BTreeMap;

use crate::chemgraph::{BondOrder, Element, MolGraph};

use super::TemplateError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementConstraint {
    Element(Element),
    /// `#n`: element given by atomic number, aromaticity unconstrained.
    AtomicNumber(u8),
}

impl ElementConstraint {
    pub fn element(self) -> Element {
        match self {
            ElementConstraint::Element(e) => e,
            ElementConstraint::AtomicNumber(z) => {
                Element::from_atomic_number(z).expect("validated at parse time")
            }
        }
    }
}

/// Conjunction of atom primitives. A pattern atom with no constraint at all is
/// a wildcard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AtomPattern {
    pub element: Option<ElementConstraint>,
    pub aromatic: Option<bool>,
    pub charge: Option<i8>,
    pub hydrogens: Option<u8>,
    pub connectivity: Option<u8>,
    pub degree: Option<u8>,
    pub in_ring: Option<bool>,
    pub map: Option<u32>,
}

impl AtomPattern {
    pub fn is_wildcard(&self) -> bool {
        self.element.is_none()
            && self.aromatic.is_none()
            && self.charge.is_none()
            && self.hydrogens.is_none()
            && self.connectivity.is_none()
            && self.degree.is_none()
            && self.in_ring.is_none()
    }

    /// Whether molecule atom `i` satisfies every primitive.
    pub fn matches(&self, mol: &MolGraph, ring_atoms: &[bool], i: usize) -> bool {
        let atom = mol.atom(i);
        if let Some(e) = self.element {
            if atom.element != e.element() {
                return false;
            }
        }
        if self.aromatic.is_some_and(|a| a != atom.aromatic) {
            return false;
        }
        if self.charge.is_some_and(|q| q != atom.formal_charge) {
            return false;
        }
        if self.hydrogens.is_some_and(|h| h != mol.hydrogens(i)) {
            return false;
        }
        if self
            .connectivity
            .is_some_and(|x| usize::from(x) != mol.connectivity(i))
        {
            return false;
        }
        if self.degree.is_some_and(|d| usize::from(d) != mol.degree(i)) {
            return false;
        }
        if self.in_ring.is_some_and(|r| r != ring_atoms[i]) {
            return false;
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondPattern {
    Single,
    Double,
    Triple,
    Aromatic,
    Any,
    /// No symbol written: single or aromatic.
    Implicit,
}

impl BondPattern {
    pub fn matches(self, order: BondOrder) -> bool {
        match self {
            BondPattern::Single => order == BondOrder::Single,
            BondPattern::Double => order == BondOrder::Double,
            BondPattern::Triple => order == BondOrder::Triple,
            BondPattern::Aromatic => order == BondOrder::Aromatic,
            BondPattern::Any => true,
            BondPattern::Implicit => matches!(order, BondOrder::Single | BondOrder::Aromatic),
        }
    }

    /// The concrete order this pattern names, if it names exactly one.
    pub fn explicit_order(self) -> Option<BondOrder> {
        match self {
            BondPattern::Single => Some(BondOrder::Single),
            BondPattern::Double => Some(BondOrder::Double),
            BondPattern::Triple => Some(BondOrder::Triple),
            BondPattern::Aromatic => Some(BondOrder::Aromatic),
            BondPattern::Any | BondPattern::Implicit => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternBond {
    pub a: usize,
    pub b: usize,
    pub kind: BondPattern,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatternGraph {
    atoms: Vec<AtomPattern>,
    bonds: Vec<PatternBond>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl PatternGraph {
    pub fn atoms(&self) -> &[AtomPattern] {
        &self.atoms
    }

    pub fn atom_mut(&mut self, i: usize) -> &mut AtomPattern {
        &mut self.atoms[i]
    }

    pub fn bonds(&self) -> &[PatternBond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn incident(&self, i: usize) -> &[(usize, usize)] {
        &self.adjacency[i]
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&PatternBond> {
        self.adjacency[a]
            .iter()
            .find(|&&(n, _)| n == b)
            .map(|&(_, bi)| &self.bonds[bi])
    }

    pub fn add_atom(&mut self, atom: AtomPattern) -> usize {
        self.atoms.push(atom);
        self.adjacency.push(Vec::new());
        self.atoms.len() - 1
    }

    pub fn add_bond(&mut self, a: usize, b: usize, kind: BondPattern) {
        let idx = self.bonds.len();
        self.bonds.push(PatternBond { a, b, kind });
        self.adjacency[a].push((b, idx));
        self.adjacency[b].push((a, idx));
    }

    /// Atom index carrying map number `map`.
    pub fn mapped_atom(&self, map: u32) -> Option<usize> {
        self.atoms.iter().position(|a| a.map == Some(map))
    }

    pub fn maps(&self) -> impl Iterator<Item = u32> + '_ {
        self.atoms.iter().filter_map(|a| a.map)
    }

    pub fn is_connected(&self) -> bool {
        if self.atoms.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.atoms.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn perr(offset: usize, message: impl Into<String>) -> TemplateError {
    TemplateError::Parse {
        offset,
        message: message.into(),
    }
}

/// Parses one pattern expression (no `.` and no `>>`). `base` is the byte
/// offset of `text` inside the full template, for error reporting.
pub fn parse_pattern(text: &str, base: usize) -> Result<PatternGraph, TemplateError> {
    let bytes = text.as_bytes();
    let mut pos = 0usize;
    let mut g = PatternGraph::default();
    let mut prev: Option<usize> = None;
    let mut pending: Option<BondPattern> = None;
    let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
    let mut rings: BTreeMap<u8, (usize, Option<BondPattern>, usize)> = BTreeMap::new();

    while pos < bytes.len() {
        let c = bytes[pos];
        let at = base + pos;
        match c {
            b'(' => {
                if prev.is_none() {
                    return Err(perr(at, "branch must follow an atom"));
                }
                branches.push((prev, at));
                pos += 1;
            }
            b')' => {
                let (anchor, _) = branches.pop().ok_or_else(|| perr(at, "unbalanced ')'"))?;
                prev = anchor;
                pos += 1;
            }
            b'-' | b'=' | b'#' | b':' | b'~' => {
                if pending.is_some() {
                    return Err(perr(at, "two consecutive bond symbols"));
                }
                pending = Some(match c {
                    b'-' => BondPattern::Single,
                    b'=' => BondPattern::Double,
                    b'#' => BondPattern::Triple,
                    b':' => BondPattern::Aromatic,
                    _ => BondPattern::Any,
                });
                pos += 1;
            }
            b'0'..=b'9' => {
                let atom = prev.ok_or_else(|| perr(at, "ring closure without atom"))?;
                let label = c - b'0';
                let bond = pending.take();
                match rings.remove(&label) {
                    Some((open, open_bond, _)) => {
                        let kind = open_bond.or(bond).unwrap_or(BondPattern::Implicit);
                        g.add_bond(open, atom, kind);
                    }
                    None => {
                        rings.insert(label, (atom, bond, at));
                    }
                }
                pos += 1;
            }
            b'.' | b'>' => return Err(perr(at, "unexpected separator inside a pattern")),
            _ => {
                let (atom, len) = parse_atom(&text[pos..], at)?;
                let idx = g.add_atom(atom);
                if let Some(p) = prev {
                    g.add_bond(p, idx, pending.take().unwrap_or(BondPattern::Implicit));
                } else if pending.is_some() {
                    return Err(perr(at, "bond without a preceding atom"));
                }
                prev = Some(idx);
                pos += len;
            }
        }
    }
    if let Some((_, off)) = branches.first() {
        return Err(perr(*off, "unbalanced branch"));
    }
    if let Some((_, _, off)) = rings.values().next() {
        return Err(perr(*off, "unclosed ring"));
    }
    if pending.is_some() {
        return Err(perr(base + text.len(), "dangling bond"));
    }
    if g.atom_count() == 0 {
        return Err(perr(base, "empty pattern"));
    }
    let mut seen = Vec::new();
    for m in g.maps() {
        if seen.contains(&m) {
            return Err(TemplateError::DuplicateMap(m));
        }
        seen.push(m);
    }
    Ok(g)
}

/// Parses a bare or bracket atom; returns the pattern and bytes consumed.
fn parse_atom(text: &str, at: usize) -> Result<(AtomPattern, usize), TemplateError> {
    let bytes = text.as_bytes();
    if bytes[0] == b'[' {
        let close = text
            .find(']')
            .ok_or_else(|| perr(at, "unterminated bracket atom"))?;
        let atom = parse_bracket(&text[1..close], at + 1)?;
        return Ok((atom, close + 1));
    }
    if bytes[0] == b'*' {
        return Ok((AtomPattern::default(), 1));
    }
    let (element, aromatic, len) =
        element_symbol(bytes).ok_or_else(|| perr(at, "unknown atom symbol"))?;
    Ok((
        AtomPattern {
            element: Some(ElementConstraint::Element(element)),
            aromatic: Some(aromatic),
            ..AtomPattern::default()
        },
        len,
    ))
}

fn element_symbol(bytes: &[u8]) -> Option<(Element, bool, usize)> {
    if bytes.starts_with(b"Cl") {
        return Some((Element::Cl, false, 2));
    }
    if bytes.starts_with(b"Br") {
        return Some((Element::Br, false, 2));
    }
    let (e, arom) = match *bytes.first()? {
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
    Some((e, arom, 1))
}

fn read_number(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    (start != *pos).then(|| {
        std::str::from_utf8(&bytes[start..*pos])
            .expect("ascii digits")
            .parse()
            .expect("digits parse")
    })
}

fn parse_bracket(body: &str, at: usize) -> Result<AtomPattern, TemplateError> {
    let bytes = body.as_bytes();
    let mut pos = 0usize;
    let mut atom = AtomPattern::default();
    let small = |n: u32, off: usize| u8::try_from(n).map_err(|_| perr(off, "count out of range"));
    while pos < bytes.len() {
        let off = at + pos;
        match bytes[pos] {
            b';' | b'&' => pos += 1,
            b'*' => pos += 1,
            b'#' => {
                pos += 1;
                let z = read_number(bytes, &mut pos).ok_or_else(|| perr(off, "'#' needs a number"))?;
                let z = small(z, off)?;
                if Element::from_atomic_number(z).is_none() {
                    return Err(perr(off, format!("unsupported atomic number {z}")));
                }
                atom.element = Some(ElementConstraint::AtomicNumber(z));
            }
            b'H' => {
                pos += 1;
                atom.hydrogens = Some(small(read_number(bytes, &mut pos).unwrap_or(1), off)?);
            }
            b'X' => {
                pos += 1;
                let x = read_number(bytes, &mut pos).ok_or_else(|| perr(off, "'X' needs a number"))?;
                atom.connectivity = Some(small(x, off)?);
            }
            b'D' => {
                pos += 1;
                let d = read_number(bytes, &mut pos).ok_or_else(|| perr(off, "'D' needs a number"))?;
                atom.degree = Some(small(d, off)?);
            }
            b'R' => {
                pos += 1;
                atom.in_ring = Some(read_number(bytes, &mut pos).is_none_or(|n| n > 0));
            }
            b'!' => {
                if bytes.get(pos + 1) == Some(&b'R') {
                    pos += 2;
                    atom.in_ring = Some(false);
                } else {
                    return Err(perr(off, "only '!R' negation is supported"));
                }
            }
            b'$' => return Err(perr(off, "recursive patterns are not supported")),
            b',' => return Err(perr(off, "disjunctions are not supported")),
            sign @ (b'+' | b'-') => {
                pos += 1;
                let unit: i8 = if sign == b'+' { 1 } else { -1 };
                let charge = match read_number(bytes, &mut pos) {
                    Some(n) => unit * i8::try_from(n).map_err(|_| perr(off, "charge out of range"))?,
                    None => {
                        let mut q = unit;
                        while bytes.get(pos) == Some(&sign) {
                            pos += 1;
                            q += unit;
                        }
                        q
                    }
                };
                atom.charge = Some(charge);
            }
            b':' => {
                pos += 1;
                let m = read_number(bytes, &mut pos).ok_or_else(|| perr(off, "':' needs a map number"))?;
                if m == 0 {
                    return Err(perr(off, "map numbers must be positive"));
                }
                atom.map = Some(m);
            }
            _ => {
                let (e, aromatic, len) = element_symbol(&bytes[pos..])
                    .ok_or_else(|| perr(off, "unknown primitive"))?;
                atom.element = Some(ElementConstraint::Element(e));
                atom.aromatic = Some(aromatic);
                pos += len;
            }
        }
    }
    Ok(atom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bracket_primitives() {
        let g = parse_pattern("[C;H1:2]", 0).unwrap();
        let a = g.atoms()[0];
        assert_eq!(a.element, Some(ElementConstraint::Element(Element::C)));
        assert_eq!(a.aromatic, Some(false));
        assert_eq!(a.hydrogens, Some(1));
        assert_eq!(a.map, Some(2));

        let g = parse_pattern("[#7;X3;R;+1]", 0).unwrap();
        let a = g.atoms()[0];
        assert_eq!(a.element, Some(ElementConstraint::AtomicNumber(7)));
        assert_eq!(a.aromatic, None);
        assert_eq!(a.connectivity, Some(3));
        assert_eq!(a.in_ring, Some(true));
        assert_eq!(a.charge, Some(1));

        let g = parse_pattern("[O-]", 0).unwrap();
        assert_eq!(g.atoms()[0].charge, Some(-1));
        let g = parse_pattern("[CH2:4]", 0).unwrap();
        assert_eq!(g.atoms()[0].hydrogens, Some(2));
    }

    #[test]
    fn bonds_and_branches() {
        let g = parse_pattern("[C:1](=O)[OH]", 0).unwrap();
        assert_eq!(g.atom_count(), 3);
        assert_eq!(g.bonds()[0].kind, BondPattern::Double);
        assert_eq!(g.bonds()[1].kind, BondPattern::Implicit);
        let ring = parse_pattern("c1ccccc1", 0).unwrap();
        assert_eq!(ring.bonds().len(), 6);
    }

    #[test]
    fn rejects_recursion_and_duplicate_maps() {
        assert!(matches!(
            parse_pattern("[$(CO)]", 0),
            Err(TemplateError::Parse { .. })
        ));
        assert!(matches!(
            parse_pattern("[C:1][C:1]", 0),
            Err(TemplateError::DuplicateMap(1))
        ));
    }

    #[test]
    fn wildcard_has_no_constraints() {
        let g = parse_pattern("[*:1]C", 0).unwrap();
        assert!(g.atoms()[0].is_wildcard());
        assert!(!g.atoms()[1].is_wildcard());
    }
}
