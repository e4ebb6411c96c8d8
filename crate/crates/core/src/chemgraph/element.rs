use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Elements supported by the restricted SMILES grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
}

impl Element {
    pub const ALL: [Element; 10] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::P,
        Element::S,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn atomic_number(self) -> u8 {
        match self {
            Element::B => 5,
            Element::C => 6,
            Element::N => 7,
            Element::O => 8,
            Element::P => 15,
            Element::S => 16,
            Element::F => 9,
            Element::Cl => 17,
            Element::Br => 35,
            Element::I => 53,
        }
    }

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        Element::ALL.into_iter().find(|e| e.atomic_number() == z)
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    /// Lowercase form used for aromatic atoms, if the element may be aromatic.
    pub fn aromatic_symbol(self) -> Option<&'static str> {
        match self {
            Element::B => Some("b"),
            Element::C => Some("c"),
            Element::N => Some("n"),
            Element::O => Some("o"),
            Element::P => Some("p"),
            Element::S => Some("s"),
            _ => None,
        }
    }

    /// Normal valences of the neutral element, smallest first.
    pub fn default_valences(self) -> &'static [u8] {
        match self {
            Element::B => &[3],
            Element::C => &[4],
            Element::N => &[3, 5],
            Element::O => &[2],
            Element::P => &[3, 5],
            Element::S => &[2, 4, 6],
            Element::F => &[1],
            Element::Cl | Element::Br | Element::I => &[1, 3, 5, 7],
        }
    }

    /// Allowed valences once a formal charge is applied (isoelectronic shift).
    pub fn valences(self, charge: i8) -> Vec<u8> {
        if charge == 0 {
            return self.default_valences().to_vec();
        }
        let q = i16::from(charge);
        self.default_valences()
            .iter()
            .filter_map(|&v| {
                let v = i16::from(v);
                let shifted = match self {
                    Element::C => v - q.abs(),
                    Element::B => v - q,
                    _ => v + q,
                };
                (shifted >= 0).then_some(shifted as u8)
            })
            .collect()
    }

    /// Whether an aromatic atom of this element contributes one electron to the
    /// pi system (and so consumes one valence unit beyond its sigma bonds).
    pub(crate) fn aromatic_pi_unit(self) -> bool {
        matches!(self, Element::B | Element::C | Element::N | Element::P)
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Element {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Element::ALL
            .into_iter()
            .find(|e| e.symbol() == s)
            .ok_or(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charged_valences_follow_isoelectronic_rule() {
        assert_eq!(Element::N.valences(1), vec![4, 6]);
        assert_eq!(Element::O.valences(-1), vec![1]);
        assert_eq!(Element::C.valences(-1), vec![3]);
        assert_eq!(Element::B.valences(-1), vec![4]);
    }

    #[test]
    fn symbols_round_trip() {
        for e in Element::ALL {
            assert_eq!(e.symbol().parse::<Element>(), Ok(e));
            assert_eq!(Element::from_atomic_number(e.atomic_number()), Some(e));
        }
    }
}
