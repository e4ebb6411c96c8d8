use serde::{Deserialize, Serialize};

use super::graph::MolGraph;
use super::ChemError;

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_NBITS: usize = 2048;

/// Fixed-length binary fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    words: Vec<u64>,
    nbits: usize,
    radius: usize,
}

impl Fingerprint {
    pub fn zeros(nbits: usize, radius: usize) -> Self {
        Fingerprint {
            words: vec![0; nbits.div_ceil(64)],
            nbits,
            radius,
        }
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1u64 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        (self.words[bit / 64] >> (bit % 64)) & 1 == 1
    }

    pub fn popcount(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Indices of set bits in increasing order.
    pub fn on_bits(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.popcount());
        for (wi, &w) in self.words.iter().enumerate() {
            let mut w = w;
            while w != 0 {
                let tz = w.trailing_zeros() as usize;
                out.push(wi * 64 + tz);
                w &= w - 1;
            }
        }
        out
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn from_bits(nbits: usize, radius: usize, bits: &[usize]) -> Self {
        let mut fp = Fingerprint::zeros(nbits, radius);
        for &b in bits {
            fp.set(b % nbits);
        }
        fp
    }
}

/// 64-bit FNV-1a over little-endian words. Stable across platforms and
/// releases, which `std::hash` does not promise.
pub fn fnv1a64(words: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for w in words {
        for byte in w.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

/// ECFP-style circular fingerprint folded to `nbits`.
pub fn morgan_fingerprint(
    mol: &MolGraph,
    radius: usize,
    nbits: usize,
) -> Result<Fingerprint, ChemError> {
    if nbits < 64 || !nbits.is_power_of_two() {
        return Err(ChemError::FingerprintSize(nbits));
    }
    let mut fp = Fingerprint::zeros(nbits, radius);
    let n = mol.atom_count();
    let mut ids: Vec<u64> = (0..n)
        .map(|i| {
            let a = mol.atom(i);
            fnv1a64(&[
                u64::from(a.element.atomic_number()),
                mol.degree(i) as u64,
                a.formal_charge as i64 as u64,
                u64::from(a.aromatic),
                u64::from(mol.hydrogens(i)),
            ])
        })
        .collect();
    let fold = |id: u64| (id % nbits as u64) as usize;
    for &id in &ids {
        fp.set(fold(id));
    }
    for iteration in 1..=radius {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut env: Vec<(u64, u64)> = mol
                    .incident(i)
                    .iter()
                    .map(|&(nb, bi)| (u64::from(mol.bonds()[bi].order.code()), ids[nb]))
                    .collect();
                env.sort_unstable();
                let mut words = Vec::with_capacity(2 + 2 * env.len());
                words.push(iteration as u64);
                words.push(ids[i]);
                for (order, id) in env {
                    words.push(order);
                    words.push(id);
                }
                fnv1a64(&words)
            })
            .collect();
        ids = next;
        for &id in &ids {
            fp.set(fold(id));
        }
    }
    Ok(fp)
}

/// |a ∧ b| / |a ∨ b|, defined as 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, ChemError> {
    if a.nbits != b.nbits {
        return Err(ChemError::FingerprintMismatch(a.nbits, b.nbits));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(f64::from(inter) / f64::from(union))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemgraph::parse_smiles;

    fn fp(s: &str, r: usize) -> Fingerprint {
        morgan_fingerprint(&parse_smiles(s).unwrap(), r, 2048).unwrap()
    }

    #[test]
    fn order_independent() {
        assert_eq!(fp("CCO", 2), fp("OCC", 2));
        assert_eq!(fp("c1ccccc1O", 2), fp("Oc1ccccc1", 2));
    }

    #[test]
    fn empty_graph_gives_zero_vector() {
        let z = morgan_fingerprint(&MolGraph::new(), 2, 2048).unwrap();
        assert_eq!(z.popcount(), 0);
    }

    #[test]
    fn oxygen_and_nitrogen_differ_at_radius_zero() {
        let a = fp("CCO", 0);
        let b = fp("CCN", 0);
        let diff: u32 = a
            .words()
            .iter()
            .zip(b.words())
            .map(|(x, y)| (x ^ y).count_ones())
            .sum();
        assert!(diff >= 1);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let m = parse_smiles("C").unwrap();
        assert!(morgan_fingerprint(&m, 2, 100).is_err());
        assert!(morgan_fingerprint(&m, 2, 32).is_err());
    }

    #[test]
    fn tanimoto_definition() {
        let a = Fingerprint::from_bits(64, 0, &[1, 2, 3]);
        let b = Fingerprint::from_bits(64, 0, &[2, 3, 4]);
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.5);
        assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        let c = Fingerprint::from_bits(64, 0, &[10]);
        assert_eq!(tanimoto(&a, &c).unwrap(), 0.0);
        let z = Fingerprint::zeros(64, 0);
        assert_eq!(tanimoto(&z, &z).unwrap(), 1.0);
        assert!(tanimoto(&a, &Fingerprint::zeros(128, 0)).is_err());
    }
}
