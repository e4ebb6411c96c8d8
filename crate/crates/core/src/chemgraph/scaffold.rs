use super::graph::{BondOrder, MolGraph};

/// Bemis-Murcko framework of a molecule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scaffold {
    pub mol: MolGraph,
    /// Set when the input had no rings and the scaffold is empty.
    pub acyclic: bool,
}

/// Ring systems plus linkers, with exocyclic double-bonded atoms on them kept.
///
/// Non-ring atoms of degree one are stripped until fixpoint; afterwards every
/// stripped atom that is double-bonded to a surviving atom is restored.
pub fn bemis_murcko_scaffold(mol: &MolGraph) -> Scaffold {
    let n = mol.atom_count();
    let ring = mol.ring_atoms();
    if !ring.iter().any(|&r| r) {
        return Scaffold {
            mol: MolGraph::new(),
            acyclic: true,
        };
    }
    let mut removed = vec![false; n];
    let mut degree: Vec<usize> = (0..n).map(|i| mol.degree(i)).collect();
    let mut queue: Vec<usize> = (0..n).filter(|&i| !ring[i] && degree[i] <= 1).collect();
    while let Some(i) = queue.pop() {
        if removed[i] {
            continue;
        }
        removed[i] = true;
        for nb in mol.neighbors(i) {
            if removed[nb] {
                continue;
            }
            degree[nb] -= 1;
            if !ring[nb] && degree[nb] <= 1 {
                queue.push(nb);
            }
        }
    }
    let restore: Vec<usize> = (0..n)
        .filter(|&i| removed[i] && mol.degree(i) == 1)
        .filter(|&i| {
            let &(nb, bi) = &mol.incident(i)[0];
            !removed[nb] && mol.bonds()[bi].order == BondOrder::Double
        })
        .collect();
    for i in restore {
        removed[i] = false;
    }
    let mut core = mol.without_atoms(&removed);
    // hydrogens on the framework follow from its own bonds
    for i in 0..core.atom_count() {
        let atom = core.atom_mut(i);
        if atom.formal_charge == 0 && !atom.aromatic {
            atom.explicit_h = None;
        }
    }
    Scaffold {
        mol: core,
        acyclic: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemgraph::{parse_smiles, write_canonical_smiles};

    fn scaffold_smiles(s: &str) -> String {
        let sc = bemis_murcko_scaffold(&parse_smiles(s).unwrap());
        write_canonical_smiles(&sc.mol).unwrap()
    }

    fn canon(s: &str) -> String {
        write_canonical_smiles(&parse_smiles(s).unwrap()).unwrap()
    }

    #[test]
    fn benzene_is_its_own_scaffold() {
        assert_eq!(scaffold_smiles("c1ccccc1"), canon("c1ccccc1"));
    }

    #[test]
    fn toluene_reduces_to_benzene() {
        assert_eq!(scaffold_smiles("Cc1ccccc1"), canon("c1ccccc1"));
    }

    #[test]
    fn acyclic_gives_empty_flagged() {
        let sc = bemis_murcko_scaffold(&parse_smiles("CCCC").unwrap());
        assert!(sc.acyclic);
        assert!(sc.mol.is_empty());
    }

    #[test]
    fn linker_between_rings_kept() {
        assert_eq!(
            scaffold_smiles("CCc1ccc(CCc2ccccc2)cc1"),
            canon("c1ccc(CCc2ccccc2)cc1")
        );
    }

    #[test]
    fn exocyclic_carbonyl_on_ring_kept_side_chain_carbonyl_dropped() {
        assert_eq!(scaffold_smiles("CN1CCCC1=O"), canon("O=C1CCCN1"));
        assert_eq!(scaffold_smiles("CC(=O)c1ccccc1"), canon("c1ccccc1"));
        assert_eq!(
            scaffold_smiles("c1ccccc1C(=O)Nc1ccccc1"),
            canon("O=C(Nc1ccccc1)c1ccccc1")
        );
    }
}
