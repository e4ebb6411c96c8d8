//! Molecular graphs, SMILES input/output, circular fingerprints and
//! Bemis-Murcko scaffolds.

mod canon;
mod element;
mod fingerprint;
mod graph;
mod scaffold;
mod smiles;

use thiserror::Error;

pub use canon::{canonical_ranks, write_canonical_smiles};
pub use element::Element;
pub use fingerprint::{
    fnv1a64, morgan_fingerprint, tanimoto, Fingerprint, DEFAULT_NBITS, DEFAULT_RADIUS,
};
pub use graph::{Atom, Bond, BondOrder, MolGraph};
pub use scaffold::{bemis_murcko_scaffold, Scaffold};
pub use smiles::{parse_smiles, parse_smiles_with_flags, ParsedSmiles};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChemError {
    #[error("SMILES parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid bond between atoms {a} and {b}")]
    InvalidBond { a: usize, b: usize },
    #[error("duplicate bond between atoms {a} and {b}")]
    DuplicateBond { a: usize, b: usize },
    #[error("valence violation on atom {atom} ({element})")]
    Valence { atom: usize, element: Element },
    #[error("molecule has {0} fragments; expected one")]
    MultiFragment(usize),
    #[error("fingerprint length {0} must be a power of two >= 64")]
    FingerprintSize(usize),
    #[error("fingerprint lengths differ: {0} vs {1}")]
    FingerprintMismatch(usize, usize),
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: Box<ChemError>,
    },
}

pub fn heavy_atom_count(mol: &MolGraph) -> usize {
    mol.heavy_atom_count()
}

/// One entry of a building-block file.
#[derive(Debug, Clone)]
pub struct BuildingBlockRecord {
    pub smiles: String,
    pub id: Option<String>,
    pub mol: MolGraph,
}

/// Reads `SMILES<TAB>optional-id` lines; blank lines and `#` comments are skipped.
pub fn read_building_blocks(text: &str) -> Result<Vec<BuildingBlockRecord>, ChemError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let smiles = cols.next().unwrap_or("").trim().to_string();
        let id = cols
            .next()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        let mol = parse_smiles(&smiles).map_err(|e| ChemError::Record {
            line: lineno + 1,
            source: Box::new(e),
        })?;
        out.push(BuildingBlockRecord { smiles, id, mol });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heavy_atoms() {
        assert_eq!(heavy_atom_count(&parse_smiles("CCO").unwrap()), 3);
        assert_eq!(heavy_atom_count(&MolGraph::new()), 0);
        assert_eq!(heavy_atom_count(&parse_smiles("c1ccccc1").unwrap()), 6);
    }

    #[test]
    fn building_block_file() {
        let text = "# header\nCCO\tethanol\n\nc1ccccc1\n";
        let bbs = read_building_blocks(text).unwrap();
        assert_eq!(bbs.len(), 2);
        assert_eq!(bbs[0].id.as_deref(), Some("ethanol"));
        assert_eq!(bbs[1].id, None);
        let err = read_building_blocks("CCO\nC(\n").unwrap_err();
        assert!(matches!(err, ChemError::Record { line: 2, .. }));
    }
}
