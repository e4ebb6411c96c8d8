//! Small bundled environments used by tests, examples and the CLI.

use crate::chemgraph::parse_smiles;
use crate::templates::bundled_templates;

use super::{EnvConfig, EnvOptions, MdpError};

#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub building_blocks: &'static [&'static str],
    /// Ids of bundled templates.
    pub templates: &'static [&'static str],
    pub max_len: usize,
    /// A molecule known to be reachable, for rediscovery runs.
    pub target: Option<&'static str>,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "tiny",
        building_blocks: &[
            "NCCCCCCO",
            "CCCCCCCCC(=O)O",
            "CCCCCCCCCC(=O)O",
            "CCCCCCCCCCC(=O)O",
            "OC(=O)c1ccccc1",
            "O=[N+]([O-])c1ccccc1",
        ],
        templates: &["amide_coupling", "esterification", "nitro_reduction"],
        max_len: 2,
        target: Some("CCCCCCCCCC(=O)NCCCCCCOC(=O)CCCCCCCCC"),
    },
    Preset {
        name: "aromatic",
        building_blocks: &[
            "OC(=O)c1ccccc1",
            "CCC(=O)O",
            "NCc1ccccc1",
            "NCCO",
            "BrCc1ccccc1",
            "O=[N+]([O-])c1ccccc1",
        ],
        templates: &["amide_coupling", "esterification", "nitro_reduction"],
        max_len: 2,
        target: Some("O=C(Nc1ccccc1)c1ccccc1"),
    },
    Preset {
        name: "pair",
        building_blocks: &["OC(=O)c1ccccc1", "CN"],
        templates: &["amide_coupling"],
        max_len: 1,
        target: Some("CNC(=O)c1ccccc1"),
    },
    Preset {
        name: "single",
        building_blocks: &["CCO"],
        templates: &[],
        max_len: 1,
        target: Some("CCO"),
    },
    Preset {
        name: "trap",
        building_blocks: &[
            // acids
            "OC(=O)c1ccccc1",
            "CCC(=O)O",
            "CC(=O)O",
            "OC(=O)c1ccc(Cl)cc1",
            "OC(=O)C1CCCCC1",
            "CCCC(=O)O",
            "OC(=O)c1ccco1",
            "COc1ccc(C(=O)O)cc1",
            "CC(C)C(=O)O",
            "OC(=O)Cc1ccccc1",
            "OC(=O)c1cccc(F)c1",
            "OC(=O)C1CC1",
            // amines and amino alcohols
            "NCc1ccccc1",
            "NCCO",
            "NCCCO",
            "Nc1ccccc1",
            "NC1CC1",
            "NCCCCO",
            "NCC(O)c1ccccc1",
            "NCc1ccc(F)cc1",
            "C1COCCN1",
            "C1CCNCC1",
            "NC1CCCCC1",
            "CC(N)CO",
            // alcohols
            "OCCc1ccccc1",
            "OCCCc1ccccc1",
            "CCO",
            "CC(C)O",
            "OC1CCCCC1",
        ],
        templates: &[
            "amide_coupling",
            "esterification",
            "boc_deprotection",
            "cbz_deprotection",
            "tfa_deprotection",
            "benzyl_ether_cleavage",
        ],
        max_len: 2,
        target: None,
    },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

impl Preset {
    /// Builds the environment; `max_len` in `options` is replaced by the preset's.
    pub fn build(&self, options: EnvOptions) -> Result<EnvConfig, MdpError> {
        let bbs = self
            .building_blocks
            .iter()
            .map(|s| parse_smiles(s))
            .collect::<Result<Vec<_>, _>>()?;
        let all = bundled_templates();
        let templates = self
            .templates
            .iter()
            .map(|id| {
                all.iter()
                    .find(|t| t.id == *id)
                    .cloned()
                    .ok_or_else(|| MdpError::Config(format!("no bundled template {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        EnvConfig::new(
            bbs,
            templates,
            EnvOptions {
                max_len: self.max_len,
                ..options
            },
        )
    }
}
