//! Reaction templates in a restricted SMARTS dialect, subgraph matching and
//! forward/backward template application.

mod matcher;
mod pattern;
mod reaction;

use thiserror::Error;

pub use matcher::{is_valid_embedding, match_pattern, Embedding};
pub use pattern::{
    parse_pattern, AtomPattern, BondPattern, ElementConstraint, PatternBond, PatternGraph,
};
pub use reaction::{
    Arity, PatternAtomRef, Product, ReactantSet, ReactionTemplate, TemplateEdits,
};

/// Template file shipped with the crate.
pub const BUNDLED_TEMPLATES: &str = include_str!("../../data/templates.tsv");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TemplateError {
    #[error("template parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("map index {0} used more than once")]
    DuplicateMap(u32),
    #[error("wildcard atom in reactant pattern {reactant}")]
    ReactantWildcard { reactant: usize },
    #[error("unmapped product atom {0} has no reactant counterpart")]
    UnmappedProductAtom(usize),
    #[error("product map index {0} does not appear in any reactant")]
    UnknownProductMap(u32),
    #[error("template expects {expected} reactants, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("template not applicable")]
    NotApplicable,
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: Box<TemplateError>,
    },
}

pub fn parse_template(text: &str) -> Result<ReactionTemplate, TemplateError> {
    ReactionTemplate::parse("", text)
}

/// Reads `id<TAB>template` lines; blank lines and `#` comments are skipped.
pub fn read_templates(text: &str) -> Result<Vec<ReactionTemplate>, TemplateError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let record = |source| TemplateError::Record {
            line: lineno + 1,
            source: Box::new(source),
        };
        let (id, expr) = line.split_once('\t').ok_or_else(|| {
            record(TemplateError::Parse {
                offset: 0,
                message: "expected id<TAB>template".into(),
            })
        })?;
        out.push(ReactionTemplate::parse(id.trim(), expr.trim()).map_err(record)?);
    }
    Ok(out)
}

pub fn bundled_templates() -> Vec<ReactionTemplate> {
    read_templates(BUNDLED_TEMPLATES).expect("bundled templates parse")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_set_parses() {
        let ts = bundled_templates();
        assert_eq!(ts.len(), 13);
        assert_eq!(ts.iter().filter(|t| t.arity() == Arity::Uni).count(), 5);
    }

    #[test]
    fn bad_line_reports_number() {
        let err = read_templates("# c\nok\t[C:1]O>>[C:1]\nbad\t[C:1>>C\n").unwrap_err();
        assert!(matches!(err, TemplateError::Record { line: 3, .. }));
    }
}
