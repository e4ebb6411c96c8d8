//! Generators and brute-force oracles shared by the property tests and the
//! acceptance harness.
#![allow(dead_code)]

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synflow::chemgraph::{parse_smiles, write_canonical_smiles, Atom, BondOrder, Element, MolGraph};
use synflow::mdp::*;
use synflow::templates::{bundled_templates, PatternGraph, ReactionTemplate};

/// Building blocks covering every bundled template, plus a few larger molecules.
pub const POOL: &[&str] = &[
    "OC(=O)c1ccccc1",
    "CCC(=O)O",
    "CC(=O)O",
    "OC(=O)c1ccc(Cl)cc1",
    "OC(=O)C1CC1",
    "OC(=O)c1ccco1",
    "NCc1ccccc1",
    "NCCO",
    "Nc1ccccc1",
    "NC1CC1",
    "CN",
    "C1CCNCC1",
    "CC(N)CO",
    "CCO",
    "OCCc1ccccc1",
    "Oc1ccccc1",
    "Oc1ccc(C)cc1",
    "BrCc1ccccc1",
    "BrCC",
    "CS(=O)(=O)Cl",
    "O=S(=O)(Cl)c1ccccc1",
    "O=C=NCc1ccccc1",
    "O=C=Nc1ccccc1",
    "Brc1ccccc1",
    "Brc1ccncc1",
    "OB(O)c1ccccc1",
    "OB(O)c1ccsc1",
    "O=Cc1ccccc1",
    "CC=O",
    "O=[N+]([O-])c1ccccc1",
    "CC(C)(C)OC(=O)NCCO",
    "CC(C)(C)OC(=O)N1CCNCC1",
    "O=C(NCC)OCc1ccccc1",
    "O=C(NCCO)C(F)(F)F",
    "OCCOCc1ccccc1",
    "NCCCCCCO",
    "CCCCCCCCC(=O)O",
];

/// Larger molecules used only as sources for random substructures.
pub const LARGE: &[&str] = &[
    "CC(C)Cc1ccc(C(C)C(=O)O)cc1",
    "CN1C(=O)CN=C(c2ccccc2)c2cc(Cl)ccc21",
    "O=C(O)c1ccccc1OC(C)=O",
    "Clc1ccc2c(c1)C(c1ccccc1)=NCC(=O)N2",
    "O=C(Nc1ccc(O)cc1)C",
    "C1CC2CCC1C2",
    "c1ccc2ccccc2c1",
    "O=C1CCCN1",
    "N#CC(=O)N",
    "C=CC(=O)OC",
    "O=c1cc[nH]cc1",
];

pub fn mol(s: &str) -> MolGraph {
    parse_smiles(s).unwrap_or_else(|e| panic!("{s}: {e}"))
}

fn max_valence(e: Element) -> u8 {
    match e {
        Element::C => 4,
        Element::N => 3,
        Element::O | Element::S => 2,
        _ => 1,
    }
}

/// Random connected molecule with `n` atoms built atom by atom, with
/// occasional double bonds and ring closures.
pub fn random_graph(rng: &mut impl Rng, n: usize) -> MolGraph {
    const ELEMENTS: [Element; 8] = [
        Element::C,
        Element::C,
        Element::C,
        Element::C,
        Element::N,
        Element::O,
        Element::S,
        Element::Cl,
    ];
    let mut m = MolGraph::new();
    let mut free: Vec<u8> = Vec::new();
    let first = *ELEMENTS[..4].choose(rng).unwrap();
    m.add_atom(Atom::new(first));
    free.push(max_valence(first));
    while m.atom_count() < n {
        let open: Vec<usize> = (0..m.atom_count()).filter(|&i| free[i] > 0).collect();
        let Some(&a) = open.choose(rng) else { break };
        let e = *ELEMENTS.choose(rng).unwrap();
        let order = if free[a] >= 2 && max_valence(e) >= 2 && rng.random_bool(0.2) {
            BondOrder::Double
        } else {
            BondOrder::Single
        };
        let k = order.valence();
        let b = m.add_atom(Atom::new(e));
        free.push(max_valence(e) - k);
        free[a] -= k;
        m.add_bond(a, b, order).unwrap();
    }
    for _ in 0..2 {
        if !rng.random_bool(0.4) {
            continue;
        }
        let open: Vec<usize> = (0..m.atom_count()).filter(|&i| free[i] > 0).collect();
        if open.len() < 2 {
            break;
        }
        let pick: Vec<usize> = open.choose_multiple(rng, 2).copied().collect();
        let (a, b) = (pick[0], pick[1]);
        if m.bond_between(a, b).is_none() {
            m.add_bond(a, b, BondOrder::Single).unwrap();
            free[a] -= 1;
            free[b] -= 1;
        }
    }
    m
}

/// Connected induced subgraph of `m` grown from a random atom, up to `n` atoms.
pub fn random_fragment(rng: &mut impl Rng, m: &MolGraph, n: usize) -> MolGraph {
    let mut keep = vec![rng.random_range(0..m.atom_count())];
    while keep.len() < n {
        let mut frontier: Vec<usize> = keep
            .iter()
            .flat_map(|&a| m.neighbors(a))
            .filter(|b| !keep.contains(b))
            .collect();
        frontier.sort_unstable();
        frontier.dedup();
        let Some(&b) = frontier.choose(rng) else { break };
        keep.push(b);
    }
    m.subgraph(&keep)
}

/// A random molecule of at most `max_atoms` atoms: a pool molecule, a
/// fragment of a larger molecule, or a random graph.
pub fn random_molecule(rng: &mut impl Rng, max_atoms: usize) -> MolGraph {
    match rng.random_range(0..3) {
        0 => {
            let small: Vec<&&str> = POOL
                .iter()
                .filter(|s| mol(s).atom_count() <= max_atoms)
                .collect();
            mol(small.choose(rng).unwrap())
        }
        1 => {
            let src = mol(LARGE.choose(rng).unwrap());
            let n = rng.random_range(1..=max_atoms.min(src.atom_count()));
            random_fragment(rng, &src, n)
        }
        _ => {
            let n = rng.random_range(1..=max_atoms);
            random_graph(rng, n)
        }
    }
}

pub fn shuffled_order(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Whether the canonical SMILES of `m` survives the atom reordering `order`.
pub fn canonical_is_invariant(m: &MolGraph, order: &[usize]) -> Result<bool, String> {
    let a = write_canonical_smiles(m).map_err(|e| e.to_string())?;
    let b = write_canonical_smiles(&m.permuted(order)).map_err(|e| e.to_string())?;
    Ok(a == b)
}

/// Failures among `trials` random molecule/permutation pairs.
pub fn canonical_failures(trials: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..trials {
        let m = random_molecule(&mut rng, 24);
        let order = shuffled_order(&mut rng, m.atom_count());
        match canonical_is_invariant(&m, &order) {
            Ok(true) => {}
            Ok(false) => bad.push(format!("{m:?}")),
            Err(e) => bad.push(e),
        }
    }
    bad
}

/// All embeddings of `pattern` in `mol` by trying every injective map in
/// pattern-index order, ignoring graph structure until the map is complete.
pub fn brute_force_embeddings(pattern: &PatternGraph, mol: &MolGraph) -> Vec<Vec<usize>> {
    fn rec(
        pattern: &PatternGraph,
        mol: &MolGraph,
        ring: &[bool],
        map: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if map.len() == pattern.atom_count() {
            let bonds_ok = pattern.bonds().iter().all(|b| {
                mol.bond_between(map[b.a], map[b.b])
                    .is_some_and(|mb| b.kind.matches(mol.bonds()[mb].order))
            });
            if bonds_ok {
                out.push(map.clone());
            }
            return;
        }
        for a in 0..mol.atom_count() {
            // atom constraints are a conjunction, so checking them early prunes
            // without skipping any valid map
            if !map.contains(&a) && pattern.atoms()[map.len()].matches(mol, ring, a) {
                map.push(a);
                rec(pattern, mol, ring, map, out);
                map.pop();
            }
        }
    }
    let mut out = Vec::new();
    if pattern.atom_count() == 0 {
        return out;
    }
    let ring = mol.ring_atoms();
    rec(pattern, mol, &ring, &mut Vec::new(), &mut out);
    out.sort();
    out
}

/// Patterns used for matcher checks: every bundled reactant and product
/// pattern with at most `max_atoms` atoms.
pub fn template_patterns(max_atoms: usize) -> Vec<PatternGraph> {
    let mut out = Vec::new();
    for t in bundled_templates() {
        for p in t.reactant_patterns().iter().chain([t.product_pattern()]) {
            if p.atom_count() <= max_atoms {
                out.push(p.clone());
            }
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct MatcherReport {
    pub pairs: usize,
    pub nonempty: usize,
    pub discrepancies: Vec<String>,
}

/// Matcher against brute force for every template pattern on `trials`
/// random molecules of at most 12 atoms.
pub fn matcher_discrepancies(trials: usize, seed: u64) -> MatcherReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns = template_patterns(12);
    let mut r = MatcherReport::default();
    for _ in 0..trials {
        let m = random_molecule(&mut rng, 12);
        for (k, p) in patterns.iter().enumerate() {
            let fast = synflow::templates::match_pattern(p, &m);
            let slow = brute_force_embeddings(p, &m);
            r.pairs += 1;
            r.nonempty += usize::from(!slow.is_empty());
            if fast != slow {
                r.discrepancies.push(format!("pattern {k} on {m:?}"));
            }
        }
    }
    r
}

fn sorted_canon(ms: &[&MolGraph]) -> Vec<String> {
    let mut v: Vec<String> = ms.iter().map(|m| write_canonical_smiles(m).unwrap()).collect();
    v.sort();
    v
}

/// Reactant tuples from the pool compatible with template `t`, in pattern order.
pub fn compatible_reactants(t: &ReactionTemplate, pool: &[MolGraph]) -> Vec<Vec<usize>> {
    let roles: Vec<Vec<usize>> = (0..t.arity().count())
        .map(|r| (0..pool.len()).filter(|&i| t.matches_reactant(r, &pool[i])).collect())
        .collect();
    match roles.len() {
        1 => roles[0].iter().map(|&a| vec![a]).collect(),
        _ => roles[0]
            .iter()
            .flat_map(|&a| roles[1].iter().map(move |&b| vec![a, b]))
            .collect(),
    }
}

/// Forward-then-backward over every bundled template and every compatible
/// reactant tuple from the pool. Returns (products checked, failures).
pub fn round_trip_failures() -> (usize, Vec<String>) {
    let pool: Vec<MolGraph> = POOL.iter().map(|s| mol(s)).collect();
    let mut checked = 0;
    let mut bad = Vec::new();
    for t in bundled_templates() {
        let tuples = compatible_reactants(&t, &pool);
        assert!(!tuples.is_empty(), "no pool reactants for {}", t.id);
        for tuple in tuples {
            let reactants: Vec<&MolGraph> = tuple.iter().map(|&i| &pool[i]).collect();
            let want = sorted_canon(&reactants);
            let products = match t.apply_forward(&reactants) {
                Ok(p) => p,
                Err(e) => {
                    bad.push(format!("{} {want:?}: {e}", t.id));
                    continue;
                }
            };
            for p in products {
                checked += 1;
                if !t.product_reverses_to(&p.mol, &want) {
                    bad.push(format!("{} {want:?} -> {}", t.id, p.smiles));
                }
            }
        }
    }
    (checked, bad)
}

/// A random environment over a subset of the pool and bundled templates.
pub fn random_env(rng: &mut impl Rng) -> EnvConfig {
    let templates = bundled_templates();
    loop {
        let nb = rng.random_range(2..=10);
        let bbs: Vec<MolGraph> = POOL.choose_multiple(rng, nb).map(|s| mol(s)).collect();
        let nt = rng.random_range(1..=5);
        let ts: Vec<ReactionTemplate> = templates.choose_multiple(rng, nt).cloned().collect();
        let options = EnvOptions {
            max_len: rng.random_range(1..=3),
            allow_bb_terminals: rng.random_bool(0.5),
            require_reversible: rng.random_bool(0.3),
            fp_nbits: 64,
            ..Default::default()
        };
        // envs where no building block can start are rejected at construction
        if let Ok(env) = EnvConfig::new(bbs, ts, options) {
            return env;
        }
    }
}

fn pick(rng: &mut impl Rng, mask: &[bool]) -> usize {
    let on: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    *on.choose(rng).expect("mask has an entry")
}

/// Whether template `t` yields a product from `mol` alone or with `partner`,
/// in either reactant order.
fn applicable(t: &ReactionTemplate, mol: &MolGraph, partner: Option<&MolGraph>) -> bool {
    let ok = |rs: &[&MolGraph]| t.apply_forward(rs).is_ok_and(|p| !p.is_empty());
    match partner {
        None => ok(&[mol]),
        Some(b) => ok(&[mol, b]) || ok(&[b, mol]),
    }
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub actions: usize,
    pub reactions: usize,
    pub envs: usize,
    pub violations: Vec<String>,
}

/// Samples uniformly among unmasked forward actions in random environments
/// until `actions` actions were taken, checking each reaction against the
/// template directly.
pub fn mask_fuzz(actions: usize, seed: u64) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    while report.actions < actions {
        let env = random_env(&mut rng);
        report.envs += 1;
        for _ in 0..20 {
            let mut state = State::Empty;
            while !state.is_terminal() && report.actions < actions {
                let masks = match env.forward_mask(&state) {
                    Ok(m) => m,
                    Err(e) => {
                        report.violations.push(format!("mask at {state:?}: {e}"));
                        break;
                    }
                };
                let action = match &masks.first {
                    Some(first) => ForwardAction::AddFirstReactant {
                        bb: pick(&mut rng, first),
                    },
                    None => {
                        let slot = pick(&mut rng, &masks.top);
                        let nu = env.uni_templates().len();
                        if slot == 0 {
                            ForwardAction::Stop
                        } else if slot <= nu {
                            ForwardAction::ReactUni {
                                template: env.uni_templates()[slot - 1],
                            }
                        } else {
                            let template = env.bi_templates()[slot - 1 - nu];
                            let bbs = match env.addreactant_mask(&state, template) {
                                Ok(m) if m.iter().any(|&x| x) => m,
                                other => {
                                    report
                                        .violations
                                        .push(format!("partner mask at {state:?}: {other:?}"));
                                    break;
                                }
                            };
                            ForwardAction::ReactBi {
                                template,
                                bb: pick(&mut rng, &bbs),
                            }
                        }
                    }
                };
                report.actions += 1;
                let direct = match (&action, state.mol()) {
                    (ForwardAction::ReactUni { template }, Some(rec)) => {
                        Some(applicable(&env.templates()[*template], &rec.mol, None))
                    }
                    (ForwardAction::ReactBi { template, bb }, Some(rec)) => Some(applicable(
                        &env.templates()[*template],
                        &rec.mol,
                        Some(&env.building_blocks()[*bb].mol),
                    )),
                    _ => None,
                };
                if direct == Some(false) {
                    report.violations.push(format!("{action:?} not applicable at {state:?}"));
                }
                if direct.is_some() {
                    report.reactions += 1;
                }
                match env.step_forward(&state, &action) {
                    Ok(next) => state = next,
                    Err(e) => {
                        report.violations.push(format!("{action:?} at {state:?}: {e}"));
                        break;
                    }
                }
            }
        }
    }
    report
}
