use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{EnvConfig, ForwardAction, Trajectory};

/// One step of a route. The first step places the starting building block
/// and has no template; a bi-molecular step names its partner block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bb_smiles: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    pub product_smiles: String,
}

/// One synthesis route as written to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub reward: Option<f64>,
    pub terminal_smiles: String,
    pub steps: Vec<RouteStep>,
}

impl RouteRecord {
    pub fn from_trajectory(env: &EnvConfig, traj: &Trajectory) -> Self {
        let bbs = env.building_blocks();
        let mut steps = Vec::new();
        for (a, next) in traj.actions.iter().zip(&traj.states[1..]) {
            let product_smiles = next.mol().map(|r| r.smiles.clone()).unwrap_or_default();
            let (bb, template) = match a {
                ForwardAction::Stop => continue,
                ForwardAction::AddFirstReactant { bb } => (Some(*bb), None),
                ForwardAction::ReactUni { template } => (None, Some(*template)),
                ForwardAction::ReactBi { template, bb } => (Some(*bb), Some(*template)),
            };
            steps.push(RouteStep {
                bb_smiles: bb.map(|b| bbs[b].smiles.clone()),
                template_id: template.map(|t| env.templates()[t].id.clone()),
                product_smiles,
            });
        }
        RouteRecord {
            reward: traj.reward,
            terminal_smiles: traj.terminal().smiles.clone(),
            steps,
        }
    }

    /// Number of reactions in the route.
    pub fn num_reactions(&self) -> usize {
        self.steps.iter().filter(|s| s.template_id.is_some()).count()
    }
}

pub fn write_routes_jsonl<W: Write>(out: &mut W, routes: &[RouteRecord]) -> std::io::Result<()> {
    for r in routes {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_routes_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<RouteRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
