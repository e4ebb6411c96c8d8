//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use synflow::chemgraph::{parse_smiles, read_building_blocks};
use synflow::mdp::presets::preset;
use synflow::mdp::{EnvConfig, EnvOptions};
use synflow::rewards::{RewardFn, ScoreTable};
use synflow::templates::{bundled_templates, read_templates};
use synflow::training::{BackwardMode, TrainConfig};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub env: EnvSection,
    pub reward: RewardSpec,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub routes: RoutesSection,
    pub enumerate: EnumerateSection,
    pub gradcheck: GradcheckSection,
}

/// Either a bundled preset or building-block and template files.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub preset: Option<String>,
    pub building_blocks: Option<PathBuf>,
    /// Template file; the bundled set when absent.
    pub templates: Option<PathBuf>,
    /// Subset of template ids to keep.
    pub template_ids: Option<Vec<String>>,
    pub max_len: Option<usize>,
    pub allow_bb_terminals: bool,
    pub require_reversible: bool,
    pub fp_radius: usize,
    pub fp_nbits: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        let d = EnvOptions::default();
        EnvSection {
            preset: None,
            building_blocks: None,
            templates: None,
            template_ids: None,
            max_len: None,
            allow_bb_terminals: d.allow_bb_terminals,
            require_reversible: d.require_reversible,
            fp_radius: d.fp_radius,
            fp_nbits: d.fp_nbits,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    #[default]
    Constant,
    /// Similarity to `target`, or to the preset's target when omitted.
    Rediscovery {
        target: Option<String>,
        #[serde(default = "default_radius")]
        radius: usize,
        #[serde(default = "default_nbits")]
        nbits: usize,
    },
    External {
        table: PathBuf,
        default: Option<f64>,
    },
    ScaledAffinity {
        table: PathBuf,
        default: Option<f64>,
        scale_min: f64,
        scale_max: f64,
        ref_heavy_atoms: Option<usize>,
        #[serde(default)]
        allowance: usize,
    },
    Product {
        factors: Vec<RewardSpec>,
    },
}

fn default_radius() -> usize {
    2
}

fn default_nbits() -> usize {
    2048
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
    pub temperature: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            n: 1000,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n: usize,
    pub mode_threshold: f64,
    pub top_k: usize,
    /// Reference molecules for the novelty proxy.
    pub reference: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n: 1000,
            mode_threshold: synflow::eval::MODE_THRESHOLD,
            top_k: 10,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutesSection {
    /// Training terminals; `train_terminals.txt` next to the checkpoint when absent.
    pub train_terminals: Option<PathBuf>,
    /// Uniform forward rollouts drawn to collect unseen test terminals.
    pub test_rollouts: usize,
    pub rollouts_per_mol: usize,
}

impl Default for RoutesSection {
    fn default() -> Self {
        RoutesSection {
            train_terminals: None,
            test_rollouts: 3000,
            rollouts_per_mol: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnumerateSection {
    pub budget: usize,
}

impl Default for EnumerateSection {
    fn default() -> Self {
        EnumerateSection { budget: 1_000_000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub seeds: u64,
    pub batch: usize,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            seeds: 20,
            batch: 8,
            h: 1e-3,
            tolerance: 1e-4,
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text)?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

impl RunConfig {
    pub fn build_env(&self) -> Result<EnvConfig> {
        let e = &self.env;
        let mut options = EnvOptions {
            allow_bb_terminals: e.allow_bb_terminals,
            // REINFORCE is only defined over reversible reactions
            require_reversible: e.require_reversible
                || self.train.backward_mode == BackwardMode::Reinforce,
            fp_radius: e.fp_radius,
            fp_nbits: e.fp_nbits,
            ..EnvOptions::default()
        };
        if let Some(l) = e.max_len {
            options.max_len = l;
        }
        match (&e.preset, &e.building_blocks) {
            (Some(_), Some(_)) => bail!("env: give either preset or building_blocks, not both"),
            (None, None) => bail!("env: one of preset or building_blocks is required"),
            (Some(name), None) => {
                if e.templates.is_some() || e.template_ids.is_some() {
                    bail!("env: templates cannot be combined with a preset");
                }
                let p = preset(name).with_context(|| format!("unknown preset {name:?}"))?;
                match e.max_len {
                    Some(_) => preset_with_len(p, options),
                    None => Ok(p.build(options)?),
                }
            }
            (None, Some(bb_path)) => {
                let bbs = read_building_blocks(&read(bb_path)?)?
                    .into_iter()
                    .map(|r| r.mol)
                    .collect();
                let mut templates = match &e.templates {
                    Some(p) => read_templates(&read(p)?)?,
                    None => bundled_templates(),
                };
                if let Some(ids) = &e.template_ids {
                    for id in ids {
                        if !templates.iter().any(|t| &t.id == id) {
                            bail!("env: no template with id {id:?}");
                        }
                    }
                    templates.retain(|t| ids.contains(&t.id));
                }
                Ok(EnvConfig::new(bbs, templates, options)?)
            }
        }
    }

    pub fn build_reward(&self) -> Result<RewardFn> {
        build_reward(&self.reward, self.env.preset.as_deref())
    }
}

/// Preset building blocks and templates with a different maximum length.
fn preset_with_len(p: &synflow::mdp::presets::Preset, options: EnvOptions) -> Result<EnvConfig> {
    let bbs = p
        .building_blocks
        .iter()
        .map(|s| parse_smiles(s))
        .collect::<Result<Vec<_>, _>>()?;
    let templates = bundled_templates()
        .into_iter()
        .filter(|t| p.templates.contains(&t.id.as_str()))
        .collect();
    Ok(EnvConfig::new(bbs, templates, options)?)
}

fn build_reward(spec: &RewardSpec, preset_name: Option<&str>) -> Result<RewardFn> {
    Ok(match spec {
        RewardSpec::Constant => RewardFn::Constant,
        RewardSpec::Rediscovery { target, radius, nbits } => {
            let smiles = match target {
                Some(t) => t.clone(),
                None => preset_name
                    .and_then(preset)
                    .and_then(|p| p.target)
                    .context("reward: rediscovery needs a target")?
                    .to_string(),
            };
            RewardFn::rediscovery(&parse_smiles(&smiles)?, *radius, *nbits)?
        }
        RewardSpec::External { table, default } => RewardFn::External {
            table: ScoreTable::parse(&read(table)?, *default)?,
        },
        RewardSpec::ScaledAffinity {
            table,
            default,
            scale_min,
            scale_max,
            ref_heavy_atoms,
            allowance,
        } => RewardFn::ScaledAffinity {
            table: ScoreTable::parse(&read(table)?, *default)?,
            scale_min: *scale_min,
            scale_max: *scale_max,
            ref_heavy_atoms: *ref_heavy_atoms,
            allowance: *allowance,
        },
        RewardSpec::Product { factors } => RewardFn::Product(
            factors
                .iter()
                .map(|f| build_reward(f, preset_name))
                .collect::<Result<_>>()?,
        ),
    })
}
