//! Experiment configuration files.
//!
//! A config is a TOML document with `schema_version = 1`, an experiment
//! `kind`, the path of a world file (relative to the config file), shared
//! sampling settings and one section for its kind. See `configs/` for
//! complete examples.

use std::fmt;
use std::path::{Path, PathBuf};

use perpneg::distill::{PlanWeights, SdsConfig, SectorPair};
use perpneg::{ComposerKind, OracleWorld};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Sample,
    Compare,
    Interp,
    Ablate,
    Distill,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::Sample => "sample",
            ExperimentKind::Compare => "compare",
            ExperimentKind::Interp => "interp",
            ExperimentKind::Ablate => "ablate",
            ExperimentKind::Distill => "distill",
        })
    }
}

/// Inclusive-start run of consecutive seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn iter(&self) -> impl Iterator<Item = u64> {
        self.start..self.start + self.count
    }
}

impl Default for SeedRange {
    fn default() -> Self {
        Self { start: 0, count: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub seeds: SeedRange,
    pub samples_per_seed: usize,
    pub steps: usize,
    pub guidance_scale: f64,
    pub w_pos: f64,
    pub eta: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            seeds: SeedRange::default(),
            samples_per_seed: 20,
            steps: 50,
            guidance_scale: 7.5,
            w_pos: 1.0,
            eta: 0.0,
        }
    }
}

/// A negative prompt. Signed weights are accepted and read as magnitudes;
/// a missing weight defaults to 1.5 for a lone negative and 1.0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeSpec {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

pub fn negative_magnitudes(set: &[NegativeSpec]) -> Vec<(String, f64)> {
    let default = if set.len() == 1 { 1.5 } else { 1.0 };
    set.iter()
        .map(|n| (n.prompt.clone(), n.weight.map_or(default, f64::abs)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleParams {
    pub composer: ComposerKind,
    pub positive: String,
    pub target: String,
    #[serde(default)]
    pub negatives: Vec<NegativeSpec>,
    #[serde(default)]
    pub trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareParams {
    pub positive: String,
    pub target: String,
    #[serde(default = "all_composers")]
    pub composers: Vec<ComposerKind>,
    /// Sets applied to the negation composers; cfg always runs alone.
    pub negative_sets: Vec<Vec<NegativeSpec>>,
}

fn all_composers() -> Vec<ComposerKind> {
    vec![ComposerKind::Cfg, ComposerKind::NaiveNegation, ComposerKind::PerpNeg]
}

fn negation_composers() -> Vec<ComposerKind> {
    vec![ComposerKind::NaiveNegation, ComposerKind::PerpNeg]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateParams {
    pub positive: String,
    pub target: String,
    pub negative: String,
    pub weights: Vec<f64>,
    #[serde(default = "negation_composers")]
    pub composers: Vec<ComposerKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightGrid {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl Default for WeightGrid {
    fn default() -> Self {
        Self {
            a: vec![0.5, 1.0, 1.5],
            b: vec![1.0, 2.0, 4.0],
            c: vec![0.0, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpParams {
    #[serde(default = "default_stride")]
    pub stride: f64,
    /// Samples per interpolation point for the final curve.
    #[serde(default = "default_interp_samples")]
    pub samples: usize,
    /// Samples per interpolation point while scoring grid candidates.
    #[serde(default = "default_grid_samples")]
    pub grid_samples: usize,
    #[serde(default = "both_pairs")]
    pub pairs: Vec<SectorPair>,
    /// When present, every pair of weight functions on the grid is scored
    /// and the most accurate one is kept.
    #[serde(default)]
    pub grid: Option<WeightGrid>,
    #[serde(default)]
    pub plan: PlanWeights,
}

fn default_stride() -> f64 {
    0.25
}

fn default_interp_samples() -> usize {
    1000
}

fn default_grid_samples() -> usize {
    200
}

fn both_pairs() -> Vec<SectorPair> {
    vec![SectorPair::FrontSide, SectorPair::SideBack]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillParams {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_distill_seeds")]
    pub seeds: SeedRange,
    #[serde(default = "both_variants")]
    pub variants: Vec<perpneg::distill::DistillVariant>,
    pub init_center: Vec<f64>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub sds: SdsConfig,
    #[serde(default)]
    pub plan: PlanWeights,
}

fn default_bins() -> usize {
    24
}

fn default_distill_seeds() -> SeedRange {
    SeedRange { start: 0, count: 10 }
}

fn both_variants() -> Vec<perpneg::distill::DistillVariant> {
    vec![
        perpneg::distill::DistillVariant::Vanilla,
        perpneg::distill::DistillVariant::PerpNeg,
    ]
}

fn default_init_scale() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub world: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interp: Option<InterpParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillParams>,
}

/// A parsed config with its world loaded and paths resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub world: OracleWorld,
    world_text: String,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(
                "schema_version",
                format!("{} is not supported, expected {SCHEMA_VERSION}", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    /// Reads `path` and the world it references.
    pub fn load(path: &Path) -> Result<Loaded, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        if config.world.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            config.world = base.join(&config.world);
        }
        if let Some(out) = config.out.as_mut() {
            if out.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                *out = base.join(&*out);
            }
        }
        Loaded::new(config)
    }
}

impl Loaded {
    pub fn new(config: ExperimentConfig) -> Result<Self, CliError> {
        let world_text = std::fs::read_to_string(&config.world)
            .map_err(|e| CliError::config("world", format!("{}: {e}", config.world.display())))?;
        let world = OracleWorld::from_toml_str(&world_text)
            .map_err(|e| CliError::config("world", format!("{}: {e}", config.world.display())))?;
        let loaded = Self {
            config,
            world,
            world_text,
        };
        loaded.validate()?;
        Ok(loaded)
    }

    /// SHA-256 over the experiment settings and the world contents. Paths
    /// are left out so a relocated checkout reproduces the same hash.
    pub fn hash(&self) -> String {
        let mut c = self.config.clone();
        c.world = PathBuf::from("world");
        c.out = None;
        let mut h = Sha256::new();
        h.update(toml::to_string(&c).expect("config serializes").as_bytes());
        h.update([0u8]);
        h.update(self.world_text.as_bytes());
        hex::encode(h.finalize())
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let s = &c.sampling;
        if s.seeds.count == 0 {
            return Err(CliError::config("sampling.seeds.count", "must be at least 1"));
        }
        if s.samples_per_seed == 0 {
            return Err(CliError::config("sampling.samples_per_seed", "must be at least 1"));
        }
        let present = [
            (ExperimentKind::Sample, c.sample.is_some()),
            (ExperimentKind::Compare, c.compare.is_some()),
            (ExperimentKind::Interp, c.interp.is_some()),
            (ExperimentKind::Ablate, c.ablate.is_some()),
            (ExperimentKind::Distill, c.distill.is_some()),
        ];
        if !present.iter().any(|(k, p)| *k == c.kind && *p) {
            return Err(CliError::config(
                &c.kind.to_string(),
                format!("section [{}] is required for kind = \"{}\"", c.kind, c.kind),
            ));
        }
        match c.kind {
            ExperimentKind::Sample => {
                let p = c.sample.as_ref().unwrap();
                self.check_label("sample.positive", &p.positive)?;
                self.check_mode("sample.target", &p.target)?;
                self.check_negatives("sample.negatives", &p.negatives)?;
            }
            ExperimentKind::Compare => {
                let p = c.compare.as_ref().unwrap();
                self.check_label("compare.positive", &p.positive)?;
                self.check_mode("compare.target", &p.target)?;
                if p.composers.is_empty() {
                    return Err(CliError::config("compare.composers", "empty list"));
                }
                for set in &p.negative_sets {
                    self.check_negatives("compare.negative_sets", set)?;
                }
            }
            ExperimentKind::Ablate => {
                let p = c.ablate.as_ref().unwrap();
                self.check_label("ablate.positive", &p.positive)?;
                self.check_label("ablate.negative", &p.negative)?;
                self.check_mode("ablate.target", &p.target)?;
                if p.weights.is_empty() || p.weights.iter().any(|w| !w.is_finite()) {
                    return Err(CliError::config("ablate.weights", "need finite weights"));
                }
            }
            ExperimentKind::Interp => {
                let p = c.interp.as_ref().unwrap();
                if !(p.stride > 0.0 && p.stride <= 1.0) {
                    return Err(CliError::config("interp.stride", format!("{} not in (0, 1]", p.stride)));
                }
                if p.samples == 0 {
                    return Err(CliError::config("interp.samples", "must be at least 1"));
                }
                if p.grid_samples == 0 {
                    return Err(CliError::config("interp.grid_samples", "must be at least 1"));
                }
                self.check_views()?;
                if let Some(g) = &p.grid {
                    for (name, v) in [("interp.grid.a", &g.a), ("interp.grid.b", &g.b), ("interp.grid.c", &g.c)] {
                        if v.is_empty() || v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                            return Err(CliError::config(name, "need nonnegative values"));
                        }
                    }
                }
                perpneg::distill::ViewPromptPlan::from_world(&self.world, p.plan)
                    .map_err(|e| CliError::config("interp.plan", e.to_string()))?;
            }
            ExperimentKind::Distill => {
                let p = c.distill.as_ref().unwrap();
                self.check_views()?;
                if p.bins < 3 {
                    return Err(CliError::config("distill.bins", format!("{} bins, need at least 3", p.bins)));
                }
                if p.seeds.count == 0 {
                    return Err(CliError::config("distill.seeds.count", "must be at least 1"));
                }
                if p.init_center.len() != self.world.dim() {
                    return Err(CliError::config(
                        "distill.init_center",
                        format!("length {} but world dim is {}", p.init_center.len(), self.world.dim()),
                    ));
                }
                p.sds.validate().map_err(|e| CliError::config("distill.sds", e.to_string()))?;
                if p.sds.seed != 0 {
                    return Err(CliError::config("distill.sds.seed", "runs take their seeds from distill.seeds"));
                }
                perpneg::distill::ViewPromptPlan::from_world(&self.world, p.plan)
                    .map_err(|e| CliError::config("distill.plan", e.to_string()))?;
            }
        }
        Ok(())
    }

    fn check_label(&self, field: &str, label: &str) -> Result<(), CliError> {
        self.world
            .embedding(label)
            .map(|_| ())
            .map_err(|_| CliError::config(field, format!("unknown prompt \"{label}\"")))
    }

    fn check_mode(&self, field: &str, id: &str) -> Result<(), CliError> {
        match self.world.mode_index(id) {
            Some(_) => Ok(()),
            None => Err(CliError::config(field, format!("unknown mode \"{id}\""))),
        }
    }

    fn check_negatives(&self, field: &str, set: &[NegativeSpec]) -> Result<(), CliError> {
        for n in set {
            self.check_label(field, &n.prompt)?;
            if let Some(w) = n.weight {
                if !w.is_finite() {
                    return Err(CliError::config(field, format!("weight {w} is not finite")));
                }
            }
        }
        Ok(())
    }

    fn check_views(&self) -> Result<(), CliError> {
        for v in ["front", "side", "back"] {
            self.check_mode("world", v)?;
            self.check_label("world", v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_weights_become_magnitudes() {
        let set = vec![
            NegativeSpec { prompt: "a".into(), weight: Some(-2.0) },
            NegativeSpec { prompt: "b".into(), weight: None },
        ];
        assert_eq!(negative_magnitudes(&set), vec![("a".into(), 2.0), ("b".into(), 1.0)]);
        let lone = vec![NegativeSpec { prompt: "a".into(), weight: None }];
        assert_eq!(negative_magnitudes(&lone)[0].1, 1.5);
    }

    #[test]
    fn rejects_other_schema_versions() {
        let text = "schema_version = 2\nkind = \"sample\"\nworld = \"w.toml\"\n";
        match ExperimentConfig::parse(text) {
            Err(CliError::Config(msg)) => assert!(msg.contains("schema_version")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = "schema_version = 1\nkind = \"sample\"\nworld = \"w.toml\"\nbogus = 3\n";
        assert!(matches!(ExperimentConfig::parse(text), Err(CliError::Config(_))));
    }
}
