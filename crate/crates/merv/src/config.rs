//! Run configuration for the CLI. One JSON document names the ensemble,
//! alignment target, projector, fusion, recipe, task, and seed; all
//! randomness flows from that single seed.

use crate::alignment::{align_profiles, ProjectorConfig, ProjectorVariant};
use crate::costmodel::{AttnQuadratic, CostConfig};
use crate::encoders::{EncoderProfile, MockEncoderKind};
use crate::error::{MervError, Result};
use crate::fusion::{FusionConfig, FusionStrategy};
use crate::toytrain::{PipelineConfig, Recipe, RecipeConfig, SynthTaskKind, ToyLlmConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// An ensemble member: either a named built-in profile or a custom one.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnsembleEntry {
    Named(String),
    Custom {
        profile: EncoderProfile,
        kind: MockEncoderKind,
    },
}

impl EnsembleEntry {
    pub fn resolve(&self) -> Result<(EncoderProfile, MockEncoderKind)> {
        match self {
            EnsembleEntry::Named(name) => {
                let profile = EncoderProfile::by_name(name).ok_or_else(|| {
                    MervError::config(format!("unknown encoder profile `{name}`"))
                })?;
                let kind = match name.as_str() {
                    "dinov2" => MockEncoderKind::Spatial,
                    "vivit" | "hiera" => MockEncoderKind::Temporal,
                    "languagebind" | "siglip" => MockEncoderKind::Language,
                    _ => MockEncoderKind::Generic,
                };
                Ok((profile, kind))
            }
            EnsembleEntry::Custom { profile, kind } => Ok((profile.clone(), *kind)),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: SynthTaskKind,
    pub n: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: SynthTaskKind::TemporalDirection,
            n: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CostOptions {
    pub llm_params: u64,
    #[serde(default)]
    pub attention_quadratic: Option<AttnQuadratic>,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            llm_params: 7_000_000_000,
            attention_quadratic: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ensemble_entries")]
    pub ensemble: Vec<EnsembleEntry>,
    #[serde(default = "default_target_t")]
    pub target_t: usize,
    #[serde(default = "default_projector")]
    pub projector: ProjectorConfig,
    #[serde(default = "default_fusion")]
    pub fusion: FusionConfig,
    #[serde(default = "default_recipe")]
    pub recipe: RecipeConfig,
    #[serde(default)]
    pub llm: ToyLlmConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub cost: CostOptions,
}

fn default_ensemble_entries() -> Vec<EnsembleEntry> {
    ["languagebind", "dinov2", "vivit", "siglip"]
        .into_iter()
        .map(|s| EnsembleEntry::Named(s.to_string()))
        .collect()
}

fn default_target_t() -> usize {
    16
}

fn default_projector() -> ProjectorConfig {
    ProjectorConfig::new(ProjectorVariant::Avg2d, 8, 8, 4096, 0)
}

fn default_fusion() -> FusionConfig {
    FusionConfig::new(FusionStrategy::CrossAttn, 0)
}

fn default_recipe() -> RecipeConfig {
    RecipeConfig::toy(Recipe::Frozen)
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            ensemble: default_ensemble_entries(),
            target_t: default_target_t(),
            projector: default_projector(),
            fusion: default_fusion(),
            recipe: default_recipe(),
            llm: ToyLlmConfig::default(),
            task: TaskConfig::default(),
            cost: CostOptions::default(),
        }
    }
}

impl RunConfig {
    /// Paper-scale geometry: the four-encoder ensemble at t=16 with 64
    /// tokens per frame into a 4096-wide, 7B-parameter language model.
    pub fn paper_scale(seed: u64) -> Self {
        RunConfig {
            seed,
            ..RunConfig::default()
        }
    }

    /// Toy training setup: two small mock encoders (temporal + spatial
    /// kinds) in front of a 64-wide LLM.
    pub fn toy(seed: u64) -> Self {
        let pipeline = PipelineConfig::toy(seed);
        RunConfig {
            seed,
            ensemble: pipeline
                .profiles
                .iter()
                .zip(&pipeline.encoder_kinds)
                .map(|(p, &k)| EnsembleEntry::Custom {
                    profile: p.clone(),
                    kind: k,
                })
                .collect(),
            target_t: pipeline.target_t,
            projector: pipeline.projector,
            fusion: pipeline.fusion,
            recipe: RecipeConfig::toy(Recipe::Frozen),
            llm: pipeline.llm,
            task: TaskConfig::default(),
            cost: CostOptions::default(),
        }
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| MervError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MervError::config(e.to_string()))
    }

    pub fn profiles_and_kinds(&self) -> Result<(Vec<EncoderProfile>, Vec<MockEncoderKind>)> {
        let mut profiles = Vec::with_capacity(self.ensemble.len());
        let mut kinds = Vec::with_capacity(self.ensemble.len());
        for entry in &self.ensemble {
            let (p, k) = entry.resolve()?;
            profiles.push(p);
            kinds.push(k);
        }
        Ok((profiles, kinds))
    }

    /// Pipeline config with every seed derived from the run seed.
    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let (profiles, kinds) = self.profiles_and_kinds()?;
        let mut projector = self.projector.clone();
        projector.seed = self.seed;
        let mut fusion = self.fusion.clone();
        fusion.seed = self.seed;
        Ok(PipelineConfig {
            profiles,
            encoder_kinds: kinds,
            encoder_seed: self.seed,
            target_t: self.target_t,
            projector,
            fusion,
            llm: self.llm,
            llm_seed: self.seed,
        })
    }

    pub fn cost_config(&self) -> Result<CostConfig> {
        let (profiles, _) = self.profiles_and_kinds()?;
        Ok(CostConfig {
            profiles,
            target_t: self.target_t,
            projector: self.projector.clone(),
            fusion: self.fusion.clone(),
            llm_params: self.cost.llm_params,
            attention_quadratic: self.cost.attention_quadratic,
        })
    }

    /// Cross-checks that hold for any command: alignment reachability,
    /// projector grid bounds, fusion weight simplex. Runs before any work.
    pub fn validate_common(&self) -> Result<()> {
        let (profiles, kinds) = self.profiles_and_kinds()?;
        if profiles.is_empty() {
            return Err(MervError::config("empty ensemble".to_string()));
        }
        if profiles.len() != kinds.len() {
            return Err(MervError::config("ensemble entries malformed".to_string()));
        }
        for p in &profiles {
            p.validate()?;
        }
        let aligned = align_profiles(&profiles, self.target_t)
            .map_err(|e| MervError::config(e.to_string()))?;
        self.projector.validate(&aligned)?;
        self.fusion.validate(profiles.len())?;
        self.recipe.validate()?;
        Ok(())
    }

    /// Additional checks for commands that run the toy pipeline end to end.
    pub fn validate_train(&self) -> Result<()> {
        self.validate_common()?;
        self.pipeline_config()?.validate()?;
        if self.task.n < 16 {
            return Err(MervError::config("task.n must be >= 16 for training".to_string()));
        }
        Ok(())
    }
}
