//! Experiment configuration: a strict TOML schema covering scene synthesis,
//! feature generation, the noise block, training, evaluation, and optional
//! sweep axes. Unknown keys are rejected so a typo cannot silently corrupt a
//! sweep.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate::{CandidateSources, KSchedule};
use crate::learner::{
    Architecture, KStrategy, LossComponents, LrSchedule, TrainConfig,
};
use crate::loss::{Reduction, SNTDConfig};
use crate::metrics::AbsentClassConvention;
use crate::noise::{TrailingLevel, TrailingWindow};
use crate::scene::{FeatureSpec, ObjectTemplate, SceneSpec};
use crate::voxel::{ClassId, Dims, LabelSpace};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own sub-seed from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub num_frames: usize,
    pub reference_frame: usize,
    pub num_semantic: ClassId,
    pub dynamic_classes: Vec<ClassId>,
    pub ground_height: usize,
    pub ground_class: ClassId,
    pub patch_budget: usize,
    pub patch_decay: f64,
    pub max_patch_extent: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<u32>,
    #[serde(default = "default_objects")]
    pub objects: Vec<ObjectConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub class: ClassId,
    pub extents: [usize; 3],
    pub velocity: [i64; 3],
    pub spawn: [i64; 3],
    #[serde(default)]
    pub spawn_frame: usize,
}

fn default_objects() -> Vec<ObjectConfig> {
    SceneSpec::default_desk()
        .objects
        .into_iter()
        .map(|o| ObjectConfig {
            class: o.class,
            extents: [o.extents.0, o.extents.1, o.extents.2],
            velocity: [o.velocity.0, o.velocity.1, o.velocity.2],
            spawn: [o.spawn.0, o.spawn.1, o.spawn.2],
            spawn_frame: o.spawn_frame,
        })
        .collect()
}

impl Default for SceneConfig {
    fn default() -> Self {
        let spec = SceneSpec::default_desk();
        SceneConfig {
            nx: spec.dims.nx,
            ny: spec.dims.ny,
            nz: spec.dims.nz,
            num_frames: spec.num_frames,
            reference_frame: spec.reference_frame,
            num_semantic: spec.space.num_semantic(),
            dynamic_classes: spec.space.dynamic_classes().collect(),
            ground_height: spec.ground_height,
            ground_class: spec.ground_class,
            patch_budget: spec.patch_budget,
            patch_decay: spec.patch_decay,
            max_patch_extent: spec.max_patch_extent,
            jitter: spec.jitter,
            objects: default_objects(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let spec = FeatureSpec::default();
        FeatureConfig {
            dim: spec.dim,
            separation: spec.separation,
            noise_sigma: spec.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { train_scenes: 4, eval_scenes: 2 }
    }
}

/// Exactly one noise kind per run, enforced by the tagged representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseConfig {
    Asymmetric {
        eta: f64,
    },
    Trailing {
        level: TrailingLevel,
        #[serde(default = "default_future")]
        future: usize,
        #[serde(default = "default_historical")]
        historical: usize,
        #[serde(default = "default_dilation")]
        dilation_iterations: usize,
    },
}

fn default_future() -> usize {
    TrailingWindow::default().future
}

fn default_historical() -> usize {
    TrailingWindow::default().historical
}

fn default_dilation() -> usize {
    TrailingWindow::default().dilation_iterations
}

impl NoiseConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            NoiseConfig::Asymmetric { .. } => "asymmetric",
            NoiseConfig::Trailing { .. } => "trailing",
        }
    }

    /// Report tag for the level: the canonical rates 0.5 / 0.7 / 0.9 carry
    /// their qualitative names; other rates print numerically.
    pub fn level(&self) -> String {
        match self {
            NoiseConfig::Asymmetric { eta } => match eta {
                e if *e == 0.5 => "light".to_string(),
                e if *e == 0.7 => "moderate".to_string(),
                e if *e == 0.9 => "heavy".to_string(),
                e => format!("{e:.2}"),
            },
            NoiseConfig::Trailing { level, .. } => level.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub architecture: ArchitectureConfig,
    pub batch_scenes: usize,
    pub k_start: usize,
    pub k_end: usize,
    pub gamma: usize,
    pub k_strategy: KStrategyConfig,
    pub tau_s: f64,
    pub sntd_reduction: Reduction,
    pub ema_momentum: f64,
    pub prototype_momentum: f64,
    pub prototype_fusion_weight: f64,
    pub candidate_sources: SourcesConfig,
    pub include_noisy_label: bool,
    pub loss_pll: bool,
    pub loss_nl: bool,
    pub loss_sntd: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let cfg = TrainConfig::desk_default(0);
        TrainSection {
            epochs: cfg.epochs,
            warmup_epochs: cfg.warmup_epochs,
            lr: cfg.lr.initial,
            lr_decay_epoch: cfg.lr.decay_epoch,
            lr_decay_factor: cfg.lr.decay_factor,
            architecture: ArchitectureConfig::Linear,
            batch_scenes: cfg.batch_scenes,
            k_start: cfg.schedule.k_start,
            k_end: cfg.schedule.k_end,
            gamma: cfg.schedule.gamma,
            k_strategy: KStrategyConfig::Linear,
            tau_s: cfg.sntd.tau_s,
            sntd_reduction: cfg.sntd.reduction,
            ema_momentum: cfg.ema_momentum,
            prototype_momentum: cfg.prototype_momentum,
            prototype_fusion_weight: cfg.prototype_fusion_weight,
            candidate_sources: SourcesConfig::Union,
            include_noisy_label: cfg.include_noisy_label,
            loss_pll: true,
            loss_nl: true,
            loss_sntd: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureConfig {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourcesConfig {
    Union,
    Teacher,
    Prototype,
}

impl From<SourcesConfig> for CandidateSources {
    fn from(s: SourcesConfig) -> Self {
        match s {
            SourcesConfig::Union => CandidateSources::Union,
            SourcesConfig::Teacher => CandidateSources::TeacherOnly,
            SourcesConfig::Prototype => CandidateSources::PrototypeOnly,
        }
    }
}

impl SourcesConfig {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourcesConfig::Union => "union",
            SourcesConfig::Teacher => "teacher",
            SourcesConfig::Prototype => "prototype",
        }
    }
}

impl FromStr for SourcesConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "union" => Ok(SourcesConfig::Union),
            "teacher" => Ok(SourcesConfig::Teacher),
            "prototype" => Ok(SourcesConfig::Prototype),
            other => Err(format!("unknown candidate source `{other}`")),
        }
    }
}

/// `linear`, `random`, or `fixed:<K>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KStrategyConfig {
    Linear,
    Fixed(usize),
    Random,
}

impl KStrategyConfig {
    pub fn to_strategy(self) -> KStrategy {
        match self {
            KStrategyConfig::Linear => KStrategy::Linear,
            KStrategyConfig::Fixed(k) => KStrategy::Fixed(k),
            KStrategyConfig::Random => KStrategy::Random,
        }
    }

    pub fn label(&self) -> String {
        match self {
            KStrategyConfig::Linear => "linear".into(),
            KStrategyConfig::Fixed(k) => format!("fixed{k}"),
            KStrategyConfig::Random => "random".into(),
        }
    }
}

impl FromStr for KStrategyConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(KStrategyConfig::Linear),
            "random" => Ok(KStrategyConfig::Random),
            other => match other.strip_prefix("fixed:") {
                Some(k) => k
                    .parse::<usize>()
                    .map(KStrategyConfig::Fixed)
                    .map_err(|e| format!("bad fixed K `{k}`: {e}")),
                None => Err(format!(
                    "unknown K strategy `{other}` (expected linear, random, or fixed:<K>)"
                )),
            },
        }
    }
}

impl Serialize for KStrategyConfig {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let text = match self {
            KStrategyConfig::Linear => "linear".to_string(),
            KStrategyConfig::Fixed(k) => format!("fixed:{k}"),
            KStrategyConfig::Random => "random".to_string(),
        };
        serializer.serialize_str(&text)
    }
}

impl<'de> Deserialize<'de> for KStrategyConfig {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub convention: AbsentClassConvention,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { convention: AbsentClassConvention::Exclude }
    }
}

/// Sweep axes. The noise axes concatenate; the remaining axes multiply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub etas: Vec<f64>,
    #[serde(default)]
    pub trailing_levels: Vec<TrailingLevel>,
    #[serde(default)]
    pub k_strategies: Vec<KStrategyConfig>,
    #[serde(default)]
    pub candidate_sources: Vec<SourcesConfig>,
    #[serde(default)]
    pub loss_sets: Vec<LossSetConfig>,
}

/// A named subset of the robust terms: `base`, `pll`, `pll+nl`, or
/// `pll+nl+sntd` (any `+`-joined combination parses).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSetConfig {
    pub pll: bool,
    pub nl: bool,
    pub sntd: bool,
}

impl LossSetConfig {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.pll {
            parts.push("pll");
        }
        if self.nl {
            parts.push("nl");
        }
        if self.sntd {
            parts.push("sntd");
        }
        if parts.is_empty() {
            "base".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl FromStr for LossSetConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "base" {
            return Ok(LossSetConfig { pll: false, nl: false, sntd: false });
        }
        let mut set = LossSetConfig { pll: false, nl: false, sntd: false };
        for part in s.split('+') {
            match part {
                "pll" => set.pll = true,
                "nl" => set.nl = true,
                "sntd" => set.sntd = true,
                other => return Err(format!("unknown loss component `{other}`")),
            }
        }
        Ok(set)
    }
}

impl Serialize for LossSetConfig {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for LossSetConfig {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl ExperimentConfig {
    pub fn label_space(&self) -> Result<LabelSpace, ConfigError> {
        let outdoor = LabelSpace::outdoor19();
        if self.scene.num_semantic == outdoor.num_semantic()
            && self.scene.dynamic_classes.iter().copied().collect::<std::collections::BTreeSet<_>>()
                == outdoor.dynamic_classes().collect()
        {
            return Ok(outdoor);
        }
        LabelSpace::new(self.scene.num_semantic, self.scene.dynamic_classes.iter().copied())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn scene_spec(&self) -> Result<SceneSpec, ConfigError> {
        let space = self.label_space()?;
        let spec = SceneSpec {
            dims: Dims::new(self.scene.nx, self.scene.ny, self.scene.nz),
            num_frames: self.scene.num_frames,
            reference_frame: self.scene.reference_frame,
            space,
            ground_height: self.scene.ground_height,
            ground_class: self.scene.ground_class,
            patch_budget: self.scene.patch_budget,
            patch_decay: self.scene.patch_decay,
            max_patch_extent: self.scene.max_patch_extent,
            objects: self
                .scene
                .objects
                .iter()
                .map(|o| ObjectTemplate {
                    class: o.class,
                    extents: (o.extents[0], o.extents[1], o.extents[2]),
                    velocity: (o.velocity[0], o.velocity[1], o.velocity[2]),
                    spawn: (o.spawn[0], o.spawn[1], o.spawn[2]),
                    spawn_frame: o.spawn_frame,
                })
                .collect(),
            jitter: self.scene.jitter,
        };
        spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            dim: self.features.dim,
            separation: self.features.separation,
            noise_sigma: self.features.noise_sigma,
        }
    }

    pub fn trailing_window(&self) -> TrailingWindow {
        match &self.noise {
            NoiseConfig::Trailing { future, historical, dilation_iterations, .. } => {
                TrailingWindow {
                    future: *future,
                    historical: *historical,
                    dilation_iterations: *dilation_iterations,
                }
            }
            NoiseConfig::Asymmetric { .. } => TrailingWindow::default(),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let t = &self.train;
        let architecture = match t.architecture {
            ArchitectureConfig::Linear => Architecture::Linear,
            ArchitectureConfig::Mlp => Architecture::Mlp { hidden: 32 },
        };
        let cfg = TrainConfig {
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            lr: LrSchedule {
                initial: t.lr,
                decay_epoch: t.lr_decay_epoch,
                decay_factor: t.lr_decay_factor,
            },
            architecture,
            batch_scenes: t.batch_scenes,
            schedule: KSchedule {
                k_start: t.k_start,
                k_end: t.k_end,
                gamma: t.gamma,
                warmup_epochs: t.warmup_epochs,
            },
            k_strategy: t.k_strategy.to_strategy(),
            sntd: SNTDConfig { tau_s: t.tau_s, reduction: t.sntd_reduction },
            ema_momentum: t.ema_momentum,
            prototype_momentum: t.prototype_momentum,
            prototype_fusion_weight: t.prototype_fusion_weight,
            candidate_sources: t.candidate_sources.into(),
            include_noisy_label: t.include_noisy_label,
            loss_components: LossComponents {
                pll: t.loss_pll,
                nl: t.loss_nl,
                sntd: t.loss_sntd,
            },
            eval_convention: self.eval.convention,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    /// The run id: explicit, or derived from the noise block and seed.
    pub fn resolved_run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            format!("{}_{}_seed{}", self.noise.kind(), self.noise.level(), self.seed)
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scene_spec()?;
        self.train_config()?;
        if self.dataset.train_scenes == 0 {
            return Err(ConfigError::Invalid("dataset.train_scenes must be at least 1".into()));
        }
        if self.dataset.eval_scenes == 0 {
            return Err(ConfigError::Invalid("dataset.eval_scenes must be at least 1".into()));
        }
        if self.features.dim == 0 {
            return Err(ConfigError::Invalid("features.dim must be at least 1".into()));
        }
        match &self.noise {
            NoiseConfig::Asymmetric { eta } => {
                if !(0.0..=1.0).contains(eta) {
                    return Err(ConfigError::Invalid(format!(
                        "noise.eta {eta} outside [0, 1]"
                    )));
                }
            }
            NoiseConfig::Trailing { future, historical, .. } => {
                let t = self.scene.reference_frame;
                if t + future >= self.scene.num_frames {
                    return Err(ConfigError::Invalid(format!(
                        "noise.future {future} runs past the {}-frame sequence",
                        self.scene.num_frames
                    )));
                }
                if *historical > t {
                    return Err(ConfigError::Invalid(format!(
                        "noise.historical {historical} reaches before frame 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses a config document, rejecting unknown keys.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Byte-slice front end for fuzzing; invalid UTF-8 is a parse error.
pub fn parse_config_slice(bytes: &[u8]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| ConfigError::Invalid(format!("not UTF-8: {e}")))?;
    parse_config_str(text)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    parse_config_str(&text)
}

/// Renders the fully resolved config for the frozen per-run copy.
pub fn to_toml_string(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}
