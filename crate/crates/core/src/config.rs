//! Experiment configuration: one TOML document with a schema `version`, a
//! root `seed`, a `work_dir` and one table per stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{SmoothingKind, SmoothingSpec, Task};
use crate::error::{Error, Result};
use crate::features::{AudioProfile, FeatureSetSpec};
use crate::mae::MaeConfig;
use crate::seed::derive_seed;
use crate::synth::SynthSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    /// Output directory; relative paths resolve against the config file.
    pub work_dir: PathBuf,
    pub data: DataConfig,
    pub mae: MaeConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub features: FeaturesConfig,
    pub tmf: TmfSection,
    pub fuse_train: FuseTrainConfig,
    #[serde(default)]
    pub smoothing: SmoothingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub synth: SynthSpec,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    /// Fold held out for per-epoch validation in `finetune` and `fuse-train`.
    #[serde(default)]
    pub val_fold: usize,
}

fn default_folds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_images: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Steps per row of `pretrain_loss.csv`.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_wd() -> f64 {
    0.01
}

fn default_log_every() -> usize {
    10
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    Uniform,
    /// Inverse training-set frequency with add-one counts.
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Cap on sampled training frames.
    pub max_train_frames: usize,
    pub max_val_frames: usize,
    #[serde(default = "default_weighting")]
    pub class_weighting: ClassWeighting,
    /// Train only the task head; the pretrained encoder stays fixed.
    #[serde(default)]
    pub freeze_encoder: bool,
}

fn default_weighting() -> ClassWeighting {
    ClassWeighting::InverseFrequency
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioProviderConfig {
    pub id: String,
    pub d: usize,
    pub profile: AudioProfile,
    #[serde(default = "default_audio_rate")]
    pub rate: f64,
    #[serde(default = "default_audio_noise")]
    pub noise_std: f64,
}

fn default_audio_rate() -> f64 {
    50.0
}

fn default_audio_noise() -> f64 {
    0.3
}

/// Vision provider names understood by the pipeline.
pub const VISION_FINETUNED: &str = "mae";
/// Pretrained encoder without task fine-tuning.
pub const VISION_RAW: &str = "mae_raw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturesConfig {
    #[serde(flatten)]
    pub set: FeatureSetSpec,
    #[serde(default)]
    pub audio: Vec<AudioProviderConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TmfSection {
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_clip")]
    pub clip_length: usize,
    #[serde(default)]
    pub mask_padded_attention: bool,
}

fn default_layers() -> usize {
    4
}

fn default_dropout() -> f64 {
    0.3
}

fn default_clip() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_weighting")]
    pub class_weighting: ClassWeighting,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingOverride {
    pub window: Option<usize>,
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    #[serde(default = "default_kind")]
    pub kind: SmoothingKind,
    #[serde(default)]
    pub au: SmoothingOverride,
    #[serde(default)]
    pub expr: SmoothingOverride,
    #[serde(default)]
    pub va: SmoothingOverride,
}

fn default_kind() -> SmoothingKind {
    SmoothingKind::Gaussian
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            kind: SmoothingKind::Gaussian,
            au: SmoothingOverride::default(),
            expr: SmoothingOverride::default(),
            va: SmoothingOverride::default(),
        }
    }
}

impl SmoothingConfig {
    /// Filter for `task`, with `kind` overriding the configured one.
    pub fn spec_for(&self, task: Task, kind: Option<SmoothingKind>) -> SmoothingSpec {
        let mut spec = SmoothingSpec::for_task(task, kind.unwrap_or(self.kind));
        let o = match task {
            Task::Au => self.au,
            Task::Expr => self.expr,
            Task::Va => self.va,
        };
        if let Some(w) = o.window {
            spec.window = w;
        }
        if let Some(s) = o.sigma {
            spec.sigma = s;
        }
        spec
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file. Unreadable or invalid files are
    /// configuration errors.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.work_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.work_dir = base.join(&cfg.work_dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported config version {} (expected {SCHEMA_VERSION})",
                self.version
            ));
        }
        self.data.synth.validate()?;
        if self.data.n_folds < 2 || self.data.val_fold >= self.data.n_folds {
            return bad(format!(
                "need n_folds >= 2 and val_fold < n_folds, got {} and {}",
                self.data.n_folds, self.data.val_fold
            ));
        }
        self.mae.validate()?;
        if self.mae.image_size != self.data.synth.image_size || self.mae.channels != self.data.synth.channels {
            return bad("mae image_size/channels must match [data]".into());
        }
        for (name, batch, lr) in [
            ("pretrain", self.pretrain.batch_size, self.pretrain.lr),
            ("finetune", self.finetune.batch_size, self.finetune.lr),
            ("fuse_train", self.fuse_train.batch_size, self.fuse_train.lr),
        ] {
            if batch == 0 {
                return bad(format!("[{name}] batch_size must be positive"));
            }
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("[{name}] lr must be non-negative"));
            }
        }
        if self.pretrain.log_every == 0 || self.pretrain.n_images == 0 {
            return bad("[pretrain] n_images and log_every must be positive".into());
        }
        if self.finetune.max_train_frames == 0 {
            return bad("[finetune] max_train_frames must be positive".into());
        }
        let set = &self.features.set;
        set.validate()?;
        for v in &set.vision_providers {
            if v != VISION_FINETUNED && v != VISION_RAW {
                return bad(format!(
                    "unknown vision provider `{v}` (expected `{VISION_FINETUNED}` or `{VISION_RAW}`)"
                ));
            }
        }
        for a in &set.audio_providers {
            let Some(p) = self.features.audio.iter().find(|p| &p.id == a) else {
                return bad(format!("audio provider `{a}` has no [[features.audio]] entry"));
            };
            if p.d == 0 || !p.rate.is_finite() || p.rate <= 0.0 || !p.noise_std.is_finite() || p.noise_std < 0.0 {
                return bad(format!("audio provider `{a}` needs d >= 1, rate > 0, noise_std >= 0"));
            }
        }
        let t = &self.tmf;
        if t.d_model == 0 || t.n_heads == 0 || !t.d_model.is_multiple_of(t.n_heads) {
            return bad("[tmf] d_model must be a positive multiple of n_heads".into());
        }
        for task in Task::ALL {
            self.smoothing.spec_for(task, None).validate()?;
        }
        Ok(())
    }

    /// Seed of a named component, derived from the root seed.
    pub fn seed_for(&self, component: &str) -> u64 {
        derive_seed(self.seed, component)
    }

    pub fn audio_provider(&self, id: &str) -> Option<&AudioProviderConfig> {
        self.features.audio.iter().find(|p| p.id == id)
    }

    /// Small preset that runs every stage within seconds.
    pub fn toy() -> Self {
        let toml = include_str!("toy_config.toml");
        Self::from_toml(toml).expect("bundled toy config is valid")
    }
}
