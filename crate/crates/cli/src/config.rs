//! Strict-schema JSON pipeline configuration: one file reproduces one
//! experiment. Unknown keys are rejected everywhere; `PATCHEM_OUTPUT_DIR`
//! overrides the configured output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use patchem_core::classifier::{Architecture, FeatureConfig, TrainConfig};
use patchem_core::dataset::PrepareConfig;
use patchem_core::em::{EmConfig, TrainSetup};
use patchem_core::patchio::{AugmentConfig, StainBasis};
use patchem_core::synth::CorpusSpec;

use crate::error::{CliError, CliResult};

pub const OUTPUT_DIR_ENV: &str = "PATCHEM_OUTPUT_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSection {
    pub size: usize,
    pub stride: usize,
    pub coarse_factor: usize,
    pub min_foreground: f64,
    pub bg_luma_threshold: f64,
}

/// SGD settings; the epoch count and snapshot points are derived from the
/// EM budget, and the seed from the top-level run seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub l2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub feature: FeatureConfig,
    pub arch: Architecture,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub normalize: bool,
    pub l2: f64,
    #[serde(default = "default_holdout_frac")]
    pub holdout_frac: f64,
}

fn default_holdout_frac() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
}

fn default_train_frac() -> f64 {
    0.8
}

/// Whole-image baseline settings for the matrix runner. `crop_size` defaults
/// to half the image side at run time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageBaselineSection {
    #[serde(default)]
    pub crop_size: Option<usize>,
    #[serde(default = "default_crops_per_image")]
    pub crops_per_image: usize,
}

fn default_crops_per_image() -> usize {
    5
}

impl Default for ImageBaselineSection {
    fn default() -> Self {
        ImageBaselineSection { crop_size: None, crops_per_image: default_crops_per_image() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Required by `synth` only.
    #[serde(default)]
    pub synth: Option<CorpusSpec>,
    pub patch: PatchSection,
    pub augment: AugmentConfig,
    pub classifier: ClassifierSection,
    pub em: EmConfig,
    pub fusion: FusionSection,
    pub eval: EvalSection,
    #[serde(default)]
    pub image_baseline: ImageBaselineSection,
}

impl PipelineConfig {
    /// Parse, validate and resolve (env overrides applied).
    pub fn load(path: &Path) -> CliResult<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(e))?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            config.paths.output_dir = PathBuf::from(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.patch.size < 8 || self.patch.stride == 0 || self.patch.stride > self.patch.size {
            return bad("patch: need size >= 8 and 1 <= stride <= size".into());
        }
        if self.patch.coarse_factor < 2 {
            return bad("patch.coarse_factor must be > 1".into());
        }
        for (name, v) in [
            ("patch.min_foreground", self.patch.min_foreground),
            ("patch.bg_luma_threshold", self.patch.bg_luma_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0,1]"));
            }
        }
        if self.augment.crop_size == 0 || self.augment.crop_size > self.patch.size {
            return bad("augment.crop_size must be in 1..=patch.size".into());
        }
        if !(self.augment.stain_sigma >= 0.0) {
            return bad("augment.stain_sigma must be >= 0".into());
        }
        if let FeatureConfig { kind: patchem_core::classifier::FeatureKind::BlockStats, block } =
            &self.classifier.feature
        {
            if *block == 0 || self.patch.size % block != 0 || self.augment.crop_size % block != 0 {
                return bad(
                    "classifier.feature.block must divide both patch.size and augment.crop_size"
                        .into(),
                );
            }
        }
        if !(self.classifier.train.learning_rate >= 0.0) {
            return bad("classifier.train.learning_rate must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.classifier.train.momentum) {
            return bad("classifier.train.momentum must be in [0,1)".into());
        }
        if self.classifier.train.batch_size == 0 {
            return bad("classifier.train.batch_size must be >= 1".into());
        }
        if !(self.classifier.train.l2 >= 0.0 && self.fusion.l2 >= 0.0) {
            return bad("l2 coefficients must be >= 0".into());
        }
        self.em.validate().map_err(CliError::from)?;
        if !(0.0..1.0).contains(&self.fusion.holdout_frac) {
            return bad("fusion.holdout_frac must be in [0,1)".into());
        }
        if !(self.eval.train_frac > 0.0 && self.eval.train_frac < 1.0) {
            return bad("eval.train_frac must be in (0,1)".into());
        }
        if self.image_baseline.crops_per_image == 0 {
            return bad("image_baseline.crops_per_image must be >= 1".into());
        }
        if let Some(synth) = &self.synth {
            synth.validate().map_err(CliError::from)?;
            if synth.patch_size != self.patch.size {
                return bad(format!(
                    "synth.patch_size {} must equal patch.size {}",
                    synth.patch_size, self.patch.size
                ));
            }
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> CliResult<&CorpusSpec> {
        self.synth
            .as_ref()
            .ok_or_else(|| CliError::config("this command requires the `synth` config section"))
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        PrepareConfig {
            patch_size: self.patch.size,
            stride: self.patch.stride,
            coarse_factor: self.patch.coarse_factor,
            min_foreground: self.patch.min_foreground,
            bg_luma_threshold: self.patch.bg_luma_threshold,
            holdout_frac: self.fusion.holdout_frac,
            seed: self.seed,
        }
    }

    /// Training setup for one M-step; epochs and snapshot points are filled
    /// in by the EM driver.
    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            train: TrainConfig {
                learning_rate: self.classifier.train.learning_rate,
                momentum: self.classifier.train.momentum,
                batch_size: self.classifier.train.batch_size,
                epochs: 1,
                l2: self.classifier.train.l2,
                seed: self.seed,
                snapshot_points: vec![1.0],
            },
            arch: self.classifier.arch,
            feature: self.classifier.feature.clone(),
            augment: self.augment.clone(),
            stain_basis: StainBasis::default_he(),
        }
    }

    /// The resolved config as a JSON value, for report echoes.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
