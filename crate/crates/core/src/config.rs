//! Pipeline configuration: TOML file, environment overrides, CLI overrides,
//! and validation.
//!
//! The `reference` profile pins every mixture probability, transform range,
//! and loss weight to the shipped defaults; overriding one of them there is
//! a config error. The `custom` profile frees all of them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::face_geometry::{FeatureGroups, MaskAugmentConfig};
use crate::forgery_math::LossWeights;
use crate::pixel_transforms::TransformRanges;
use crate::reconstruction::{AdapterConfig, BranchProbs, BuiltinReconConfig};
use crate::synthesis::{MaskKindProbs, SynthesisOptions};

pub const ENV_PREFIX: &str = "FORGE_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Reference,
    Custom,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub p_macro81: f64,
    pub p_macro4: f64,
    pub p_micro: f64,
    pub macro4_margin: f64,
    pub micro_dilate_radius: u32,
    pub augment: MaskAugmentConfig,
}

impl Default for MaskConfig {
    fn default() -> Self {
        let probs = MaskKindProbs::default();
        MaskConfig {
            p_macro81: probs.p_macro81,
            p_macro4: probs.p_macro4,
            p_micro: probs.p_micro,
            macro4_margin: 0.05,
            micro_dilate_radius: 3,
            augment: MaskAugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub p_ae: f64,
    pub p_sr: f64,
    pub builtin: BuiltinReconConfig,
    pub adapter: Option<AdapterConfig>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        let probs = BranchProbs::default();
        ReconConfig {
            p_ae: probs.p_ae,
            p_sr: probs.p_sr,
            builtin: BuiltinReconConfig::default(),
            adapter: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub input_root: PathBuf,
    pub landmarks: PathBuf,
    pub output_root: PathBuf,
    /// Mandatory; there is deliberately no wall-clock fallback.
    pub seed: Option<u64>,
    pub workers: usize,
    /// Fraction of failed samples above which a run exits nonzero.
    pub failure_threshold: f64,
    /// Boundary-band width at feature resolution, in pixels.
    pub band_width: u32,
    pub mask_retries: u32,
    pub verify_fraction: f64,
    pub verify_floor: usize,
    pub mask: MaskConfig,
    pub transform: TransformRanges,
    pub recon: ReconConfig,
    pub loss: LossWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            profile: Profile::Reference,
            input_root: PathBuf::from("."),
            landmarks: PathBuf::from("landmarks.jsonl"),
            output_root: PathBuf::from("out"),
            seed: None,
            workers: 1,
            failure_threshold: 0.01,
            band_width: 2,
            mask_retries: 5,
            verify_fraction: 0.05,
            verify_floor: 10,
            mask: MaskConfig::default(),
            transform: TransformRanges::default(),
            recon: ReconConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

/// CLI-level overrides applied after file and environment.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub output_root: Option<PathBuf>,
    pub input_root: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ForgeError::Config(format!("config parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Precedence: file < environment (`FORGE_SEED`, `FORGE_WORKERS`,
    /// `FORGE_OUT`, `FORGE_INPUT_ROOT`, `FORGE_LANDMARKS`) < CLI flags.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(seed) = read_env_parsed::<u64>("SEED")? {
            self.seed = Some(seed);
        }
        if let Some(workers) = read_env_parsed::<usize>("WORKERS")? {
            self.workers = workers;
        }
        if let Some(out) = read_env("OUT") {
            self.output_root = PathBuf::from(out);
        }
        if let Some(root) = read_env("INPUT_ROOT") {
            self.input_root = PathBuf::from(root);
        }
        if let Some(lm) = read_env("LANDMARKS") {
            self.landmarks = PathBuf::from(lm);
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &ConfigOverrides) {
        if let Some(seed) = overrides.seed {
            self.seed = Some(seed);
        }
        if let Some(workers) = overrides.workers {
            self.workers = workers;
        }
        if let Some(out) = &overrides.output_root {
            self.output_root = out.clone();
        }
        if let Some(root) = &overrides.input_root {
            self.input_root = root.clone();
        }
        if let Some(lm) = &overrides.landmarks {
            self.landmarks = lm.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(ForgeError::Config(
                "seed is mandatory: set `seed` in the config, FORGE_SEED, or --seed".to_string(),
            ));
        }
        if self.workers == 0 {
            return Err(ForgeError::Config("workers must be at least 1".to_string()));
        }
        let mask_sum = self.mask.p_macro81 + self.mask.p_macro4 + self.mask.p_micro;
        if (mask_sum - 1.0).abs() > 1e-9 {
            return Err(ForgeError::Config(format!(
                "mask kind probabilities sum to {mask_sum}, expected 1"
            )));
        }
        for p in [self.mask.p_macro81, self.mask.p_macro4, self.mask.p_micro] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ForgeError::Config(format!("mask probability {p} out of range")));
            }
        }
        if !(0.0..=1.0).contains(&self.recon.p_ae)
            || !(0.0..=1.0).contains(&self.recon.p_sr)
            || self.recon.p_ae + self.recon.p_sr > 1.0 + 1e-9
        {
            return Err(ForgeError::Config(format!(
                "reconstruction probabilities ae={} sr={} leave no room for identity",
                self.recon.p_ae, self.recon.p_sr
            )));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(ForgeError::Config(
                "failure_threshold must lie in [0, 1]".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.verify_fraction) {
            return Err(ForgeError::Config(
                "verify_fraction must lie in [0, 1]".to_string(),
            ));
        }
        self.loss.validate()?;
        if self.profile == Profile::Reference {
            self.enforce_reference_profile()?;
        }
        if let Some(adapter) = &self.recon.adapter {
            adapter.validate()?;
        }
        Ok(())
    }

    fn enforce_reference_profile(&self) -> Result<()> {
        let defaults = PipelineConfig::default();
        let mut frozen: Vec<&str> = Vec::new();
        if (self.mask.p_macro81, self.mask.p_macro4, self.mask.p_micro)
            != (
                defaults.mask.p_macro81,
                defaults.mask.p_macro4,
                defaults.mask.p_micro,
            )
        {
            frozen.push("mask kind probabilities");
        }
        if (self.recon.p_ae, self.recon.p_sr) != (defaults.recon.p_ae, defaults.recon.p_sr) {
            frozen.push("reconstruction probabilities");
        }
        if self.loss != defaults.loss {
            frozen.push("loss weights");
        }
        if self.transform != defaults.transform {
            frozen.push("transform ranges");
        }
        if frozen.is_empty() {
            Ok(())
        } else {
            Err(ForgeError::Config(format!(
                "profile \"reference\" pins {}; switch to profile = \"custom\" to override",
                frozen.join(", ")
            )))
        }
    }

    /// Input paths must resolve before a run starts.
    pub fn validate_paths(&self) -> Result<()> {
        if !self.input_root.is_dir() {
            return Err(ForgeError::Config(format!(
                "input_root is not a directory: {}",
                self.input_root.display()
            )));
        }
        if !self.landmarks.is_file() {
            return Err(ForgeError::Config(format!(
                "landmark file not found: {}",
                self.landmarks.display()
            )));
        }
        Ok(())
    }

    pub fn synthesis_options(&self) -> SynthesisOptions {
        SynthesisOptions {
            mask_probs: MaskKindProbs {
                p_macro81: self.mask.p_macro81,
                p_macro4: self.mask.p_macro4,
                p_micro: self.mask.p_micro,
            },
            macro4_margin: self.mask.macro4_margin,
            micro_dilate_radius: self.mask.micro_dilate_radius,
            feature_groups: FeatureGroups::standard_81(),
            mask_augment: self.mask.augment.clone(),
            transform: self.transform.clone(),
            branch_probs: BranchProbs {
                p_ae: self.recon.p_ae,
                p_sr: self.recon.p_sr,
            },
            builtin_recon: self.recon.builtin.clone(),
            adapter: self.recon.adapter.clone(),
            mask_retries: self.mask_retries,
        }
    }
}

fn read_env(key: &str) -> Option<String> {
    std::env::var(format!("{ENV_PREFIX}{key}")).ok()
}

fn read_env_parsed<T: std::str::FromStr>(key: &str) -> Result<Option<T>> {
    match read_env(key) {
        None => Ok(None),
        Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
            ForgeError::Config(format!("{ENV_PREFIX}{key} has invalid value {raw:?}"))
        }),
    }
}
