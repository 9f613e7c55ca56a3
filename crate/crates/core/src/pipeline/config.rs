use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::phantom::CohortDistributions;
use crate::registration::{DiffeoParams, LinearParams};
use crate::segmentation::SegParams;
use crate::sr::SrParams;
use crate::stats::{PermParams, TfceParams};
use crate::template::TemplateParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    /// Reconstruct from stacks; when off, `{pre,post}_volume.nii.gz` must be supplied.
    pub sr: bool,
    /// Run the classic segmenter; when off, `{pre,post}_ventricles.nii.gz` must be supplied.
    pub segmentation: bool,
    pub template: bool,
    pub stats: bool,
    pub report: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { sr: true, segmentation: true, template: true, stats: true, report: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_subjects: usize,
    pub planted_effect: f64,
    pub distributions: CohortDistributions,
    pub slice_thickness_mm: f64,
    pub inplane_mm: f64,
    pub motion_sigma_deg: f64,
    pub motion_sigma_mm: f64,
    /// Noise standard deviation relative to the CSF intensity.
    pub noise_sigma: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            planted_effect: 0.0,
            distributions: CohortDistributions::desk(),
            slice_thickness_mm: 3.0,
            inplane_mm: 0.5,
            motion_sigma_deg: 0.0,
            motion_sigma_mm: 0.0,
            noise_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeConfig {
    pub spacing_mm: f64,
    pub n_landmarks: usize,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self { spacing_mm: 0.5, n_landmarks: 11 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub linear: LinearParams,
    pub diffeo: DiffeoParams,
}

/// How the post→pre deformable step sees the ventricles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbmConfig {
    /// Register the segmentation masks (true) or the intensities inside dilated masks (false).
    pub binary: bool,
    pub mask_dilation_voxels: usize,
    pub crop_margin_mm: f64,
}

impl Default for DbmConfig {
    fn default() -> Self {
        Self { binary: true, mask_dilation_voxels: 2, crop_margin_mm: 4.0 }
    }
}

impl DbmConfig {
    pub fn diffeo(&self, base: &DiffeoParams) -> DiffeoParams {
        DiffeoParams { binary: self.binary, crop_margin_mm: Some(self.crop_margin_mm), ..base.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub n_perm: usize,
    pub tfce: TfceParams,
    pub alpha: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { n_perm: 500, tfce: TfceParams::default(), alpha: 0.05 }
    }
}

impl StatsConfig {
    pub fn perm(&self, seed: u64) -> PermParams {
        PermParams { n_perm: self.n_perm, seed, tfce: self.tfce }
    }
}

/// Everything that determines pipeline outputs, loaded from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for subject-level processing (does not affect results).
    pub jobs: usize,
    /// Subjects with any stack quality score above this are excluded.
    pub quality_exclusion_threshold: Option<f64>,
    pub stages: StageToggles,
    pub simulate: SimulateConfig,
    pub sr: SrParams,
    pub segmentation: SegParams,
    pub normalize: NormalizeConfig,
    pub registration: RegistrationConfig,
    pub dbm: DbmConfig,
    pub template: TemplateParams,
    pub stats: StatsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            quality_exclusion_threshold: None,
            stages: StageToggles::default(),
            simulate: SimulateConfig::default(),
            sr: SrParams::default(),
            segmentation: SegParams::default(),
            normalize: NormalizeConfig::default(),
            registration: RegistrationConfig::default(),
            dbm: DbmConfig::default(),
            template: TemplateParams::default(),
            stats: StatsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        if !(self.normalize.spacing_mm > 0.0) || self.normalize.n_landmarks < 2 {
            return Err(Error::Config("normalize: spacing must be positive and at least 2 landmarks are needed".into()));
        }
        if !(self.stats.alpha > 0.0 && self.stats.alpha < 1.0) {
            return Err(Error::Config(format!("stats.alpha must lie in (0, 1), got {}", self.stats.alpha)));
        }
        if self.stats.n_perm < 100 {
            return Err(Error::Config("stats.n_perm must be at least 100".into()));
        }
        if !(self.dbm.crop_margin_mm >= 0.0) {
            return Err(Error::Config("dbm.crop_margin_mm must be non-negative".into()));
        }
        if self.registration.linear.levels.is_empty() || self.registration.diffeo.levels.is_empty() {
            return Err(Error::Config("registration levels must not be empty".into()));
        }
        if let Some(q) = self.quality_exclusion_threshold {
            if !(q >= 0.0) {
                return Err(Error::Config("quality_exclusion_threshold must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, ignoring `jobs`.
    pub fn hash(&self) -> Result<String> {
        let canonical = Self { jobs: 0, ..self.clone() };
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }
}
