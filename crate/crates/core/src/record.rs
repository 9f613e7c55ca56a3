//! Per-subject clinical covariates and the cohort CSV.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LesionType {
    /// Myelomeningocele.
    #[serde(rename = "MMC")]
    Mmc,
    /// Myeloschisis.
    #[serde(rename = "MS")]
    Ms,
}

impl LesionType {
    /// Indicator coding used in design matrices (MS = 1).
    pub fn indicator(self) -> f64 {
        match self {
            LesionType::Mmc => 0.0,
            LesionType::Ms => 1.0,
        }
    }
}

impl std::fmt::Display for LesionType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LesionType::Mmc => "MMC",
            LesionType::Ms => "MS",
        })
    }
}

/// One row of the cohort table.
///
/// `lesion_location` is an ordinal vertebral level (larger = more caudal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub ga_pre_weeks: f64,
    pub ga_op_weeks: f64,
    pub ga_post_weeks: f64,
    pub lesion_area_mm2: f64,
    pub lesion_type: LesionType,
    pub lesion_location: i32,
    /// Known only for simulated subjects.
    #[serde(default)]
    pub true_daily_growth_mm3: Option<f64>,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if self.subject_id.trim().is_empty() {
            return Err(Error::InvalidInput("subject_id must not be empty".into()));
        }
        if !(self.ga_pre_weeks < self.ga_op_weeks && self.ga_op_weeks < self.ga_post_weeks) {
            return Err(Error::InvalidInput(format!(
                "subject {}: gestational ages must satisfy pre < op < post (got {}, {}, {})",
                self.subject_id, self.ga_pre_weeks, self.ga_op_weeks, self.ga_post_weeks
            )));
        }
        Ok(())
    }

    /// Scan-to-scan interval in days.
    pub fn delta_days(&self) -> f64 {
        7.0 * (self.ga_post_weeks - self.ga_pre_weeks)
    }

    /// Directory holding this subject's inputs below a cohort data root.
    pub fn data_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.subject_id)
    }
}

pub fn write_cohort_csv(records: &[SubjectRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cohort_csv(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: SubjectRecord = row?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}
