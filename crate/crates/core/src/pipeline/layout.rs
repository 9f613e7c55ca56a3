//! File names of pipeline inputs and outputs.

use std::path::{Path, PathBuf};

use crate::sr::{sidecar_path, Orientation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timepoint {
    Pre,
    Post,
}

pub const TIMEPOINTS: [Timepoint; 2] = [Timepoint::Pre, Timepoint::Post];

impl Timepoint {
    pub fn name(self) -> &'static str {
        match self {
            Timepoint::Pre => "pre",
            Timepoint::Post => "post",
        }
    }
}

/// Where one subject's inputs live and where its outputs go.
#[derive(Debug, Clone)]
pub struct SubjectLayout {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl SubjectLayout {
    pub fn new(data_root: &Path, out_root: &Path, subject_id: &str) -> Self {
        Self { data: data_root.join(subject_id), out: out_root.join("subjects").join(subject_id) }
    }

    pub fn stack(&self, tp: Timepoint, o: Orientation) -> PathBuf {
        self.data.join(format!("{}_stack_{}.nii.gz", tp.name(), o.name()))
    }

    /// Stack images followed by their JSON sidecars.
    pub fn stack_files(&self, tp: Timepoint) -> Vec<PathBuf> {
        let images: Vec<PathBuf> = Orientation::ALL.iter().map(|&o| self.stack(tp, o)).collect();
        let sidecars: Vec<PathBuf> = images.iter().map(|p| sidecar_path(p)).collect();
        images.into_iter().chain(sidecars).collect()
    }

    pub fn brain_mask(&self, tp: Timepoint) -> PathBuf {
        self.data.join(format!("{}_brain_mask.nii.gz", tp.name()))
    }

    pub fn truth_ventricles(&self, tp: Timepoint) -> PathBuf {
        self.data.join(format!("{}_truth_ventricles.nii.gz", tp.name()))
    }

    /// SR output, or the supplied `{tp}_volume.nii.gz` when reconstruction is disabled.
    pub fn sr(&self, tp: Timepoint, reconstruct: bool) -> PathBuf {
        if reconstruct {
            self.out.join(format!("{}_sr.nii.gz", tp.name()))
        } else {
            self.data.join(format!("{}_volume.nii.gz", tp.name()))
        }
    }

    pub fn sr_report(&self, tp: Timepoint) -> PathBuf {
        self.out.join(format!("{}_sr.json", tp.name()))
    }

    /// Segmentation output, or the supplied label file when segmentation is disabled.
    pub fn ventricles(&self, tp: Timepoint, segment: bool) -> PathBuf {
        let dir = if segment { &self.out } else { &self.data };
        dir.join(format!("{}_ventricles.nii.gz", tp.name()))
    }

    pub fn norm(&self, tp: Timepoint) -> PathBuf {
        self.out.join(format!("{}_norm.nii.gz", tp.name()))
    }

    pub fn norm_ventricles(&self, tp: Timepoint) -> PathBuf {
        self.out.join(format!("{}_ventricles_norm.nii.gz", tp.name()))
    }

    pub fn norm_brain_mask(&self, tp: Timepoint) -> PathBuf {
        self.out.join(format!("{}_brain_mask_norm.nii.gz", tp.name()))
    }

    pub fn quality(&self) -> PathBuf {
        self.out.join("quality.json")
    }

    pub fn rigid(&self) -> PathBuf {
        self.out.join("rigid.json")
    }

    pub fn affine(&self) -> PathBuf {
        self.out.join("affine.json")
    }

    pub fn field(&self) -> PathBuf {
        self.out.join("field.nii.gz")
    }

    pub fn registration_report(&self) -> PathBuf {
        self.out.join("registration.json")
    }

    pub fn logjac(&self) -> PathBuf {
        self.out.join("logjac.nii.gz")
    }

    pub fn daily_logjac(&self) -> PathBuf {
        self.out.join("daily_logjac.nii.gz")
    }

    pub fn dbm_report(&self) -> PathBuf {
        self.out.join("dbm.json")
    }

    pub fn volumetry(&self) -> PathBuf {
        self.out.join("volumetry.json")
    }

    pub fn enlargement_template(&self) -> PathBuf {
        self.out.join("enlargement_template.nii.gz")
    }
}

/// Cohort-level output locations.
#[derive(Debug, Clone)]
pub struct CohortLayout {
    pub out: PathBuf,
}

impl CohortLayout {
    pub fn new(out_root: &Path) -> Self {
        Self { out: out_root.to_path_buf() }
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.out.join("cohort")
    }

    pub fn template(&self, tp: Timepoint) -> PathBuf {
        self.out.join("templates").join(format!("{}_template.nii.gz", tp.name()))
    }

    pub fn template_report(&self, tp: Timepoint) -> PathBuf {
        self.out.join("templates").join(format!("{}_template.json", tp.name()))
    }

    pub fn template_affine(&self, tp: Timepoint, subject: &str) -> PathBuf {
        self.out.join("templates").join(tp.name()).join(format!("{subject}_affine.json"))
    }

    pub fn template_field(&self, tp: Timepoint, subject: &str) -> PathBuf {
        self.out.join("templates").join(tp.name()).join(format!("{subject}_field.nii.gz"))
    }

    pub fn stack(&self) -> PathBuf {
        self.out.join("cohort").join("stack4d.nii.gz")
    }

    pub fn stack_order(&self) -> PathBuf {
        self.out.join("cohort").join("stack_order.csv")
    }

    pub fn stats_map(&self, predictor: &str, kind: &str) -> PathBuf {
        self.out.join("stats").join(format!("{predictor}_{kind}.nii.gz"))
    }

    pub fn stats_summary(&self) -> PathBuf {
        self.out.join("stats").join("summary.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
}
