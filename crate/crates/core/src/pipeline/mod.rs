//! Subject and cohort orchestration with resumable, manifest-tracked stages.

pub mod cohort;
pub mod config;
pub mod layout;
pub mod manifest;
pub mod report;
pub mod simulate;
pub mod subject;

pub use config::PipelineConfig;
pub use layout::{CohortLayout, SubjectLayout, Timepoint, TIMEPOINTS};
pub use manifest::{Manifest, StageRunner, StageStatus, UnitStatus};
pub use subject::{run_subject, SubjectOutcome};
pub use cohort::{run_cohort, CohortOutcome};
