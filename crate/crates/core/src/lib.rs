//! Longitudinal deformation-based morphometry for fetal brain MRI.
//!
//! The crate covers the whole chain from low-resolution stack simulation to
//! voxelwise permutation statistics:
//!
//! * [`volume`]: image geometry, resampling, histogram matching and NIfTI I/O
//! * [`phantom`]: synthetic longitudinal brain phantoms with known ventricle growth
//! * [`sr`]: slice acquisition model and total-variation super-resolution
//! * [`registration`]: rigid, affine and symmetric diffeomorphic registration
//! * [`morphometry`]: log-Jacobian enlargement maps, volumetry and overlap metrics
//! * [`template`]: groupwise template construction
//! * [`stats`]: voxelwise GLM, TFCE and Freedman-Lane permutation inference
//! * [`segmentation`]: threshold/morphology ventricle segmenter
//! * [`pipeline`]: subject and cohort orchestration plus reporting

pub mod error;
pub mod filter;
pub mod morphometry;
pub mod phantom;
pub mod pipeline;
pub mod record;
pub mod registration;
pub mod segmentation;
pub mod sr;
pub mod stats;
pub mod template;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{ImageGrid, Interpolation, LabelMap, Volume};
