//! Geometric 3D images, resampling, histogram matching and NIfTI I/O.

mod grid;
mod histogram;
mod image;
pub mod nifti;

pub use grid::{orthonormalize, rotation_from_vector, ImageGrid};
pub use histogram::{
    histogram_match, histogram_match_masked, quantile_landmarks, quantile_sorted,
    HistogramMatchParams, DEFAULT_LANDMARKS,
};
pub use image::{
    standard_label_names, Interpolation, LabelMap, Volume, BACKGROUND, BRAIN_STEM, CEREBELLUM,
    CSF, GREY_MATTER, VENTRICLES, WHITE_MATTER,
};
pub(crate) use image::{linear_stencil, sample_scalar};
pub use nifti::{read_4d, read_image, read_labels, read_volume, write_4d, write_labels, write_volume, AnyImage};
