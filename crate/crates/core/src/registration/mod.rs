//! Rigid, affine and diffeomorphic registration with the transform algebra the
//! pipeline needs to chain them.
//!
//! Every transform and field maps points of the fixed (target) space to the
//! moving (source) space, so warping an image is a pull-back:
//! `out(x) = source(T(x))`.

mod diffeo;
mod field;
mod linear;
mod metric;
mod transform;

use nalgebra::Vector3;

pub use diffeo::{register_diffeo, DiffeoParams, DiffeoReport, DiffeoResult};
pub use field::{DeformationField, VelocityField, DEFAULT_SQUARINGS};
pub use linear::{center_of_mass, pyramid_level, register_affine, register_rigid, transform_metric, LinearParams, LinearReport};
pub use metric::Metric;
pub use transform::{AffineTransform, RigidTransform, TransformKind, CONVENTION};

use crate::error::Result;
use crate::volume::{ImageGrid, Interpolation, LabelMap, Volume};

/// Any point map usable for resampling.
#[derive(Debug, Clone, Copy)]
pub enum Warp<'a> {
    Identity,
    Rigid(&'a RigidTransform),
    Affine(&'a AffineTransform),
    Field(&'a DeformationField),
}

impl Warp<'_> {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Warp::Identity => *p,
            Warp::Rigid(t) => t.apply(p),
            Warp::Affine(t) => t.apply(p),
            Warp::Field(f) => f.map_point(p),
        }
    }
}

/// Resamples `vol` onto `target` through `warp`.
pub fn apply_transform(vol: &Volume, warp: Warp<'_>, target: &ImageGrid, interp: Interpolation) -> Result<Volume> {
    match warp {
        Warp::Identity => vol.resample(target, interp),
        w => Ok(vol.resample_with(target, interp, |p| w.apply(p))),
    }
}

/// Nearest-neighbor label resampling through `warp`.
pub fn apply_transform_labels(labels: &LabelMap, warp: Warp<'_>, target: &ImageGrid) -> Result<LabelMap> {
    match warp {
        Warp::Identity => labels.resample(target, Interpolation::Nearest),
        w => Ok(labels.resample_with(target, |p| w.apply(p))),
    }
}

/// Dense field of `x ↦ a(b(x))` on `grid`.
pub fn compose(a: Warp<'_>, b: Warp<'_>, grid: &ImageGrid) -> DeformationField {
    DeformationField::from_fn(grid.clone(), |x| {
        let q = a.apply(&b.apply(x)) - x;
        [q.x, q.y, q.z]
    })
}

/// Output of the full rigid → affine → diffeomorphic chain.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub rigid: RigidTransform,
    pub affine: AffineTransform,
    pub diffeo: DiffeoResult,
    pub linear_report: LinearReport,
}

/// Runs the linear stages on `(fixed_linear, moving_linear)` and the deformable
/// stage on `(fixed, moving)`; the two pairs may differ (for example whole
/// images for the linear part and masked images for the deformable part).
pub fn register_chain(
    fixed_linear: &Volume,
    moving_linear: &Volume,
    fixed: &Volume,
    moving: &Volume,
    linear: &LinearParams,
    diffeo: &DiffeoParams,
) -> Result<ChainResult> {
    let (rigid, _) = register_rigid(fixed_linear, moving_linear, linear)?;
    let (affine, linear_report) = register_affine(fixed_linear, moving_linear, linear, Some(&rigid.to_affine()))?;
    let diffeo = register_diffeo(fixed, moving, Some(&affine), diffeo)?;
    Ok(ChainResult { rigid, affine, diffeo, linear_report })
}
