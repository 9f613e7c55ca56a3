//! Deformation-based morphometry: log-Jacobian maps, daily scaling, transport
//! to template space, 4D stacking, label volumetry and overlap scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{DeformationField, Warp};
use crate::volume::{read_4d, write_4d, ImageGrid, Interpolation, LabelMap, Volume};

/// Value written where the Jacobian determinant is not positive.
pub const LOGDET_SENTINEL: f32 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct JacobianDiagnostics {
    pub nonpositive: usize,
}

/// `ln det(I + ∂u/∂x)` per voxel, world-mm central differences.
pub fn jacobian_log_det(field: &DeformationField) -> (Volume, JacobianDiagnostics) {
    let mut nonpositive = 0;
    let data = field
        .jacobian_determinants()
        .into_iter()
        .map(|d| {
            if d > 0.0 {
                d.ln() as f32
            } else {
                nonpositive += 1;
                LOGDET_SENTINEL
            }
        })
        .collect();
    let vol = Volume::new(field.grid().clone(), data).expect("one value per voxel");
    (vol, JacobianDiagnostics { nonpositive })
}

/// Divides a log-Jacobian map by the scan interval, giving the log of the per-day determinant.
pub fn scale_daily(logjac: &Volume, delta_days: f64) -> Result<Volume> {
    if !(delta_days > 0.0) || !delta_days.is_finite() {
        return Err(Error::InvalidInput(format!("scan interval must be positive, got {delta_days} days")));
    }
    Ok(logjac.map(|v| (v as f64 / delta_days) as f32))
}

/// Daily log-Jacobian map of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct EnlargementMap {
    pub subject_id: String,
    pub delta_days: f64,
    pub values: Volume,
}

impl EnlargementMap {
    pub fn new(subject_id: impl Into<String>, delta_days: f64, values: Volume) -> Result<Self> {
        if !(delta_days > 0.0) {
            return Err(Error::InvalidInput(format!("scan interval must be positive, got {delta_days} days")));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("enlargement map contains non-finite values".into()));
        }
        Ok(Self { subject_id: subject_id.into(), delta_days, values })
    }

    pub fn grid(&self) -> &ImageGrid {
        self.values.grid()
    }
}

/// Pulls `map` back into template space; `chain` maps template points to subject
/// points and is applied first to last.
pub fn transport_to_template(map: &Volume, chain: &[Warp<'_>], template: &ImageGrid) -> Volume {
    map.resample_with(template, Interpolation::Linear, |p| chain.iter().fold(*p, |q, w| w.apply(&q)))
}

/// Maps on a common grid in cohort row order.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack4d {
    pub subject_ids: Vec<String>,
    pub frames: Vec<Volume>,
}

pub fn stack_4d(maps: &[EnlargementMap]) -> Result<Stack4d> {
    let first = maps.first().ok_or_else(|| Error::InvalidInput("no maps to stack".into()))?;
    for m in maps {
        if !m.grid().same_as(first.grid(), 1e-6) {
            return Err(Error::GeometryMismatch(format!("map of {} is not on the template grid", m.subject_id)));
        }
    }
    Ok(Stack4d {
        subject_ids: maps.iter().map(|m| m.subject_id.clone()).collect(),
        frames: maps.iter().map(|m| m.values.clone()).collect(),
    })
}

impl Stack4d {
    pub fn grid(&self) -> &ImageGrid {
        self.frames[0].grid()
    }

    /// Voxelwise mean over frames.
    pub fn mean(&self) -> Volume {
        let n = self.frames.len() as f64;
        let len = self.grid().len();
        let data = (0..len)
            .map(|i| (self.frames.iter().map(|f| f.data()[i] as f64).sum::<f64>() / n) as f32)
            .collect();
        Volume::new(self.grid().clone(), data).expect("same grid")
    }

    /// Writes the 4D NIfTI and a CSV naming the subject of each frame.
    pub fn write(&self, image: impl AsRef<Path>, order_csv: impl AsRef<Path>) -> Result<()> {
        write_4d(&self.frames, image)?;
        let mut w = csv::Writer::from_path(order_csv)?;
        w.write_record(["frame", "subject_id"])?;
        for (i, s) in self.subject_ids.iter().enumerate() {
            w.write_record([i.to_string(), s.clone()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(image: impl AsRef<Path>, order_csv: impl AsRef<Path>) -> Result<Self> {
        let frames = read_4d(image)?;
        let mut r = csv::Reader::from_path(order_csv)?;
        let mut subject_ids = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            subject_ids.push(rec.get(1).unwrap_or_default().to_string());
        }
        if subject_ids.len() != frames.len() {
            return Err(Error::InvalidInput(format!(
                "{} frames but {} subjects in the row-order file",
                frames.len(),
                subject_ids.len()
            )));
        }
        Ok(Self { subject_ids, frames })
    }
}

/// Voxel count of `label` times the voxel volume (mm³).
pub fn label_volume(map: &LabelMap, label: u16) -> f64 {
    map.count(label) as f64 * map.grid().voxel_volume()
}

/// Daily volume change (mm³/day) between gestational ages given in weeks.
pub fn growth_rate(v_pre: f64, v_post: f64, ga_pre: f64, ga_post: f64) -> Result<f64> {
    if !(ga_post > ga_pre) {
        return Err(Error::InvalidInput(format!("post-operative GA {ga_post} must exceed pre-operative GA {ga_pre}")));
    }
    Ok((v_post - v_pre) / (7.0 * (ga_post - ga_pre)))
}

/// Volume the deformation assigns to a mask: Σ det J × voxel volume over the mask.
pub fn jacobian_integral(field: &DeformationField, mask: &[bool]) -> Result<f64> {
    if mask.len() != field.grid().len() {
        return Err(Error::GeometryMismatch("mask and field sizes differ".into()));
    }
    let vv = field.grid().voxel_volume();
    Ok(field.jacobian_determinants().iter().zip(mask).filter(|(_, &m)| m).map(|(d, _)| d * vv).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn overlap_metrics(pred: &LabelMap, truth: &LabelMap, label: u16) -> Result<OverlapMetrics> {
    if !pred.grid().same_as(truth.grid(), 1e-6) {
        return Err(Error::GeometryMismatch("prediction and truth grids differ".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == label, t == label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::InvalidInput(format!("truth has no voxels of label {label}")));
    }
    let specificity = if tn + fp == 0 { 1.0 } else { tn as f64 / (tn + fp) as f64 };
    Ok(OverlapMetrics {
        dice: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
        sensitivity: tp as f64 / (tp + fn_) as f64,
        specificity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::AffineTransform;
    use nalgebra::{Matrix3, Vector3};

    fn grid() -> ImageGrid {
        ImageGrid::isotropic(20, 0.5).unwrap()
    }

    fn interior(g: &ImageGrid, i: usize) -> bool {
        let c = g.coords(i);
        (0..3).all(|a| c[a] > 0 && c[a] + 1 < g.dims()[a])
    }

    #[test]
    fn identity_field_has_zero_log_det() {
        let (v, d) = jacobian_log_det(&DeformationField::identity(grid()));
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(d.nonpositive, 0);
    }

    #[test]
    fn uniform_scale_log_det() {
        let f = DeformationField::from_fn(grid(), |p| [0.1 * p.x, 0.1 * p.y, 0.1 * p.z]);
        let (v, _) = jacobian_log_det(&f);
        for x in v.data() {
            assert!((*x as f64 - 3.0 * 1.1f64.ln()).abs() < 1e-6);
        }
        // the commonly quoted 0.28618 agrees with 3 ln 1.1 = 0.285931 only to 3e-4
        assert!((3.0 * 1.1f64.ln() - 0.28618).abs() < 1e-3);
    }

    #[test]
    fn polynomial_field_matches_analytic_jacobian() {
        let g = ImageGrid::isotropic(32, 0.25).unwrap();
        // u = (a x y, b y z², c x² + d z); ∂u/∂x by hand
        let (a, b, c, d) = (0.02, -0.015, 0.01, 0.05);
        let f = DeformationField::from_fn(g.clone(), |p| [a * p.x * p.y, b * p.y * p.z * p.z, c * p.x * p.x + d * p.z]);
        let (v, _) = jacobian_log_det(&f);
        for i in (0..g.len()).filter(|&i| interior(&g, i)) {
            let p = g.world_of_index(i);
            let j = Matrix3::new(
                1.0 + a * p.y, a * p.x, 0.0,
                0.0, 1.0 + b * p.z * p.z, 2.0 * b * p.y * p.z,
                2.0 * c * p.x, 0.0, 1.0 + d,
            );
            assert!((v.data()[i] as f64 - j.determinant().ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn folded_voxels_get_the_sentinel() {
        let f = DeformationField::from_fn(grid(), |p| [-2.0 * p.x, 0.0, 0.0]);
        let (v, d) = jacobian_log_det(&f);
        assert_eq!(d.nonpositive, grid().len());
        assert!(v.data().iter().all(|&x| x == LOGDET_SENTINEL));
    }

    #[test]
    fn composition_adds_log_dets() {
        let g = ImageGrid::isotropic(24, 0.5).unwrap();
        let f = DeformationField::from_fn(g.clone(), |p| [0.05 * (0.3 * p.y).sin(), 0.04 * p.z, 0.03 * (0.2 * p.x).cos()]);
        let h = DeformationField::from_fn(g.clone(), |p| [0.02 * p.x, 0.03 * (0.25 * p.x).sin(), -0.01 * p.y]);
        let (lf, _) = jacobian_log_det(&f);
        let (lh, _) = jacobian_log_det(&h);
        let (lfh, _) = jacobian_log_det(&f.compose(&h));
        for i in (0..g.len()).filter(|&i| {
            let c = g.coords(i);
            (0..3).all(|a| c[a] > 2 && c[a] + 3 < 24)
        }) {
            let at_h = lf.sample_linear(&h.map_point(&g.world_of_index(i)));
            assert!((lfh.data()[i] as f64 - (at_h + lh.data()[i] as f64)).abs() < 2e-3);
        }
    }

    #[test]
    fn daily_scaling() {
        let m = Volume::filled(grid(), 0.28);
        assert_eq!(scale_daily(&m, 1.0).unwrap(), m);
        assert!(scale_daily(&m, 28.0).unwrap().data().iter().all(|&v| (v - 0.01).abs() < 1e-7));
        let days: f64 = 7.0 * (27.7 - 23.2);
        assert!((days - 31.5).abs() < 1e-9);
        let s = scale_daily(&m, days).unwrap();
        assert!(s.data().iter().all(|&v| v == (0.28f32 as f64 / days) as f32));
        assert!(scale_daily(&m, 0.0).is_err());
        let twice = scale_daily(&m.map(|v| 2.0 * v), 31.5).unwrap();
        assert!(twice.data().iter().zip(s.data()).all(|(a, b)| (a - 2.0 * b).abs() < 1e-7));
    }

    #[test]
    fn growth_examples() {
        assert!((growth_rate(8953.0, 20480.0, 23.5, 27.5).unwrap() - 411.678_571).abs() < 1e-3);
        assert_eq!(growth_rate(500.0, 500.0, 23.0, 26.0).unwrap(), 0.0);
        assert!(growth_rate(1.0, 2.0, 25.0, 25.0).is_err());
        let g = ImageGrid::isotropic(10, 0.5).unwrap();
        let labels = LabelMap::with_default_names(g, (0..1000).map(|_| 1).collect()).unwrap();
        assert!((label_volume(&labels, 1) - 125.0).abs() < 1e-9);
    }

    #[test]
    fn overlap_examples() {
        let g = ImageGrid::isotropic(10, 1.0).unwrap();
        let a: Vec<u16> = (0..1000).map(|i| (i < 100) as u16).collect();
        let b: Vec<u16> = (0..1000).map(|i| (i >= 100 && i < 200) as u16).collect();
        let la = LabelMap::with_default_names(g.clone(), a).unwrap();
        let lb = LabelMap::with_default_names(g.clone(), b).unwrap();
        let same = overlap_metrics(&la, &la, 1).unwrap();
        assert_eq!((same.dice, same.sensitivity, same.specificity), (1.0, 1.0, 1.0));
        let dis = overlap_metrics(&la, &lb, 1).unwrap();
        assert_eq!((dis.dice, dis.sensitivity), (0.0, 0.0));
        assert_eq!(overlap_metrics(&la, &lb, 1).unwrap().dice, overlap_metrics(&lb, &la, 1).unwrap().dice);
        assert!(overlap_metrics(&la, &LabelMap::empty(g), 1).is_err());
    }

    #[test]
    fn transport_moves_blob_centroid() {
        let g = ImageGrid::isotropic(32, 0.5).unwrap();
        let center = Vector3::new(0.5, -1.0, 0.25);
        let blob = Volume::from_world_fn(g.clone(), |p| (-(p - center).norm_squared() / 0.5).exp() as f32);
        let shift = Vector3::new(1.5, 1.0, -2.0);
        // template point x corresponds to subject point x − shift
        let t = AffineTransform::new(Matrix3::identity(), -shift, Vector3::zeros()).unwrap();
        let moved = transport_to_template(&blob, &[Warp::Affine(&t)], &g);
        let centroid = |v: &Volume| {
            let (w, s) = (0..g.len()).fold((0.0, Vector3::zeros()), |(w, s), i| {
                let x = v.data()[i] as f64;
                (w + x, s + g.world_of_index(i) * x)
            });
            s / w
        };
        let d = centroid(&moved) - centroid(&blob) - shift;
        assert!(d.norm() < 0.5 * 0.5, "{d}");
        assert_eq!(transport_to_template(&blob, &[Warp::Identity], &g), blob);
    }

    #[test]
    fn stack_of_identical_maps_is_constant_in_time() {
        let m = EnlargementMap::new("a", 30.0, Volume::from_world_fn(grid(), |p| p.x as f32)).unwrap();
        let maps: Vec<_> = (0..4).map(|k| EnlargementMap { subject_id: format!("s{k}"), ..m.clone() }).collect();
        let s = stack_4d(&maps).unwrap();
        assert_eq!(s.mean(), m.values);
        let dir = tempfile::tempdir().unwrap();
        s.write(dir.path().join("maps.nii.gz"), dir.path().join("order.csv")).unwrap();
        let back = Stack4d::read(dir.path().join("maps.nii.gz"), dir.path().join("order.csv")).unwrap();
        assert_eq!(back.subject_ids, s.subject_ids);
        assert_eq!(back.frames, s.frames);
        let other = EnlargementMap::new("x", 1.0, Volume::zeros(ImageGrid::isotropic(5, 1.0).unwrap())).unwrap();
        assert!(stack_4d(&[m, other]).is_err());
    }

    #[test]
    fn analytic_mass_conservation() {
        let g = ImageGrid::isotropic(48, 0.5).unwrap();
        let mask: Vec<bool> = (0..g.len()).map(|i| g.world_of_index(i).norm() <= 5.0).collect();
        let f = DeformationField::from_fn(g.clone(), |p| [0.1 * p.x, 0.1 * p.y, 0.1 * p.z]);
        let v_pre = mask.iter().filter(|&&m| m).count() as f64 * g.voxel_volume();
        let v = jacobian_integral(&f, &mask).unwrap();
        assert!((v / v_pre - 1.331).abs() < 1e-9);
    }
}
