//! Thick-slice stack geometry, simulated acquisition and stack IO.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::operator::StackOperator;
use crate::error::{Error, Result};
use crate::volume::{read_volume, write_volume, ImageGrid, Volume};

/// Full width at half maximum of a Gaussian in units of its standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Sagittal,
    Coronal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Sagittal, Orientation::Coronal];

    /// Permutation taking stack voxel axes to reference axes; the third column is the slice normal.
    pub fn permutation(self) -> Matrix3<f64> {
        let (a, b, c) = (Vector3::x(), Vector3::y(), Vector3::z());
        match self {
            Orientation::Axial => Matrix3::from_columns(&[a, b, c]),
            Orientation::Sagittal => Matrix3::from_columns(&[b, c, a]),
            Orientation::Coronal => Matrix3::from_columns(&[c, a, b]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Sagittal => "sagittal",
            Orientation::Coronal => "coronal",
        }
    }
}

/// Rigid motion of one slice: Euler angles (rad, x then y then z) and translation (mm),
/// acting about the stack center.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceMotion {
    pub rotation_rad: [f64; 3],
    pub translation_mm: [f64; 3],
}

impl SliceMotion {
    pub fn is_identity(&self) -> bool {
        self.rotation_rad == [0.0; 3] && self.translation_mm == [0.0; 3]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let [rx, ry, rz] = self.rotation_rad;
        *Rotation3::from_euler_angles(rx, ry, rz).matrix()
    }

    /// Maps a nominal slice point to where it actually sampled the anatomy.
    pub fn apply(&self, p: &Vector3<f64>, center: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (p - center) + center + Vector3::from(self.translation_mm)
    }
}

/// One thick-slice acquisition. Voxel axis 2 of the grid is the slice-select axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LRStack {
    pub volume: Volume,
    pub orientation: Orientation,
    pub per_slice_motion: Vec<SliceMotion>,
    pub noise_sigma: f64,
    /// FWHM of the Gaussian slice profile.
    pub slice_fwhm_mm: f64,
}

impl LRStack {
    pub fn new(
        volume: Volume,
        orientation: Orientation,
        per_slice_motion: Vec<SliceMotion>,
        noise_sigma: f64,
        slice_fwhm_mm: f64,
    ) -> Result<Self> {
        let s = Self { volume, orientation, per_slice_motion, noise_sigma, slice_fwhm_mm };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.volume.grid();
        let sp = g.spacing();
        if sp[2] < sp[0].max(sp[1]) - 1e-9 {
            return Err(Error::InvalidInput(format!(
                "slice spacing {} mm is finer than the in-plane spacing {:?}",
                sp[2],
                &sp[..2]
            )));
        }
        if self.per_slice_motion.len() != g.dims()[2] {
            return Err(Error::InvalidInput(format!(
                "{} slice motions for {} slices",
                self.per_slice_motion.len(),
                g.dims()[2]
            )));
        }
        if !(self.slice_fwhm_mm > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("slice FWHM must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> &ImageGrid {
        self.volume.grid()
    }

    pub fn n_slices(&self) -> usize {
        self.grid().dims()[2]
    }

    /// Mean squared difference between adjacent slices, relative to the
    /// intensity variance of the stack. Larger values mean more inter-slice
    /// inconsistency (motion, artefacts).
    pub fn quality_score(&self) -> f64 {
        adjacent_slice_mse(&self.volume) / self.volume.variance().max(f64::MIN_POSITIVE)
    }

    /// Writes `<stem>.nii.gz` and the `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_volume(&self.volume, dir.join(format!("{stem}.nii.gz")))?;
        let side = StackSidecar {
            orientation: self.orientation,
            per_slice_motion: self.per_slice_motion.clone(),
            noise_sigma: self.noise_sigma,
            slice_fwhm_mm: self.slice_fwhm_mm,
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    /// Reads a stack from its image path; the sidecar sits next to it with a `.json` extension.
    pub fn load(image_path: &Path) -> Result<Self> {
        let volume = read_volume(image_path)?;
        let sidecar = sidecar_path(image_path);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| {
            Error::InvalidInput(format!("missing stack sidecar {}: {e}", sidecar.display()))
        })?;
        let side: StackSidecar = serde_json::from_str(&text)?;
        Self::new(volume, side.orientation, side.per_slice_motion, side.noise_sigma, side.slice_fwhm_mm)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackSidecar {
    orientation: Orientation,
    per_slice_motion: Vec<SliceMotion>,
    noise_sigma: f64,
    slice_fwhm_mm: f64,
}

pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let name = image_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).unwrap_or(&name);
    image_path.with_file_name(format!("{stem}.json"))
}

/// Mean over adjacent slice pairs of the voxelwise mean squared difference.
pub fn adjacent_slice_mse(vol: &Volume) -> f64 {
    let [nx, ny, nz] = vol.grid().dims();
    if nz < 2 {
        return 0.0;
    }
    let plane = nx * ny;
    let d = vol.data();
    let total: f64 = (0..nz - 1)
        .map(|k| {
            (0..plane)
                .map(|p| (d[p + plane * (k + 1)] as f64 - d[p + plane * k] as f64).powi(2))
                .sum::<f64>()
                / plane as f64
        })
        .sum();
    total / (nz - 1) as f64
}

/// Stack grid covering the field of view of `hr` with the given orientation.
pub fn stack_grid(hr: &ImageGrid, orientation: Orientation, slice_mm: f64, inplane_mm: f64) -> Result<ImageGrid> {
    if slice_mm < inplane_mm {
        return Err(Error::InvalidInput(format!(
            "slice thickness {slice_mm} mm is below the in-plane resolution {inplane_mm} mm"
        )));
    }
    if !(inplane_mm > 0.0) {
        return Err(Error::InvalidInput("in-plane resolution must be positive".into()));
    }
    let perm = orientation.permutation();
    let direction = hr.direction() * perm;
    // extent of the reference field of view along each stack axis
    let hr_extent = Vector3::from([0, 1, 2].map(|a| hr.dims()[a] as f64 * hr.spacing()[a]));
    let extent = perm.transpose() * hr_extent;
    let spacing = [inplane_mm, inplane_mm, slice_mm];
    let dims = [
        ((extent[0] / inplane_mm).round() as usize).max(1),
        ((extent[1] / inplane_mm).round() as usize).max(1),
        ((extent[2] / slice_mm).floor() as usize).max(1),
    ];
    let center = hr.center();
    let offset = direction * Vector3::from([0, 1, 2].map(|a| 0.5 * (dims[a] as f64 - 1.0) * spacing[a]));
    let origin = center - offset;
    ImageGrid::new(dims, spacing, [origin.x, origin.y, origin.z], direction)
}

/// Parameters of a simulated acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub orientation: Orientation,
    pub slice_thickness_mm: f64,
    pub inplane_mm: f64,
    /// Standard deviation of each per-slice Euler angle.
    pub motion_sigma_rad: f64,
    /// Standard deviation of each per-slice translation component.
    pub motion_sigma_mm: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl AcquisitionParams {
    pub fn noiseless(orientation: Orientation, slice_thickness_mm: f64, inplane_mm: f64) -> Self {
        Self {
            orientation,
            slice_thickness_mm,
            inplane_mm,
            motion_sigma_rad: 0.0,
            motion_sigma_mm: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Simulates a thick-slice acquisition of `hr`: per-slice rigid motion, Gaussian
/// slice profile of FWHM equal to the slice thickness, sampling on the stack
/// grid and additive Gaussian noise.
pub fn acquire_stack(hr: &Volume, params: &AcquisitionParams) -> Result<LRStack> {
    let grid = stack_grid(hr.grid(), params.orientation, params.slice_thickness_mm, params.inplane_mm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let motion: Vec<SliceMotion> = (0..grid.dims()[2])
        .map(|_| {
            let mut m = SliceMotion::default();
            for a in 0..3 {
                m.rotation_rad[a] = params.motion_sigma_rad * std_normal.sample(&mut rng);
            }
            for a in 0..3 {
                m.translation_mm[a] = params.motion_sigma_mm * std_normal.sample(&mut rng);
            }
            m
        })
        .collect();
    let shell = LRStack {
        volume: Volume::zeros(grid.clone()),
        orientation: params.orientation,
        per_slice_motion: motion,
        noise_sigma: params.noise_sigma,
        slice_fwhm_mm: params.slice_thickness_mm,
    };
    let op = StackOperator::new(&shell, hr.grid())?;
    let x: Vec<f64> = hr.data().iter().map(|&v| v as f64).collect();
    let mut y = op.forward(&x);
    if params.noise_sigma > 0.0 {
        for v in y.iter_mut() {
            *v += params.noise_sigma * std_normal.sample(&mut rng);
        }
    }
    let volume = Volume::new(grid, y.into_iter().map(|v| v as f32).collect())?;
    LRStack::new(volume, shell.orientation, shell.per_slice_motion, shell.noise_sigma, shell.slice_fwhm_mm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn orientations_are_proper_rotations() {
        for o in Orientation::ALL {
            assert!((o.permutation().determinant() - 1.0).abs() < 1e-12);
        }
        assert_eq!(Orientation::Sagittal.permutation().column(2), Vector3::x());
        assert_eq!(Orientation::Coronal.permutation().column(2), Vector3::y());
    }

    #[test]
    fn constant_volume_gives_constant_stack() {
        let g = ImageGrid::isotropic(24, 0.5).unwrap();
        let hr = Volume::filled(g, 3.25);
        for o in Orientation::ALL {
            let s = acquire_stack(&hr, &AcquisitionParams::noiseless(o, 3.0, 0.5)).unwrap();
            for &v in s.volume.data() {
                assert!((v - 3.25).abs() < 1e-5, "{o:?}: {v}");
            }
        }
    }

    #[test]
    fn thin_slices_rejected() {
        let g = ImageGrid::isotropic(8, 0.5).unwrap();
        let hr = Volume::filled(g, 1.0);
        assert!(acquire_stack(&hr, &AcquisitionParams::noiseless(Orientation::Axial, 0.4, 0.5)).is_err());
    }

    #[test]
    fn motion_raises_interslice_discontinuity() {
        let pair = generate_phantom(&PhantomSpec::default()).unwrap();
        let hr = &pair.pre.volume;
        let still = acquire_stack(hr, &AcquisitionParams::noiseless(Orientation::Axial, 3.0, 0.5)).unwrap();
        let moving = acquire_stack(
            hr,
            &AcquisitionParams {
                motion_sigma_rad: 2f64.to_radians(),
                motion_sigma_mm: 1.0,
                seed: 5,
                ..AcquisitionParams::noiseless(Orientation::Axial, 3.0, 0.5)
            },
        )
        .unwrap();
        // direct oracle: plain loops over slice pairs
        let mse = |v: &Volume| {
            let [nx, ny, nz] = v.grid().dims();
            let mut acc = 0.0f64;
            for k in 0..nz - 1 {
                let mut s = 0.0f64;
                for j in 0..ny {
                    for i in 0..nx {
                        s += (v.get(i, j, k + 1) as f64 - v.get(i, j, k) as f64).powi(2);
                    }
                }
                acc += s / (nx * ny) as f64;
            }
            acc / (nz - 1) as f64
        };
        let (m_still, m_moving) = (mse(&still.volume), mse(&moving.volume));
        assert!((m_still - adjacent_slice_mse(&still.volume)).abs() < 1e-9);
        assert!(m_moving > m_still, "{m_moving} vs {m_still}");
        assert!(moving.quality_score() > still.quality_score());
    }

    #[test]
    fn stack_round_trip() {
        let g = ImageGrid::isotropic(16, 0.5).unwrap();
        let hr = Volume::from_world_fn(g, |p| (p.x + 2.0 * p.y) as f32);
        let s = acquire_stack(
            &hr,
            &AcquisitionParams { motion_sigma_rad: 0.01, motion_sigma_mm: 0.3, seed: 1, ..AcquisitionParams::noiseless(Orientation::Coronal, 2.0, 0.5) },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), "stack_coronal").unwrap();
        let back = LRStack::load(&dir.path().join("stack_coronal.nii.gz")).unwrap();
        assert_eq!(back.orientation, s.orientation);
        assert_eq!(back.per_slice_motion, s.per_slice_motion);
        assert_eq!(back.volume.data(), s.volume.data());
        assert!(back.grid().same_as(s.grid(), 1e-5));
    }
}
