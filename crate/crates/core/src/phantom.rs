//! Synthetic longitudinal brain phantoms with analytic ventricle volumes.
//!
//! A phantom is a smooth brain ellipsoid with a thin bright CSF rim and two
//! lateral-ventricle lobes. Each lobe is a superellipsoid
//! `|x/a|^p + |y/b|^p + |z/c|^p ≤ 1` attached at the midline; growth scales the
//! lobes volumetrically about their medial attachment points, so the ground
//! truth volume at both time points is known in closed form.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::record::{LesionType, SubjectRecord};
use crate::volume::{ImageGrid, LabelMap, Volume, VENTRICLES};

/// Lesion area (mm²) at which the planted effect leaves growth unchanged.
pub const LESION_AREA_REF_MM2: f64 = 400.0;
/// Lesion area change (mm²) corresponding to one covariate unit of planted effect.
pub const LESION_AREA_UNIT_MM2: f64 = 200.0;

pub const PARENCHYMA_INTENSITY: f32 = 0.45;
pub const CSF_INTENSITY: f32 = 1.0;

const LOBE_EXPONENT: f64 = 2.5;
const LOBE_SHAPE: [f64; 3] = [0.5, 1.0, 0.75];
const BRAIN_SHAPE: [f64; 3] = [1.0, 1.05, 0.9];
const RIM_FRACTION: f64 = 0.08;
const GAP_FRACTION: f64 = 0.08;
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub ga_pre: f64,
    pub ga_op: f64,
    pub ga_post: f64,
    pub base_radius_mm: f64,
    pub ventricle_volume_pre_mm3: f64,
    pub daily_growth_mm3: f64,
    pub asymmetry: f64,
    pub lesion_area_mm2: f64,
    pub lesion_type: LesionType,
    pub lesion_location: i32,
    /// Multiplicative growth change per covariate unit of lesion area; 0 = null.
    pub planted_effect: f64,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_spacing")]
    pub spacing_mm: f64,
}

fn default_grid_size() -> usize {
    64
}

fn default_spacing() -> f64 {
    0.5
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            ga_pre: 23.2,
            ga_op: 25.0,
            ga_post: 27.7,
            base_radius_mm: 14.0,
            ventricle_volume_pre_mm3: 800.0,
            daily_growth_mm3: 40.0,
            asymmetry: 0.0,
            lesion_area_mm2: LESION_AREA_REF_MM2,
            lesion_type: LesionType::Mmc,
            lesion_location: 3,
            planted_effect: 0.0,
            grid_size: default_grid_size(),
            spacing_mm: default_spacing(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ga_pre < self.ga_op && self.ga_op < self.ga_post) {
            return Err(Error::InvalidInput(format!(
                "gestational ages must satisfy pre < op < post (got {}, {}, {})",
                self.ga_pre, self.ga_op, self.ga_post
            )));
        }
        if !(self.base_radius_mm > 0.0 && self.ventricle_volume_pre_mm3 > 0.0) {
            return Err(Error::InvalidInput("radii and volumes must be positive".into()));
        }
        if self.daily_growth_mm3 < 0.0 {
            return Err(Error::InvalidInput("daily growth must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.asymmetry) {
            return Err(Error::InvalidInput("asymmetry must lie in [0, 1]".into()));
        }
        if self.grid_size < 8 || !(self.spacing_mm > 0.0) {
            return Err(Error::InvalidInput("grid too small or spacing not positive".into()));
        }
        Ok(())
    }

    pub fn delta_days(&self) -> f64 {
        7.0 * (self.ga_post - self.ga_pre)
    }

    /// Growth after the planted lesion-area effect.
    pub fn effective_daily_growth(&self) -> f64 {
        let z = (self.lesion_area_mm2 - LESION_AREA_REF_MM2) / LESION_AREA_UNIT_MM2;
        self.daily_growth_mm3 * (1.0 + self.planted_effect * z).max(0.0)
    }

    pub fn ventricle_volume_post_mm3(&self) -> f64 {
        self.ventricle_volume_pre_mm3 + self.effective_daily_growth() * self.delta_days()
    }

    pub fn grid(&self) -> Result<ImageGrid> {
        ImageGrid::isotropic(self.grid_size, self.spacing_mm)
    }

    /// Voxelwise log-Jacobian rate inside the ventricles implied by uniform lobe scaling.
    pub fn ventricle_log_jacobian_rate(&self) -> f64 {
        (self.ventricle_volume_post_mm3() / self.ventricle_volume_pre_mm3).ln() / self.delta_days()
    }
}

/// Volume of the superellipsoid with unit semi-axes and the lobe exponent.
fn unit_superellipsoid_volume(p: f64) -> f64 {
    8.0 * gamma(1.0 + 1.0 / p).powi(3) / gamma(1.0 + 3.0 / p)
}

#[derive(Debug, Clone, Copy)]
struct Lobe {
    center: Vector3<f64>,
    axes: [f64; 3],
}

impl Lobe {
    #[inline]
    fn contains(&self, p: &Vector3<f64>) -> bool {
        let d = p - self.center;
        (0..3)
            .map(|a| (d[a] / self.axes[a]).abs().powf(LOBE_EXPONENT))
            .sum::<f64>()
            <= 1.0
    }

    fn analytic_volume(&self) -> f64 {
        self.axes.iter().product::<f64>() * unit_superellipsoid_volume(LOBE_EXPONENT)
    }

    /// Axis extremes and diagonal surface points, used for containment checks.
    fn surface_probes(&self) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for a in 0..3 {
            for s in [-1.0, 1.0] {
                let mut d = Vector3::zeros();
                d[a] = s * self.axes[a];
                pts.push(self.center + d);
            }
        }
        let t = 3f64.powf(-1.0 / LOBE_EXPONENT);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let d = Vector3::new(sx * t * self.axes[0], sy * t * self.axes[1], sz * t * self.axes[2]);
                    pts.push(self.center + d);
                }
            }
        }
        pts
    }
}

#[derive(Debug, Clone)]
struct Anatomy {
    brain_axes: [f64; 3],
    inner_axes: [f64; 3],
    lobes: [Lobe; 2],
    bias: BiasField,
}

fn ellipsoid_level(p: &Vector3<f64>, axes: &[f64; 3]) -> f64 {
    (0..3).map(|a| (p[a] / axes[a]).powi(2)).sum()
}

impl Anatomy {
    fn intensity_class(&self, p: &Vector3<f64>) -> f32 {
        if ellipsoid_level(p, &self.brain_axes) > 1.0 {
            0.0
        } else if ellipsoid_level(p, &self.inner_axes) > 1.0 {
            CSF_INTENSITY
        } else if self.lobes.iter().any(|l| l.contains(p)) {
            CSF_INTENSITY
        } else {
            PARENCHYMA_INTENSITY
        }
    }
}

/// Smooth multiplicative intensity inhomogeneity, ±4% peak.
#[derive(Debug, Clone)]
struct BiasField {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl BiasField {
    fn random(rng: &mut ChaCha8Rng, scale_mm: f64) -> Self {
        let terms = (0..3)
            .map(|_| {
                let dir: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-6);
                let k = std::f64::consts::PI / (2.0 * scale_mm);
                ([dir[0] / norm * k, dir[1] / norm * k, dir[2] / norm * k], rng.gen_range(0.0..std::f64::consts::TAU), 0.04 / 3.0)
            })
            .collect();
        Self { terms }
    }

    fn at(&self, p: &Vector3<f64>) -> f64 {
        1.0 + self
            .terms
            .iter()
            .map(|(k, phase, amp)| amp * (k[0] * p.x + k[1] * p.y + k[2] * p.z + phase).sin())
            .sum::<f64>()
    }
}

/// One time point of a phantom.
#[derive(Debug, Clone)]
pub struct PhantomImage {
    pub volume: Volume,
    pub ventricles: LabelMap,
    pub brain_mask: LabelMap,
    /// Closed-form ventricle volume of the generating geometry.
    pub analytic_ventricle_mm3: f64,
}

#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub pre: PhantomImage,
    pub post: PhantomImage,
    pub true_daily_growth_mm3: f64,
    pub record: SubjectRecord,
}

fn lobes_for(spec: &PhantomSpec, total_volume: f64, offsets: &Vector3<f64>) -> [Lobe; 2] {
    let kappa = unit_superellipsoid_volume(LOBE_EXPONENT) * LOBE_SHAPE.iter().product::<f64>();
    let left_fraction = 0.5 * (1.0 + 0.3 * spec.asymmetry);
    let gap = GAP_FRACTION * spec.base_radius_mm;
    let make = |volume: f64, side: f64| {
        let s = (volume / kappa).cbrt();
        let axes = LOBE_SHAPE.map(|r| r * s);
        let center = Vector3::new(side * (0.5 * gap + axes[0]), offsets.y, offsets.z);
        Lobe { center, axes }
    };
    [make(total_volume * left_fraction, -1.0), make(total_volume * (1.0 - left_fraction), 1.0)]
}

fn anatomy_for(spec: &PhantomSpec, total_volume: f64) -> Result<Anatomy> {
    // seed-dependent jitter is shared by both time points and keeps the mirror plane
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter: [f64; 3] = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    let r = spec.base_radius_mm;
    let brain_axes = [0, 1, 2].map(|a| r * BRAIN_SHAPE[a] * (1.0 + jitter[a]));
    let rim = RIM_FRACTION * r;
    let inner_axes = brain_axes.map(|x| x - rim);
    let offsets = Vector3::new(0.0, 0.05 * r + rng.gen_range(-0.02..0.02) * r, 0.1 * r + rng.gen_range(-0.02..0.02) * r);
    let bias = BiasField::random(&mut rng, r);
    let lobes = lobes_for(spec, total_volume, &offsets);

    // lobes must stay inside the parenchyma (one voxel clear of the CSF rim)
    let margin = spec.spacing_mm;
    let allowed = inner_axes.map(|x| x - margin);
    for lobe in &lobes {
        if lobe.surface_probes().iter().any(|p| ellipsoid_level(p, &allowed) > 1.0) {
            return Err(Error::InvalidInput(format!(
                "ventricle volume {total_volume:.1} mm³ does not fit inside a brain of base radius {r} mm"
            )));
        }
    }
    let half_fov = 0.5 * spec.grid_size as f64 * spec.spacing_mm;
    if brain_axes.iter().any(|&x| x >= half_fov - spec.spacing_mm) {
        return Err(Error::InvalidInput(format!(
            "brain of base radius {r} mm exceeds the {:.1} mm field of view",
            2.0 * half_fov
        )));
    }
    Ok(Anatomy { brain_axes, inner_axes, lobes, bias })
}

fn render(spec: &PhantomSpec, anatomy: &Anatomy) -> Result<PhantomImage> {
    let grid = spec.grid()?;
    let h = spec.spacing_mm;
    let n = SUPERSAMPLE;
    let sub: Vec<f64> = (0..n).map(|s| ((s as f64 + 0.5) / n as f64 - 0.5) * h).collect();
    let volume = Volume::from_world_fn(grid.clone(), |p| {
        let mut acc = 0.0f32;
        for &dz in &sub {
            for &dy in &sub {
                for &dx in &sub {
                    acc += anatomy.intensity_class(&(p + Vector3::new(dx, dy, dz)));
                }
            }
        }
        let occupancy = acc / (n * n * n) as f32;
        occupancy * anatomy.bias.at(p) as f32
    });
    let (vent, brain): (Vec<bool>, Vec<bool>) = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = grid.world_of_index(i);
            (anatomy.lobes.iter().any(|l| l.contains(&p)), ellipsoid_level(&p, &anatomy.brain_axes) <= 1.0)
        })
        .unzip();
    Ok(PhantomImage {
        volume,
        ventricles: LabelMap::from_mask(grid.clone(), &vent, VENTRICLES)?,
        brain_mask: LabelMap::from_mask(grid, &brain, 1)?,
        analytic_ventricle_mm3: anatomy.lobes.iter().map(Lobe::analytic_volume).sum(),
    })
}

/// Generates the pre/post pair described by `spec`. Deterministic in the spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let pre_anatomy = anatomy_for(spec, spec.ventricle_volume_pre_mm3)?;
    let post_anatomy = anatomy_for(spec, spec.ventricle_volume_post_mm3())?;
    let pre = render(spec, &pre_anatomy)?;
    let post = render(spec, &post_anatomy)?;
    let growth = spec.effective_daily_growth();
    Ok(PhantomPair {
        pre,
        post,
        true_daily_growth_mm3: growth,
        record: SubjectRecord {
            subject_id: format!("sub-{:03}", spec.seed % 1000),
            ga_pre_weeks: spec.ga_pre,
            ga_op_weeks: spec.ga_op,
            ga_post_weeks: spec.ga_post,
            lesion_area_mm2: spec.lesion_area_mm2,
            lesion_type: spec.lesion_type,
            lesion_location: spec.lesion_location,
            true_daily_growth_mm3: Some(growth),
        },
    })
}

/// A normal distribution truncated to `[min, max]` by clamping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ClampedNormal {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl ClampedNormal {
    pub fn new(mean: f64, sd: f64, min: f64, max: f64) -> Self {
        Self { mean, sd, min, max }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let v = if self.sd > 0.0 {
            Normal::new(self.mean, self.sd).expect("finite sd").sample(rng)
        } else {
            self.mean
        };
        v.clamp(self.min, self.max)
    }
}

/// Covariate and anatomy distributions for cohort simulation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CohortDistributions {
    pub ga_pre: ClampedNormal,
    pub ga_op: ClampedNormal,
    pub ga_post: ClampedNormal,
    pub lesion_area_mm2: ClampedNormal,
    /// Probability of a myeloschisis lesion.
    pub p_ms: f64,
    /// Inclusive range of the ordinal lesion level.
    pub lesion_location: (i32, i32),
    pub ventricle_volume_pre_mm3: ClampedNormal,
    pub daily_growth_mm3: ClampedNormal,
    pub asymmetry: ClampedNormal,
    pub base_radius_mm: f64,
    pub grid_size: usize,
    pub spacing_mm: f64,
}

impl CohortDistributions {
    /// 64³ at 0.5 mm; GA timing from the clinical cohort, volumes scaled to fit the grid.
    pub fn desk() -> Self {
        Self {
            ga_pre: ClampedNormal::new(23.2, 1.5, 19.0, 26.0),
            ga_op: ClampedNormal::new(25.0, 0.8, 23.0, 27.0),
            ga_post: ClampedNormal::new(27.7, 1.2, 25.0, 32.0),
            lesion_area_mm2: ClampedNormal::new(LESION_AREA_REF_MM2, LESION_AREA_UNIT_MM2, 25.0, 1200.0),
            p_ms: 0.3,
            lesion_location: (1, 6),
            ventricle_volume_pre_mm3: ClampedNormal::new(800.0, 100.0, 500.0, 1100.0),
            daily_growth_mm3: ClampedNormal::new(30.0, 10.0, 5.0, 45.0),
            asymmetry: ClampedNormal::new(0.2, 0.1, 0.0, 0.5),
            base_radius_mm: 14.0,
            grid_size: 64,
            spacing_mm: 0.5,
        }
    }

    /// 128³ at 0.5 mm with the clinical volume and growth statistics.
    pub fn paper_scale() -> Self {
        Self {
            ventricle_volume_pre_mm3: ClampedNormal::new(8953.0, 2000.0, 3000.0, 14000.0),
            daily_growth_mm3: ClampedNormal::new(449.8, 285.9, 50.0, 900.0),
            base_radius_mm: 30.0,
            grid_size: 128,
            ..Self::desk()
        }
    }
}

impl Default for CohortDistributions {
    fn default() -> Self {
        Self::desk()
    }
}

/// Samples phantom specs for a cohort without rendering any images.
///
/// GA triples are redrawn until strictly ordered with at least 0.3 weeks
/// between consecutive time points. Covariates never depend on growth;
/// growth depends on lesion area only through `planted_effect`.
pub fn sample_cohort_specs(
    n: usize,
    dist: &CohortDistributions,
    planted_effect: f64,
    seed: u64,
) -> Result<Vec<PhantomSpec>> {
    if n < 3 {
        return Err(Error::InvalidInput(format!("a cohort needs at least 3 subjects, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(n);
    for i in 0..n {
        let (ga_pre, ga_op, ga_post) = loop {
            let a = dist.ga_pre.sample(&mut rng);
            let b = dist.ga_op.sample(&mut rng);
            let c = dist.ga_post.sample(&mut rng);
            if b - a >= 0.3 && c - b >= 0.3 {
                break (a, b, c);
            }
        };
        let lesion_type = if rng.gen_bool(dist.p_ms.clamp(0.0, 1.0)) { LesionType::Ms } else { LesionType::Mmc };
        let lesion_location = rng.gen_range(dist.lesion_location.0..=dist.lesion_location.1);
        specs.push(PhantomSpec {
            seed: seed.wrapping_mul(1000).wrapping_add(i as u64 + 1),
            ga_pre,
            ga_op,
            ga_post,
            base_radius_mm: dist.base_radius_mm,
            ventricle_volume_pre_mm3: dist.ventricle_volume_pre_mm3.sample(&mut rng),
            daily_growth_mm3: dist.daily_growth_mm3.sample(&mut rng),
            asymmetry: dist.asymmetry.sample(&mut rng),
            lesion_area_mm2: dist.lesion_area_mm2.sample(&mut rng),
            lesion_type,
            lesion_location,
            planted_effect,
            grid_size: dist.grid_size,
            spacing_mm: dist.spacing_mm,
        });
    }
    Ok(specs)
}

/// Records for a sampled cohort, with sequential subject ids.
pub fn cohort_records(specs: &[PhantomSpec]) -> Vec<SubjectRecord> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| SubjectRecord {
            subject_id: format!("sub-{:02}", i + 1),
            ga_pre_weeks: s.ga_pre,
            ga_op_weeks: s.ga_op,
            ga_post_weeks: s.ga_post,
            lesion_area_mm2: s.lesion_area_mm2,
            lesion_type: s.lesion_type,
            lesion_location: s.lesion_location,
            true_daily_growth_mm3: Some(s.effective_daily_growth()),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub specs: Vec<PhantomSpec>,
    pub pairs: Vec<PhantomPair>,
}

impl Cohort {
    pub fn records(&self) -> Vec<SubjectRecord> {
        self.pairs.iter().map(|p| p.record.clone()).collect()
    }
}

/// Samples and renders a cohort. Subjects are rendered in parallel; output order
/// and content depend only on `seed`.
pub fn generate_cohort(
    n: usize,
    dist: &CohortDistributions,
    planted_effect: f64,
    seed: u64,
) -> Result<Cohort> {
    let specs = sample_cohort_specs(n, dist, planted_effect, seed)?;
    let records = cohort_records(&specs);
    let pairs = specs
        .par_iter()
        .zip(records.into_par_iter())
        .map(|(spec, record)| {
            let mut pair = generate_phantom(spec)?;
            pair.record = record;
            Ok(pair)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { specs, pairs })
}

/// Simulated daily log-Jacobian maps for a cohort, on a small grid.
///
/// Each map is the subject's analytic ventricle log-Jacobian rate inside a
/// smooth ventricle-shaped blob plus spatially smooth Gaussian noise of standard
/// deviation `noise_sd` (in log-Jacobian-per-day units). Used to calibrate the
/// permutation machinery without running registrations.
pub fn synthetic_enlargement_stack(
    specs: &[PhantomSpec],
    grid: &ImageGrid,
    noise_sd: f64,
    seed: u64,
) -> (Vec<Volume>, Vec<bool>) {
    let dims = grid.dims();
    let extent = [0, 1, 2].map(|a| dims[a] as f64 * grid.spacing()[a]);
    let half = extent.map(|e| 0.5 * e);
    // two blobs standing in for the lateral ventricles
    let centers = [
        Vector3::new(-0.3 * half[0], 0.0, 0.1 * half[2]),
        Vector3::new(0.3 * half[0], 0.0, 0.1 * half[2]),
    ];
    let axes = [0.22 * half[0], 0.45 * half[1], 0.3 * half[2]];
    let region: Vec<f64> = (0..grid.len())
        .map(|i| {
            let p = grid.world_of_index(i);
            centers
                .iter()
                .map(|c| {
                    let d: f64 = (0..3).map(|a| ((p[a] - c[a]) / axes[a]).powi(2)).sum();
                    (-(d * d)).exp()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let mask: Vec<bool> = region.iter().map(|&w| w > 0.5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sigma_vox = [0, 1, 2].map(|_| 1.5);
    // unit-variance smooth noise: normalize by the kernel's energy
    let probe = {
        let mut d = vec![0.0; grid.len()];
        d[grid.index(dims[0] / 2, dims[1] / 2, dims[2] / 2)] = 1.0;
        crate::filter::gaussian_smooth(&d, dims, sigma_vox)
    };
    let energy = probe.iter().map(|x| x * x).sum::<f64>().sqrt();
    let maps = specs
        .iter()
        .map(|s| {
            let rate = s.ventricle_log_jacobian_rate();
            let white: Vec<f64> = (0..grid.len()).map(|_| std_normal.sample(&mut rng)).collect();
            let smooth = crate::filter::gaussian_smooth(&white, dims, sigma_vox);
            let data = region
                .iter()
                .zip(&smooth)
                .map(|(w, n)| (rate * w + noise_sd * n / energy) as f32)
                .collect();
            Volume::new(grid.clone(), data).expect("finite synthetic map")
        })
        .collect();
    (maps, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_volume(img: &PhantomImage) -> f64 {
        img.ventricles.count(VENTRICLES) as f64 * img.ventricles.grid().voxel_volume()
    }

    #[test]
    fn zero_growth_keeps_volume() {
        let spec = PhantomSpec { daily_growth_mm3: 0.0, seed: 4, ..Default::default() };
        let pair = generate_phantom(&spec).unwrap();
        let (a, b) = (label_volume(&pair.pre), label_volume(&pair.post));
        assert!((a - b).abs() / a < 0.02);
    }

    #[test]
    fn analytic_and_voxel_volumes_agree() {
        let spec = PhantomSpec { asymmetry: 0.4, seed: 9, ..Default::default() };
        let pair = generate_phantom(&spec).unwrap();
        for img in [&pair.pre, &pair.post] {
            let v = label_volume(img);
            assert!((v - img.analytic_ventricle_mm3).abs() / img.analytic_ventricle_mm3 < 0.02);
        }
        assert!((pair.pre.analytic_ventricle_mm3 - spec.ventricle_volume_pre_mm3).abs() < 1e-6);
        assert!((pair.post.analytic_ventricle_mm3 - spec.ventricle_volume_post_mm3()).abs() < 1e-6);
        assert!(label_volume(&pair.post) > label_volume(&pair.pre));
    }

    #[test]
    fn clinical_scale_volume_target() {
        // 8953 mm³ pre, 449.8 mm³/day over 23.5 → 27.5 weeks
        let spec = PhantomSpec {
            ga_pre: 23.5,
            ga_op: 25.0,
            ga_post: 27.5,
            base_radius_mm: 30.0,
            ventricle_volume_pre_mm3: 8953.0,
            daily_growth_mm3: 449.8,
            grid_size: 128,
            ..Default::default()
        };
        let target = 8953.0 + 449.8 * 28.0;
        assert!((spec.ventricle_volume_post_mm3() - target).abs() < 1e-6);
        let pair = generate_phantom(&spec).unwrap();
        let v = label_volume(&pair.post);
        assert!((v - 21547.0).abs() / 21547.0 < 0.02, "{v}");
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec { seed: 77, asymmetry: 0.3, ..Default::default() };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.pre.volume, b.pre.volume);
        assert_eq!(a.post.volume, b.post.volume);
        assert_eq!(a.post.ventricles, b.post.ventricles);
    }

    #[test]
    fn symmetric_lobes_mirror() {
        let spec = PhantomSpec { seed: 5, asymmetry: 0.0, ..Default::default() };
        let pair = generate_phantom(&spec).unwrap();
        let l = &pair.pre.ventricles;
        let [nx, ny, nz] = l.grid().dims();
        let mut mismatched = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let a = l.data()[l.grid().index(i, j, k)];
                    let b = l.data()[l.grid().index(nx - 1 - i, j, k)];
                    if a != b {
                        // must be matched within one voxel along x
                        let near = [i.saturating_sub(1), i, (i + 1).min(nx - 1)]
                            .iter()
                            .any(|&ii| l.data()[l.grid().index(nx - 1 - ii, j, k)] == a);
                        if !near {
                            mismatched += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(mismatched, 0);
    }

    #[test]
    fn oversized_ventricles_rejected() {
        let spec = PhantomSpec { ventricle_volume_pre_mm3: 9000.0, ..Default::default() };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn cohort_requires_three() {
        assert!(sample_cohort_specs(2, &CohortDistributions::desk(), 0.0, 1).is_err());
        let specs = sample_cohort_specs(44, &CohortDistributions::desk(), 0.0, 1).unwrap();
        assert_eq!(specs.len(), 44);
        assert!(specs.iter().all(|s| s.validate().is_ok()));
    }

    #[test]
    fn null_cohort_covariates_independent_of_growth() {
        // Monte Carlo over 100 seeds: |r(lesion area, growth)| < 0.6 in ≥ 90%
        let mut ok = 0;
        for seed in 0..100 {
            let specs = sample_cohort_specs(10, &CohortDistributions::desk(), 0.0, seed).unwrap();
            let x: Vec<f64> = specs.iter().map(|s| s.lesion_area_mm2).collect();
            let y: Vec<f64> = specs.iter().map(|s| s.effective_daily_growth()).collect();
            let mx = x.iter().sum::<f64>() / 10.0;
            let my = y.iter().sum::<f64>() / 10.0;
            let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
            let r = sxy / (sxx * syy).sqrt();
            if r.abs() < 0.6 {
                ok += 1;
            }
        }
        assert!(ok >= 90, "{ok}/100");
    }
}
