//! Symmetric diffeomorphic registration on a stationary velocity field.
//!
//! Each iteration computes a demons-type force pulling the warped moving image
//! toward the fixed image and one pulling the inversely warped fixed image toward
//! the moving image, averages them antisymmetrically, smooths the update, adds it
//! to the velocity and smooths the total. Both fields are recovered from one
//! velocity by scaling and squaring, so they are inverse to each other by
//! construction.

use log::debug;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::field::{jacobians_of, DeformationField, VelocityField, DEFAULT_SQUARINGS};
use super::linear::pyramid_level;
use super::metric::{local_stats, lncc_value, ordered_sum_f64, Metric, LNCC_EPS};
use super::transform::AffineTransform;
use crate::error::{Error, Result};
use crate::filter;
use crate::volume::{ImageGrid, Interpolation, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffeoParams {
    /// Downsampling factors, coarse to fine.
    pub levels: Vec<usize>,
    pub max_iters: usize,
    /// Initial step as a fraction of the per-iteration displacement bound (half a voxel).
    pub step: f64,
    /// Gaussian sigma (voxels) applied to each update.
    pub sigma_update: f64,
    /// Gaussian sigma (voxels) applied to the accumulated velocity.
    pub sigma_total: f64,
    pub squarings: u32,
    pub metric: Metric,
    /// Relative energy decrease below which a level stops.
    pub tol: f64,
    /// Register only within the bounding box of nonzero voxels grown by this margin (mm).
    pub crop_margin_mm: Option<f64>,
    /// Inputs are binary masks: they are blurred by one voxel before registering.
    pub binary: bool,
    /// Smoothing increases allowed after folding before giving up.
    pub max_fold_retries: usize,
}

impl Default for DiffeoParams {
    fn default() -> Self {
        Self {
            levels: vec![4, 2, 1],
            max_iters: 50,
            step: 1.0,
            sigma_update: 2.0,
            sigma_total: 1.0,
            squarings: DEFAULT_SQUARINGS,
            metric: Metric::Mse,
            tol: 1e-5,
            crop_margin_mm: None,
            binary: false,
            max_fold_retries: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffeoReport {
    /// Symmetric energy at the end of each level.
    pub level_energies: Vec<f64>,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: Vec<usize>,
    pub sigma_total: f64,
    pub fold_retries: usize,
    /// Voxels with non-positive Jacobian determinant in the final forward field.
    pub nonpositive_jacobians: usize,
}

#[derive(Debug, Clone)]
pub struct DiffeoResult {
    /// Fixed-grid field of the whole chain `x ↦ A(φ(x))`.
    pub forward: DeformationField,
    /// Moving-grid field of `y ↦ φ⁻¹(A⁻¹(y))`.
    pub inverse: DeformationField,
    /// Velocity of the nonlinear part on the fixed grid.
    pub velocity: VelocityField,
    pub prealign: AffineTransform,
    pub report: DiffeoReport,
}

/// Sub-grid covering voxels `lo .. lo + dims` of `grid`.
fn sub_grid(grid: &ImageGrid, lo: [usize; 3], dims: [usize; 3]) -> ImageGrid {
    let o = grid.voxel_to_world(lo.map(|v| v as f64));
    ImageGrid::new(dims, grid.spacing(), [o.x, o.y, o.z], *grid.direction()).expect("sub-grid of a valid grid")
}

fn crop_box(grid: &ImageGrid, a: &[f32], b: &[f32], margin_mm: f64) -> ([usize; 3], [usize; 3]) {
    let dims = grid.dims();
    let mut lo = dims;
    let mut hi = [0usize; 3];
    for i in 0..grid.len() {
        if a[i] != 0.0 || b[i] != 0.0 {
            let c = grid.coords(i);
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
    }
    let sp = grid.spacing();
    let mut start = [0; 3];
    let mut size = [0; 3];
    for k in 0..3 {
        let m = (margin_mm / sp[k]).ceil() as usize;
        start[k] = lo[k].saturating_sub(m);
        let end = (hi[k] + m).min(dims[k] - 1);
        size[k] = end - start[k] + 1;
    }
    (start, size)
}

fn extract(vol: &Volume, lo: [usize; 3], grid: &ImageGrid) -> Volume {
    let d = grid.dims();
    let src = vol.grid();
    let mut data = Vec::with_capacity(grid.len());
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                data.push(vol.data()[src.index(lo[0] + i, lo[1] + j, lo[2] + k)]);
            }
        }
    }
    Volume::new(grid.clone(), data).expect("matching size")
}

/// Working state at one pyramid level.
struct LevelState {
    v: VelocityField,
    phi: DeformationField,
    warped_m: Vec<f64>,
    warped_f: Vec<f64>,
    energy: f64,
}

struct LevelImages {
    grid: ImageGrid,
    f: Vec<f64>,
    m: Vec<f64>,
}

fn warp(data: &[f64], grid: &ImageGrid, phi: &DeformationField) -> Vec<f64> {
    let dims = grid.dims();
    let disp = phi.displacements();
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = grid.world_of_index(i);
            let u = disp[i];
            let q = Vector3::new(p.x + u[0], p.y + u[1], p.z + u[2]);
            crate::volume::sample_scalar(data, dims, grid.world_to_voxel(&q), Interpolation::Linear)
        })
        .collect()
}

fn energy(img: &LevelImages, wm: &[f64], wf: &[f64], metric: Metric) -> f64 {
    let n = img.f.len();
    match metric {
        Metric::Mse => {
            ordered_sum_f64(n, |i| (img.f[i] - wm[i]).powi(2) + (img.m[i] - wf[i]).powi(2)) / n as f64
        }
        Metric::Lncc { radius } => {
            let d = img.grid.dims();
            lncc_value(&img.f, wm, d, radius) + lncc_value(&img.m, wf, d, radius)
        }
    }
}

fn world_gradient(data: &[f64], grid: &ImageGrid) -> Vec<[f64; 3]> {
    let g = filter::gradient(data, grid.dims());
    let m = grid.voxel_to_world_matrix().try_inverse().expect("valid grid").transpose();
    g.into_par_iter()
        .map(|v| {
            let w = m * Vector3::from(v);
            [w.x, w.y, w.z]
        })
        .collect()
}

/// Force moving `warped` toward `target`, bounded by half a voxel per voxel.
fn force(target: &[f64], warped: &[f64], grid: &ImageGrid, metric: Metric) -> Vec<[f64; 3]> {
    let grad = world_gradient(warped, grid);
    let h = grid.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
    match metric {
        Metric::Mse => (0..target.len())
            .into_par_iter()
            .map(|i| {
                let d = target[i] - warped[i];
                let g = grad[i];
                let denom = g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + d * d / (h * h);
                if denom < 1e-12 {
                    [0.0; 3]
                } else {
                    [d * g[0] / denom, d * g[1] / denom, d * g[2] / denom]
                }
            })
            .collect(),
        Metric::Lncc { radius } => {
            let s = local_stats(target, warped, grid.dims(), radius);
            let raw: Vec<[f64; 3]> = (0..target.len())
                .into_par_iter()
                .map(|i| {
                    let (a, b, c) = (s.sfm[i], s.sff[i], s.smm[i]);
                    let d = b * c + LNCC_EPS;
                    let k = 2.0 * a / d * ((target[i] - s.mean_f[i]) - a * b / d * (warped[i] - s.mean_m[i]));
                    [k * grad[i][0], k * grad[i][1], k * grad[i][2]]
                })
                .collect();
            let max = raw.iter().map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()).fold(0.0, f64::max);
            if max <= 0.0 {
                return raw;
            }
            let s = 0.5 * h / max;
            raw.into_iter().map(|u| [s * u[0], s * u[1], s * u[2]]).collect()
        }
    }
}

fn smooth_field(field: &mut Vec<[f64; 3]>, dims: [usize; 3], sigma: f64) {
    if sigma > 0.0 {
        *field = filter::gaussian_smooth_vec(field, dims, [sigma; 3]);
    }
}

/// Velocity is held at zero on the outermost voxel layer.
fn clamp_border(field: &mut [[f64; 3]], dims: [usize; 3]) {
    for (i, u) in field.iter_mut().enumerate() {
        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        if x == 0 || y == 0 || z == 0 || x + 1 == dims[0] || y + 1 == dims[1] || z + 1 == dims[2] {
            *u = [0.0; 3];
        }
    }
}

fn min_jacobian(phi: &DeformationField) -> f64 {
    jacobians_of(phi.displacements(), phi.grid())
        .iter()
        .map(|j| j.determinant())
        .fold(f64::INFINITY, f64::min)
}

fn state_for(img: &LevelImages, v: VelocityField, params: &DiffeoParams) -> LevelState {
    let phi = v.exp(params.squarings);
    let phi_inv = v.negated().exp(params.squarings);
    let warped_m = warp(&img.m, &img.grid, &phi);
    let warped_f = warp(&img.f, &img.grid, &phi_inv);
    let energy = energy(img, &warped_m, &warped_f, params.metric);
    LevelState { v, phi, warped_m, warped_f, energy }
}

fn run_level(
    img: &LevelImages,
    v: VelocityField,
    params: &DiffeoParams,
    sigma_total: &mut f64,
    fold_retries: &mut usize,
) -> Result<(LevelState, usize)> {
    let dims = img.grid.dims();
    let mut st = state_for(img, v, params);
    let mut step = params.step;
    let mut iters = 0;
    while iters < params.max_iters {
        iters += 1;
        let uf = force(&img.f, &st.warped_m, &img.grid, params.metric);
        let ub = force(&img.m, &st.warped_f, &img.grid, params.metric);
        let mut u: Vec<[f64; 3]> =
            uf.iter().zip(&ub).map(|(a, b)| [0.5 * (a[0] - b[0]), 0.5 * (a[1] - b[1]), 0.5 * (a[2] - b[2])]).collect();
        smooth_field(&mut u, dims, params.sigma_update);
        let mut accepted = false;
        while step > 1e-3 {
            let mut nv: Vec<[f64; 3]> = st
                .v
                .values()
                .iter()
                .zip(&u)
                .map(|(a, b)| [a[0] + step * b[0], a[1] + step * b[1], a[2] + step * b[2]])
                .collect();
            smooth_field(&mut nv, dims, *sigma_total);
            clamp_border(&mut nv, dims);
            let trial = state_for(img, VelocityField::new(img.grid.clone(), nv)?, params);
            if min_jacobian(&trial.phi) <= 0.0 {
                *fold_retries += 1;
                if *fold_retries > params.max_fold_retries {
                    return Err(Error::Registration(format!(
                        "deformation folds persist after {} smoothing increases",
                        params.max_fold_retries
                    )));
                }
                *sigma_total *= 1.5;
                debug!("fold detected, sigma_total raised to {sigma_total:.2}");
                continue;
            }
            if trial.energy < st.energy {
                let rel = (st.energy - trial.energy) / st.energy.abs().max(1e-300);
                st = trial;
                accepted = true;
                step = (step * 1.2).min(params.step);
                if rel < params.tol {
                    return Ok((st, iters));
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((st, iters))
}

/// Deformable registration of `moving` to `fixed` after the affine `prealign`
/// (fixed → moving, identity when `None`).
pub fn register_diffeo(
    fixed: &Volume,
    moving: &Volume,
    prealign: Option<&AffineTransform>,
    params: &DiffeoParams,
) -> Result<DiffeoResult> {
    if params.levels.is_empty() || params.max_iters == 0 {
        return Err(Error::InvalidInput("diffeomorphic registration needs at least one level and iteration".into()));
    }
    if !(params.sigma_total >= 0.0 && params.sigma_update >= 0.0 && params.step > 0.0) {
        return Err(Error::InvalidInput("smoothing sigmas must be non-negative and the step positive".into()));
    }
    let grid = fixed.grid().clone();
    let a = prealign.copied().unwrap_or_else(|| AffineTransform::identity(grid.center()));
    let moved = moving.resample_with(&grid, Interpolation::Linear, |p| a.apply(p));
    if !fixed.data().iter().any(|&v| v != 0.0) || !moved.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Registration("an input image is entirely background after alignment".into()));
    }
    let (lo, work_grid) = match params.crop_margin_mm {
        Some(m) => {
            let (lo, size) = crop_box(&grid, fixed.data(), moved.data(), m);
            (lo, sub_grid(&grid, lo, size))
        }
        None => ([0; 3], grid.clone()),
    };
    let mut f = extract(fixed, lo, &work_grid);
    let mut m = extract(&moved, lo, &work_grid);
    if params.binary {
        let d = work_grid.dims();
        let blur = |v: &Volume| {
            let x: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
            let s = filter::gaussian_smooth(&x, d, [1.0; 3]);
            v.with_data(s.iter().map(|&x| x as f32).collect()).expect("same grid")
        };
        f = blur(&f);
        m = blur(&m);
    }

    let mut sigma_total = params.sigma_total;
    let mut fold_retries = 0;
    let mut v = VelocityField::zeros(work_grid.downsampled(params.levels[0]));
    let mut level_energies = Vec::new();
    let mut iterations = Vec::new();
    let mut initial_energy = None;
    for &factor in &params.levels {
        let fl = pyramid_level(&f, factor);
        let ml = pyramid_level(&m, factor);
        let img = LevelImages {
            grid: fl.grid().clone(),
            f: fl.data().iter().map(|&x| x as f64).collect(),
            m: ml.data().iter().map(|&x| x as f64).collect(),
        };
        let vl = if v.grid() == &img.grid { v } else { v.resample(&img.grid) };
        if initial_energy.is_none() {
            initial_energy = Some(energy(&img, &img.m, &img.f, params.metric));
        }
        let (st, iters) = run_level(&img, vl, params, &mut sigma_total, &mut fold_retries)?;
        debug!("diffeo level ×{factor}: {iters} iterations, energy {:.6e}", st.energy);
        level_energies.push(st.energy);
        iterations.push(iters);
        v = st.v;
    }

    // back onto the full fixed grid; the velocity vanishes outside the working box
    let full_v = if work_grid == grid {
        v
    } else {
        let wd = work_grid.dims();
        let mut vals = vec![[0.0; 3]; grid.len()];
        for (i, val) in v.values().iter().enumerate() {
            let c = [i % wd[0], (i / wd[0]) % wd[1], i / (wd[0] * wd[1])];
            vals[grid.index(lo[0] + c[0], lo[1] + c[1], lo[2] + c[2])] = *val;
        }
        VelocityField::new(grid.clone(), vals)?
    };
    let phi = full_v.exp(params.squarings);
    let phi_inv = full_v.negated().exp(params.squarings);
    let nonpositive = jacobians_of(phi.displacements(), phi.grid()).iter().filter(|j| j.determinant() <= 0.0).count();
    if nonpositive > 0 {
        return Err(Error::Registration(format!("{nonpositive} voxels fold in the final deformation")));
    }
    let a_inv = a.inverse()?;
    let forward = phi.then_affine(&a);
    let inverse = DeformationField::from_fn(moving.grid().clone(), |y| {
        let q = phi_inv.map_point(&a_inv.apply(y)) - y;
        [q.x, q.y, q.z]
    });
    let final_energy = *level_energies.last().expect("at least one level");
    Ok(DiffeoResult {
        forward,
        inverse,
        velocity: full_v,
        prealign: a,
        report: DiffeoReport {
            level_energies,
            initial_energy: initial_energy.unwrap_or(final_energy),
            final_energy,
            iterations,
            sigma_total,
            fold_retries,
            nonpositive_jacobians: nonpositive,
        },
    })
}
