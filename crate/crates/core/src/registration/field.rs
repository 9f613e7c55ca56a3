//! Dense displacement and stationary velocity fields.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::transform::AffineTransform;
use crate::error::{Error, Result};
use crate::filter;
use crate::volume::nifti::{read_nifti, write_nifti, NiftiData, INTENT_VECTOR};
use crate::volume::{linear_stencil, ImageGrid};

/// Per-voxel displacement `u` in world mm; the map is `x ↦ x + u(x)` from
/// fixed-space points to moving-space points.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    grid: ImageGrid,
    disp: Vec<[f64; 3]>,
}

/// Trilinear interpolation of a vector field at a continuous voxel coordinate,
/// clamped to the lattice (constant extension beyond the border).
#[inline]
pub(crate) fn sample_vec(data: &[[f64; 3]], dims: [usize; 3], c: [f64; 3]) -> [f64; 3] {
    let Some((idx, w)) = linear_stencil(dims, c) else {
        return [0.0; 3];
    };
    let mut out = [0.0; 3];
    for n in 0..8 {
        if w[n] != 0.0 {
            let v = &data[idx[n]];
            out[0] += w[n] * v[0];
            out[1] += w[n] * v[1];
            out[2] += w[n] * v[2];
        }
    }
    out
}

#[inline]
fn add(p: &Vector3<f64>, u: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(p.x + u[0], p.y + u[1], p.z + u[2])
}

impl DeformationField {
    pub fn new(grid: ImageGrid, disp: Vec<[f64; 3]>) -> Result<Self> {
        if disp.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "field has {} vectors for a grid of {} voxels",
                disp.len(),
                grid.len()
            )));
        }
        if disp.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("displacement field contains non-finite values".into()));
        }
        Ok(Self { grid, disp })
    }

    pub fn identity(grid: ImageGrid) -> Self {
        let n = grid.len();
        Self { grid, disp: vec![[0.0; 3]; n] }
    }

    /// Field whose displacement at each voxel center is `f(world point)`.
    pub fn from_fn<F>(grid: ImageGrid, f: F) -> Self
    where
        F: Fn(&Vector3<f64>) -> [f64; 3] + Sync,
    {
        let disp = (0..grid.len()).into_par_iter().map(|i| f(&grid.world_of_index(i))).collect();
        Self { grid, disp }
    }

    /// Dense representation of an affine map.
    pub fn from_affine(grid: ImageGrid, t: &AffineTransform) -> Self {
        Self::from_fn(grid, |p| {
            let q = t.apply(p) - p;
            [q.x, q.y, q.z]
        })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn displacements(&self) -> &[[f64; 3]] {
        &self.disp
    }

    pub fn into_displacements(self) -> Vec<[f64; 3]> {
        self.disp
    }

    /// Interpolated displacement at a world point.
    pub fn displacement_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        sample_vec(&self.disp, self.grid.dims(), self.grid.world_to_voxel(p))
    }

    pub fn map_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        add(p, &self.displacement_at(p))
    }

    /// `self ∘ other` on `other`'s grid: `x ↦ self(other(x))`.
    pub fn compose(&self, other: &DeformationField) -> DeformationField {
        let g = &other.grid;
        let disp = (0..g.len())
            .into_par_iter()
            .map(|i| {
                let b = other.disp[i];
                let p = add(&g.world_of_index(i), &b);
                let a = self.displacement_at(&p);
                [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
            })
            .collect();
        DeformationField { grid: g.clone(), disp }
    }

    /// `affine ∘ self`: `x ↦ A(x + u(x))`.
    pub fn then_affine(&self, a: &AffineTransform) -> DeformationField {
        let disp = (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let x = self.grid.world_of_index(i);
                let q = a.apply(&add(&x, &self.disp[i])) - x;
                [q.x, q.y, q.z]
            })
            .collect();
        DeformationField { grid: self.grid.clone(), disp }
    }

    /// `self ∘ affine` on `grid`: `x ↦ A(x) + u(A(x))`.
    pub fn after_affine(&self, a: &AffineTransform, grid: &ImageGrid) -> DeformationField {
        DeformationField::from_fn(grid.clone(), |x| {
            let q = self.map_point(&a.apply(x)) - x;
            [q.x, q.y, q.z]
        })
    }

    /// Linear resampling of the displacement onto another grid.
    pub fn resample(&self, grid: &ImageGrid) -> DeformationField {
        DeformationField::from_fn(grid.clone(), |p| self.displacement_at(p))
    }

    /// Mean displacement length in units of the (smallest) voxel spacing.
    pub fn mean_magnitude_vox(&self) -> f64 {
        let h = self.grid.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
        self.disp.iter().map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()).sum::<f64>()
            / self.disp.len() as f64
            / h
    }

    /// Spatial Jacobian matrices of `x ↦ x + u(x)` in world coordinates, by central
    /// differences (one-sided at the border).
    pub fn jacobians(&self) -> Vec<Matrix3<f64>> {
        jacobians_of(&self.disp, &self.grid)
    }

    /// Jacobian determinant per voxel.
    pub fn jacobian_determinants(&self) -> Vec<f64> {
        self.jacobians().iter().map(|j| j.determinant()).collect()
    }

    /// Writes a 3-component vector NIfTI (world-mm displacements).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.disp.len();
        let mut data = vec![0f32; 3 * n];
        for (i, u) in self.disp.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = u[c] as f32;
            }
        }
        write_nifti(path, &self.grid, 1, 3, &NiftiData::F32(data), INTENT_VECTOR)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let img = read_nifti(path)?;
        if img.components != 3 || img.frames != 1 {
            return Err(Error::Nifti("expected a 3-component vector image".into()));
        }
        let v = img.scaled_values();
        let n = img.grid.len();
        let disp = (0..n).map(|i| [v[i], v[n + i], v[2 * n + i]]).collect();
        Self::new(img.grid, disp)
    }
}

pub(crate) fn jacobians_of(disp: &[[f64; 3]], grid: &ImageGrid) -> Vec<Matrix3<f64>> {
    let dims = grid.dims();
    let grads: Vec<Vec<[f64; 3]>> = (0..3)
        .map(|c| {
            let comp: Vec<f64> = disp.iter().map(|u| u[c]).collect();
            filter::gradient(&comp, dims)
        })
        .collect();
    // ∂u/∂x = (∂u/∂ijk) · (∂ijk/∂x)
    let to_voxel: Matrix3<f64> = grid.voxel_to_world_matrix().try_inverse().expect("valid grid");
    (0..disp.len())
        .into_par_iter()
        .map(|i| {
            let g = Matrix3::from_fn(|r, c| grads[r][i][c]);
            Matrix3::identity() + g * to_voxel
        })
        .collect()
}

/// Stationary velocity field (world mm), exponentiated by scaling and squaring.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    grid: ImageGrid,
    v: Vec<[f64; 3]>,
}

pub const DEFAULT_SQUARINGS: u32 = 6;

impl VelocityField {
    pub fn new(grid: ImageGrid, v: Vec<[f64; 3]>) -> Result<Self> {
        let f = DeformationField::new(grid, v)?;
        Ok(Self { grid: f.grid, v: f.disp })
    }

    pub fn zeros(grid: ImageGrid) -> Self {
        let n = grid.len();
        Self { grid, v: vec![[0.0; 3]; n] }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.v
    }

    pub fn values_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.v
    }

    pub fn negated(&self) -> VelocityField {
        VelocityField { grid: self.grid.clone(), v: self.v.iter().map(|u| [-u[0], -u[1], -u[2]]).collect() }
    }

    pub fn scaled(&self, s: f64) -> VelocityField {
        VelocityField { grid: self.grid.clone(), v: self.v.iter().map(|u| [s * u[0], s * u[1], s * u[2]]).collect() }
    }

    /// Linear resampling onto another grid (velocities are in mm, so no rescaling).
    pub fn resample(&self, grid: &ImageGrid) -> VelocityField {
        let f = DeformationField { grid: self.grid.clone(), disp: self.v.clone() }.resample(grid);
        VelocityField { grid: f.grid, v: f.disp }
    }

    /// `exp(v)` by scaling and squaring.
    pub fn exp(&self, squarings: u32) -> DeformationField {
        let s = 0.5f64.powi(squarings as i32);
        let mut phi = DeformationField {
            grid: self.grid.clone(),
            disp: self.v.iter().map(|u| [s * u[0], s * u[1], s * u[2]]).collect(),
        };
        for _ in 0..squarings {
            phi = phi.compose(&phi);
        }
        phi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_velocity(grid: &ImageGrid, amp: f64) -> VelocityField {
        let d = DeformationField::from_fn(grid.clone(), |p| {
            [
                amp * (0.3 * p.y).sin(),
                amp * (0.25 * p.z + 0.4).cos() * 0.5,
                amp * (0.2 * p.x).sin() * 0.7,
            ]
        });
        VelocityField::new(grid.clone(), d.into_displacements()).unwrap()
    }

    #[test]
    fn identity_composition() {
        let g = ImageGrid::isotropic(12, 1.0).unwrap();
        let f = DeformationField::from_fn(g.clone(), |p| [0.1 * p.y, -0.05 * p.x, 0.2]);
        let id = DeformationField::identity(g);
        assert_eq!(id.compose(&f), f);
    }

    #[test]
    fn exp_forward_and_backward_cancel() {
        let g = ImageGrid::isotropic(24, 1.0).unwrap();
        let v = smooth_velocity(&g, 1.5);
        let fwd = v.exp(DEFAULT_SQUARINGS);
        let bwd = v.negated().exp(DEFAULT_SQUARINGS);
        let residual = bwd.compose(&fwd);
        assert!(residual.mean_magnitude_vox() < 0.1, "{}", residual.mean_magnitude_vox());
        assert!(fwd.jacobian_determinants().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn uniform_scale_jacobian() {
        let g = ImageGrid::isotropic(10, 0.5).unwrap();
        let f = DeformationField::from_fn(g, |p| [0.1 * p.x, 0.1 * p.y, 0.1 * p.z]);
        for d in f.jacobian_determinants() {
            assert!((d - 1.331).abs() < 1e-9);
        }
    }

    #[test]
    fn vector_nifti_round_trip() {
        let g = ImageGrid::isotropic(6, 0.5).unwrap();
        let f = DeformationField::from_fn(g, |p| [p.x as f32 as f64, 0.25, -(p.z as f32 as f64)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.nii.gz");
        f.write(&path).unwrap();
        let back = DeformationField::read(&path).unwrap();
        assert!(back.grid().same_as(f.grid(), 1e-6));
        assert_eq!(back.displacements(), f.displacements());
    }
}
