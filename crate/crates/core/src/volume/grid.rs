use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Voxel lattice with world-space geometry.
///
/// World position of voxel `(i, j, k)` is `origin + direction * diag(spacing) * (i, j, k)`.
/// Voxel data is stored x-fastest: `index = i + nx * (j + ny * k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Vector3<f64>,
    direction: Matrix3<f64>,
    to_world: Matrix3<f64>,
    to_voxel: Matrix3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl ImageGrid {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: Matrix3<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGrid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        let gram = direction.transpose() * direction - Matrix3::identity();
        if gram.amax() >= ORTHONORMAL_TOL {
            return Err(Error::InvalidGrid(format!(
                "direction matrix is not orthonormal (|DᵀD - I|max = {:.3e})",
                gram.amax()
            )));
        }
        let scale = Matrix3::from_diagonal(&Vector3::from(spacing));
        let inv_scale = Matrix3::from_diagonal(&Vector3::new(
            1.0 / spacing[0],
            1.0 / spacing[1],
            1.0 / spacing[2],
        ));
        Ok(Self {
            dims,
            spacing,
            origin: Vector3::from(origin),
            direction,
            to_world: direction * scale,
            to_voxel: inv_scale * direction.transpose(),
        })
    }

    /// Identity-direction grid whose field of view is centered on the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a]);
        Self::new(dims, spacing, origin, Matrix3::identity())
    }

    pub fn isotropic(n: usize, spacing: f64) -> Result<Self> {
        Self::centered([n; 3], [spacing; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn direction(&self) -> &Matrix3<f64> {
        &self.direction
    }

    /// `direction * diag(spacing)`: maps voxel offsets to world offsets.
    pub fn voxel_to_world_matrix(&self) -> &Matrix3<f64> {
        &self.to_world
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn is_isotropic(&self) -> bool {
        let s = self.spacing;
        (s[0] - s[1]).abs() < 1e-9 * s[0] && (s[0] - s[2]).abs() < 1e-9 * s[0]
    }

    #[inline(always)]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline(always)]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn voxel_to_world(&self, ijk: [f64; 3]) -> Vector3<f64> {
        self.origin + self.to_world * Vector3::from(ijk)
    }

    #[inline]
    pub fn world_to_voxel(&self, p: &Vector3<f64>) -> [f64; 3] {
        let v = self.to_voxel * (p - self.origin);
        [v.x, v.y, v.z]
    }

    /// World position of a voxel given by flat index.
    #[inline]
    pub fn world_of_index(&self, idx: usize) -> Vector3<f64> {
        let [i, j, k] = self.coords(idx);
        self.voxel_to_world([i as f64, j as f64, k as f64])
    }

    /// Homogeneous voxel→world affine (the NIfTI sform).
    pub fn affine(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.to_world);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.origin);
        m
    }

    /// Builds a grid from a voxel→world affine, re-orthonormalizing the
    /// rotational part (single-precision headers are only orthonormal to ~1e-7).
    pub fn from_affine(dims: [usize; 3], affine: &Matrix4<f64>) -> Result<Self> {
        let linear: Matrix3<f64> = affine.fixed_view::<3, 3>(0, 0).into();
        let mut spacing = [0.0; 3];
        let mut columns = Matrix3::zeros();
        for a in 0..3 {
            let col = linear.column(a);
            let norm = col.norm();
            if !(norm > 0.0) {
                return Err(Error::InvalidGrid(format!("affine column {a} has zero length")));
            }
            spacing[a] = norm;
            columns.set_column(a, &(col / norm));
        }
        let direction = orthonormalize(&columns)?;
        let origin = [affine[(0, 3)], affine[(1, 3)], affine[(2, 3)]];
        Self::new(dims, spacing, origin, direction)
    }

    /// True when both grids describe the same lattice within `tol` mm.
    pub fn same_as(&self, other: &ImageGrid, tol: f64) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| (self.spacing[a] - other.spacing[a]).abs() <= tol)
            && (self.origin - other.origin).amax() <= tol
            && (self.direction - other.direction).amax() <= tol
    }

    /// World position of the field-of-view center.
    pub fn center(&self) -> Vector3<f64> {
        self.voxel_to_world([0, 1, 2].map(|a| 0.5 * (self.dims[a] as f64 - 1.0)))
    }

    /// Coarser grid covering the same field of view, `factor` voxels per coarse voxel.
    pub fn downsampled(&self, factor: usize) -> ImageGrid {
        if factor <= 1 {
            return self.clone();
        }
        let f = factor as f64;
        let dims = self.dims.map(|n| n.div_ceil(factor).max(1));
        let spacing = self.spacing.map(|s| s * f);
        let shift = (f - 1.0) / 2.0;
        let origin = self.voxel_to_world([shift; 3]);
        ImageGrid::new(dims, spacing, [origin.x, origin.y, origin.z], self.direction)
            .expect("downsampling a valid grid yields a valid grid")
    }

    /// Same geometry with a different voxel size, covering the same extent.
    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<ImageGrid> {
        let extent = [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a]);
        let dims = [0, 1, 2].map(|a| ((extent[a] / spacing[a]).round() as usize).max(1));
        // keep the field-of-view center fixed
        let center = self.center();
        let offset = self.direction
            * Vector3::from([0, 1, 2].map(|a| 0.5 * (dims[a] as f64 - 1.0) * spacing[a]));
        let origin = center - offset;
        ImageGrid::new(dims, spacing, [origin.x, origin.y, origin.z], self.direction)
    }
}

/// Nearest orthonormal matrix (polar factor).
pub fn orthonormalize(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => Ok(u * v_t),
        _ => Err(Error::InvalidGrid("direction SVD failed".into())),
    }
}

/// Rotation matrix from a rotation vector (axis × angle in radians).
pub fn rotation_from_vector(w: &Vector3<f64>) -> Matrix3<f64> {
    *nalgebra::Rotation3::new(*w).matrix()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_world_examples() {
        let g = ImageGrid::new([8; 3], [1.0; 3], [0.0; 3], Matrix3::identity()).unwrap();
        let p = g.voxel_to_world([2.0, 3.0, 4.0]);
        assert_eq!([p.x, p.y, p.z], [2.0, 3.0, 4.0]);

        let g = ImageGrid::new([8; 3], [1.0; 3], [10.0, 0.0, 0.0], Matrix3::identity()).unwrap();
        let p = g.voxel_to_world([0.0; 3]);
        assert_eq!([p.x, p.y, p.z], [10.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(ImageGrid::new([0, 4, 4], [1.0; 3], [0.0; 3], Matrix3::identity()).is_err());
        assert!(ImageGrid::new([4; 3], [1.0, 0.0, 1.0], [0.0; 3], Matrix3::identity()).is_err());
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(ImageGrid::new([4; 3], [1.0; 3], [0.0; 3], skew).is_err());
    }

    #[test]
    fn affine_round_trip() {
        let dir = rotation_from_vector(&Vector3::new(0.3, -0.2, 0.5));
        let g = ImageGrid::new([5, 6, 7], [0.5, 0.7, 3.0], [1.0, -2.0, 3.5], dir).unwrap();
        let back = ImageGrid::from_affine(g.dims(), &g.affine()).unwrap();
        assert!(g.same_as(&back, 1e-12));
    }

    #[test]
    fn downsampled_keeps_center() {
        let g = ImageGrid::isotropic(64, 0.5).unwrap();
        let c = g.downsampled(4);
        assert_eq!(c.dims(), [16; 3]);
        assert!((c.center() - g.center()).amax() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn world_voxel_inverse(wx in -3.0..3.0f64, wy in -3.0..3.0f64, wz in -3.0..3.0f64,
                               i in -10.0..40.0f64, j in -10.0..40.0f64, k in -10.0..40.0f64) {
            let dir = rotation_from_vector(&Vector3::new(wx, wy, wz));
            let g = ImageGrid::new([32; 3], [0.5, 0.8, 2.0], [3.0, -1.0, 7.0], dir).unwrap();
            let back = g.world_to_voxel(&g.voxel_to_world([i, j, k]));
            proptest::prop_assert!((back[0] - i).abs() < 1e-9);
            proptest::prop_assert!((back[1] - j).abs() < 1e-9);
            proptest::prop_assert!((back[2] - k).abs() < 1e-9);
        }
    }
}
