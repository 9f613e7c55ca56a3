use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::ImageGrid;
use crate::error::{Error, Result};

pub const BACKGROUND: u16 = 0;
pub const VENTRICLES: u16 = 1;
pub const WHITE_MATTER: u16 = 2;
pub const GREY_MATTER: u16 = 3;
pub const CEREBELLUM: u16 = 4;
pub const BRAIN_STEM: u16 = 5;
pub const CSF: u16 = 6;

/// Tissue classes of the label convention. Only ventricles are produced by this toolkit.
pub fn standard_label_names() -> BTreeMap<u16, String> {
    [
        (VENTRICLES, "ventricles"),
        (WHITE_MATTER, "white matter"),
        (GREY_MATTER, "grey matter"),
        (CEREBELLUM, "cerebellum"),
        (BRAIN_STEM, "brain stem"),
        (CSF, "csf"),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.to_string()))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Linear,
    Nearest,
}

/// Scalar image on a grid. Intensities are finite `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: ImageGrid,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: ImageGrid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match grid size {}",
                data.len(),
                grid.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite intensity at voxel {pos}")));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: ImageGrid) -> Self {
        let n = grid.len();
        Self { grid, data: vec![0.0; n] }
    }

    pub fn filled(grid: ImageGrid, value: f32) -> Self {
        let n = grid.len();
        Self { grid, data: vec![value; n] }
    }

    /// Evaluates `f` at every voxel center (world coordinates).
    pub fn from_world_fn<F>(grid: ImageGrid, f: F) -> Self
    where
        F: Fn(&Vector3<f64>) -> f32 + Sync,
    {
        let data = (0..grid.len())
            .into_par_iter()
            .map(|idx| f(&grid.world_of_index(idx)))
            .collect();
        Self { grid, data }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the voxel buffer. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn map<F: Fn(f32) -> f32 + Sync>(&self, f: F) -> Volume {
        Volume {
            grid: self.grid.clone(),
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    /// Linear interpolation at a world point; 0 beyond the half-voxel border.
    pub fn sample_linear(&self, p: &Vector3<f64>) -> f64 {
        let c = self.grid.world_to_voxel(p);
        sample_scalar(&self.data, self.grid.dims(), c, Interpolation::Linear)
    }

    pub fn resample(&self, target: &ImageGrid, interp: Interpolation) -> Result<Volume> {
        if target.is_empty() {
            return Err(Error::InvalidGrid("degenerate target grid".into()));
        }
        if target == &self.grid {
            return Ok(self.clone());
        }
        Ok(self.resample_with(target, interp, |p| *p))
    }

    /// Pull-back resampling through a world-space point map `target → source`.
    pub fn resample_with<F>(&self, target: &ImageGrid, interp: Interpolation, map: F) -> Volume
    where
        F: Fn(&Vector3<f64>) -> Vector3<f64> + Sync,
    {
        let dims = self.grid.dims();
        let data = (0..target.len())
            .into_par_iter()
            .map(|idx| {
                let src = map(&target.world_of_index(idx));
                let c = self.grid.world_to_voxel(&src);
                sample_scalar(&self.data, dims, c, interp) as f32
            })
            .collect();
        Volume { grid: target.clone(), data }
    }

    /// Same grid, voxels outside `mask` set to zero.
    pub fn masked(&self, mask: &[bool]) -> Volume {
        let data = self
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        Volume { grid: self.grid.clone(), data }
    }

    pub fn with_data(&self, data: Vec<f32>) -> Result<Volume> {
        Volume::new(self.grid.clone(), data)
    }
}

/// Integer label image. Labels are drawn from `label_names` keys plus background 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: ImageGrid,
    data: Vec<u16>,
    label_names: BTreeMap<u16, String>,
}

impl LabelMap {
    pub fn new(grid: ImageGrid, data: Vec<u16>, label_names: BTreeMap<u16, String>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidInput(format!(
                "label data length {} does not match grid size {}",
                data.len(),
                grid.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|&&l| l != BACKGROUND && !label_names.contains_key(&l))
        {
            return Err(Error::InvalidInput(format!("label {bad} has no name")));
        }
        Ok(Self { grid, data, label_names })
    }

    /// Builds a label map naming every present label, using the standard table where possible.
    pub fn with_default_names(grid: ImageGrid, data: Vec<u16>) -> Result<Self> {
        let standard = standard_label_names();
        let present: BTreeSet<u16> = data.iter().copied().filter(|&l| l != BACKGROUND).collect();
        let mut names = standard.clone();
        for l in present {
            names.entry(l).or_insert_with(|| format!("label_{l}"));
        }
        Self::new(grid, data, names)
    }

    pub fn from_mask(grid: ImageGrid, mask: &[bool], label: u16) -> Result<Self> {
        let data = mask.iter().map(|&m| if m { label } else { BACKGROUND }).collect();
        Self::with_default_names(grid, data)
    }

    pub fn empty(grid: ImageGrid) -> Self {
        let n = grid.len();
        Self { grid, data: vec![BACKGROUND; n], label_names: standard_label_names() }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn label_names(&self) -> &BTreeMap<u16, String> {
        &self.label_names
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn mask(&self, label: u16) -> Vec<bool> {
        self.data.iter().map(|&l| l == label).collect()
    }

    /// Any non-background label.
    pub fn foreground(&self) -> Vec<bool> {
        self.data.iter().map(|&l| l != BACKGROUND).collect()
    }

    pub fn labels_present(&self) -> BTreeSet<u16> {
        self.data.iter().copied().collect()
    }

    pub fn resample(&self, target: &ImageGrid, interp: Interpolation) -> Result<LabelMap> {
        if interp != Interpolation::Nearest {
            return Err(Error::InvalidInput(
                "label maps can only be resampled with nearest-neighbor interpolation".into(),
            ));
        }
        if target.is_empty() {
            return Err(Error::InvalidGrid("degenerate target grid".into()));
        }
        if target == &self.grid {
            return Ok(self.clone());
        }
        Ok(self.resample_with(target, |p| *p))
    }

    /// Nearest-neighbor pull-back through a world-space point map `target → source`.
    pub fn resample_with<F>(&self, target: &ImageGrid, map: F) -> LabelMap
    where
        F: Fn(&Vector3<f64>) -> Vector3<f64> + Sync,
    {
        let dims = self.grid.dims();
        let data = (0..target.len())
            .into_par_iter()
            .map(|idx| {
                let c = self.grid.world_to_voxel(&map(&target.world_of_index(idx)));
                nearest_index(dims, c).map_or(BACKGROUND, |i| self.data[i])
            })
            .collect();
        LabelMap { grid: target.clone(), data, label_names: self.label_names.clone() }
    }
}

#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

#[inline]
fn inside(n: usize, x: f64) -> bool {
    x.is_finite() && x >= -0.5 && x <= n as f64 - 0.5
}

#[inline]
pub(crate) fn nearest_index(dims: [usize; 3], c: [f64; 3]) -> Option<usize> {
    if !(0..3).all(|a| inside(dims[a], c[a])) {
        return None;
    }
    let i = [0, 1, 2].map(|a| (snap(c[a]).round().max(0.0) as usize).min(dims[a] - 1));
    Some(i[0] + dims[0] * (i[1] + dims[1] * i[2]))
}

/// Eight corner indices and trilinear weights around a continuous voxel coordinate.
/// Coordinates are clamped to the lattice; `None` only for non-finite input.
#[inline]
pub(crate) fn linear_stencil(dims: [usize; 3], c: [f64; 3]) -> Option<([usize; 8], [f64; 8])> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        if !c[a].is_finite() {
            return None;
        }
        let x = snap(c[a].clamp(0.0, (dims[a] - 1) as f64));
        let i0 = (x.floor() as usize).min(dims[a] - 1);
        lo[a] = i0;
        hi[a] = (i0 + 1).min(dims[a] - 1);
        t[a] = x - i0 as f64;
    }
    let (nx, ny) = (dims[0], dims[1]);
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let (tx, ty, tz) = (t[0], t[1], t[2]);
    Some((
        [
            idx(lo[0], lo[1], lo[2]),
            idx(hi[0], lo[1], lo[2]),
            idx(lo[0], hi[1], lo[2]),
            idx(hi[0], hi[1], lo[2]),
            idx(lo[0], lo[1], hi[2]),
            idx(hi[0], lo[1], hi[2]),
            idx(lo[0], hi[1], hi[2]),
            idx(hi[0], hi[1], hi[2]),
        ],
        [
            (1.0 - tx) * (1.0 - ty) * (1.0 - tz),
            tx * (1.0 - ty) * (1.0 - tz),
            (1.0 - tx) * ty * (1.0 - tz),
            tx * ty * (1.0 - tz),
            (1.0 - tx) * (1.0 - ty) * tz,
            tx * (1.0 - ty) * tz,
            (1.0 - tx) * ty * tz,
            tx * ty * tz,
        ],
    ))
}

/// Samples a scalar buffer at a continuous voxel coordinate.
/// Points beyond the half-voxel border return 0; inside it, linear clamps to edge.
#[inline]
pub(crate) fn sample_scalar<T: Copy + Into<f64>>(
    data: &[T],
    dims: [usize; 3],
    c: [f64; 3],
    interp: Interpolation,
) -> f64 {
    match interp {
        Interpolation::Nearest => nearest_index(dims, c).map_or(0.0, |i| data[i].into()),
        Interpolation::Linear => {
            if !(0..3).all(|a| inside(dims[a], c[a])) {
                return 0.0;
            }
            let (idx, w) = linear_stencil(dims, c).expect("finite coordinate");
            let mut acc = 0.0;
            for n in 0..8 {
                if w[n] != 0.0 {
                    acc += w[n] * data[idx[n]].into();
                }
            }
            acc
        }
    }
}
