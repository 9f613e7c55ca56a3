//! Sparse linear acquisition operator of one stack and its exact transpose.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::stack::{LRStack, FWHM_PER_SIGMA};
use crate::error::{Error, Result};
use crate::volume::{linear_stencil, ImageGrid};

/// Discrete Gaussian slice profile sampled every `step` mm, normalized to unit sum.
/// Returns `(offset_mm, weight)` pairs.
pub fn slice_profile(fwhm_mm: f64, step: f64) -> Vec<(f64, f64)> {
    let sigma = fwhm_mm / FWHM_PER_SIGMA;
    let m = (3.0 * sigma / step).ceil() as i64;
    let raw: Vec<(f64, f64)> = (-m..=m)
        .map(|i| {
            let o = i as f64 * step;
            (o, (-o * o / (2.0 * sigma * sigma)).exp())
        })
        .collect();
    let z: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(o, w)| (o, w / z)).collect()
}

#[inline]
fn within_half_voxel(dims: [usize; 3], c: [f64; 3]) -> bool {
    (0..3).all(|a| c[a].is_finite() && c[a] >= -0.5 && c[a] <= dims[a] as f64 - 0.5)
}

/// Row-compressed matrix `A` mapping volume voxels to stack samples, with its transpose.
#[derive(Debug, Clone)]
pub struct StackOperator {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f32>,
    t_ptr: Vec<usize>,
    t_rows: Vec<u32>,
    t_vals: Vec<f32>,
}

impl StackOperator {
    /// Builds the operator from the stack geometry (grid, slice profile, per-slice motion)
    /// onto the volume grid `target`.
    pub fn new(stack: &LRStack, target: &ImageGrid) -> Result<Self> {
        stack.validate()?;
        if target.len() > u32::MAX as usize {
            return Err(Error::InvalidGrid("target grid too large for the stack operator".into()));
        }
        let sg = stack.grid();
        let step = target.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
        let profile = slice_profile(stack.slice_fwhm_mm, step);
        let normal: Vector3<f64> = sg.direction().column(2).into();
        let center = sg.center();
        let dims = target.dims();
        let plane = sg.dims()[0] * sg.dims()[1];
        let rows: Vec<Vec<(u32, f32)>> = (0..sg.len())
            .into_par_iter()
            .map(|r| {
                let motion = &stack.per_slice_motion[r / plane];
                let q = sg.world_of_index(r);
                let mut entries: Vec<(u32, f64)> = Vec::with_capacity(profile.len() * 8);
                let mut covered = 0.0;
                for &(o, w) in &profile {
                    let p = motion.apply(&(q + normal * o), &center);
                    let c = target.world_to_voxel(&p);
                    if !within_half_voxel(dims, c) {
                        continue;
                    }
                    covered += w;
                    let (idx, tw) = linear_stencil(dims, c).expect("finite coordinate");
                    for n in 0..8 {
                        if tw[n] != 0.0 {
                            entries.push((idx[n] as u32, w * tw[n]));
                        }
                    }
                }
                // profile taps leaving the reconstruction domain carry no information;
                // the remaining taps are renormalized
                if covered > 0.0 {
                    entries.iter_mut().for_each(|e| e.1 /= covered);
                }
                entries.sort_unstable_by_key(|e| e.0);
                let mut merged: Vec<(u32, f32)> = Vec::with_capacity(entries.len());
                let mut i = 0;
                while i < entries.len() {
                    let col = entries[i].0;
                    let mut acc = 0.0;
                    while i < entries.len() && entries[i].0 == col {
                        acc += entries[i].1;
                        i += 1;
                    }
                    merged.push((col, acc as f32));
                }
                merged
            })
            .collect();

        let n_rows = rows.len();
        let n_cols = target.len();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        row_ptr.push(0);
        for r in &rows {
            row_ptr.push(row_ptr.last().unwrap() + r.len());
        }
        let nnz = *row_ptr.last().unwrap();
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for r in rows {
            for (c, v) in r {
                cols.push(c);
                vals.push(v);
            }
        }

        // counting sort by column gives the transpose with rows in ascending order
        let mut t_ptr = vec![0usize; n_cols + 1];
        for &c in &cols {
            t_ptr[c as usize + 1] += 1;
        }
        for i in 0..n_cols {
            t_ptr[i + 1] += t_ptr[i];
        }
        let mut fill = t_ptr.clone();
        let mut t_rows = vec![0u32; nnz];
        let mut t_vals = vec![0f32; nnz];
        for r in 0..n_rows {
            for e in row_ptr[r]..row_ptr[r + 1] {
                let c = cols[e] as usize;
                t_rows[fill[c]] = r as u32;
                t_vals[fill[c]] = vals[e];
                fill[c] += 1;
            }
        }
        Ok(Self { n_rows, n_cols, row_ptr, cols, vals, t_ptr, t_rows, t_vals })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `A x`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        (0..self.n_rows)
            .into_par_iter()
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|e| self.vals[e] as f64 * x[self.cols[e] as usize])
                    .sum()
            })
            .collect()
    }

    /// `Aᵀ y`.
    pub fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n_rows);
        (0..self.n_cols)
            .into_par_iter()
            .map(|c| {
                (self.t_ptr[c]..self.t_ptr[c + 1])
                    .map(|e| self.t_vals[e] as f64 * y[self.t_rows[e] as usize])
                    .sum()
            })
            .collect()
    }
}
