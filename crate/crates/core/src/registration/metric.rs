//! Image similarity helpers shared by the linear and deformable stages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::filter;
use crate::volume::{linear_stencil, ImageGrid, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Metric {
    /// Mean squared intensity difference.
    Mse,
    /// Negative local normalized cross-correlation over a cubic window.
    Lncc { radius: usize },
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Mse
    }
}

/// Fixed-size chunks reduced in order, so sums do not depend on the thread count.
pub(crate) const CHUNK: usize = 4096;

pub(crate) fn ordered_sum<T, F, G>(n: usize, zero: T, f: F, merge: G) -> T
where
    T: Send + Sync + Clone,
    F: Fn(usize, &mut T) + Sync,
    G: Fn(&mut T, &T),
{
    let partials: Vec<T> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = zero.clone();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = zero;
    for p in &partials {
        merge(&mut total, p);
    }
    total
}

pub(crate) fn ordered_sum_f64<F: Fn(usize) -> f64 + Sync>(n: usize, f: F) -> f64 {
    ordered_sum(n, 0.0, |i, acc| *acc += f(i), |a, b| *a += b)
}

/// Image value and world-space gradient packed per voxel for joint sampling.
#[derive(Debug, Clone)]
pub(crate) struct GradientImage {
    pub grid: ImageGrid,
    pub packed: Vec<[f32; 4]>,
}

impl GradientImage {
    pub fn new(vol: &Volume) -> Self {
        let grid = vol.grid().clone();
        let data: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
        let g = filter::gradient(&data, grid.dims());
        // ∇_world = D S⁻¹ ∇_ijk
        let m = grid.voxel_to_world_matrix().try_inverse().expect("valid grid").transpose();
        let packed = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let w = m * nalgebra::Vector3::from(g[i]);
                [data[i] as f32, w.x as f32, w.y as f32, w.z as f32]
            })
            .collect();
        Self { grid, packed }
    }

    /// Value and gradient at a continuous voxel coordinate; zero beyond the half-voxel border.
    #[inline]
    pub fn sample(&self, c: [f64; 3]) -> [f64; 4] {
        let dims = self.grid.dims();
        if !(0..3).all(|a| c[a] >= -0.5 && c[a] <= dims[a] as f64 - 0.5) {
            return [0.0; 4];
        }
        let Some((idx, w)) = linear_stencil(dims, c) else {
            return [0.0; 4];
        };
        let mut out = [0.0; 4];
        for n in 0..8 {
            if w[n] != 0.0 {
                let p = &self.packed[idx[n]];
                for k in 0..4 {
                    out[k] += w[n] * p[k] as f64;
                }
            }
        }
        out
    }
}

/// Box sums over a `(2r+1)³` window, clipped at the border.
pub(crate) fn box_sum(data: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let src = cur;
        cur = (0..src.len())
            .into_par_iter()
            .map(|idx| {
                let c = (idx / stride) % n;
                let lo = c.saturating_sub(r);
                let hi = (c + r).min(n - 1);
                let base = idx - c * stride;
                (lo..=hi).map(|k| src[base + k * stride]).sum()
            })
            .collect();
    }
    cur
}

/// Local correlation statistics of `f` and `m`: per voxel the centered
/// cross term, and the two centered variances (all window sums).
pub(crate) struct LocalStats {
    pub mean_f: Vec<f64>,
    pub mean_m: Vec<f64>,
    pub sfm: Vec<f64>,
    pub sff: Vec<f64>,
    pub smm: Vec<f64>,
}

pub(crate) fn local_stats(f: &[f64], m: &[f64], dims: [usize; 3], r: usize) -> LocalStats {
    let ones = vec![1.0; f.len()];
    let count = box_sum(&ones, dims, r);
    let sf = box_sum(f, dims, r);
    let sm = box_sum(m, dims, r);
    let ff: Vec<f64> = f.iter().map(|v| v * v).collect();
    let mm: Vec<f64> = m.iter().map(|v| v * v).collect();
    let fm: Vec<f64> = f.iter().zip(m).map(|(a, b)| a * b).collect();
    let sff_raw = box_sum(&ff, dims, r);
    let smm_raw = box_sum(&mm, dims, r);
    let sfm_raw = box_sum(&fm, dims, r);
    let n = f.len();
    let mut out = LocalStats {
        mean_f: vec![0.0; n],
        mean_m: vec![0.0; n],
        sfm: vec![0.0; n],
        sff: vec![0.0; n],
        smm: vec![0.0; n],
    };
    for i in 0..n {
        let c = count[i];
        let (mf, mm_) = (sf[i] / c, sm[i] / c);
        out.mean_f[i] = mf;
        out.mean_m[i] = mm_;
        out.sfm[i] = sfm_raw[i] - c * mf * mm_;
        out.sff[i] = (sff_raw[i] - c * mf * mf).max(0.0);
        out.smm[i] = (smm_raw[i] - c * mm_ * mm_).max(0.0);
    }
    out
}

/// Added to the variance product so near-constant windows contribute smoothly
/// instead of switching on and off.
pub(crate) const LNCC_EPS: f64 = 1e-5;

/// Negative mean of the squared local correlation (lower is better).
pub(crate) fn lncc_value(f: &[f64], m: &[f64], dims: [usize; 3], r: usize) -> f64 {
    let s = local_stats(f, m, dims, r);
    let n = f.len();
    let total = ordered_sum_f64(n, |i| {
        s.sfm[i] * s.sfm[i] / (s.sff[i] * s.smm[i] + LNCC_EPS)
    });
    -total / n as f64
}
