//! Separable smoothing, finite differences, binary morphology and connected
//! components on flat x-fastest buffers.

use std::collections::VecDeque;

use rayon::prelude::*;

#[inline(always)]
fn idx3(i: usize, j: usize, k: usize, dims: [usize; 3]) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let n = dims[axis] as i64;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let c = match axis {
                0 => idx % dims[0],
                1 => (idx / dims[0]) % dims[1],
                _ => idx / (dims[0] * dims[1]),
            } as i64;
            let base = idx as i64 - c * stride as i64;
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let p = (c + t as i64 - radius).clamp(0, n - 1);
                acc += w * data[(base + p * stride as i64) as usize];
            }
            acc
        })
        .collect()
}

/// Gaussian smoothing with per-axis sigma in voxels; edges are replicated.
pub fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma: [f64; 3]) -> Vec<f64> {
    let mut out = data.to_vec();
    for axis in 0..3 {
        if sigma[axis] > 0.0 && dims[axis] > 1 {
            out = convolve_axis(&out, dims, axis, &gaussian_kernel(sigma[axis]));
        }
    }
    out
}

/// Smooths each component of a vector field.
pub fn gaussian_smooth_vec(field: &[[f64; 3]], dims: [usize; 3], sigma: [f64; 3]) -> Vec<[f64; 3]> {
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let channel: Vec<f64> = field.iter().map(|v| v[c]).collect();
            gaussian_smooth(&channel, dims, sigma)
        })
        .collect();
    (0..field.len()).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect()
}

/// Central differences in voxel units, one-sided at the borders.
pub fn gradient(data: &[f64], dims: [usize; 3]) -> Vec<[f64; 3]> {
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let c = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
            let mut g = [0.0; 3];
            for a in 0..3 {
                if dims[a] < 2 {
                    continue;
                }
                let mut lo = c;
                let mut hi = c;
                let denom;
                if c[a] == 0 {
                    hi[a] += 1;
                    denom = 1.0;
                } else if c[a] == dims[a] - 1 {
                    lo[a] -= 1;
                    denom = 1.0;
                } else {
                    lo[a] -= 1;
                    hi[a] += 1;
                    denom = 2.0;
                }
                g[a] = (data[idx3(hi[0], hi[1], hi[2], dims)] - data[idx3(lo[0], lo[1], lo[2], dims)])
                    / denom;
            }
            g
        })
        .collect()
}

/// Offsets of a discrete ball of the given voxel radius.
fn ball(radius: usize) -> Vec<[i64; 3]> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn morph(mask: &[bool], dims: [usize; 3], radius: usize, dilate: bool) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let offsets = ball(radius);
    (0..mask.len())
        .into_par_iter()
        .map(|idx| {
            let c = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
            let mut hit = !dilate;
            for o in &offsets {
                let p = [0, 1, 2].map(|a| c[a] as i64 + o[a]);
                let inside = (0..3).all(|a| p[a] >= 0 && p[a] < dims[a] as i64);
                // outside the lattice counts as background
                let v = inside
                    && mask[idx3(p[0] as usize, p[1] as usize, p[2] as usize, dims)];
                if dilate && v {
                    hit = true;
                    break;
                }
                if !dilate && !v {
                    hit = false;
                    break;
                }
            }
            hit
        })
        .collect()
}

pub fn dilate(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    morph(mask, dims, radius, true)
}

pub fn erode(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    morph(mask, dims, radius, false)
}

pub fn open(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    dilate(&erode(mask, dims, radius), dims, radius)
}

pub fn close(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    erode(&dilate(mask, dims, radius), dims, radius)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        match self {
            Connectivity::Six => vec![
                [1, 0, 0],
                [-1, 0, 0],
                [0, 1, 0],
                [0, -1, 0],
                [0, 0, 1],
                [0, 0, -1],
            ],
            Connectivity::TwentySix => {
                let mut v = Vec::with_capacity(26);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            if (dx, dy, dz) != (0, 0, 0) {
                                v.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

/// Connected components of a mask. Returns per-voxel component id
/// (0 = background, components numbered from 1 in scan order) and component sizes
/// (`sizes[id - 1]`).
pub fn connected_components(
    mask: &[bool],
    dims: [usize; 3],
    connectivity: Connectivity,
) -> (Vec<u32>, Vec<usize>) {
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let c = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
            for o in &offsets {
                let p = [0, 1, 2].map(|a| c[a] as i64 + o[a]);
                if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as i64) {
                    continue;
                }
                let n = idx3(p[0] as usize, p[1] as usize, p[2] as usize, dims);
                if mask[n] && labels[n] == 0 {
                    labels[n] = id;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_preserves_constants_and_mass() {
        let dims = [9, 7, 5];
        let c = vec![3.5; 9 * 7 * 5];
        let s = gaussian_smooth(&c, dims, [1.5, 1.0, 2.0]);
        assert!(s.iter().all(|v| (v - 3.5).abs() < 1e-12));

        let mut delta = vec![0.0; 21 * 21 * 21];
        delta[idx3(10, 10, 10, [21; 3])] = 1.0;
        let s = gaussian_smooth(&delta, [21; 3], [1.0; 3]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_linear_ramp() {
        let dims = [6, 5, 4];
        let data: Vec<f64> = (0..120)
            .map(|i| {
                let (x, y, z) = (i % 6, (i / 6) % 5, i / 30);
                2.0 * x as f64 - y as f64 + 0.5 * z as f64
            })
            .collect();
        for g in gradient(&data, dims) {
            assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 1.0).abs() < 1e-12 && (g[2] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn morphology_and_components() {
        let dims = [10, 10, 10];
        let mut m = vec![false; 1000];
        m[idx3(2, 2, 2, dims)] = true;
        for i in 5..9 {
            for j in 5..9 {
                for k in 5..9 {
                    m[idx3(i, j, k, dims)] = true;
                }
            }
        }
        let (_, sizes) = connected_components(&m, dims, Connectivity::Six);
        assert_eq!(sizes, vec![1, 64]);
        let opened = open(&m, dims, 1);
        assert!(!opened[idx3(2, 2, 2, dims)]);
        assert!(opened[idx3(6, 6, 6, dims)]);
        let d = dilate(&m, dims, 1);
        assert_eq!(d.iter().filter(|&&x| x).count() - m.iter().filter(|&&x| x).count(), 6 + 6 * 16);
    }
}
