//! Quantile-landmark histogram matching.
//!
//! Landmarks are the evenly spaced quantiles (0%, …, 100%) of the foreground
//! intensities of both images. Source foreground voxels are remapped through
//! the monotone piecewise-linear function joining source landmarks to
//! reference landmarks; beyond the outer landmarks the end segments are
//! extended linearly. Background voxels are left untouched.

use rayon::prelude::*;

use super::image::Volume;
use crate::error::{Error, Result};

pub const DEFAULT_LANDMARKS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramMatchParams {
    pub n_landmarks: usize,
    /// Voxels strictly above this intensity are foreground.
    pub foreground_threshold: f32,
}

impl Default for HistogramMatchParams {
    fn default() -> Self {
        Self { n_landmarks: DEFAULT_LANDMARKS, foreground_threshold: 0.0 }
    }
}

/// Quantile of sorted data with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Evenly spaced quantile landmarks of `values`.
pub fn quantile_landmarks(values: &[f64], n_landmarks: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.par_sort_unstable_by(|a, b| a.total_cmp(b));
    (0..n_landmarks)
        .map(|i| quantile_sorted(&sorted, i as f64 / (n_landmarks - 1) as f64))
        .collect()
}

fn foreground_values(vol: &Volume, mask: Option<&[bool]>, threshold: f32) -> Vec<f64> {
    vol.data()
        .iter()
        .enumerate()
        .filter(|(i, &v)| v > threshold && mask.map_or(true, |m| m[*i]))
        .map(|(_, &v)| v as f64)
        .collect()
}

/// Monotone piecewise-linear intensity map between landmark sets.
#[derive(Debug, Clone)]
pub struct LandmarkMap {
    source: Vec<f64>,
    target: Vec<f64>,
}

impl LandmarkMap {
    fn new(source: &[f64], target: &[f64]) -> Result<Self> {
        // collapse repeated source landmarks (intensity plateaus) into one knot
        let mut s: Vec<f64> = Vec::with_capacity(source.len());
        let mut t: Vec<f64> = Vec::with_capacity(source.len());
        let mut i = 0;
        while i < source.len() {
            let mut j = i;
            while j + 1 < source.len() && source[j + 1] <= source[i] {
                j += 1;
            }
            let mean = target[i..=j].iter().sum::<f64>() / (j - i + 1) as f64;
            s.push(source[i]);
            t.push(mean);
            i = j + 1;
        }
        if s.len() < 2 {
            return Err(Error::InvalidInput(
                "source foreground is constant; quantile landmarks are undefined".into(),
            ));
        }
        Ok(Self { source: s, target: t })
    }

    pub fn apply(&self, x: f64) -> f64 {
        let s = &self.source;
        let t = &self.target;
        let n = s.len();
        let seg = match s.partition_point(|&v| v <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let slope = (t[seg + 1] - t[seg]) / (s[seg + 1] - s[seg]);
        t[seg] + slope * (x - s[seg])
    }
}

/// Matches the foreground histogram of `source` to `reference` (foreground = intensity > 0).
pub fn histogram_match(source: &Volume, reference: &Volume, n_landmarks: usize) -> Result<Volume> {
    histogram_match_masked(
        source,
        reference,
        None,
        None,
        HistogramMatchParams { n_landmarks, ..Default::default() },
    )
}

/// Histogram matching with landmarks restricted to optional masks.
///
/// Landmarks come from foreground voxels inside each mask; the resulting map
/// is applied to every foreground voxel of the source.
pub fn histogram_match_masked(
    source: &Volume,
    reference: &Volume,
    source_mask: Option<&[bool]>,
    reference_mask: Option<&[bool]>,
    params: HistogramMatchParams,
) -> Result<Volume> {
    if params.n_landmarks < 2 {
        return Err(Error::InvalidInput("n_landmarks must be at least 2".into()));
    }
    let thr = params.foreground_threshold;
    let src_vals = foreground_values(source, source_mask, thr);
    let ref_vals = foreground_values(reference, reference_mask, thr);
    if src_vals.len() < 2 || ref_vals.len() < 2 {
        return Err(Error::InvalidInput("histogram matching needs a non-empty foreground".into()));
    }
    let src_lm = quantile_landmarks(&src_vals, params.n_landmarks);
    let ref_lm = quantile_landmarks(&ref_vals, params.n_landmarks);
    if ref_lm[0] == ref_lm[params.n_landmarks - 1] {
        return Err(Error::InvalidInput(
            "reference foreground is constant; quantile landmarks are undefined".into(),
        ));
    }
    if src_lm[0] == src_lm[params.n_landmarks - 1] {
        return Err(Error::InvalidInput(
            "source foreground is constant; quantile landmarks are undefined".into(),
        ));
    }
    let map = LandmarkMap::new(&src_lm, &ref_lm)?;
    let data = source
        .data()
        .par_iter()
        .map(|&v| if v > thr { map.apply(v as f64) as f32 } else { v })
        .collect();
    source.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::ImageGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, LogNormal, Normal};

    fn grid(n: usize) -> ImageGrid {
        ImageGrid::isotropic(n, 1.0).unwrap()
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = grid(16);
        let dist = Normal::new(50.0, 10.0).unwrap();
        let data: Vec<f32> = (0..g.len()).map(|_| (dist.sample(&mut rng) as f64).max(1.0) as f32).collect();
        let v = Volume::new(g, data).unwrap();
        let out = histogram_match(&v, &v, 10).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn affine_intensity_map_is_recovered() {
        let g = grid(10);
        let data: Vec<f32> = (0..g.len()).map(|i| (i % 100 + 1) as f32).collect();
        let src = Volume::new(g.clone(), data.clone()).unwrap();
        let reference = Volume::new(g, data.iter().map(|v| v * 2.0).collect()).unwrap();
        let out = histogram_match(&src, &reference, DEFAULT_LANDMARKS).unwrap();
        for (a, b) in out.data().iter().zip(&data) {
            assert!((a - 2.0 * b).abs() < 1e-3, "{a} vs {}", 2.0 * b);
        }
    }

    #[test]
    fn lognormal_to_gaussian_percentiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = grid(20);
        let ln = LogNormal::new(0.0, 0.5).unwrap();
        let nd = Normal::new(100.0, 15.0).unwrap();
        let src: Vec<f32> = (0..g.len()).map(|_| ln.sample(&mut rng) as f32).collect();
        let rf: Vec<f32> = (0..g.len()).map(|_| (nd.sample(&mut rng) as f64).max(1.0) as f32).collect();
        let src = Volume::new(g.clone(), src).unwrap();
        let rf = Volume::new(g, rf).unwrap();
        // landmarks every 5% so each checked percentile is a knot
        let out = histogram_match(&src, &rf, 21).unwrap();

        // sort-based oracle, independent of the landmark code
        let pct = |v: &Volume, q: f64| {
            let mut s: Vec<f64> = v.data().iter().filter(|&&x| x > 0.0).map(|&x| x as f64).collect();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pos = q * (s.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
        };
        for q in [0.05, 0.5, 0.95] {
            let a = pct(&out, q);
            let b = pct(&rf, q);
            assert!((a - b).abs() / b < 0.02, "q={q}: {a} vs {b}");
        }
    }

    #[test]
    fn constant_inputs_rejected() {
        let g = grid(6);
        let c = Volume::filled(g.clone(), 5.0);
        let data: Vec<f32> = (0..g.len()).map(|i| 1.0 + i as f32).collect();
        let v = Volume::new(g, data).unwrap();
        assert!(histogram_match(&c, &v, 11).is_err());
        assert!(histogram_match(&v, &c, 11).is_err());
    }

    proptest::proptest! {
        #[test]
        fn matching_is_idempotent(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // 11³ voxels: every decile lands exactly on an order statistic
            let g = grid(11);
            let a = LogNormal::new(1.0, 0.7).unwrap();
            let b = Normal::new(20.0, 4.0).unwrap();
            let src = Volume::new(g.clone(), (0..g.len()).map(|_| a.sample(&mut rng) as f32).collect()).unwrap();
            let rf = Volume::new(g.clone(), (0..g.len()).map(|_| (b.sample(&mut rng) as f64).max(0.5) as f32).collect()).unwrap();
            let once = histogram_match(&src, &rf, 11).unwrap();
            let twice = histogram_match(&once, &rf, 11).unwrap();
            let (lo, hi) = once.min_max();
            let range = (hi - lo) as f64;
            for (x, y) in once.data().iter().zip(twice.data()) {
                proptest::prop_assert!(((x - y) as f64).abs() <= 1e-4 * range);
            }
        }
    }
}
