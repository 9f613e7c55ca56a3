//! Classic ventricle segmenter: intensity threshold inside the brain mask,
//! morphological clean-up and connected-component selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{self, Connectivity};
use crate::volume::{quantile_sorted, LabelMap, Volume, VENTRICLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegParams {
    /// Foreground quantile that seeds the threshold search.
    pub intensity_quantile: f64,
    pub morph_radius_voxels: usize,
    pub min_component_mm3: f64,
}

impl Default for SegParams {
    fn default() -> Self {
        Self { intensity_quantile: 0.85, morph_radius_voxels: 1, min_component_mm3: 50.0 }
    }
}

impl SegParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_quantile > 0.0 && self.intensity_quantile < 1.0) {
            return Err(Error::InvalidInput(format!("quantile must lie in (0, 1), got {}", self.intensity_quantile)));
        }
        if !(self.min_component_mm3 >= 0.0) {
            return Err(Error::InvalidInput("minimum component volume must be non-negative".into()));
        }
        Ok(())
    }
}

/// Two-class intermeans (ISODATA) threshold started from `t0`.
fn intermeans(values: &[f64], t0: f64) -> f64 {
    let mut t = t0;
    for _ in 0..100 {
        let (mut lo, mut nlo, mut hi, mut nhi) = (0.0, 0usize, 0.0, 0usize);
        for &v in values {
            if v > t {
                hi += v;
                nhi += 1;
            } else {
                lo += v;
                nlo += 1;
            }
        }
        if nlo == 0 || nhi == 0 {
            return t;
        }
        let next = 0.5 * (lo / nlo as f64 + hi / nhi as f64);
        if (next - t).abs() <= 1e-9 * t.abs().max(1e-12) {
            return next;
        }
        t = next;
    }
    t
}

/// Threshold used for `vol` within `mask`.
pub fn ventricle_threshold(vol: &Volume, mask: &[bool], params: &SegParams) -> Result<f64> {
    let mut values: Vec<f64> = vol.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64).collect();
    if values.is_empty() {
        return Err(Error::InvalidInput("brain mask is empty".into()));
    }
    values.sort_by(|a, b| a.total_cmp(b));
    // the quantile lands on the bright tail; intermeans then settles between the
    // tissue and fluid intensity modes
    let t0 = quantile_sorted(&values, params.intensity_quantile);
    Ok(intermeans(&values, t0))
}

pub fn segment_ventricles(vol: &Volume, brain_mask: &LabelMap, params: &SegParams) -> Result<LabelMap> {
    params.validate()?;
    if !brain_mask.grid().same_as(vol.grid(), 1e-6) {
        return Err(Error::GeometryMismatch("brain mask and image grids differ".into()));
    }
    let mask = brain_mask.foreground();
    let t = ventricle_threshold(vol, &mask, params)?;
    let dims = vol.grid().dims();
    let bright: Vec<bool> = vol.data().iter().zip(&mask).map(|(&v, &m)| m && v as f64 > t).collect();
    let r = params.morph_radius_voxels;
    let cleaned = filter::close(&filter::open(&bright, dims, r), dims, r);
    let cleaned: Vec<bool> = cleaned.iter().zip(&mask).map(|(&c, &m)| c && m).collect();

    // voxels of the mask with a 6-neighbor outside it (or at the lattice edge)
    let boundary: Vec<bool> = {
        let eroded = filter::erode(&mask, dims, 1);
        mask.iter().zip(&eroded).map(|(&m, &e)| m && !e).collect()
    };
    let (labels, sizes) = filter::connected_components(&cleaned, dims, Connectivity::Six);
    let mut touches = vec![false; sizes.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 && boundary[i] {
            touches[l as usize - 1] = true;
        }
    }
    let vv = vol.grid().voxel_volume();
    let keep: Vec<bool> =
        sizes.iter().zip(&touches).map(|(&n, &t)| n as f64 * vv >= params.min_component_mm3 && !t).collect();
    let data: Vec<u16> = labels.iter().map(|&l| if l > 0 && keep[l as usize - 1] { VENTRICLES } else { 0 }).collect();
    if data.iter().all(|&v| v == 0) {
        return Err(Error::NoVentricleFound);
    }
    LabelMap::with_default_names(vol.grid().clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphometry::overlap_metrics;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn phantom_dice_and_subset_of_brain() {
        let p = generate_phantom(&PhantomSpec::default()).unwrap();
        for img in [&p.pre, &p.post] {
            let seg = segment_ventricles(&img.volume, &img.brain_mask, &SegParams::default()).unwrap();
            let m = overlap_metrics(&seg, &img.ventricles, VENTRICLES).unwrap();
            assert!(m.dice >= 0.90, "dice {}", m.dice);
            let brain = img.brain_mask.foreground();
            assert!(seg.foreground().iter().zip(&brain).all(|(&s, &b)| !s || b));
        }
    }

    #[test]
    fn constant_volume_has_no_ventricles() {
        let p = generate_phantom(&PhantomSpec::default()).unwrap();
        let flat = Volume::filled(p.pre.volume.grid().clone(), 0.5);
        assert!(matches!(
            segment_ventricles(&flat, &p.pre.brain_mask, &SegParams::default()),
            Err(Error::NoVentricleFound)
        ));
    }

    #[test]
    fn invariant_to_affine_intensity_rescaling() {
        let p = generate_phantom(&PhantomSpec::default()).unwrap();
        let a = segment_ventricles(&p.pre.volume, &p.pre.brain_mask, &SegParams::default()).unwrap();
        let scaled = p.pre.volume.map(|v| 3.0 * v + 7.0);
        let b = segment_ventricles(&scaled, &p.pre.brain_mask, &SegParams::default()).unwrap();
        let diff = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        // float rounding of the rescaled image may flip voxels sitting exactly at the threshold
        assert!(diff <= 2, "{diff} voxels differ");
    }

    #[test]
    fn volume_increases_with_growth() {
        let mut last = 0usize;
        for growth in [0.0, 20.0, 40.0] {
            let p = generate_phantom(&PhantomSpec { daily_growth_mm3: growth, ..Default::default() }).unwrap();
            let seg = segment_ventricles(&p.post.volume, &p.post.brain_mask, &SegParams::default()).unwrap();
            let n = seg.count(VENTRICLES);
            assert!(n > last);
            last = n;
        }
    }
}
