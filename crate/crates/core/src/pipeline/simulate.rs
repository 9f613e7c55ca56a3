use std::path::Path;

use rayon::prelude::*;

use super::config::PipelineConfig;
use super::layout::{Timepoint, TIMEPOINTS};
use crate::error::Result;
use crate::phantom::{cohort_records, generate_phantom, sample_cohort_specs, PhantomSpec};
use crate::record::{write_cohort_csv, SubjectRecord};
use crate::sr::{acquire_stack, AcquisitionParams, Orientation};
use crate::volume::{write_labels, write_volume};

/// Writes one subject's simulated inputs: three orthogonal stacks per time
/// point, brain masks, and the ground truth (HR volumes, ventricle labels).
pub fn simulate_subject(spec: &PhantomSpec, record: &SubjectRecord, dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let pair = generate_phantom(spec)?;
    let sim = &cfg.simulate;
    for (t, tp) in TIMEPOINTS.iter().enumerate() {
        let img = match tp {
            Timepoint::Pre => &pair.pre,
            Timepoint::Post => &pair.post,
        };
        let name = tp.name();
        write_volume(&img.volume, dir.join(format!("{name}_volume.nii.gz")))?;
        write_labels(&img.brain_mask, dir.join(format!("{name}_brain_mask.nii.gz")))?;
        write_labels(&img.ventricles, dir.join(format!("{name}_truth_ventricles.nii.gz")))?;
        for (k, o) in Orientation::ALL.iter().enumerate() {
            let params = AcquisitionParams {
                orientation: *o,
                slice_thickness_mm: sim.slice_thickness_mm,
                inplane_mm: sim.inplane_mm,
                motion_sigma_rad: sim.motion_sigma_deg.to_radians(),
                motion_sigma_mm: sim.motion_sigma_mm,
                noise_sigma: sim.noise_sigma,
                seed: spec.seed.wrapping_mul(31).wrapping_add((t * 3 + k) as u64) ^ cfg.seed,
            };
            acquire_stack(&img.volume, &params)?.save(dir, &format!("{name}_stack_{}", o.name()))?;
        }
    }
    std::fs::write(dir.join("phantom.json"), serde_json::to_string_pretty(&(spec, record))?)?;
    Ok(())
}

/// Simulates subjects from explicit specs and writes `cohort.csv` in `data_dir`.
pub fn simulate_specs(specs: &[PhantomSpec], records: &[SubjectRecord], data_dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(data_dir)?;
    specs
        .par_iter()
        .zip(records.par_iter())
        .map(|(s, r)| simulate_subject(s, r, &r.data_dir(data_dir), cfg))
        .collect::<Result<Vec<_>>>()?;
    write_cohort_csv(records, data_dir.join("cohort.csv"))
}

/// Samples a cohort from the config's distributions and simulates it.
pub fn simulate_cohort(cfg: &PipelineConfig, data_dir: &Path) -> Result<Vec<SubjectRecord>> {
    let sim = &cfg.simulate;
    let specs = sample_cohort_specs(sim.n_subjects, &sim.distributions, sim.planted_effect, cfg.seed)?;
    let records = cohort_records(&specs);
    simulate_specs(&specs, &records, data_dir, cfg)?;
    Ok(records)
}
