use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::layout::{SubjectLayout, Timepoint, TIMEPOINTS};
use super::manifest::{write_atomic, StageRunner, UnitStatus};
use crate::error::{Error, Result};
use crate::filter;
use crate::morphometry::{jacobian_integral, jacobian_log_det, label_volume, scale_daily};
use crate::record::SubjectRecord;
use crate::registration::{register_chain, DeformationField, TransformKind};
use crate::segmentation::{segment_ventricles, SegParams};
use crate::sr::{sr_reconstruct, LRStack, SRProblem, SrInit, SrParams};
use crate::volume::{
    histogram_match_masked, read_labels, read_volume, write_labels, write_volume, HistogramMatchParams, Interpolation,
    LabelMap, Volume, VENTRICLES,
};

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrSummary {
    pub iterations: usize,
    pub converged: bool,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub quality_scores: Vec<f64>,
    pub used_stacks: Vec<usize>,
}

/// Reconstructs the stacks onto the grid of `reference` (typically the brain mask).
pub fn srrecon_files(stacks: &[PathBuf], reference: &Path, params: &SrParams, out: &Path, report: &Path) -> Result<SrSummary> {
    let stacks = stacks.iter().map(|p| LRStack::load(p)).collect::<Result<Vec<_>>>()?;
    let grid = read_labels(reference)?.grid().clone();
    let problem = SRProblem::new(stacks, grid, *params)?;
    let res = sr_reconstruct(&problem, SrInit::AverageOfStacks)?;
    write_volume(&res.volume, out)?;
    let summary = SrSummary {
        iterations: res.iterations,
        converged: res.converged,
        initial_objective: res.trace[0],
        final_objective: *res.trace.last().expect("trace holds the initial objective"),
        quality_scores: res.quality_scores,
        used_stacks: res.used_stacks,
    };
    write_json(&summary, report)?;
    Ok(summary)
}

pub fn segment_file(volume: &Path, brain_mask: &Path, params: &SegParams, out: &Path) -> Result<LabelMap> {
    let vol = read_volume(volume)?;
    let mask = read_labels(brain_mask)?;
    let seg = segment_ventricles(&vol, &mask, params)?;
    write_labels(&seg, out)?;
    Ok(seg)
}

/// Inputs and outputs of the normalization step for one time point.
pub struct NormalizeFiles<'a> {
    pub volume: &'a Path,
    pub brain_mask: &'a Path,
    pub ventricles: &'a Path,
    pub out_volume: &'a Path,
    pub out_brain_mask: &'a Path,
    pub out_ventricles: &'a Path,
}

/// Resamples both time points to the working spacing and matches the post
/// histogram to the pre histogram inside the brain masks.
pub fn normalize_files(pre: &NormalizeFiles<'_>, post: &NormalizeFiles<'_>, cfg: &PipelineConfig) -> Result<()> {
    let spacing = [cfg.normalize.spacing_mm; 3];
    let load = |f: &NormalizeFiles<'_>| -> Result<(Volume, LabelMap, LabelMap)> {
        let vol = read_volume(f.volume)?;
        let grid = vol.grid().with_spacing(spacing)?;
        let vol = vol.resample(&grid, Interpolation::Linear)?;
        let mask = read_labels(f.brain_mask)?.resample(&grid, Interpolation::Nearest)?;
        let vent = read_labels(f.ventricles)?.resample(&grid, Interpolation::Nearest)?;
        Ok((vol, mask, vent))
    };
    let (pre_vol, pre_mask, pre_vent) = load(pre)?;
    let (post_vol, post_mask, post_vent) = load(post)?;
    let params = HistogramMatchParams { n_landmarks: cfg.normalize.n_landmarks, ..Default::default() };
    let matched = histogram_match_masked(
        &post_vol,
        &pre_vol,
        Some(&post_mask.foreground()),
        Some(&pre_mask.foreground()),
        params,
    )?;
    for (f, vol, mask, vent) in [(pre, &pre_vol, &pre_mask, &pre_vent), (post, &matched, &post_mask, &post_vent)] {
        write_volume(vol, f.out_volume)?;
        write_labels(mask, f.out_brain_mask)?;
        write_labels(vent, f.out_ventricles)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSummary {
    pub rigid_angle_deg: f64,
    pub affine_determinant: f64,
    pub linear_final_metric: f64,
    pub diffeo_initial_energy: f64,
    pub diffeo_final_energy: f64,
    pub fold_retries: usize,
    pub nonpositive_jacobians: usize,
}

/// Output paths of the registration step.
pub struct RegistrationOutputs<'a> {
    pub rigid: &'a Path,
    pub affine: &'a Path,
    pub field: &'a Path,
    pub report: &'a Path,
}

/// Post→pre chain: linear stages on the normalized images, deformable stage on
/// the ventricles (binary masks or masked intensities, per `cfg.dbm`).
pub fn register_files(
    pre: &Path,
    post: &Path,
    pre_ventricles: &Path,
    post_ventricles: &Path,
    cfg: &PipelineConfig,
    out: &RegistrationOutputs<'_>,
) -> Result<RegistrationSummary> {
    let fixed = read_volume(pre)?;
    let moving = read_volume(post)?;
    let deformable_input = |vol: &Volume, labels: &Path| -> Result<Volume> {
        let vent = read_labels(labels)?;
        if !vent.grid().same_as(vol.grid(), 1e-6) {
            return Err(Error::GeometryMismatch("ventricle labels and image grids differ".into()));
        }
        let mask = vent.mask(VENTRICLES);
        if cfg.dbm.binary {
            vol.with_data(mask.iter().map(|&m| m as u8 as f32).collect())
        } else {
            Ok(vol.masked(&filter::dilate(&mask, vol.grid().dims(), cfg.dbm.mask_dilation_voxels)))
        }
    };
    let fixed_d = deformable_input(&fixed, pre_ventricles)?;
    let moving_d = deformable_input(&moving, post_ventricles)?;
    let diffeo = cfg.dbm.diffeo(&cfg.registration.diffeo);
    let chain = register_chain(&fixed, &moving, &fixed_d, &moving_d, &cfg.registration.linear, &diffeo)?;
    chain.rigid.to_affine().save_json(out.rigid, TransformKind::Rigid)?;
    chain.affine.save_json(out.affine, TransformKind::Affine)?;
    chain.diffeo.forward.write(out.field)?;
    let summary = RegistrationSummary {
        rigid_angle_deg: chain.rigid.angle().to_degrees(),
        affine_determinant: chain.affine.determinant(),
        linear_final_metric: chain.linear_report.final_metric,
        diffeo_initial_energy: chain.diffeo.report.initial_energy,
        diffeo_final_energy: chain.diffeo.report.final_energy,
        fold_retries: chain.diffeo.report.fold_retries,
        nonpositive_jacobians: chain.diffeo.report.nonpositive_jacobians,
    };
    write_json(&summary, out.report)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbmSummary {
    pub delta_days: f64,
    pub pre_volume_mm3: f64,
    /// ∫ det J over the pre-operative ventricles: the deformation's estimate of the post volume.
    pub jacobian_integral_mm3: f64,
    pub growth_mm3_per_day: f64,
    pub mean_daily_logjac_in_ventricles: f64,
    pub nonpositive_jacobians: usize,
}

/// Log-Jacobian, its daily scaling, and the Jacobian-integral growth estimate.
pub fn dbm_files(field: &Path, pre_ventricles: &Path, delta_days: f64, logjac: &Path, daily: &Path, report: &Path) -> Result<DbmSummary> {
    let field = DeformationField::read(field)?;
    let vent = read_labels(pre_ventricles)?;
    if !vent.grid().same_as(field.grid(), 1e-6) {
        return Err(Error::GeometryMismatch("field and ventricle grids differ".into()));
    }
    let (lj, diag) = jacobian_log_det(&field);
    if diag.nonpositive > 0 {
        warn!("{} voxels with non-positive Jacobian determinant", diag.nonpositive);
    }
    let per_day = scale_daily(&lj, delta_days)?;
    let mask = vent.mask(VENTRICLES);
    let pre_volume = label_volume(&vent, VENTRICLES);
    let integral = jacobian_integral(&field, &mask)?;
    let n_in = mask.iter().filter(|&&m| m).count().max(1);
    let mean_in = per_day.data().iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v as f64).sum::<f64>() / n_in as f64;
    write_volume(&lj, logjac)?;
    write_volume(&per_day, daily)?;
    let summary = DbmSummary {
        delta_days,
        pre_volume_mm3: pre_volume,
        jacobian_integral_mm3: integral,
        growth_mm3_per_day: (integral - pre_volume) / delta_days,
        mean_daily_logjac_in_ventricles: mean_in,
        nonpositive_jacobians: diag.nonpositive,
    };
    write_json(&summary, report)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volumetry {
    pub v_pre_mm3: f64,
    pub v_post_mm3: f64,
    pub ga_pre_weeks: f64,
    pub ga_post_weeks: f64,
    pub growth_mm3_per_day: f64,
}

/// Ventricle volumes from two label files. Any label file with the ventricle
/// label (1) works, including binary masks written by external segmenters.
pub fn volumetry_files(pre: &Path, post: &Path, ga_pre: f64, ga_post: f64, out: &Path) -> Result<Volumetry> {
    let v_pre = label_volume(&read_labels(pre)?, VENTRICLES);
    let v_post = label_volume(&read_labels(post)?, VENTRICLES);
    let growth = crate::morphometry::growth_rate(v_pre, v_post, ga_pre, ga_post)?;
    let v = Volumetry { v_pre_mm3: v_pre, v_post_mm3: v_post, ga_pre_weeks: ga_pre, ga_post_weeks: ga_post, growth_mm3_per_day: growth };
    write_json(&v, out)?;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub threshold: Option<f64>,
    pub excluded: bool,
}

fn quality_files(layout: &SubjectLayout, threshold: Option<f64>, out: &Path) -> Result<QualityReport> {
    let scores = |tp: Timepoint| -> Result<Vec<f64>> {
        crate::sr::Orientation::ALL
            .iter()
            .map(|&o| LRStack::load(&layout.stack(tp, o)).map(|s| s.quality_score()))
            .collect()
    };
    let (pre, post) = (scores(Timepoint::Pre)?, scores(Timepoint::Post)?);
    let excluded = threshold.is_some_and(|t| pre.iter().chain(&post).any(|&q| q > t));
    let report = QualityReport { pre, post, threshold, excluded };
    write_json(&report, out)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SubjectOutcome {
    pub record: SubjectRecord,
    pub status: UnitStatus,
    pub volumetry: Option<Volumetry>,
    pub dbm: Option<DbmSummary>,
    pub error: Option<String>,
}

impl SubjectOutcome {
    pub fn usable(&self) -> bool {
        self.status == UnitStatus::Ok
    }
}

pub(crate) fn runner_for(layout: &SubjectLayout, id: &str, cfg: &PipelineConfig, data_root: &Path, out_root: &Path) -> Result<StageRunner> {
    std::fs::create_dir_all(&layout.out)?;
    StageRunner::open(&layout.out, id, &cfg.hash()?, vec![("out".into(), out_root.into()), ("data".into(), data_root.into())])
}

/// Subject-level flow up to the daily log-Jacobian map in subject space.
/// Stage failures are recorded in the manifest and returned in the outcome.
pub fn run_subject(record: &SubjectRecord, cfg: &PipelineConfig, data_root: &Path, out_root: &Path) -> Result<SubjectOutcome> {
    run_subject_until(record, cfg, data_root, out_root, None)
}

/// Stage names of the subject flow, in execution order.
pub const SUBJECT_STAGES: [&str; 9] =
    ["quality", "sr_pre", "sr_post", "segment_pre", "segment_post", "normalize", "register", "dbm", "volumetry"];

enum Flow {
    Done,
    Excluded,
    Stopped,
}

/// Like [`run_subject`] but stops after the stage named `stop_after`; the
/// manifest then keeps the `running` status.
pub fn run_subject_until(
    record: &SubjectRecord,
    cfg: &PipelineConfig,
    data_root: &Path,
    out_root: &Path,
    stop_after: Option<&str>,
) -> Result<SubjectOutcome> {
    if let Some(name) = stop_after {
        if !SUBJECT_STAGES.contains(&name) {
            return Err(Error::Config(format!("unknown subject stage `{name}`; expected one of {}", SUBJECT_STAGES.join(", "))));
        }
    }
    record.validate()?;
    let layout = SubjectLayout::new(data_root, out_root, &record.subject_id);
    let mut runner = runner_for(&layout, &record.subject_id, cfg, data_root, out_root)?;
    let mut outcome = SubjectOutcome { record: record.clone(), status: UnitStatus::Running, volumetry: None, dbm: None, error: None };
    let result = subject_stages(record, cfg, &layout, &mut runner, &mut outcome, stop_after);
    let status = match result {
        Ok(Flow::Done) => UnitStatus::Ok,
        Ok(Flow::Excluded) => UnitStatus::Excluded,
        Ok(Flow::Stopped) => UnitStatus::Running,
        Err(e) => {
            warn!("subject {} failed: {e}", record.subject_id);
            outcome.error = Some(e.to_string());
            UnitStatus::Failed
        }
    };
    outcome.status = status;
    runner.finish(status)?;
    info!("subject {}: {status:?}", record.subject_id);
    Ok(outcome)
}

fn subject_stages(
    record: &SubjectRecord,
    cfg: &PipelineConfig,
    layout: &SubjectLayout,
    runner: &mut StageRunner,
    outcome: &mut SubjectOutcome,
    stop_after: Option<&str>,
) -> Result<Flow> {
    let st = &cfg.stages;
    let stop = |name: &str| stop_after == Some(name);
    if st.sr {
        let out = layout.quality();
        let inputs: Vec<PathBuf> = TIMEPOINTS.iter().flat_map(|&tp| layout.stack_files(tp)).collect();
        runner.run("quality", &inputs, &[out.clone()], || quality_files(layout, cfg.quality_exclusion_threshold, &out).map(|_| ()))?;
        let q: QualityReport = read_json(&out)?;
        if q.excluded {
            info!("subject {} excluded by the stack quality gate", record.subject_id);
            return Ok(Flow::Excluded);
        }
        if stop("quality") {
            return Ok(Flow::Stopped);
        }
        for tp in TIMEPOINTS {
            let mut inputs = layout.stack_files(tp);
            inputs.push(layout.brain_mask(tp));
            let (vol, rep) = (layout.sr(tp, true), layout.sr_report(tp));
            let stacks: Vec<PathBuf> = crate::sr::Orientation::ALL.iter().map(|&o| layout.stack(tp, o)).collect();
            let name = format!("sr_{}", tp.name());
            runner.run(&name, &inputs, &[vol.clone(), rep.clone()], || {
                srrecon_files(&stacks, &layout.brain_mask(tp), &cfg.sr, &vol, &rep).map(|_| ())
            })?;
            if stop(&name) {
                return Ok(Flow::Stopped);
            }
        }
    }
    if st.segmentation {
        for tp in TIMEPOINTS {
            let (vol, mask, out) = (layout.sr(tp, st.sr), layout.brain_mask(tp), layout.ventricles(tp, true));
            let name = format!("segment_{}", tp.name());
            runner.run(&name, &[vol.clone(), mask.clone()], &[out.clone()], || {
                segment_file(&vol, &mask, &cfg.segmentation, &out).map(|_| ())
            })?;
            if stop(&name) {
                return Ok(Flow::Stopped);
            }
        }
    }
    let files = |tp: Timepoint| {
        (
            layout.sr(tp, st.sr),
            layout.brain_mask(tp),
            layout.ventricles(tp, st.segmentation),
            layout.norm(tp),
            layout.norm_brain_mask(tp),
            layout.norm_ventricles(tp),
        )
    };
    let (a, b) = (files(Timepoint::Pre), files(Timepoint::Post));
    let inputs = vec![a.0.clone(), a.1.clone(), a.2.clone(), b.0.clone(), b.1.clone(), b.2.clone()];
    let outputs = vec![a.3.clone(), a.4.clone(), a.5.clone(), b.3.clone(), b.4.clone(), b.5.clone()];
    runner.run("normalize", &inputs, &outputs, || {
        let pre = NormalizeFiles { volume: &a.0, brain_mask: &a.1, ventricles: &a.2, out_volume: &a.3, out_brain_mask: &a.4, out_ventricles: &a.5 };
        let post = NormalizeFiles { volume: &b.0, brain_mask: &b.1, ventricles: &b.2, out_volume: &b.3, out_brain_mask: &b.4, out_ventricles: &b.5 };
        normalize_files(&pre, &post, cfg)
    })?;
    if stop("normalize") {
        return Ok(Flow::Stopped);
    }

    let reg_out = [layout.rigid(), layout.affine(), layout.field(), layout.registration_report()];
    runner.run("register", &[a.3.clone(), b.3.clone(), a.5.clone(), b.5.clone()], &reg_out, || {
        let out = RegistrationOutputs { rigid: &reg_out[0], affine: &reg_out[1], field: &reg_out[2], report: &reg_out[3] };
        register_files(&a.3, &b.3, &a.5, &b.5, cfg, &out).map(|_| ())
    })?;
    if stop("register") {
        return Ok(Flow::Stopped);
    }

    let dbm_out = [layout.logjac(), layout.daily_logjac(), layout.dbm_report()];
    runner.run("dbm", &[layout.field(), a.5.clone()], &dbm_out, || {
        dbm_files(&layout.field(), &a.5, record.delta_days(), &dbm_out[0], &dbm_out[1], &dbm_out[2]).map(|_| ())
    })?;
    if stop("dbm") {
        return Ok(Flow::Stopped);
    }
    outcome.dbm = Some(read_json(&dbm_out[2])?);

    let vol_out = layout.volumetry();
    runner.run("volumetry", &[a.2.clone(), b.2.clone()], &[vol_out.clone()], || {
        volumetry_files(&a.2, &b.2, record.ga_pre_weeks, record.ga_post_weeks, &vol_out).map(|_| ())
    })?;
    outcome.volumetry = Some(read_json(&vol_out)?);
    Ok(Flow::Done)
}
