use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::layout::{CohortLayout, SubjectLayout, Timepoint, TIMEPOINTS};
use super::manifest::{StageRunner, UnitStatus};
use super::report::emit_report;
use super::subject::{read_json, run_subject, runner_for, write_json, SubjectOutcome};
use crate::error::{Error, Result};
use crate::morphometry::{stack_4d, transport_to_template, EnlargementMap, Stack4d};
use crate::record::{read_cohort_csv, write_cohort_csv, SubjectRecord};
use crate::registration::{DeformationField, TransformKind, Warp};
use crate::stats::{permutation_test, DesignMatrix, Predictor, StatResult};
use crate::template::build_template;
use crate::volume::{read_volume, write_volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateReport {
    pub members: Vec<String>,
    pub convergence_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub predictor: String,
    pub n_subjects: usize,
    pub n_permutations: usize,
    pub exhaustive: bool,
    pub seed: u64,
    pub alpha: f64,
    pub min_p: Option<f64>,
    pub significant_voxels: usize,
    pub zero_variance_voxels: usize,
    /// Set when the analysis could not run (e.g. a rank-deficient design).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CohortOutcome {
    pub subjects: Vec<SubjectOutcome>,
    pub stats: Vec<PredictorSummary>,
}

impl CohortOutcome {
    pub fn failed(&self) -> usize {
        self.subjects.iter().filter(|s| s.status == UnitStatus::Failed).count()
    }
}

pub(crate) fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every subject on a pool of `cfg.jobs` workers. Outcomes keep record order.
pub fn run_subjects(records: &[SubjectRecord], cfg: &PipelineConfig, data_root: &Path, out_root: &Path) -> Result<Vec<SubjectOutcome>> {
    pool(cfg.jobs)?.install(|| {
        records
            .par_iter()
            .map(|r| {
                run_subject(r, cfg, data_root, out_root).or_else(|e| {
                    warn!("subject {} could not start: {e}", r.subject_id);
                    Ok(SubjectOutcome {
                        record: r.clone(),
                        status: UnitStatus::Failed,
                        volumetry: None,
                        dbm: None,
                        error: Some(e.to_string()),
                    })
                })
            })
            .collect()
    })
}

fn cohort_runner(layout: &CohortLayout, cfg: &PipelineConfig, data_root: &Path, out_root: &Path) -> Result<StageRunner> {
    let dir = layout.cohort_dir();
    std::fs::create_dir_all(&dir)?;
    StageRunner::open(&dir, "cohort", &cfg.hash()?, vec![("out".into(), out_root.into()), ("data".into(), data_root.into())])
}

/// Builds the template of one time point from the subjects' normalized images
/// and writes it with every member's template→subject transform.
pub fn template_files(records: &[SubjectRecord], tp: Timepoint, cfg: &PipelineConfig, data_root: &Path, out_root: &Path) -> Result<TemplateReport> {
    let layout = CohortLayout::new(out_root);
    let vols = records
        .iter()
        .map(|r| read_volume(SubjectLayout::new(data_root, out_root, &r.subject_id).norm(tp)))
        .collect::<Result<Vec<_>>>()?;
    let res = build_template(&vols, &cfg.template)?;
    write_volume(&res.template, layout.template(tp))?;
    for (r, t) in records.iter().zip(&res.transforms) {
        let affine = layout.template_affine(tp, &r.subject_id);
        std::fs::create_dir_all(affine.parent().expect("template member paths have a parent"))?;
        t.affine.save_json(&affine, TransformKind::Affine)?;
        t.field.write(layout.template_field(tp, &r.subject_id))?;
    }
    let report = TemplateReport { members: records.iter().map(|r| r.subject_id.clone()).collect(), convergence_trace: res.convergence_trace };
    write_json(&report, &layout.template_report(tp))?;
    Ok(report)
}

/// Pulls a subject's daily log-Jacobian map into template space.
pub fn transport_file(daily: &Path, member_field: &Path, template: &Path, out: &Path) -> Result<()> {
    let map = read_volume(daily)?;
    let field = DeformationField::read(member_field)?;
    let grid = read_volume(template)?.grid().clone();
    write_volume(&transport_to_template(&map, &[Warp::Field(&field)], &grid), out)
}

/// The four voxelwise analyses on a stack whose frames follow `records`.
pub fn stats_files(stack: &Stack4d, records: &[SubjectRecord], cfg: &PipelineConfig, out_root: &Path) -> Result<Vec<PredictorSummary>> {
    if stack.subject_ids.iter().ne(records.iter().map(|r| &r.subject_id)) {
        return Err(Error::InvalidInput("stack frames and cohort records are in different orders".into()));
    }
    let layout = CohortLayout::new(out_root);
    let mut summaries = Vec::new();
    for (k, &predictor) in Predictor::ALL.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(k as u64);
        let mut summary = PredictorSummary {
            predictor: predictor.name().into(),
            n_subjects: records.len(),
            n_permutations: 0,
            exhaustive: false,
            seed,
            alpha: cfg.stats.alpha,
            min_p: None,
            significant_voxels: 0,
            zero_variance_voxels: 0,
            error: None,
        };
        let run = || -> Result<StatResult> {
            let (x, contrast) = DesignMatrix::for_analysis(records, predictor)?;
            permutation_test(stack, &x, &contrast, &cfg.stats.perm(seed))
        };
        match run() {
            Ok(res) => {
                write_volume(&res.t_map, layout.stats_map(predictor.name(), "t"))?;
                write_volume(&res.tfce_map, layout.stats_map(predictor.name(), "tfce"))?;
                write_volume(&res.fwer_p_map, layout.stats_map(predictor.name(), "fwer_p"))?;
                summary.n_permutations = res.n_permutations;
                summary.exhaustive = res.exhaustive;
                summary.min_p = Some(res.min_p());
                summary.significant_voxels = res.count_below(cfg.stats.alpha);
                summary.zero_variance_voxels = res.zero_variance_voxels;
                info!("{}: min FWER p {:.4}, {} voxels below {}", predictor.name(), res.min_p(), summary.significant_voxels, cfg.stats.alpha);
            }
            Err(e) => {
                warn!("{} analysis skipped: {e}", predictor.name());
                summary.error = Some(e.to_string());
            }
        }
        summaries.push(summary);
    }
    write_json(&summaries, &layout.stats_summary())?;
    Ok(summaries)
}

/// The summary plus the maps of every analysis whose design is estimable.
fn stats_outputs(layout: &CohortLayout, records: &[SubjectRecord]) -> Vec<PathBuf> {
    let mut v = vec![layout.stats_summary()];
    for p in Predictor::ALL {
        if DesignMatrix::for_analysis(records, p).is_ok() {
            v.extend(["t", "tfce", "fwer_p"].map(|k| layout.stats_map(p.name(), k)));
        }
    }
    v
}

pub fn records_path(out_root: &Path) -> PathBuf {
    CohortLayout::new(out_root).cohort_dir().join("records.csv")
}

/// Cohort flow: subjects, templates, transport, 4D stack, analyses, report.
pub fn run_cohort(records: &[SubjectRecord], cfg: &PipelineConfig, data_root: &Path, out_root: &Path) -> Result<CohortOutcome> {
    let subjects = run_subjects(records, cfg, data_root, out_root)?;
    let usable: Vec<SubjectRecord> = subjects.iter().filter(|s| s.usable()).map(|s| s.record.clone()).collect();
    if usable.len() < 3 {
        return Err(Error::InvalidInput(format!("a cohort needs at least 3 usable subjects, got {}", usable.len())));
    }
    let layout = CohortLayout::new(out_root);
    let mut runner = cohort_runner(&layout, cfg, data_root, out_root)?;
    let result = cohort_stages(&usable, cfg, data_root, out_root, &layout, &mut runner);
    let status = if result.is_ok() { UnitStatus::Ok } else { UnitStatus::Failed };
    runner.finish(status)?;
    Ok(CohortOutcome { subjects, stats: result? })
}

fn cohort_stages(
    usable: &[SubjectRecord],
    cfg: &PipelineConfig,
    data_root: &Path,
    out_root: &Path,
    layout: &CohortLayout,
    runner: &mut StageRunner,
) -> Result<Vec<PredictorSummary>> {
    write_cohort_csv(usable, records_path(out_root))?;
    let subject = |r: &SubjectRecord| SubjectLayout::new(data_root, out_root, &r.subject_id);

    for tp in TIMEPOINTS {
        let inputs: Vec<PathBuf> = usable.iter().map(|r| subject(r).norm(tp)).collect();
        let mut outputs = vec![layout.template(tp), layout.template_report(tp)];
        for r in usable {
            outputs.push(layout.template_affine(tp, &r.subject_id));
            outputs.push(layout.template_field(tp, &r.subject_id));
        }
        if cfg.stages.template {
            runner.run(&format!("template_{}", tp.name()), &inputs, &outputs, || {
                template_files(usable, tp, cfg, data_root, out_root).map(|_| ())
            })?;
        } else if let Some(missing) = outputs.iter().find(|p| !p.exists()) {
            return Err(Error::InvalidInput(format!("template stage disabled and {} is missing", missing.display())));
        }
    }

    // Enlargement maps live in pre-operative space, so they go through the pre template.
    let template = layout.template(Timepoint::Pre);
    pool(cfg.jobs)?.install(|| {
        usable
            .par_iter()
            .map(|r| {
                let s = subject(r);
                let mut sr = runner_for(&s, &r.subject_id, cfg, data_root, out_root)?;
                let field = layout.template_field(Timepoint::Pre, &r.subject_id);
                let (daily, out) = (s.daily_logjac(), s.enlargement_template());
                let res = sr.run("transport", &[daily.clone(), field.clone(), template.clone()], &[out.clone()], || {
                    transport_file(&daily, &field, &template, &out)
                });
                sr.finish(if res.is_ok() { UnitStatus::Ok } else { UnitStatus::Failed })?;
                res.map(|_| ())
            })
            .collect::<Result<Vec<()>>>()
    })?;

    let maps: Vec<PathBuf> = usable.iter().map(|r| subject(r).enlargement_template()).collect();
    runner.run("stack", &maps, &[layout.stack(), layout.stack_order()], || {
        let maps = usable
            .iter()
            .zip(&maps)
            .map(|(r, p)| EnlargementMap::new(r.subject_id.clone(), r.delta_days(), read_volume(p)?))
            .collect::<Result<Vec<_>>>()?;
        stack_4d(&maps)?.write(layout.stack(), layout.stack_order())
    })?;

    let summaries = if cfg.stages.stats {
        let inputs = vec![layout.stack(), layout.stack_order(), records_path(out_root)];
        runner.run("stats", &inputs, &stats_outputs(layout, usable), || {
            let stack = Stack4d::read(layout.stack(), layout.stack_order())?;
            stats_files(&stack, &read_cohort_csv(records_path(out_root))?, cfg, out_root).map(|_| ())
        })?;
        read_json(&layout.stats_summary())?
    } else {
        Vec::new()
    };

    if cfg.stages.report {
        let mut inputs = vec![records_path(out_root), layout.stack(), layout.stack_order(), layout.template(Timepoint::Pre)];
        for r in usable {
            inputs.push(subject(r).volumetry());
            inputs.push(subject(r).dbm_report());
        }
        let outputs = super::report::report_outputs(layout);
        runner.run("report", &inputs, &outputs, || emit_report(data_root, out_root).map(|_| ()))?;
    }
    Ok(summaries)
}
