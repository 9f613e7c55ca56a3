//! Acceptance suite. Each test covers one criterion and prints a single
//! `[PASS]`/`[FAIL]` line (written straight to stderr, so it shows even when
//! output is captured) before asserting.
//!
//! Criteria 1, 7 and 8 share one full cohort run (SR, segmentation,
//! registration, templates, statistics, report) under `CARGO_TARGET_TMPDIR`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fetaldbm::morphometry::{jacobian_log_det, overlap_metrics, Stack4d};
use fetaldbm::phantom::{
    cohort_records, generate_phantom, sample_cohort_specs, synthetic_enlargement_stack, CohortDistributions, PhantomSpec,
};
use fetaldbm::pipeline::cohort::CohortOutcome;
use fetaldbm::pipeline::layout::CohortLayout;
use fetaldbm::pipeline::manifest::read_timings;
use fetaldbm::pipeline::report::{self, growth_plot, SubjectRow};
use fetaldbm::pipeline::simulate::simulate_specs;
use fetaldbm::pipeline::subject::{DbmSummary, RegistrationSummary, Volumetry};
use fetaldbm::pipeline::{run_cohort, PipelineConfig, SubjectLayout, Timepoint, UnitStatus};
use fetaldbm::record::SubjectRecord;
use fetaldbm::registration::{center_of_mass, register_diffeo, register_rigid, DeformationField, DiffeoParams, LinearParams, RigidTransform};
use fetaldbm::segmentation::{segment_ventricles, SegParams};
use fetaldbm::sr::{acquire_stack, psnr, sr_reconstruct, AcquisitionParams, Orientation, SRProblem, SrInit, SrParams, StackOperator};
use fetaldbm::stats::{permutation_test, tfce, DesignMatrix, PermParams, Predictor, TfceParams};
use fetaldbm::volume::{read_4d, read_labels, read_volume, ImageGrid, Interpolation, Volume, VENTRICLES};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    // leading newline: with one test thread libtest leaves `test name ... ` unterminated
    let _ = writeln!(std::io::stderr().lock(), "\n[{tag}] criterion {id} ({name}): {detail}");
}

fn json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

// ---------------------------------------------------------------- shared cohort

/// Ten subjects with true daily growth evenly spread over 100–800 mm³/day.
/// The scan interval is chosen so every subject gains about 1200 mm³, which
/// keeps the post-operative ventricles inside the 64³ field of view.
fn growth_cohort() -> Vec<PhantomSpec> {
    let base = sample_cohort_specs(10, &CohortDistributions::desk(), 0.0, 2024).unwrap();
    base.into_iter()
        .enumerate()
        .map(|(i, s)| {
            let g = 100.0 + 700.0 * i as f64 / 9.0;
            let weeks = 1200.0 / g / 7.0;
            // operation somewhere inside the interval, not at a fixed fraction
            let frac = 0.3 + 0.4 * ((i * 7) % 10) as f64 / 9.0;
            PhantomSpec {
                daily_growth_mm3: g,
                ventricle_volume_pre_mm3: 800.0,
                ga_op: s.ga_pre + frac * weeks,
                ga_post: s.ga_pre + weeks,
                ..s
            }
        })
        .collect()
}

struct CohortRun {
    data: PathBuf,
    out: PathBuf,
    records: Vec<SubjectRecord>,
    outcome: CohortOutcome,
    seconds: f64,
}

fn run_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

fn fresh_cohort_run(name: &str) -> CohortRun {
    let root = run_dir(name);
    let _ = std::fs::remove_dir_all(&root);
    let (data, out) = (root.join("data"), root.join("out"));
    let cfg = PipelineConfig::default();
    let specs = growth_cohort();
    let records = cohort_records(&specs);
    simulate_specs(&specs, &records, &data, &cfg).unwrap();
    let start = Instant::now();
    let outcome = run_cohort(&records, &cfg, &data, &out).unwrap();
    CohortRun { data, out, records, outcome, seconds: start.elapsed().as_secs_f64() }
}

fn run_a() -> &'static CohortRun {
    static RUN: OnceLock<CohortRun> = OnceLock::new();
    RUN.get_or_init(|| fresh_cohort_run("run_a"))
}

/// Radial expansion about `c`: r ↦ r (1 + a exp(−r²/2s²)), with analytic inverse
/// (by bisection) and Jacobian determinant.
struct Radial {
    c: Vector3<f64>,
    a: f64,
    s: f64,
}

impl Radial {
    fn scale(&self, r: f64) -> f64 {
        1.0 + self.a * (-r * r / (2.0 * self.s * self.s)).exp()
    }

    fn inverse(&self, q: &Vector3<f64>) -> Vector3<f64> {
        let d = q - self.c;
        let target = d.norm();
        if target == 0.0 {
            return *q;
        }
        let (mut lo, mut hi) = (0.0, target);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid * self.scale(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.c + d * (0.5 * (lo + hi) / target)
    }

    fn det(&self, p: &Vector3<f64>) -> f64 {
        let r = (p - self.c).norm();
        let g = self.scale(r);
        let dg = -self.a * r / (self.s * self.s) * (-r * r / (2.0 * self.s * self.s)).exp();
        (g + r * dg) * g * g
    }
}

struct RadialCase {
    recovered_mm3: f64,
    expected_mm3: f64,
    nonpositive: usize,
}

/// Registers the phantom to a radially expanded copy of itself.
fn radial_case() -> &'static RadialCase {
    static CASE: OnceLock<RadialCase> = OnceLock::new();
    CASE.get_or_init(|| {
        let p = generate_phantom(&PhantomSpec { daily_growth_mm3: 0.0, ..Default::default() }).unwrap();
        let (f, mask) = (p.pre.volume, p.pre.ventricles.mask(VENTRICLES));
        let grid = f.grid().clone();
        let c = center_of_mass(&Volume::new(grid.clone(), mask.iter().map(|&m| m as u8 as f32).collect()).unwrap()).unwrap();
        let warp = Radial { c, a: 0.2, s: 5.0 };
        let moving = f.resample_with(&grid, Interpolation::Linear, |q| warp.inverse(q));
        let res = register_diffeo(&f, &moving, None, &DiffeoParams::default()).unwrap();
        let det = res.forward.jacobian_determinants();
        let vv = grid.voxel_volume();
        let inside = || (0..grid.len()).filter(|&i| mask[i]);
        RadialCase {
            recovered_mm3: inside().map(|i| det[i] * vv).sum(),
            expected_mm3: inside().map(|i| warp.det(&grid.world_of_index(i)) * vv).sum(),
            nonpositive: res.report.nonpositive_jacobians,
        }
    })
}

// ------------------------------------------------------------------- criteria

#[test]
fn criterion_1_growth_recovery() {
    let run = run_a();
    let mut pass = true;
    let (mut worst_vol, mut worst_jac, mut slowest) = (0.0f64, 0.0f64, 0.0f64);
    for (r, o) in run.records.iter().zip(&run.outcome.subjects) {
        if o.status != UnitStatus::Ok {
            pass = false;
            let _ = writeln!(std::io::stderr(), "  {} status {:?}: {:?}", r.subject_id, o.status, o.error);
            continue;
        }
        let s = SubjectLayout::new(&run.data, &run.out, &r.subject_id);
        let truth = r.true_daily_growth_mm3.unwrap();
        let vol: Volumetry = json(&s.volumetry());
        let dbm: DbmSummary = json(&s.dbm_report());
        let ev = (vol.growth_mm3_per_day - truth).abs() / truth;
        let ej = (dbm.growth_mm3_per_day - truth).abs() / truth;
        let secs: f64 = read_timings(&s.out).unwrap().iter().map(|t| t.seconds).sum();
        let _ = writeln!(
            std::io::stderr(),
            "  {}: truth {truth:.1}, volumetry {:.1} ({:+.1} %), jacobian {:.1} ({:+.1} %), {secs:.0} s",
            r.subject_id,
            vol.growth_mm3_per_day,
            100.0 * (vol.growth_mm3_per_day - truth) / truth,
            dbm.growth_mm3_per_day,
            100.0 * (dbm.growth_mm3_per_day - truth) / truth
        );
        worst_vol = worst_vol.max(ev);
        worst_jac = worst_jac.max(ej);
        slowest = slowest.max(secs);
    }
    let truths: Vec<f64> = run.records.iter().map(|r| r.true_daily_growth_mm3.unwrap()).collect();
    let span = truths.iter().cloned().fold(f64::INFINITY, f64::min) <= 100.0 + 1e-9
        && truths.iter().cloned().fold(0.0, f64::max) >= 800.0 - 1e-9;
    pass &= span && worst_vol < 0.10 && worst_jac < 0.15 && slowest < 300.0;
    verdict(
        1,
        "growth recovery",
        pass,
        &format!(
            "10 subjects, truth 100-800 mm3/day; worst volumetry error {:.1} % (< 10), worst Jacobian error {:.1} % (< 15), slowest subject {slowest:.0} s (< 300); cohort wall time {:.0} s",
            100.0 * worst_vol,
            100.0 * worst_jac,
            run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_jacobian_correctness() {
    let grid = ImageGrid::isotropic(24, 1.0).unwrap();
    let interior = |i: usize| {
        let (d, k) = (24, i / (24 * 24));
        let j = (i / 24) % 24;
        let x = i % 24;
        [x, j, k].iter().all(|&c| c >= 2 && c < d - 2)
    };
    let max_dev = |f: DeformationField, target: f64| {
        let (lj, _) = jacobian_log_det(&f);
        lj.data().iter().enumerate().filter(|(i, _)| interior(*i)).map(|(_, &v)| (v as f64 - target).abs()).fold(0.0, f64::max)
    };
    let scale = max_dev(DeformationField::from_fn(grid.clone(), |p| [0.1 * p.x, 0.1 * p.y, 0.1 * p.z]), 0.28618);
    let scale_exact = max_dev(DeformationField::from_fn(grid.clone(), |p| [0.1 * p.x, 0.1 * p.y, 0.1 * p.z]), 3.0 * 1.1f64.ln());
    let axis = Vector3::new(1.0, 2.0, 2.0).normalize();
    let rot = *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), 12f64.to_radians()).matrix();
    let rotation = max_dev(DeformationField::from_fn(grid.clone(), move |p| (rot * p - p).into()), 0.0);
    let shear_m = Matrix3::new(1.0, 0.2, 0.0, 0.0, 1.0, 0.1, 0.0, 0.0, 1.0);
    let shear = max_dev(DeformationField::from_fn(grid.clone(), move |p| (shear_m * p - p).into()), 0.0);

    let radial = radial_case();
    let radial_err = (radial.recovered_mm3 - radial.expected_mm3).abs() / radial.expected_mm3;

    // pipeline registrations: ∫ det J over the pre-operative ventricles against the post-operative volume
    let run = run_a();
    let mut worst_pipeline = 0.0f64;
    for r in &run.records {
        let s = SubjectLayout::new(&run.data, &run.out, &r.subject_id);
        if let (Ok(d), Ok(v)) = (
            std::fs::read_to_string(s.dbm_report()).map(|t| serde_json::from_str::<DbmSummary>(&t).unwrap()),
            std::fs::read_to_string(s.volumetry()).map(|t| serde_json::from_str::<Volumetry>(&t).unwrap()),
        ) {
            worst_pipeline = worst_pipeline.max((d.jacobian_integral_mm3 - v.v_post_mm3).abs() / v.v_post_mm3);
        } else {
            worst_pipeline = f64::INFINITY;
        }
    }
    let pass = scale < 1e-3 && rotation < 1e-3 && shear < 1e-3 && radial_err < 0.05 && worst_pipeline < 0.05;
    verdict(
        2,
        "Jacobian correctness",
        pass,
        &format!(
            "uniform scale 1.1: max |logdet - 0.28618| {scale:.2e} (max |logdet - 3 ln 1.1| {scale_exact:.1e}); rotation {rotation:.1e}; shear {shear:.1e} (all < 1e-3); mass conservation: radial warp {:.2} %, pipeline subjects worst {:.2} % (< 5)",
            100.0 * radial_err,
            100.0 * worst_pipeline
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_sr_reconstruction() {
    let hr = generate_phantom(&PhantomSpec::default()).unwrap().pre.volume;
    let stacks: Vec<_> = Orientation::ALL.iter().map(|&o| acquire_stack(&hr, &AcquisitionParams::noiseless(o, 3.0, 0.5)).unwrap()).collect();
    let best_single = stacks
        .iter()
        .map(|s| psnr(&hr, &s.volume.resample(hr.grid(), Interpolation::Linear).unwrap()))
        .fold(f64::NEG_INFINITY, f64::max);
    let problem = SRProblem::new(stacks, hr.grid().clone(), SrParams::default()).unwrap();
    let res = sr_reconstruct(&problem, SrInit::AverageOfStacks).unwrap();
    let gain = psnr(&hr, &res.volume) - best_single;
    let monotone = res.trace.windows(2).all(|w| w[1] <= w[0]);

    // ⟨Ax, y⟩ = ⟨x, Aᵀy⟩ on stacks with slice motion
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_adjoint = 0.0f64;
    for (k, &o) in Orientation::ALL.iter().enumerate() {
        let params = AcquisitionParams {
            orientation: o,
            slice_thickness_mm: 3.0,
            inplane_mm: 0.5,
            motion_sigma_rad: 2f64.to_radians(),
            motion_sigma_mm: 0.5,
            noise_sigma: 0.01,
            seed: 70 + k as u64,
        };
        let stack = acquire_stack(&hr, &params).unwrap();
        let op = StackOperator::new(&stack, hr.grid()).unwrap();
        let x: Vec<f64> = (0..op.n_cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..op.n_rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = op.forward(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&op.adjoint(&y)).map(|(a, b)| a * b).sum();
        worst_adjoint = worst_adjoint.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    let pass = gain >= 3.0 && monotone && worst_adjoint < 1e-6;
    verdict(
        3,
        "SR reconstruction",
        pass,
        &format!(
            "PSNR gain {gain:.2} dB over best single stack {best_single:.2} dB (>= 3); objective trace monotone over {} iterations: {monotone}; adjoint relative error {worst_adjoint:.1e} (< 1e-6)",
            res.iterations
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_registration_recovery() {
    let f = generate_phantom(&PhantomSpec::default()).unwrap().pre.volume;
    let grid = f.grid().clone();
    let h = grid.spacing()[0];
    let c = grid.center();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let start = Instant::now();
    let (mut ok, mut worst_angle, mut worst_shift) = (0usize, 0.0f64, 0.0f64);
    for _ in 0..40 {
        let angle = rng.gen_range(0.0..10.0f64).to_radians();
        let shift = rng.gen_range(0.0..5.0) * h;
        let truth = RigidTransform::from_rotation_vector(unit(&mut rng) * angle, unit(&mut rng) * shift, c);
        // moving ∘ truth = fixed
        let inv = truth.inverse();
        let moving = f.resample_with(&grid, Interpolation::Linear, |p| inv.apply(p));
        let (r, _) = register_rigid(&f, &moving, &LinearParams::default()).unwrap();
        let da = r.compose(&truth.inverse()).angle().to_degrees();
        let dt = (r.apply(&c) - truth.apply(&c)).norm() / h;
        worst_angle = worst_angle.max(da);
        worst_shift = worst_shift.max(dt);
        if da < 0.5 && dt < 0.25 {
            ok += 1;
        }
    }
    let rigid_secs = start.elapsed().as_secs_f64();

    let radial = radial_case();
    let run = run_a();
    let pipeline_folds: usize = run
        .records
        .iter()
        .map(|r| {
            let p = SubjectLayout::new(&run.data, &run.out, &r.subject_id).registration_report();
            std::fs::read_to_string(p).map(|t| serde_json::from_str::<RegistrationSummary>(&t).unwrap().nonpositive_jacobians).unwrap_or(usize::MAX / 64)
        })
        .sum();
    let pass = ok >= 38 && radial.nonpositive == 0 && pipeline_folds == 0;
    verdict(
        4,
        "registration recovery",
        pass,
        &format!(
            "rigid: {ok}/40 within 0.5 deg / 0.25 voxel (>= 38; worst {worst_angle:.3} deg, {worst_shift:.3} voxel; {rigid_secs:.0} s); diffeo non-positive Jacobians: radial warp {}, pipeline subjects {pipeline_folds} (must be 0)",
            radial.nonpositive
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_statistics_calibration() {
    // single voxel of height 1, E = 0.5, H = 2, dh = 0.1
    let g = ImageGrid::isotropic(3, 1.0).unwrap();
    let mut data = vec![0f32; 27];
    data[13] = 1.0;
    let map = Volume::new(g, data).unwrap();
    let enhanced = tfce(&map, &TfceParams { e: 0.5, h: 2.0, dh: Some(0.1), ..Default::default() }).unwrap().data()[13] as f64;
    let direct: f64 = (1..=10).map(|k| 1f64.powf(0.5) * (0.1 * k as f64).powf(2.0) * 0.1).sum();
    let oracle_ok = (enhanced - direct).abs() < 1e-6;

    let grid = ImageGrid::isotropic(16, 2.0).unwrap();
    let analysis = |effect: f64, seed: u64| {
        let specs = sample_cohort_specs(20, &CohortDistributions::desk(), effect, seed).unwrap();
        let (frames, region) = synthetic_enlargement_stack(&specs, &grid, 0.004, seed ^ 0x5eed);
        let records = cohort_records(&specs);
        let stack = Stack4d { subject_ids: records.iter().map(|r| r.subject_id.clone()).collect(), frames };
        let (x, c) = DesignMatrix::for_analysis(&records, Predictor::LesionArea).unwrap();
        let res = permutation_test(&stack, &x, &c, &PermParams { n_perm: 200, seed: seed.wrapping_mul(7), tfce: TfceParams::default() }).unwrap();
        (res, region)
    };
    let start = Instant::now();
    let false_positives = (0..200u64).filter(|k| analysis(0.0, 10_000 + k).0.min_p() < 0.05).count();
    let fwer = false_positives as f64 / 200.0;
    let detections = (0..50u64)
        .filter(|k| {
            let (res, region) = analysis(1.0, 20_000 + k);
            res.fwer_p_map.data().iter().zip(&region).any(|(&p, &inside)| inside && (p as f64) < 0.05)
        })
        .count();
    let pass = oracle_ok && (0.02..=0.09).contains(&fwer) && detections >= 40;
    verdict(
        5,
        "statistics calibration",
        pass,
        &format!(
            "TFCE single voxel {enhanced:.7} vs direct summation {direct:.7} (|diff| < 1e-6; 0.0385, a tenth of this sum, would fail); FWER {fwer:.3} on 200 null cohorts (in [0.02, 0.09]); power {detections}/50 (>= 40); {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_segmentation_baseline() {
    let mut dice = Vec::new();
    for seed in 0..5u64 {
        let spec = PhantomSpec { seed: 600 + seed, asymmetry: 0.2 * seed as f64, ..Default::default() };
        let pair = generate_phantom(&spec).unwrap();
        for img in [&pair.pre, &pair.post] {
            let seg = segment_ventricles(&img.volume, &img.brain_mask, &SegParams::default()).unwrap();
            dice.push(overlap_metrics(&seg, &img.ventricles, VENTRICLES).unwrap().dice);
        }
    }
    let min = dice.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = dice.iter().sum::<f64>() / dice.len() as f64;

    // the cohort's segmentations of SR reconstructions, for reference
    let run = run_a();
    let mut sr_dice = Vec::new();
    for r in &run.records {
        let s = SubjectLayout::new(&run.data, &run.out, &r.subject_id);
        for tp in [Timepoint::Pre, Timepoint::Post] {
            if let (Ok(seg), Ok(truth)) = (read_labels(s.ventricles(tp, true)), read_labels(s.truth_ventricles(tp))) {
                sr_dice.push(overlap_metrics(&seg, &truth, VENTRICLES).unwrap().dice);
            }
        }
    }
    let sr_min = sr_dice.iter().cloned().fold(f64::INFINITY, f64::min);
    let pass = min >= 0.90;
    verdict(
        6,
        "segmentation baseline",
        pass,
        &format!("Dice on 10 phantom volumes: min {min:.3}, mean {mean:.3} (>= 0.90); on {} SR reconstructions: min {sr_min:.3}", sr_dice.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_7_reporting() {
    let run = run_a();
    let layout = CohortLayout::new(&run.out);
    let usable: Vec<&SubjectRecord> =
        run.records.iter().zip(&run.outcome.subjects).filter(|(_, o)| o.status == UnitStatus::Ok).map(|(r, _)| r).collect();

    // cohort rows recomputed from the per-subject volumetry files
    let vols: Vec<Volumetry> = usable.iter().map(|r| json(&SubjectLayout::new(&run.data, &run.out, &r.subject_id).volumetry())).collect();
    let mean_sd = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
    };
    let (mp, sp) = mean_sd(&vols.iter().map(|v| v.v_pre_mm3).collect::<Vec<_>>());
    let (mq, sq) = mean_sd(&vols.iter().map(|v| v.v_post_mm3).collect::<Vec<_>>());
    let table = std::fs::read_to_string(report::table_csv(&layout)).unwrap_or_default();
    let lines: Vec<&str> = table.lines().collect();
    let pre_row = lines.iter().find(|l| l.starts_with("Pre-operative,")).copied().unwrap_or("");
    let post_row = lines.iter().find(|l| l.starts_with("Post-operative,")).copied().unwrap_or("");
    let expect_pre = format!("{},{:.0}±{:.0}", usable.len(), mp, sp);
    let expect_post = format!("{},{:.0}±{:.0}", usable.len(), mq, sq);
    let pm = |s: &str| {
        let cell = s.rsplit(',').next().unwrap_or("");
        cell.split_once('±').is_some_and(|(a, b)| a.parse::<f64>().is_ok() && b.parse::<f64>().is_ok())
    };
    let table_ok = pre_row.starts_with("Pre-operative,")
        && pre_row.ends_with(&expect_pre[expect_pre.find(',').unwrap()..])
        && pre_row.contains(&format!(",{},", usable.len()))
        && post_row.ends_with(&expect_post[expect_post.find(',').unwrap()..])
        && pm(pre_row)
        && pm(post_row);

    let subjects_rows = std::fs::read_to_string(report::subjects_csv(&layout)).map(|t| t.lines().count() - 1).unwrap_or(0);
    let svg = std::fs::read_to_string(report::growth_svg(&layout)).unwrap_or_default();
    let svg_ok = svg.contains("<svg") && svg.matches("<circle").count() >= 4 * usable.len();
    let png = image::open(report::montage_png(&layout)).map(|i| i.to_rgb8());
    let png_ok = png.as_ref().is_ok_and(|i| i.width() > 0 && i.height() > 0);

    // montage values against an independent voxelwise mean of the 4D stack
    let frames = read_4d(layout.stack()).unwrap();
    let shown = read_volume(report::mean_enlargement(&layout)).unwrap();
    let n = frames.len() as f64;
    let max_diff = (0..shown.data().len())
        .map(|i| ((frames.iter().map(|f| f.data()[i] as f64).sum::<f64>() / n) - shown.data()[i] as f64).abs())
        .fold(0.0, f64::max);
    let template_grid = read_volume(layout.template(Timepoint::Pre)).unwrap().grid().clone();
    let on_template = shown.grid().same_as(&template_grid, 1e-6);

    // a single subject still renders
    let dir = tempfile::tempdir().unwrap();
    let one = SubjectRow { record: usable[0].clone(), volumetry: vols[0].clone(), dbm: None };
    let single_ok = growth_plot(&[one], &dir.path().join("one.svg")).is_ok();

    let stats: Vec<String> = run
        .outcome
        .stats
        .iter()
        .map(|p| format!("{} min p {}", p.predictor, p.min_p.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())))
        .collect();
    let pass = table_ok && subjects_rows == usable.len() && svg_ok && png_ok && max_diff < 1e-6 && on_template && single_ok;
    verdict(
        7,
        "reporting",
        pass,
        &format!(
            "table rows `{pre_row}` / `{post_row}` match recomputed mean±SD: {table_ok}; subjects.csv rows {subjects_rows}; growth plot {svg_ok}; montage PNG {png_ok}; montage vs 4D mean max |diff| {max_diff:.1e} (< 1e-6) on template grid {on_template}; single-subject plot {single_ok}; analyses: {}",
            stats.join(", ")
        ),
    );
    assert!(pass);
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut todo = vec![root.to_path_buf()];
    while let Some(d) = todo.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                todo.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Files of two output trees that differ (timings excluded).
fn differing(a: &Path, b: &Path) -> (usize, Vec<String>) {
    let (fa, fb) = (files_under(a), files_under(b));
    let mut diff = Vec::new();
    if fa != fb {
        diff.push("file lists differ".into());
    }
    let mut n = 0;
    for rel in fa.iter().filter(|p| !p.ends_with("timings.json")) {
        n += 1;
        if std::fs::read(a.join(rel)).ok() != std::fs::read(b.join(rel)).ok() {
            diff.push(rel.display().to_string());
        }
    }
    (n, diff)
}

#[test]
fn criterion_8_determinism_and_resumability() {
    let a = run_a();
    let b = fresh_cohort_run("run_b");
    let (n_files, first) = differing(&a.out, &b.out);
    let manifests = files_under(&b.out).iter().filter(|p| p.ends_with("manifest.json")).count();

    // delete intermediates from every stage family and rerun
    let lb = CohortLayout::new(&b.out);
    let sub = |i: usize| SubjectLayout::new(&b.data, &b.out, &b.records[i].subject_id);
    let deleted = [
        sub(1).sr(Timepoint::Pre, true),
        sub(2).ventricles(Timepoint::Post, true),
        sub(3).norm(Timepoint::Post),
        sub(4).field(),
        sub(5).daily_logjac(),
        sub(6).enlargement_template(),
        lb.template(Timepoint::Post),
        lb.stack(),
        lb.stats_map(Predictor::LesionArea.name(), "fwer_p"),
        report::montage_png(&lb),
    ];
    for p in &deleted {
        std::fs::remove_file(p).unwrap();
    }
    let cfg = PipelineConfig::default();
    let rerun = run_cohort(&b.records, &cfg, &b.data, &b.out).unwrap();
    let all_back = deleted.iter().all(|p| p.exists());
    let (_, second) = differing(&a.out, &b.out);
    let pass = first.is_empty() && second.is_empty() && all_back && rerun.failed() == 0;
    verdict(
        8,
        "determinism and resumability",
        pass,
        &format!(
            "two runs, same seed: {n_files} files ({manifests} manifests) compared byte for byte, {} differ {:?}; after deleting {} intermediates and rerunning: all rebuilt {all_back}, {} files differ from the first run {:?}",
            first.len(),
            first.iter().take(5).collect::<Vec<_>>(),
            deleted.len(),
            second.len(),
            second.iter().take(5).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}
