//! Cohort report: per-subject table, cohort summary table, growth plot and
//! the mean-enlargement montage over the pre-operative template.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use plotters::prelude::*;

use super::cohort::records_path;
use super::layout::{CohortLayout, SubjectLayout, Timepoint};
use super::subject::{read_json, DbmSummary, Volumetry};
use crate::error::{Error, Result};
use crate::morphometry::Stack4d;
use crate::record::{read_cohort_csv, SubjectRecord};
use crate::volume::{read_volume, write_volume, Volume};

pub fn subjects_csv(layout: &CohortLayout) -> PathBuf {
    layout.report_dir().join("subjects.csv")
}

pub fn table_csv(layout: &CohortLayout) -> PathBuf {
    layout.report_dir().join("volume_summary.csv")
}

pub fn growth_svg(layout: &CohortLayout) -> PathBuf {
    layout.report_dir().join("growth.svg")
}

pub fn montage_png(layout: &CohortLayout) -> PathBuf {
    layout.report_dir().join("enlargement_montage.png")
}

/// Voxel values behind the montage.
pub fn mean_enlargement(layout: &CohortLayout) -> PathBuf {
    layout.report_dir().join("mean_enlargement.nii.gz")
}

pub fn report_outputs(layout: &CohortLayout) -> Vec<PathBuf> {
    vec![subjects_csv(layout), table_csv(layout), growth_svg(layout), montage_png(layout), mean_enlargement(layout)]
}

/// One subject's row of the report.
#[derive(Debug, Clone)]
pub struct SubjectRow {
    pub record: SubjectRecord,
    pub volumetry: Volumetry,
    pub dbm: Option<DbmSummary>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn trim(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `mean±sd` with trailing zeros dropped, e.g. `8953±6345` or `27.5±1`.
pub fn format_mean_sd(xs: &[f64], decimals: usize) -> String {
    let (m, s) = mean_sd(xs);
    format!("{}±{}", trim(m, decimals), trim(s, decimals))
}

/// Writes the per-subject table and the cohort summary table.
pub fn write_tables(rows: &[SubjectRow], subjects: &Path, table: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(subjects)?;
    w.write_record([
        "subject_id",
        "ga_pre_weeks",
        "ga_op_weeks",
        "ga_post_weeks",
        "lesion_area_mm2",
        "lesion_type",
        "lesion_location",
        "v_pre_mm3",
        "v_post_mm3",
        "growth_volumetry_mm3_per_day",
        "growth_jacobian_mm3_per_day",
        "true_growth_mm3_per_day",
    ])?;
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_default();
    for r in rows {
        let rec = &r.record;
        w.write_record([
            rec.subject_id.clone(),
            format!("{:.2}", rec.ga_pre_weeks),
            format!("{:.2}", rec.ga_op_weeks),
            format!("{:.2}", rec.ga_post_weeks),
            format!("{:.1}", rec.lesion_area_mm2),
            rec.lesion_type.to_string(),
            rec.lesion_location.to_string(),
            format!("{:.1}", r.volumetry.v_pre_mm3),
            format!("{:.1}", r.volumetry.v_post_mm3),
            format!("{:.3}", r.volumetry.growth_mm3_per_day),
            opt(r.dbm.as_ref().map(|d| d.growth_mm3_per_day)),
            opt(rec.true_daily_growth_mm3),
        ])?;
    }
    w.flush()?;

    let col = |f: fn(&SubjectRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let mut w = csv::Writer::from_path(table)?;
    w.write_record(["Dataset", "n", "Average GA", "Average Volume (mm3)"])?;
    let n = rows.len().to_string();
    w.write_record([
        "Pre-operative".to_string(),
        n.clone(),
        format_mean_sd(&col(|r| r.record.ga_pre_weeks), 1),
        format_mean_sd(&col(|r| r.volumetry.v_pre_mm3), 0),
    ])?;
    w.write_record([
        "Post-operative".to_string(),
        n,
        format_mean_sd(&col(|r| r.record.ga_post_weeks), 1),
        format_mean_sd(&col(|r| r.volumetry.v_post_mm3), 0),
    ])?;
    w.flush()?;
    Ok(())
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let pad = if hi > lo { 0.08 * (hi - lo) } else { 1.0f64.max(0.1 * hi.abs()) };
    (lo - pad)..(hi + pad)
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// Left: GA against ventricle volume (pre in blue, post in red).
/// Right: each subject's volume change from pre to post.
pub fn growth_plot(rows: &[SubjectRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no subjects to plot".into()));
    }
    let ga: Vec<f64> = rows.iter().flat_map(|r| [r.record.ga_pre_weeks, r.record.ga_post_weeks]).collect();
    let vol: Vec<f64> = rows.iter().flat_map(|r| [r.volumetry.v_pre_mm3, r.volumetry.v_post_mm3]).collect();
    let fold = |xs: &[f64]| xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let ((g0, g1), (v0, v1)) = (fold(&ga), fold(&vol));
    let (xr, yr) = (padded(g0, g1), padded(v0, v1));

    let root = SVGBackend::new(path, (1000, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(500);

    let mut chart = ChartBuilder::on(&left)
        .caption("GA vs ventricle volume", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(xr.clone(), yr.clone())
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("GA (weeks)").y_desc("volume (mm3)").draw().map_err(plot_err)?;
    chart
        .draw_series(rows.iter().map(|r| Circle::new((r.record.ga_pre_weeks, r.volumetry.v_pre_mm3), 4, BLUE.filled())))
        .map_err(plot_err)?
        .label("pre-operative")
        .legend(|(x, y)| Circle::new((x, y), 4, BLUE.filled()));
    chart
        .draw_series(rows.iter().map(|r| Circle::new((r.record.ga_post_weeks, r.volumetry.v_post_mm3), 4, RED.filled())))
        .map_err(plot_err)?
        .label("post-operative")
        .legend(|(x, y)| Circle::new((x, y), 4, RED.filled()));
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(plot_err)?;

    let mut chart = ChartBuilder::on(&right)
        .caption("Change in ventricle volume", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(xr, yr)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("GA (weeks)").y_desc("volume (mm3)").draw().map_err(plot_err)?;
    for r in rows {
        let pts = [(r.record.ga_pre_weeks, r.volumetry.v_pre_mm3), (r.record.ga_post_weeks, r.volumetry.v_post_mm3)];
        chart.draw_series(LineSeries::new(pts, BLACK.stroke_width(1))).map_err(plot_err)?;
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, BLACK.filled()))).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Axial slices of `mean` over `template` (same grid): gray anatomy with
/// enlargement in red–yellow and shrinkage in blue, scaled by max |mean|.
pub fn montage(template: &Volume, mean: &Volume, path: &Path) -> Result<()> {
    if !template.grid().same_as(mean.grid(), 1e-6) {
        return Err(Error::GeometryMismatch("montage map is not on the template grid".into()));
    }
    let [nx, ny, nz] = template.grid().dims();
    let grid = template.grid();
    let (t, m) = (template.data(), mean.data());
    let tmax = t.iter().fold(0.0f32, |a, &v| a.max(v)).max(f32::MIN_POSITIVE);
    let mmax = m.iter().fold(0.0f32, |a, &v| a.max(v.abs())).max(f32::MIN_POSITIVE);

    // slices spanning the template's extent along z
    let occupied: Vec<usize> = (0..nz).filter(|&k| (0..nx * ny).any(|i| t[k * nx * ny + i] > 0.05 * tmax)).collect();
    let (k0, k1) = match (occupied.first(), occupied.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0, nz - 1),
    };
    let n_slices = 8.min(k1 - k0 + 1);
    let slices: Vec<usize> =
        (0..n_slices).map(|s| k0 + ((s as f64 + 0.5) * (k1 - k0 + 1) as f64 / n_slices as f64) as usize).collect();
    let (cols, scale) = (4usize, 4u32);
    let rows = n_slices.div_ceil(cols);
    let (tw, th) = (nx as u32 * scale, ny as u32 * scale);
    let mut img = RgbImage::new(tw * cols as u32, th * rows as u32);
    for (s, &k) in slices.iter().enumerate() {
        let (ox, oy) = ((s % cols) as u32 * tw, (s / cols) as u32 * th);
        for j in 0..ny {
            for i in 0..nx {
                let idx = grid.index(i, j, k);
                let g = (t[idx] / tmax).clamp(0.0, 1.0);
                let v = m[idx] / mmax;
                let a = v.abs().clamp(0.0, 1.0);
                let overlay = if v >= 0.0 { [1.0, a, 0.0] } else { [0.0, a * 0.5, 1.0] };
                let alpha = (a * 1.5).min(0.8);
                let px = Rgb(overlay.map(|c| ((g * (1.0 - alpha) + c * alpha) * 255.0).round() as u8));
                // image rows run top-down, anatomy y runs bottom-up
                let (bx, by) = (ox + i as u32 * scale, oy + (ny - 1 - j) as u32 * scale);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(bx + dx, by + dy, px);
                    }
                }
            }
        }
    }
    img.save(path).map_err(plot_err)
}

/// Collects the report rows of the cohort's usable subjects.
pub fn load_rows(data_root: &Path, out_root: &Path) -> Result<Vec<SubjectRow>> {
    read_cohort_csv(records_path(out_root))?
        .into_iter()
        .map(|record| {
            let s = SubjectLayout::new(data_root, out_root, &record.subject_id);
            let volumetry = read_json(&s.volumetry())?;
            let dbm = read_json(&s.dbm_report()).ok();
            Ok(SubjectRow { record, volumetry, dbm })
        })
        .collect()
}

/// Writes every report file under `out_root/report`.
pub fn emit_report(data_root: &Path, out_root: &Path) -> Result<Vec<PathBuf>> {
    let layout = CohortLayout::new(out_root);
    std::fs::create_dir_all(layout.report_dir())?;
    let rows = load_rows(data_root, out_root)?;
    write_tables(&rows, &subjects_csv(&layout), &table_csv(&layout))?;
    growth_plot(&rows, &growth_svg(&layout))?;
    let stack = Stack4d::read(layout.stack(), layout.stack_order())?;
    let mean = stack.mean();
    write_volume(&mean, mean_enlargement(&layout))?;
    montage(&read_volume(layout.template(Timepoint::Pre))?, &mean, &montage_png(&layout))?;
    Ok(report_outputs(&layout))
}
