//! Groupwise template construction by iterated registration and averaging with
//! a shape-unbiasing update.

use log::info;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{
    pyramid_level, register_affine, register_diffeo, register_rigid, AffineTransform, DeformationField, DiffeoParams,
    LinearParams, VelocityField,
};
use crate::volume::{Interpolation, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateParams {
    pub n_iters: usize,
    pub linear: LinearParams,
    pub diffeo: DiffeoParams,
    /// Fraction trimmed from each tail of the voxelwise average (0 = arithmetic mean).
    pub trim_fraction: f64,
    /// The template lives on the first input's grid downsampled by this factor.
    pub downsample: usize,
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self {
            n_iters: 4,
            linear: LinearParams::default(),
            diffeo: DiffeoParams { levels: vec![2, 1], max_iters: 30, ..Default::default() },
            trim_fraction: 0.0,
            downsample: 2,
        }
    }
}

/// Map from template space to one member's space: `x ↦ affine(φ(x))`, also
/// stored densely as `field` on the template grid.
#[derive(Debug, Clone)]
pub struct MemberTransform {
    pub affine: AffineTransform,
    pub velocity: VelocityField,
    pub field: DeformationField,
}

#[derive(Debug, Clone)]
pub struct TemplateResult {
    pub template: Volume,
    pub transforms: Vec<MemberTransform>,
    /// Mean magnitude (voxels) of the shape-unbiasing update, per iteration.
    pub convergence_trace: Vec<f64>,
}

fn voxel_average(frames: &[Volume], trim: f64) -> Volume {
    let grid = frames[0].grid().clone();
    let n = frames.len();
    let cut = ((n as f64) * trim).floor() as usize;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if cut == 0 {
                return (frames.iter().map(|f| f.data()[i] as f64).sum::<f64>() / n as f64) as f32;
            }
            let mut v: Vec<f64> = frames.iter().map(|f| f.data()[i] as f64).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            let kept = &v[cut..n - cut];
            (kept.iter().sum::<f64>() / kept.len() as f64) as f32
        })
        .collect();
    Volume::new(grid, data).expect("one value per voxel")
}

fn mean_affine(ts: &[AffineTransform], center: Vector3<f64>) -> Result<AffineTransform> {
    let n = ts.len() as f64;
    let (m, t) = ts.iter().map(|a| a.recentered(center)).fold((Matrix3::zeros(), Vector3::zeros()), |(m, t), a| {
        (m + a.matrix(), t + a.translation())
    });
    AffineTransform::new(m / n, t / n, center)
}

fn mean_velocity(vs: &[VelocityField]) -> VelocityField {
    let grid = vs[0].grid().clone();
    let n = vs.len() as f64;
    let vals = (0..grid.len())
        .map(|i| {
            let mut s = [0.0; 3];
            for v in vs {
                let u = v.values()[i];
                s[0] += u[0];
                s[1] += u[1];
                s[2] += u[2];
            }
            [s[0] / n, s[1] / n, s[2] / n]
        })
        .collect();
    VelocityField::new(grid, vals).expect("finite mean")
}

pub fn build_template(vols: &[Volume], params: &TemplateParams) -> Result<TemplateResult> {
    if vols.len() < 2 {
        return Err(Error::InvalidInput("a template needs at least two volumes".into()));
    }
    let factor = params.downsample.max(1);
    let members: Vec<Volume> = vols.iter().map(|v| pyramid_level(v, factor)).collect();
    let grid = members[0].grid().clone();
    let center = grid.center();

    // seed: voxelwise mean after rigid alignment to the first member
    let mut affines: Vec<AffineTransform> = members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            if i == 0 {
                return Ok(AffineTransform::identity(center));
            }
            register_rigid(&members[0], m, &params.linear)
                .map(|(r, _)| r.to_affine())
                .map_err(|e| Error::TemplateMember { index: i, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let seeded: Vec<Volume> =
        members.iter().zip(&affines).map(|(m, a)| m.resample_with(&grid, Interpolation::Linear, |p| a.apply(p))).collect();
    let mut template = voxel_average(&seeded, params.trim_fraction);

    let mut trace = Vec::with_capacity(params.n_iters);
    let mut transforms = Vec::new();
    for iter in 0..params.n_iters {
        let results: Vec<(AffineTransform, VelocityField, DeformationField, Volume)> = members
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let run = || -> Result<_> {
                    let (a, _) = register_affine(&template, m, &params.linear, Some(&affines[i]))?;
                    let d = register_diffeo(&template, m, Some(&a), &params.diffeo)?;
                    let warped = m.resample_with(&grid, Interpolation::Linear, |p| d.forward.map_point(p));
                    Ok((a, d.velocity, d.forward, warped))
                };
                run().map_err(|e| Error::TemplateMember { index: i, source: Box::new(e) })
            })
            .collect::<Result<_>>()?;
        let warped: Vec<Volume> = results.iter().map(|r| r.3.clone()).collect();
        let mean = voxel_average(&warped, params.trim_fraction);

        // shape unbiasing: T ← T̄ ∘ (Ā ∘ exp(v̄))⁻¹
        let a_bar = mean_affine(&results.iter().map(|r| r.0).collect::<Vec<_>>(), center)?;
        let v_bar = mean_velocity(&results.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
        let unbias = v_bar.negated().exp(params.diffeo.squarings);
        let a_inv = a_bar.inverse()?;
        template = mean.resample_with(&grid, Interpolation::Linear, |y| unbias.map_point(&a_inv.apply(y)));

        // magnitude of the update Ā ∘ exp(v̄) that was just removed from the template
        let mean_disp = {
            let forward = v_bar.exp(params.diffeo.squarings);
            let h = grid.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
            (0..grid.len())
                .map(|i| {
                    let x = grid.world_of_index(i);
                    (a_bar.apply(&forward.map_point(&x)) - x).norm()
                })
                .sum::<f64>()
                / grid.len() as f64
                / h
        };
        info!("template iteration {}: mean member displacement {mean_disp:.3} voxels", iter + 1);
        trace.push(mean_disp);
        // warm start for the next round: the template just moved by Ā⁻¹
        affines = results.iter().map(|r| r.0.compose(&a_inv)).collect();
        transforms = results
            .into_iter()
            .map(|(affine, velocity, field, _)| MemberTransform { affine, velocity, field })
            .collect();
    }
    Ok(TemplateResult { template, transforms, convergence_trace: trace })
}
